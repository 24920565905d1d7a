#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "oracles.hpp"
#include "test_corpus.hpp"
#include "satlab/analysis.hpp"

using namespace satlab;
namespace fs = std::filesystem;

namespace {

ModelConfig small(Variant v = Variant::satformer, GateKind gate = GateKind::relu, std::size_t layers = 3) {
  ModelConfig c;
  c.variant = v;
  c.gate_spec = gate;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 256;
  c.max_seq_len = 32;
  c.seed = 21;
  return c;
}

const Corpus& corpus() {
  static const Corpus c = [] {
    auto full = Corpus::load(test_corpus_path(), 0.5);
    full.bytes.resize(1 << 16);
    return Corpus::from_bytes(std::move(full.bytes), 0.05);
  }();
  return c;
}

std::vector<Batch> eval_data(std::size_t windows = 12) { return validation_batches(corpus(), 16, 4, windows); }

template <typename T>
void zero_gates(ModelWeights<T>& w) {
  for (auto& l : w.layers) {
    if (l.attn.w_alpha) l.attn.w_alpha->value.fill(T{0});
  }
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("satlab_test_analysis_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(slurp(p));
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("gate statistics") {
  TEST_CASE("a closed relu gate gives zero means, full sparsity and zero spread") {
    auto w = build_model<double>(small());
    zero_gates(w);
    const auto data = eval_data();
    const auto s = gate_stats(w, std::span<const Batch>(data));
    CHECK(s.layers == 2);
    CHECK(s.heads == 2);
    CHECK(s.entries_per_layer == 12 * 16 * 2);
    for (double m : s.mean_alpha) CHECK(m == 0.0);
    for (double z : s.sparsity) CHECK(z == 1.0);
    for (double cv : s.head_cv) CHECK(cv == 0.0);
  }

  TEST_CASE("a constant positive gate has no sparsity and no spread") {
    const auto w = build_model<double>(small());
    ForwardOptions opt;
    opt.gate_overrides = {GateOverride{}, GateOverride::constant(0.75), GateOverride::constant(0.75)};
    const auto d = forward_with_diagnostics(w, eval_data().front().inputs, opt).diagnostics;
    const auto s = gate_stats(d);
    for (double m : s.mean_alpha) CHECK(m == 0.75);
    for (double z : s.sparsity) CHECK(z == 0.0);
    for (double cv : s.head_cv) CHECK(cv == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("aggregation of a hand-built tensor matches direct recomputation") {
    const std::size_t L1 = 3, B = 2, T = 5, H = 4;
    auto alpha = oracle::random_tensor({L1, B, T, H}, 8, -0.5, 1.0);
    for (auto& a : alpha.values()) a = std::max(a, 0.0);  // relu-like with exact zeros
    const auto s = gate_stats(Diagnostics<double>{alpha, {}});

    for (std::size_t l = 0; l < L1; ++l) {
      std::vector<double> head_means(H, 0.0);
      std::size_t zeros = 0;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t j = 0; j < H; ++j) {
            const double a = alpha[((l * B + b) * T + t) * H + j];
            head_means[j] += a / static_cast<double>(B * T);
            zeros += a == 0.0;
          }
        }
      }
      double mu = 0.0;
      for (double m : head_means) mu += m / H;
      double var = 0.0;
      for (double m : head_means) var += (m - mu) * (m - mu) / H;
      for (std::size_t j = 0; j < H; ++j) CHECK(s.mean(l, j) == doctest::Approx(head_means[j]).epsilon(1e-12));
      CHECK(s.layer_mean[l] == doctest::Approx(mu).epsilon(1e-12));
      CHECK(s.sparsity[l] == doctest::Approx(static_cast<double>(zeros) / (B * T * H)).epsilon(1e-15));
      CHECK(s.head_cv[l] == doctest::Approx(std::sqrt(var) / mu).epsilon(1e-10));
    }
  }

  TEST_CASE("streaming over batches equals one pass over the concatenation") {
    const auto a = oracle::random_tensor({2, 3, 4, 2}, 9, -1, 1);
    const auto b = oracle::random_tensor({2, 1, 4, 2}, 10, -1, 1);
    Tensor<double> joined(Shape{2, 4, 4, 2});
    for (std::size_t l = 0; l < 2; ++l) {
      std::copy_n(a.data() + l * 24, 24, joined.data() + l * 32);
      std::copy_n(b.data() + l * 8, 8, joined.data() + l * 32 + 24);
    }
    GateStatsAccumulator acc;
    acc.add(a);
    acc.add(b);
    const auto s1 = acc.finish();
    const auto s2 = gate_stats(Diagnostics<double>{joined, {}});
    for (std::size_t i = 0; i < s1.mean_alpha.size(); ++i) CHECK(s1.mean_alpha[i] == doctest::Approx(s2.mean_alpha[i]));
    CHECK(s1.sparsity == s2.sparsity);
    CHECK(s1.entries_per_layer == s2.entries_per_layer);
    CHECK_THROWS_AS(acc.add(oracle::random_tensor({3, 1, 4, 2}, 11)), std::invalid_argument);
  }

  TEST_CASE("non-satformer inputs are rejected") {
    const auto data = eval_data(4);
    CHECK_THROWS_AS(gate_stats(build_model<float>(small(Variant::transformer)), std::span<const Batch>(data)),
                    std::invalid_argument);
    CHECK_THROWS_AS(gate_stats(Diagnostics<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(GateStatsAccumulator().finish(), std::invalid_argument);
  }
}

TEST_SUITE("interventions") {
  TEST_CASE("with a closed gate both modes change nothing") {
    auto w = build_model<double>(small());
    zero_gates(w);
    const auto data = eval_data();
    const auto r = intervention_report(w, std::span<const Batch>(data), true);
    REQUIRE(r.rows.size() == 2);
    for (const auto& row : r.rows) {
      CHECK(row.delta_zero() == 0.0);
      CHECK(row.delta_mean() == 0.0);
      CHECK(*row.delta_head_mean() == 0.0);
    }
  }

  TEST_CASE("mean mode on an already-constant gate is a no-op") {
    auto w = build_model<double>(small(Variant::satformer, GateKind::sigmoid));
    w.layers[2].attn.w_alpha->value.fill(0.0);  // sigmoid(0) = 0.5 everywhere at layer 3
    const auto data = eval_data();
    const std::span<const Batch> d(data);
    const auto stats = gate_stats(w, d);
    CHECK(stats.layer_mean[1] == 0.5);
    CHECK(stats.sparsity[0] == 0.0);
    const double base = evaluate_perplexity(w, d).perplexity;
    CHECK(std::abs(intervene(w, d, 3, InterventionMode::mean).perplexity - base) < 1e-6);
    CHECK(std::abs(intervene(w, d, 3, InterventionMode::head_mean).perplexity - base) < 1e-6);
    CHECK(std::abs(intervene(w, d, 2, InterventionMode::mean).perplexity - base) > 1e-6);
  }

  TEST_CASE("zeroing through the override equals zeroing the gate weights") {
    const auto w = build_model<double>(small());
    const auto data = eval_data();
    const std::span<const Batch> d(data);
    for (std::size_t layer = 2; layer <= 3; ++layer) {
      auto copy = w;
      copy.layers[layer - 1].attn.w_alpha->value.fill(0.0);
      const double via_weights = evaluate_perplexity(copy, d).perplexity;
      const double via_override = intervene(w, d, layer, InterventionMode::zero).perplexity;
      CHECK(std::abs(via_weights - via_override) < 1e-6);
    }
  }

  TEST_CASE("an intervention only replaces the target layer's gate") {
    const auto w = build_model<double>(small(Variant::satformer, GateKind::relu, 4));
    const auto tokens = eval_data(4).front().inputs;
    const auto data = eval_data();
    const auto stats = gate_stats(w, std::span<const Batch>(data));
    for (std::size_t target = 2; target <= 4; ++target) {
      CAPTURE(target);
      ForwardOptions opt;
      opt.gate_overrides.resize(4);
      opt.gate_overrides[target - 1] = intervention_override(stats, target, InterventionMode::mean);
      const auto base = forward_with_diagnostics(w, tokens).diagnostics;
      const auto over = forward_with_diagnostics(w, tokens, opt).diagnostics;
      const std::size_t each = over.alpha.size() / 3;
      const std::size_t h_each = over.hidden.size() / 5;
      for (std::size_t n = 2; n <= 4; ++n) {
        const double* a = over.alpha.data() + (n - 2) * each;
        if (n < target) {
          for (std::size_t i = 0; i < each; ++i) CHECK(a[i] == base.alpha[(n - 2) * each + i]);
        } else if (n == target) {
          for (std::size_t i = 0; i < each; ++i) CHECK(a[i] == stats.layer_mean[target - 2]);
        } else {
          // later layers still run their own gate, on the intervened residual stream
          Tensor<double> x(Shape{tokens.batch, tokens.length, 16});
          std::copy_n(over.hidden.data() + (n - 1) * h_each, h_each, x.data());
          ad::Tape<double> tape(false);
          auto h = ad::rms_norm(tape.constant(x), tape.param(w.layers[n - 1].attn_norm), kNormEps);
          const auto g = compute_gate(h, tape.param(*w.layers[n - 1].attn.w_alpha), GateKind::relu).value();
          for (std::size_t i = 0; i < each; ++i) CHECK(a[i] == g[i]);
        }
      }
    }
  }

  TEST_CASE("report shape, read-only access and argument errors") {
    const auto w = build_model<float>(small());
    const auto data = eval_data();
    const std::span<const Batch> d(data);
    const auto before = w.hash();
    const auto r = intervention_report(w, d);
    CHECK(r.rows.size() == 2);
    CHECK(r.rows[0].layer == 2);
    CHECK(r.rows[1].layer == 3);
    CHECK_FALSE(r.rows[0].head_mean.has_value());
    gate_stats(w, d);
    logit_lens(w, d);
    CHECK(w.hash() == before);
    CHECK_THROWS_AS(intervene(w, d, 1, InterventionMode::zero), std::out_of_range);
    CHECK_THROWS_AS(intervene(w, d, 4, InterventionMode::zero), std::out_of_range);
    CHECK_THROWS_AS(intervene(build_model<float>(small(Variant::resformer)), d, 2, InterventionMode::zero),
                    std::invalid_argument);
  }
}

TEST_SUITE("logit lens") {
  TEST_CASE("last layer reproduces the model perplexity") {
    for (auto v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
      const auto w = build_model<float>(small(v));
      const auto data = eval_data();
      const auto lens = logit_lens(w, std::span<const Batch>(data), "m");
      REQUIRE(lens.rows.size() == 4);
      for (std::size_t l = 0; l < 4; ++l) CHECK(lens.rows[l].layer == l);
      const auto ev = evaluate_perplexity(w, std::span<const Batch>(data));
      CHECK(std::abs(lens.rows.back().perplexity - ev.perplexity) / ev.perplexity < 1e-6);
      for (const auto& row : lens.rows) CHECK(row.perplexity == std::exp(row.loss));
    }
  }

  TEST_CASE("an untrained desk model sits near the vocabulary size at every layer") {
    auto c = ModelConfig::desk();
    c.seed = 4;
    const auto w = build_model<float>(c);
    const auto data = validation_batches(corpus(), 64, 4, 8);
    const auto lens = logit_lens(w, std::span<const Batch>(data));
    REQUIRE(lens.rows.size() == c.n_layers + 1);
    for (const auto& row : lens.rows) {
      CAPTURE(row.layer);
      CHECK(row.perplexity > 0.8 * 256);
      CHECK(row.perplexity < 1.2 * 256);
    }
  }

  TEST_CASE("comparison mode pairs two models") {
    const auto data = eval_data();
    const std::span<const Batch> d(data);
    const auto a = logit_lens(build_model<float>(small(Variant::satformer)), d, "satformer");
    const auto b = logit_lens(build_model<float>(small(Variant::transformer)), d, "transformer");
    const auto both = compare_logit_lens(a, b);
    CHECK(both.rows.size() == 2 * 4);
    CHECK(both.rows[3].model == "satformer");
    CHECK(both.rows[4].model == "transformer");
    CHECK_THROWS_AS(compare_logit_lens(a, a), std::invalid_argument);
    const auto deep = logit_lens(build_model<float>(small(Variant::transformer, GateKind::relu, 4)), d, "deep");
    CHECK_THROWS_AS(compare_logit_lens(a, deep), std::invalid_argument);
  }
}

TEST_SUITE("sweep") {
  TrainConfig micro(std::size_t steps) {
    TrainConfig t;
    t.base_lr = 3e-3;
    t.total_steps = steps;
    t.batch_size = 2;
    t.seq_len = 16;
    t.seed = 1;
    t.eval_max_windows = 4;
    t.corpus_path = "in-memory";
    return t;
  }

  TEST_CASE("gate variants built from one seed share every weight") {
    const auto relu = build_model<float>(small(Variant::satformer, GateKind::relu));
    for (GateKind g : kAllGates) CHECK(build_model<float>(small(Variant::satformer, g)).hash() == relu.hash());
  }

  TEST_CASE("six gates by two seeds give twelve aligned curves") {
    const auto dir = scratch("grid");
    SweepOptions opt;
    opt.corpus = &corpus();
    opt.out_dir = dir;
    const SweepSpec spec{std::vector<GateKind>(std::begin(kAllGates), std::end(kAllGates)), {0, 1}};
    const auto r = ablation_sweep(small(), micro(6), spec, opt);
    REQUIRE(r.cells.size() == 12);
    for (const auto& c : r.cells) {
      CHECK(c.log.size() == 6);
      CHECK(c.log.back().val_loss.has_value());
      CHECK(std::isfinite(c.final_val_loss()));
    }
    write_sweep_curves_csv(dir / "curves.csv", r);
    write_sweep_summary_csv(dir / "summary.csv", r);
    const auto curves = lines(dir / "curves.csv");
    CHECK(curves.size() == 7);
    CHECK(curves[0].rfind("step,relu_s0,relu_s1,sigmoid_s0", 0) == 0);
    const auto summary = lines(dir / "summary.csv");
    CHECK(summary.size() == 7);
    const auto rows = r.summary();
    REQUIRE(rows.size() == 6);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i - 1].final_val_mean <= rows[i].final_val_mean);
    for (const auto& row : rows) CHECK(row.runs == 2);
  }

  TEST_CASE("summary ties are broken by gate name") {
    SweepResult r;
    for (GateKind g : {GateKind::tanh, GateKind::relu, GateKind::identity}) {
      SweepCell c;
      c.gate = g;
      c.log = {{1, 0.1, 3.0, 1.0, 2.5}};
      r.cells.push_back(c);
    }
    r.cells[0].log[0].val_loss = 2.0;
    const auto rows = r.summary();
    CHECK(rows[0].gate == GateKind::tanh);
    CHECK(rows[1].gate == GateKind::identity);
    CHECK(rows[2].gate == GateKind::relu);
  }

  TEST_CASE("an interrupted sweep resumes from completed cells") {
    const auto whole_dir = scratch("whole");
    const auto split_dir = scratch("split");
    const SweepSpec spec{{GateKind::relu, GateKind::tanh}, {3, 4}};
    SweepOptions opt;
    opt.corpus = &corpus();
    opt.out_dir = whole_dir;
    const auto whole = ablation_sweep(small(), micro(5), spec, opt);
    write_sweep_curves_csv(whole_dir / "curves.csv", whole);

    opt.out_dir = split_dir;
    opt.max_new_cells = 3;
    const auto part = ablation_sweep(small(), micro(5), spec, opt);
    CHECK(part.cells.size() == 3);

    opt.max_new_cells = 0;
    std::vector<std::string> trained;
    opt.on_cell = [&](const SweepCell& c) {
      if (!c.resumed) trained.push_back(c.name());
    };
    const auto rest = ablation_sweep(small(), micro(5), spec, opt);
    CHECK(trained == std::vector<std::string>{"tanh_s4"});
    write_sweep_curves_csv(split_dir / "curves.csv", rest);
    CHECK(slurp(split_dir / "curves.csv") == slurp(whole_dir / "curves.csv"));
    for (std::size_t i = 0; i < 4; ++i) CHECK(rest.cells[i].log == whole.cells[i].log);
  }

  TEST_CASE("duplicate entries are rejected") {
    SweepOptions opt;
    opt.corpus = &corpus();
    CHECK_THROWS_AS(ablation_sweep(small(), micro(2), {{GateKind::relu, GateKind::relu}, {0}}, opt), std::invalid_argument);
    CHECK_THROWS_AS(ablation_sweep(small(), micro(2), {{GateKind::relu}, {1, 1}}, opt), std::invalid_argument);
    CHECK_THROWS_AS(ablation_sweep(small(), micro(2), {{}, {1}}, opt), std::invalid_argument);
  }
}

TEST_SUITE("exports") {
  TEST_CASE("CSV schemas") {
    const auto dir = scratch("exports");
    const auto w = build_model<double>(small(Variant::satformer, GateKind::relu, 4));
    const auto data = eval_data();
    const std::span<const Batch> d(data);
    const auto stats = gate_stats(w, d);
    write_gate_heatmap_csv(dir / "heat.csv", stats);
    write_gate_layers_csv(dir / "layers.csv", stats);
    write_interventions_csv(dir / "iv.csv", intervention_report(w, d, true));
    write_lens_csv(dir / "lens.csv", logit_lens(w, d, "sat"));

    const auto heat = lines(dir / "heat.csv");
    REQUIRE(heat.size() == 4);
    CHECK(heat[0] == "layer,head_1,head_2");
    CHECK(heat[1].rfind("2,", 0) == 0);
    CHECK(heat[3].rfind("4,", 0) == 0);
    CHECK(lines(dir / "layers.csv")[0] == "layer,mean_alpha,sparsity,head_cv");
    const auto iv = lines(dir / "iv.csv");
    CHECK(iv.size() == 4);
    CHECK(iv[0] == "layer,baseline_ppl,zero_ppl,mean_ppl,delta_zero,delta_mean,head_mean_ppl,delta_head_mean");
    const auto lens = lines(dir / "lens.csv");
    CHECK(lens.size() == 6);
    CHECK(lens[0] == "model,layer,loss,perplexity");
    CHECK(lens[1].rfind("sat,0,", 0) == 0);

    const auto j = to_json(stats);
    CHECK(j.at("mean_alpha").size() == 3);
    CHECK(j.at("layers") == nlohmann::json({2, 3, 4}));
  }
}
