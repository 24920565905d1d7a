#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "satlab/model.hpp"

using namespace satlab;

namespace {

ModelConfig tiny(Variant v, std::size_t layers = 3) {
  ModelConfig c;
  c.variant = v;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 17;
  c.max_seq_len = 12;
  c.seed = 9;
  return c;
}

TokenGrid random_tokens(std::size_t b, std::size_t t, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> d(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> ids(b * t);
  for (auto& i : ids) i = d(rng);
  return TokenGrid(b, t, std::move(ids));
}

// Copies every shared tensor of `from` into `to` by name.
template <typename T>
void share_weights(const ModelWeights<T>& from, ModelWeights<T>& to) {
  for (const auto* p : from.parameters()) {
    if (auto* q = to.find(p->name)) q->value = p->value;
  }
}

std::size_t direct_count(const ModelWeights<float>& w) {
  std::size_t n = 0;
  for (const auto* p : w.parameters()) n += p->value.size();
  return n;
}

}  // namespace

TEST_SUITE("build") {
  TEST_CASE("same seed gives bit-identical weights") {
    auto a = build_model<float>(tiny(Variant::satformer));
    auto b = build_model<float>(tiny(Variant::satformer));
    CHECK(a.hash() == b.hash());
    auto c = build_model<float>(tiny(Variant::satformer), 10);
    CHECK(a.hash() != c.hash());
  }

  TEST_CASE("variants from one seed share their common weights") {
    auto t = build_model<double>(tiny(Variant::transformer));
    auto s = build_model<double>(tiny(Variant::satformer));
    auto r = build_model<double>(tiny(Variant::resformer));
    for (const auto* p : t.parameters()) {
      CAPTURE(p->name);
      REQUIRE(s.find(p->name));
      REQUIRE(r.find(p->name));
      CHECK(s.find(p->name)->value == p->value);
      CHECK(r.find(p->name)->value == p->value);
    }
  }

  TEST_CASE("gate variants from one seed start from identical parameters") {
    auto base = tiny(Variant::satformer);
    auto relu = build_model<double>(base);
    base.gate_spec = GateKind::identity;
    auto ident = build_model<double>(base);
    CHECK(relu.hash() == ident.hash());
  }

  TEST_CASE("initialization rules") {
    auto c = ModelConfig::desk();
    c.tie_embeddings = false;
    auto w = build_model<double>(c);
    for (const auto* p : w.parameters()) {
      CAPTURE(p->name);
      if (p->name.find("norm") != std::string::npos) {
        for (double v : p->value.values()) CHECK(v == 1.0);
        CHECK_FALSE(p->decay);
      } else if (p->name == "embedding") {
        double s = 0, s2 = 0;
        for (double v : p->value.values()) {
          s += v;
          s2 += v * v;
        }
        const double n = static_cast<double>(p->value.size());
        CHECK(std::abs(s / n) < 0.002);
        CHECK(std::sqrt(s2 / n) == doctest::Approx(0.02).epsilon(0.05));
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p->value.extent(0)));
        double mx = 0.0;
        for (double v : p->value.values()) mx = std::max(mx, std::abs(v));
        CHECK(mx <= bound);
        CHECK(mx > 0.9 * bound);
        CHECK(p->decay == (p->name.find("w_alpha") == std::string::npos));
      }
    }
  }

  TEST_CASE("gate projections exist only for satformer layers after the first") {
    auto s = build_model<float>(tiny(Variant::satformer));
    CHECK_FALSE(s.layers[0].attn.w_alpha);
    for (std::size_t n = 1; n < s.layers.size(); ++n) {
      REQUIRE(s.layers[n].attn.w_alpha);
      CHECK(s.layers[n].attn.w_alpha->value.shape() == Shape{16, 2});
    }
    auto t = build_model<float>(tiny(Variant::transformer));
    for (const auto& l : t.layers) CHECK_FALSE(l.attn.w_alpha);
  }

  TEST_CASE("invalid configs are reported field by field") {
    auto c = tiny(Variant::satformer);
    c.d_model = 18;
    c.n_kv_heads = 3;
    c.n_layers = 1;
    try {
      build_model<float>(c);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.problems().size() == 3);
    }
  }
}

TEST_SUITE("parameter accounting") {
  TEST_CASE("closed form matches constructed models") {
    for (auto base : {ModelConfig::desk(), tiny(Variant::transformer, 4)}) {
      for (Variant v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
        for (bool tied : {true, false}) {
          auto c = base;
          c.variant = v;
          c.tie_embeddings = tied;
          CHECK(count_params(c) == direct_count(build_model<float>(c)));
        }
      }
    }
  }

  TEST_CASE("variant deltas") {
    auto c = ModelConfig::desk();
    c.variant = Variant::transformer;
    const auto t = direct_count(build_model<float>(c));
    c.variant = Variant::satformer;
    const auto s = direct_count(build_model<float>(c));
    c.variant = Variant::resformer;
    const auto r = direct_count(build_model<float>(c));
    CHECK(s - t == (c.n_layers - 1) * c.d_model * c.n_kv_heads);
    CHECK(r - t == (c.n_layers - 1) + 1);
    c.tie_embeddings = false;
    CHECK(count_params(c) - r == c.vocab_size * c.d_model);
  }

  TEST_CASE("small shape overhead") {
    auto c = ModelConfig::small();
    c.variant = Variant::satformer;
    const auto s = count_params(c);
    c.variant = Variant::transformer;
    CHECK(s - count_params(c) == 92160);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("zeroed output projections leave only the residual path") {
    const auto tokens = random_tokens(2, 6, 17, 1);
    std::vector<Tensor<double>> outs;
    auto ref = build_model<double>(tiny(Variant::transformer, 2));
    for (Variant v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
      auto w = build_model<double>(tiny(v, 2));
      for (auto& l : w.layers) {
        l.attn.wo.value.fill(0.0);
        l.w_out.value.fill(0.0);
      }
      outs.push_back(forward(w, tokens));
    }
    // unembed(final_norm(embed(tokens))) computed directly
    const auto& e = ref.embedding.value;
    Tensor<double> expect(Shape{2, 6, 17});
    for (std::size_t r = 0; r < 12; ++r) {
      const auto id = static_cast<std::size_t>(tokens.ids[r]);
      double ms = 0.0;
      for (std::size_t i = 0; i < 16; ++i) ms += e[id * 16 + i] * e[id * 16 + i];
      const double inv = 1.0 / std::sqrt(ms / 16.0 + kNormEps);
      for (std::size_t v = 0; v < 17; ++v) {
        double s = 0.0;
        for (std::size_t i = 0; i < 16; ++i) s += e[id * 16 + i] * inv * e[v * 16 + i];
        expect[r * 17 + v] = s;
      }
    }
    for (const auto& o : outs) CHECK(max_abs_diff(o, expect) < 1e-12);
  }

  TEST_CASE("closed gate equals the transformer") {
    const auto tokens = random_tokens(3, 10, 17, 2);
    auto t = build_model<double>(tiny(Variant::transformer));
    auto s = build_model<double>(tiny(Variant::satformer));
    share_weights(t, s);
    for (auto& l : s.layers)
      if (l.attn.w_alpha) l.attn.w_alpha->value.fill(0.0);
    CHECK(max_abs_diff(forward(s, tokens), forward(t, tokens)) < 1e-12);
  }

  TEST_CASE("batch rows are independent") {
    const auto tokens = random_tokens(3, 8, 17, 3);
    auto w = build_model<float>(tiny(Variant::satformer));
    auto y = forward(w, tokens);
    const std::vector<std::size_t> perm{2, 0, 1};
    std::vector<std::int32_t> ids;
    for (auto b : perm) ids.insert(ids.end(), tokens.ids.begin() + b * 8, tokens.ids.begin() + (b + 1) * 8);
    auto yp = forward(w, TokenGrid(3, 8, ids));
    const std::size_t row = 8 * 17;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < row; ++k) CHECK(yp[i * row + k] == y[perm[i] * row + k]);
  }

  TEST_CASE("layer 1 block output agrees across variants") {
    const auto tokens = random_tokens(2, 7, 17, 4);
    auto t = build_model<double>(tiny(Variant::transformer));
    auto r = build_model<double>(tiny(Variant::resformer));
    auto s = build_model<double>(tiny(Variant::satformer));
    auto ht = forward_with_diagnostics(t, tokens).diagnostics.hidden;
    auto hr = forward_with_diagnostics(r, tokens).diagnostics.hidden;
    auto hs = forward_with_diagnostics(s, tokens).diagnostics.hidden;
    const std::size_t each = 2 * 7 * 16;
    for (std::size_t i = 0; i < 2 * each; ++i) {
      CHECK(ht[i] == hr[i]);
      CHECK(ht[i] == hs[i]);
    }
  }

  TEST_CASE("later tokens never influence earlier logits") {
    auto w = build_model<float>(ModelConfig::desk());
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 5; ++trial) {
      auto tokens = random_tokens(1, 32, 256, 100 + trial);
      const auto base = forward(w, tokens);
      const std::size_t pos = rng() % 32;
      tokens.ids[pos] = (tokens.ids[pos] + 1 + static_cast<std::int32_t>(rng() % 255)) % 256;
      const auto y = forward(w, tokens);
      for (std::size_t i = 0; i < pos * 256; ++i) CHECK(std::abs(y[i] - base[i]) <= 1e-6f);
    }
  }

  TEST_CASE("errors") {
    auto w = build_model<float>(tiny(Variant::satformer));
    CHECK_THROWS_AS(forward(w, random_tokens(1, 13, 17, 6)), ShapeError);
    CHECK_THROWS_AS(forward(w, TokenGrid(1, 2, {0, 17})), DomainError);
    ForwardOptions bad;
    bad.gate_overrides.resize(2);
    CHECK_THROWS_AS(forward(w, random_tokens(1, 4, 17, 7), bad), std::invalid_argument);
  }
}

TEST_SUITE("diagnostics") {
  TEST_CASE("same logits as plain forward") {
    const auto tokens = random_tokens(2, 9, 17, 8);
    for (Variant v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
      auto w = build_model<float>(tiny(v));
      auto out = forward_with_diagnostics(w, tokens);
      CHECK(out.logits == forward(w, tokens));
      CHECK(out.diagnostics.hidden.shape() == Shape{4, 2, 9, 16});
      CHECK(out.diagnostics.has_alpha() == (v == Variant::satformer));
    }
  }

  TEST_CASE("relu gates recorded are non-negative with the expected shape") {
    auto w = build_model<float>(tiny(Variant::satformer));
    auto out = forward_with_diagnostics(w, random_tokens(2, 9, 17, 9));
    CHECK(out.diagnostics.alpha.shape() == Shape{2, 2, 9, 2});
    for (float a : out.diagnostics.alpha.values()) CHECK(a >= 0.0f);
  }

  TEST_CASE("recorded alpha equals the gate recomputed from the hidden state") {
    auto w = build_model<double>(tiny(Variant::satformer));
    w.config.gate_spec = GateKind::sigmoid;
    auto out = forward_with_diagnostics(w, random_tokens(2, 5, 17, 10));
    const auto& hid = out.diagnostics.hidden;
    const std::size_t each = 2 * 5 * 16;
    for (std::size_t n = 2; n <= 3; ++n) {
      Tensor<double> x(Shape{2, 5, 16});
      std::copy_n(hid.data() + (n - 1) * each, each, x.data());
      ad::Tape<double> tape(false);
      auto h = ad::rms_norm(tape.constant(x), tape.param(w.layers[n - 1].attn_norm), kNormEps);
      auto a = compute_gate(h, tape.param(*w.layers[n - 1].attn.w_alpha), GateKind::sigmoid).value();
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == out.diagnostics.alpha[(n - 2) * a.size() + i]);
    }
  }

  TEST_CASE("gate override applies to its layer only") {
    auto w = build_model<double>(tiny(Variant::satformer, 4));
    const auto tokens = random_tokens(1, 6, 17, 11);
    ForwardOptions opt;
    opt.gate_overrides.resize(4);
    opt.gate_overrides[2] = GateOverride::constant(0.25);
    auto base = forward_with_diagnostics(w, tokens).diagnostics;
    auto over = forward_with_diagnostics(w, tokens, opt).diagnostics;
    const std::size_t each = 6 * 2;
    for (std::size_t i = 0; i < each; ++i) {
      CHECK(over.alpha[i] == base.alpha[i]);
      CHECK(over.alpha[each + i] == 0.25);
    }
    const std::size_t h_each = 6 * 16;
    for (std::size_t i = 0; i < 3 * h_each; ++i) CHECK(over.hidden[i] == base.hidden[i]);
  }
}

TEST_SUITE("gradients") {
  TEST_CASE("every parameter receives gradient") {
    for (Variant v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
      auto c = tiny(v);
      c.gate_spec = GateKind::sigmoid;
      auto w = build_model<double>(c);
      auto params = w.parameters();
      ad::Tape<double> tape;
      auto tr = forward_graph(tape, w, random_tokens(2, 6, 17, 12));
      tape.backward(ad::cross_entropy_mean(tr.logits, random_tokens(2, 6, 17, 13)));
      w.zero_grad();
      tape.accumulate_param_grads(params);
      for (const auto* p : params) {
        CAPTURE(p->name);
        double mx = 0.0;
        for (double g : p->grad.values()) mx = std::max(mx, std::abs(g));
        CHECK(mx > 0.0);
      }
    }
  }

  TEST_CASE("float and double models agree") {
    auto wd = build_model<double>(tiny(Variant::satformer));
    auto wf = wd.cast<float>();
    const auto tokens = random_tokens(2, 8, 17, 14);
    auto yd = forward(wd, tokens);
    auto yf = forward(wf, tokens).cast<double>();
    CHECK(max_abs_diff(yd, yf) < 1e-4);
  }
}
