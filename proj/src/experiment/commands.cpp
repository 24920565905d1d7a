#include <fmt/format.h>
#include <fmt/ostream.h>

#include <fstream>
#include <ostream>
#include <random>

#include "satlab/experiment.hpp"

namespace satlab {

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << "\n";
}

bool all_exist(std::initializer_list<std::filesystem::path> paths) {
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) return false;
  }
  return true;
}

/// Calls f(weights) with the checkpoint loaded in its stored precision.
template <typename F>
auto with_checkpoint(const std::filesystem::path& path, F&& f) {
  const auto header = read_checkpoint_header(path);
  if (header.at("dtype") == "float64") return f(load_checkpoint<double>(path));
  return f(load_checkpoint<float>(path));
}

/// Held-out windows of a byte corpus, read with the checkpoint's training settings.
std::vector<Batch> heldout_windows(const nlohmann::json& header, const std::filesystem::path& data) {
  const auto model = model_config_from_json(header.at("model"));
  if (model.vocab_size != 256) {
    throw std::invalid_argument(fmt::format(
        "vocabulary mismatch: checkpoint has vocab_size {}, byte-level data needs 256", model.vocab_size));
  }
  TrainConfig t;
  t.seq_len = model.max_seq_len;
  t.batch_size = 8;
  if (!header.at("train").is_null()) t = train_config_from_json(header.at("train"));
  const auto corpus = Corpus::load(data, t.val_fraction);
  return validation_batches(corpus, t.seq_len, t.batch_size, t.eval_max_windows);
}

std::filesystem::path beside(const std::filesystem::path& checkpoint) {
  const auto parent = checkpoint.parent_path();
  return parent.empty() ? std::filesystem::path(".") : parent;
}

std::string run_label(const std::filesystem::path& checkpoint) {
  const auto dir = std::filesystem::absolute(checkpoint).parent_path().filename().string();
  return dir.empty() ? checkpoint.stem().string() : dir;
}

}  // namespace

int cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  const auto dir = cfg.run_dir();
  std::filesystem::create_directories(dir);
  write_json(dir / kResolvedConfigFile, to_json(cfg));

  TrainOptions opt;
  opt.run_dir = dir;
  const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
  opt.on_step = [&](const StepMetrics& m) {
    if (m.step % every != 0 && m.step != cfg.train.total_steps) return;
    fmt::print(log, "step {:>6}/{}  lr {:.3e}  loss {:.4f}  grad_norm {:.3f}{}\n", m.step, cfg.train.total_steps,
               m.lr, m.train_loss, m.grad_norm, m.val_loss ? fmt::format("  val {:.4f}", *m.val_loss) : "");
  };
  std::vector<StepMetrics> logged;
  if (cfg.dtype == DType::float64) {
    logged = train<double>(cfg.model, cfg.train, opt).log;
  } else {
    logged = train<float>(cfg.model, cfg.train, opt).log;
  }
  const auto& last = logged.back();
  fmt::print(log, "final: step {} train_loss {:.6f} val_loss {:.6f} val_ppl {:.4f}\n", last.step, last.train_loss,
             *last.val_loss, std::exp(*last.val_loss));
  fmt::print(log, "wrote {}\n", dir.string());
  return all_exist({dir / kMetricsFile, dir / kCheckpointFile, dir / kResolvedConfigFile}) ? 0 : 1;
}

nlohmann::json run_eval(const EvalRequest& req) {
  const auto header = read_checkpoint_header(req.checkpoint);
  const auto data = heldout_windows(header, req.data);
  const auto r = with_checkpoint(req.checkpoint, [&](const auto& ck) {
    return evaluate_perplexity(ck.weights, std::span<const Batch>(data));
  });
  nlohmann::json j{{"checkpoint", req.checkpoint.string()},
                   {"data", req.data.string()},
                   {"dtype", header.at("dtype")},
                   {"step", header.at("step")},
                   {"windows", [&] {
                      std::size_t n = 0;
                      for (const auto& b : data) n += b.inputs.batch;
                      return n;
                    }()},
                   {"tokens", r.tokens},
                   {"loss", r.loss},
                   {"perplexity", r.perplexity}};
  write_json(req.out.value_or(beside(req.checkpoint) / "eval.json"), j);
  return j;
}

int cmd_eval(const EvalRequest& req, std::ostream& log) {
  const auto j = run_eval(req);
  fmt::print(log, "loss {}\nperplexity {}\ntokens {}\n", j.at("loss").get<double>(), j.at("perplexity").get<double>(),
             j.at("tokens").get<std::size_t>());
  return 0;
}

AnalysisKind parse_analysis(std::string_view s) {
  if (s == "gates") return AnalysisKind::gates;
  if (s == "intervene") return AnalysisKind::intervene;
  if (s == "lens") return AnalysisKind::lens;
  throw std::invalid_argument(fmt::format("unknown analysis '{}' (gates|intervene|lens)", s));
}

std::vector<std::filesystem::path> run_analyze(const AnalyzeRequest& req) {
  const auto header = read_checkpoint_header(req.checkpoint);
  const auto data = heldout_windows(header, req.data);
  const std::span<const Batch> d(data);
  const auto out = req.out_dir.empty() ? beside(req.checkpoint) : req.out_dir;
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> written;

  switch (req.which) {
    case AnalysisKind::gates: {
      const auto s = with_checkpoint(req.checkpoint, [&](const auto& ck) { return gate_stats(ck.weights, d); });
      write_gate_heatmap_csv(out / "gate_heatmap.csv", s);
      write_gate_layers_csv(out / "gate_layers.csv", s);
      write_json(out / "gates.json", to_json(s));
      written = {out / "gate_heatmap.csv", out / "gate_layers.csv", out / "gates.json"};
      break;
    }
    case AnalysisKind::intervene: {
      const auto r = with_checkpoint(req.checkpoint,
                                     [&](const auto& ck) { return intervention_report(ck.weights, d, req.per_head_mean); });
      write_interventions_csv(out / "interventions.csv", r);
      write_json(out / "interventions.json", to_json(r));
      written = {out / "interventions.csv", out / "interventions.json"};
      break;
    }
    case AnalysisKind::lens: {
      auto label = run_label(req.checkpoint);
      auto r = with_checkpoint(req.checkpoint, [&](const auto& ck) { return logit_lens(ck.weights, d, label); });
      if (req.compare) {
        auto other = run_label(*req.compare);
        if (other == label) other += "#2";
        const auto b = with_checkpoint(*req.compare, [&](const auto& ck) { return logit_lens(ck.weights, d, other); });
        r = compare_logit_lens(std::move(r), b);
      }
      write_lens_csv(out / "lens.csv", r);
      write_json(out / "lens.json", to_json(r));
      written = {out / "lens.csv", out / "lens.json"};
      break;
    }
  }
  return written;
}

int cmd_analyze(const AnalyzeRequest& req, std::ostream& log) {
  const auto files = run_analyze(req);
  for (const auto& f : files) fmt::print(log, "wrote {}\n", f.string());
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) return 1;
  }
  return 0;
}

GradCheckReport run_gradcheck(const ExperimentConfig& cfg, const GradTamper& tamper) {
  if (cfg.dtype != DType::float64) throw ConfigError({"dtype: gradcheck requires float64"});
  const auto spec = cfg.gradcheck.value_or(GradCheckSpec{});
  if (spec.seq_len > cfg.model.max_seq_len) {
    throw ConfigError({fmt::format("gradcheck.seq_len: {} exceeds model max_seq_len {}", spec.seq_len,
                                   cfg.model.max_seq_len)});
  }
  auto w = build_model<double>(cfg.model);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.model.vocab_size) - 1);
  std::vector<std::int32_t> ids(spec.batch * (spec.seq_len + 1));
  for (auto& t : ids) t = tok(rng);
  std::vector<std::int32_t> in, tg;
  for (std::size_t b = 0; b < spec.batch; ++b) {
    const auto* row = ids.data() + b * (spec.seq_len + 1);
    in.insert(in.end(), row, row + spec.seq_len);
    tg.insert(tg.end(), row + 1, row + spec.seq_len + 1);
  }
  const TokenGrid x(spec.batch, spec.seq_len, std::move(in));
  const TokenGrid y(spec.batch, spec.seq_len, std::move(tg));

  auto params = w.parameters();
  auto loss = [&](bool backward) {
    ad::Tape<double> tape(backward);
    auto trace = forward_graph(tape, w, x);
    auto l = ad::cross_entropy_mean(trace.logits, y);
    if (backward) {
      tape.backward(l);
      w.zero_grad();
      tape.accumulate_param_grads(params);
      if (tamper) tamper(w);
    }
    return l.value().item();
  };
  GradCheckOptions opt;
  opt.eps = spec.eps;
  opt.samples = spec.samples;
  opt.seed = spec.seed;
  for (const auto& layer : w.layers) {
    if (layer.attn.w_alpha) opt.exhaustive.push_back(layer.attn.w_alpha->name);
  }
  return grad_check(loss, params, opt);
}

int cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& log, const GradTamper& tamper) {
  const auto spec = cfg.gradcheck.value_or(GradCheckSpec{});
  const auto r = run_gradcheck(cfg, tamper);
  const bool pass = r.passed(spec.tolerance);
  const auto total_params = build_model<double>(cfg.model).parameters().size();
  fmt::print(log, "coordinates {}  parameters covered {}/{}\n", r.coordinates, r.covered.size(), total_params);
  fmt::print(log, "max rel err {:.3e} at {}[{}] (analytic {:.9e}, numeric {:.9e})\n", r.max_rel_err, r.worst_param,
             r.worst_index, r.worst_analytic, r.worst_numeric);
  fmt::print(log, "{} (tolerance {:.0e})\n", pass ? "PASS" : "FAIL", spec.tolerance);
  const auto dir = cfg.run_dir();
  write_json(dir / "gradcheck.json", {{"passed", pass},
                                      {"tolerance", spec.tolerance},
                                      {"max_rel_err", r.max_rel_err},
                                      {"worst_param", r.worst_param},
                                      {"worst_index", r.worst_index},
                                      {"worst_analytic", r.worst_analytic},
                                      {"worst_numeric", r.worst_numeric},
                                      {"coordinates", r.coordinates},
                                      {"covered", r.covered}});
  return pass ? 0 : 1;
}

int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log) {
  if (!cfg.sweep) throw ConfigError({"sweep: missing required field"});
  if (cfg.dtype != DType::float32) throw ConfigError({"dtype: sweeps train in float32"});
  const auto dir = cfg.run_dir();
  std::filesystem::create_directories(dir);
  write_json(dir / kResolvedConfigFile, to_json(cfg));
  SweepOptions opt;
  opt.out_dir = dir;
  opt.on_cell = [&](const SweepCell& c) {
    fmt::print(log, "{:<20} {}  final train {:.4f}  val {:.4f}\n", c.name(), c.resumed ? "(done earlier)" : "(trained)",
               c.final_train_loss(), c.final_val_loss());
  };
  const auto r = ablation_sweep(cfg.model, cfg.train, *cfg.sweep, opt);
  write_sweep_curves_csv(dir / "sweep_curves.csv", r);
  write_sweep_summary_csv(dir / "sweep_summary.csv", r);
  write_json(dir / "sweep.json", to_json(r));
  fmt::print(log, "ordering by mean final validation loss:");
  for (const auto& row : r.summary()) fmt::print(log, " {} ({:.4f})", to_string(row.gate), row.final_val_mean);
  fmt::print(log, "\n");
  return all_exist({dir / "sweep_curves.csv", dir / "sweep_summary.csv", dir / "sweep.json"}) ? 0 : 1;
}

}  // namespace satlab
