#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "satlab/training.hpp"

namespace satlab {

DivergenceError::DivergenceError(std::size_t step, std::string what, std::optional<std::filesystem::path> last_good)
    : std::runtime_error(fmt::format("training diverged at step {}: {}{}", step, what,
                                     last_good ? fmt::format(" (last good checkpoint: {})", last_good->string())
                                               : std::string(" (no checkpoint written yet)"))),
      step_(step),
      last_good_(std::move(last_good)) {}

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("metrics: cannot write '{}'", tmp.string()));
    out << "step,lr,train_loss,grad_norm,val_loss\n";
    for (const auto& m : log) {
      out << fmt::format("{},{},{},{},{}\n", m.step, m.lr, m.train_loss, m.grad_norm,
                         m.val_loss ? fmt::format("{}", *m.val_loss) : std::string());
    }
  }
  std::filesystem::rename(tmp, path);
}

namespace {

double parse_double(std::string_view s, const std::filesystem::path& path) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::runtime_error(fmt::format("metrics '{}': bad number '{}'", path.string(), s));
  }
  return v;
}

}  // namespace

std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("metrics: cannot open '{}'", path.string()));
  std::string line;
  if (!std::getline(in, line) || line != "step,lr,train_loss,grad_norm,val_loss") {
    throw std::runtime_error(fmt::format("metrics '{}': unexpected header", path.string()));
  }
  std::vector<StepMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (line.back() == ',') cols.emplace_back();
    if (cols.size() != 5) throw std::runtime_error(fmt::format("metrics '{}': malformed row '{}'", path.string(), line));
    StepMetrics m;
    m.step = static_cast<std::size_t>(parse_double(cols[0], path));
    m.lr = parse_double(cols[1], path);
    m.train_loss = parse_double(cols[2], path);
    m.grad_norm = parse_double(cols[3], path);
    if (!cols[4].empty()) m.val_loss = parse_double(cols[4], path);
    out.push_back(m);
  }
  return out;
}

namespace {

bool same_run(TrainConfig a, TrainConfig b) {
  a.corpus_path.clear();
  b.corpus_path.clear();
  return a == b;
}

}  // namespace

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const TrainOptions& options) {
  model_cfg.validate();
  cfg.validate();

  std::optional<Corpus> owned;
  if (!options.corpus) {
    if (cfg.corpus_path.empty()) throw std::invalid_argument("train: no corpus given and corpus_path is empty");
    owned = Corpus::load(cfg.corpus_path, cfg.val_fraction);
  }
  const Corpus& corpus = options.corpus ? *options.corpus : *owned;
  const auto top = *std::max_element(corpus.bytes.begin(), corpus.bytes.end());
  if (top >= model_cfg.vocab_size) {
    throw std::invalid_argument(fmt::format("train: corpus byte {} is outside the model vocabulary of {}", top,
                                            model_cfg.vocab_size));
  }

  TrainResult<T> result{build_model<T>(model_cfg), {}, {}, 0};
  std::optional<std::filesystem::path> last_good;
  if (options.resume_from) {
    auto ckpt = load_checkpoint<T>(*options.resume_from);
    if (!(ckpt.weights.config == model_cfg)) {
      throw std::invalid_argument("train: checkpoint model config differs from the requested one");
    }
    if (ckpt.train && !same_run(*ckpt.train, cfg)) {
      throw std::invalid_argument("train: checkpoint training config differs from the requested one");
    }
    if (ckpt.step > cfg.total_steps) throw std::invalid_argument("train: checkpoint is past total_steps");
    result.weights = std::move(ckpt.weights);
    result.state = std::move(ckpt.state);
    result.log = std::move(ckpt.metrics);
    result.step = ckpt.step;
    last_good = *options.resume_from;
  } else {
    result.state = OptimizerState<T>::zeros_like(result.weights.parameters());
  }

  const auto stream = make_batches(corpus, cfg.seq_len, cfg.batch_size, cfg.seed);
  const auto val = validation_batches(corpus, cfg.seq_len, cfg.batch_size, cfg.eval_max_windows);
  const std::size_t end = options.stop_after ? std::min(options.stop_after, cfg.total_steps) : cfg.total_steps;
  const bool persist = !options.run_dir.empty();
  const auto ckpt_path = options.run_dir / kCheckpointFile;

  auto params = result.weights.parameters();
  for (std::size_t s = result.step + 1; s <= end; ++s) {
    const Batch batch = stream.batch_at(s - 1);
    double loss = 0.0;
    {
      ad::Tape<T> tape(true);
      auto trace = forward_graph(tape, result.weights, batch.inputs);
      auto l = ad::cross_entropy_mean(trace.logits, batch.targets);
      loss = static_cast<double>(l.value().item());
      if (!std::isfinite(loss)) throw DivergenceError(s, fmt::format("loss is {}", loss), last_good);
      tape.backward(l);
      result.weights.zero_grad();
      tape.accumulate_param_grads(params);
    }
    StepMetrics m;
    m.step = s;
    m.lr = lr_at(s, cfg);
    m.train_loss = loss;
    m.grad_norm = global_grad_norm<T>(params);
    if (!std::isfinite(m.grad_norm)) {
      throw DivergenceError(s, fmt::format("gradient norm is {}", m.grad_norm), last_good);
    }
    clip_global_norm<T>(params, cfg.clip_norm);
    adamw_step<T>(params, result.state, m.lr, cfg);

    const bool eval_now = s == cfg.total_steps || (cfg.eval_interval != 0 && s % cfg.eval_interval == 0);
    if (eval_now) {
      m.val_loss = evaluate_perplexity(result.weights, std::span<const Batch>(val)).loss;
      if (!std::isfinite(*m.val_loss)) {
        throw DivergenceError(s, fmt::format("validation loss is {}", *m.val_loss), last_good);
      }
    }
    result.log.push_back(m);
    result.step = s;
    if (options.on_step) options.on_step(m);

    if (persist && (eval_now || s == end)) {
      Checkpoint<T> ckpt{result.weights, result.state, cfg, s, result.log};
      save_checkpoint(ckpt_path, ckpt);
      write_metrics_csv(options.run_dir / kMetricsFile, result.log);
      last_good = ckpt_path;
    }
  }
  return result;
}

template TrainResult<float> train<float>(const ModelConfig&, const TrainConfig&, const TrainOptions&);
template TrainResult<double> train<double>(const ModelConfig&, const TrainConfig&, const TrainOptions&);

}  // namespace satlab
