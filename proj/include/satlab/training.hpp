#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "satlab/config.hpp"
#include "satlab/model.hpp"

namespace satlab {

struct TrainConfig {
  double base_lr = 0.0;
  std::size_t total_steps = 0;
  double warmup_fraction = 0.01;
  double min_lr_ratio = 0.1;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  /// Validation and checkpoint cadence in steps; 0 means only at the end.
  std::size_t eval_interval = 0;
  std::uint64_t seed = 0;
  std::string corpus_path;
  /// Tail of the corpus reserved for validation.
  double val_fraction = 0.05;
  /// Upper bound on validation windows per evaluation.
  std::size_t eval_max_windows = 64;

  /// Linear warmup length: max(1, round(warmup_fraction * total_steps)).
  std::size_t warmup_steps() const;
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Strict JSON. Required: base_lr, total_steps, batch_size, seq_len, corpus_path.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);

/// Learning rate for update `step` (1-based; 0 gives 0). Linear 0 -> base_lr over the
/// warmup steps, then cosine from base_lr down to min_lr_ratio * base_lr at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

// ---- optimizer ---------------------------------------------------------------

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;

  static OptimizerState zeros_like(std::span<Param<T>* const> params);
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected AdamW update from each Param::grad. Decay multiplies decayed params
/// by (1 - lr * weight_decay) before the Adam step. Rejects the whole step, leaving every
/// parameter untouched, if any gradient is NaN or infinite.
template <typename T>
void adamw_step(std::span<Param<T>* const> params, OptimizerState<T>& state, double lr, const TrainConfig& cfg);

/// L2 norm over every gradient entry, accumulated in double.
template <typename T>
double global_grad_norm(std::span<Param<T>* const> params);

/// Scales all gradients by max_norm / norm when the global norm exceeds max_norm.
/// Returns the factor applied (1 when unchanged).
template <typename T>
double clip_global_norm(std::span<Param<T>* const> params, double max_norm);

// ---- data --------------------------------------------------------------------

/// Byte-level text with a held-out validation tail starting at `train_end`.
struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::size_t train_end = 0;

  static Corpus from_bytes(std::vector<std::uint8_t> bytes, double val_fraction);
  static Corpus load(const std::filesystem::path& path, double val_fraction);
};

struct Batch {
  TokenGrid inputs;
  TokenGrid targets;
  std::vector<std::size_t> offsets;  // window start of each row
};

/// Seeded training windows. The batch for a given step is a pure function of
/// (seed, step), so a resumed run draws exactly the batches an unbroken one would.
class BatchStream {
 public:
  BatchStream(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed);

  Batch batch_at(std::size_t step) const;
  Batch next() { return batch_at(cursor_++); }
  /// Number of admissible window starts; every start lies in [0, offset_count()).
  std::size_t offset_count() const { return offsets_; }

 private:
  const Corpus* corpus_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t offsets_;
  std::size_t cursor_ = 0;
};

/// Training stream over the corpus' training region. Throws if the region cannot hold
/// one window of seq_len + 1 bytes.
BatchStream make_batches(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed);

/// Non-overlapping validation windows from the held-out tail, grouped into batches.
std::vector<Batch> validation_batches(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size,
                                      std::size_t max_windows);

// ---- evaluation --------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
};

/// Sum of per-token negative log-likelihoods, computed in double from the logits.
template <typename T>
double token_nll_sum(const Tensor<T>& logits, const TokenGrid& targets);

/// Token-weighted mean cross-entropy over all batches; perplexity = exp(loss).
template <typename T>
EvalResult evaluate_perplexity(const ModelWeights<T>& weights, std::span<const Batch> data,
                               const ForwardOptions& options = {});

// ---- metrics and checkpoints ---------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;  // 1-based update index
  double lr = 0.0;
  double train_loss = 0.0;  // batch loss before the update
  double grad_norm = 0.0;   // global norm before clipping
  std::optional<double> val_loss;  // after the update, at eval steps

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

/// CSV with header step,lr,train_loss,grad_norm,val_loss; val_loss empty when absent.
void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> log);
std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path);

class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Checkpoint {
  ModelWeights<T> weights;
  OptimizerState<T> state;
  std::optional<TrainConfig> train;
  std::size_t step = 0;
  std::vector<StepMetrics> metrics;
};

/// Layout: 8-byte little-endian header length, JSON header, raw little-endian payload
/// (parameters in ModelWeights::parameters() order, then Adam first and second moments).
/// Written to a temporary file and renamed into place.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Header only, after validating the manifest against the file length and checksum.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

// ---- training loop -------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, std::string what, std::optional<std::filesystem::path> last_good);
  std::size_t step() const noexcept { return step_; }
  const std::optional<std::filesystem::path>& last_good() const noexcept { return last_good_; }

 private:
  std::size_t step_;
  std::optional<std::filesystem::path> last_good_;
};

struct TrainOptions {
  /// Where checkpoint.bin and metrics.csv go; empty keeps everything in memory.
  std::filesystem::path run_dir;
  /// Continue from this checkpoint instead of initializing from the model seed.
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this update (0 runs to total_steps). Used to interrupt runs.
  std::size_t stop_after = 0;
  /// Preloaded corpus; otherwise TrainConfig::corpus_path is read.
  const Corpus* corpus = nullptr;
  std::function<void(const StepMetrics&)> on_step;
};

template <typename T>
struct TrainResult {
  ModelWeights<T> weights;
  OptimizerState<T> state;
  std::vector<StepMetrics> log;
  std::size_t step = 0;
};

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.csv";

/// Full loop: batch, forward, loss, backward, clip, AdamW, schedule; validation and
/// checkpoint every eval_interval steps and at the end. Deterministic given the configs.
template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const TrainOptions& options = {});

}  // namespace satlab
