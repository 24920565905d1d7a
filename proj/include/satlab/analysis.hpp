#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "satlab/model.hpp"
#include "satlab/training.hpp"

namespace satlab {

// ---- gate statistics -----------------------------------------------------------

/// Aggregates over every (batch, position) entry. Row r describes layer r + 2.
struct GateStats {
  std::size_t layers = 0;  // L - 1
  std::size_t heads = 0;   // N_kv
  std::size_t entries_per_layer = 0;
  std::vector<double> mean_alpha;  // [layers, heads] row-major
  std::vector<double> layer_mean;  // [layers] mean over positions and heads
  std::vector<double> sparsity;    // [layers] fraction of entries that are exactly zero
  std::vector<double> head_cv;     // [layers] population std / max(|mean|, 1e-8) of the per-head means

  double mean(std::size_t row, std::size_t head) const { return mean_alpha[row * heads + head]; }
};

/// Exact streaming aggregation of alpha tensors shaped [L-1, B, T, N_kv].
class GateStatsAccumulator {
 public:
  template <typename T>
  void add(const Tensor<T>& alpha);
  GateStats finish() const;
  bool empty() const { return count_ == 0; }

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::size_t count_ = 0;  // entries per (layer, head)
  std::vector<double> sums_;
  std::vector<std::size_t> zeros_;
};

template <typename T>
GateStats gate_stats(const Diagnostics<T>& diagnostics);

/// Gate statistics of a SATFormer over a dataset; throws std::invalid_argument otherwise.
template <typename T>
GateStats gate_stats(const ModelWeights<T>& weights, std::span<const Batch> data);

// ---- interventions -------------------------------------------------------------

enum class InterventionMode { zero, mean, head_mean };
std::string_view to_string(InterventionMode m);

/// Perplexity with one layer's gate replaced (layer in [2, L]). `stats` must come from
/// the same weights and data when the mode needs means; it is computed if absent.
template <typename T>
EvalResult intervene(const ModelWeights<T>& weights, std::span<const Batch> data, std::size_t layer,
                     InterventionMode mode, const GateStats* stats = nullptr);

/// The override `intervene` installs, exposed for inspection.
GateOverride intervention_override(const GateStats& stats, std::size_t layer, InterventionMode mode);

struct InterventionRow {
  std::size_t layer = 0;
  double baseline = 0.0;  // perplexities
  double zeroed = 0.0;
  double mean = 0.0;
  std::optional<double> head_mean;

  double delta_zero() const { return zeroed - baseline; }
  double delta_mean() const { return mean - baseline; }
  std::optional<double> delta_head_mean() const {
    return head_mean ? std::optional<double>(*head_mean - baseline) : std::nullopt;
  }
};

struct InterventionReport {
  std::vector<InterventionRow> rows;  // layers 2..L
};

template <typename T>
InterventionReport intervention_report(const ModelWeights<T>& weights, std::span<const Batch> data,
                                       bool per_head_mean = false);

// ---- logit lens ----------------------------------------------------------------

struct LensRow {
  std::string model;
  std::size_t layer = 0;  // 0 is the embedding output
  double loss = 0.0;
  double perplexity = 0.0;
};

struct LogitLensReport {
  std::vector<LensRow> rows;
};

/// Decodes hidden[l] for l = 0..L through the final norm and unembedding.
template <typename T>
LogitLensReport logit_lens(const ModelWeights<T>& weights, std::span<const Batch> data, const std::string& model = "");

/// Concatenation of two labelled reports for side-by-side curves.
LogitLensReport compare_logit_lens(LogitLensReport a, LogitLensReport b);

// ---- gate-variant sweep --------------------------------------------------------

struct SweepSpec {
  std::vector<GateKind> gates;
  std::vector<std::uint64_t> seeds;
};

struct SweepCell {
  GateKind gate = GateKind::relu;
  std::uint64_t seed = 0;
  std::vector<StepMetrics> log;
  bool resumed = false;  // loaded from a completed cell on disk

  std::string name() const;
  double final_train_loss() const;
  /// Validation loss after the last update.
  double final_val_loss() const;
};

struct SweepSummaryRow {
  GateKind gate = GateKind::relu;
  std::size_t runs = 0;
  double final_val_mean = 0.0;
  double final_val_std = 0.0;
  double final_train_mean = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // gate-major, in SweepSpec order
  /// Per gate, sorted by mean final validation loss, ties by gate name.
  std::vector<SweepSummaryRow> summary() const;
};

struct SweepOptions {
  /// Root for per-cell run directories and completion markers; empty keeps it in memory.
  std::filesystem::path out_dir;
  const Corpus* corpus = nullptr;
  /// Stop after this many newly trained cells (0 = all). Used to simulate interruption.
  std::size_t max_new_cells = 0;
  std::function<void(const SweepCell&)> on_cell;
};

/// One SATFormer per (gate, seed): the gate kind and model seed vary, the data order
/// (train_cfg.seed) is shared. Completed cells found under out_dir are loaded, not retrained.
SweepResult ablation_sweep(const ModelConfig& base, const TrainConfig& train_cfg, const SweepSpec& spec,
                           const SweepOptions& options = {});

// ---- exports -------------------------------------------------------------------

/// layer,head_1..head_N rows of mean alpha (the heatmap matrix).
void write_gate_heatmap_csv(const std::filesystem::path& path, const GateStats& s);
/// layer,mean_alpha,sparsity,head_cv.
void write_gate_layers_csv(const std::filesystem::path& path, const GateStats& s);
/// layer,baseline_ppl,zero_ppl,mean_ppl,delta_zero,delta_mean[,head_mean_ppl,delta_head_mean].
void write_interventions_csv(const std::filesystem::path& path, const InterventionReport& r);
/// model,layer,loss,perplexity.
void write_lens_csv(const std::filesystem::path& path, const LogitLensReport& r);
/// step, then one train-loss column per cell named <gate>_s<seed>.
void write_sweep_curves_csv(const std::filesystem::path& path, const SweepResult& r);
/// rank,gate,runs,final_val_loss_mean,final_val_loss_std,final_train_loss_mean.
void write_sweep_summary_csv(const std::filesystem::path& path, const SweepResult& r);

nlohmann::json to_json(const GateStats& s);
nlohmann::json to_json(const InterventionReport& r);
nlohmann::json to_json(const LogitLensReport& r);
nlohmann::json to_json(const SweepResult& r);

}  // namespace satlab
