#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "satlab/analysis.hpp"
#include "satlab/grad_check.hpp"
#include "satlab/training.hpp"

namespace satlab {

enum class DType { float32, float64 };
std::string_view to_string(DType d);

struct GradCheckSpec {
  std::size_t samples = 200;
  double eps = 1e-5;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  std::size_t seq_len = 8;
  double tolerance = 1e-4;

  friend bool operator==(const GradCheckSpec&, const GradCheckSpec&) = default;
};

struct ExperimentConfig {
  std::string run_name;
  std::filesystem::path output_dir;
  DType dtype = DType::float32;
  ModelConfig model;
  TrainConfig train;
  std::optional<SweepSpec> sweep;
  std::optional<GradCheckSpec> gradcheck;

  /// output_dir / run_name, with output_dir replaced by $SATLAB_OUTPUT_ROOT when set.
  std::filesystem::path run_dir() const;
};

inline constexpr const char* kOutputRootEnv = "SATLAB_OUTPUT_ROOT";
inline constexpr const char* kResolvedConfigFile = "config.resolved.json";

/// Strict schema: run_name, output_dir, model, train required; dtype, sweep, gradcheck
/// optional. A relative train.corpus_path is resolved against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Every field with defaults materialized.
nlohmann::json to_json(const ExperimentConfig& c);

// ---- commands ------------------------------------------------------------------
// Each writes its artifacts, reports progress on `log`, and returns the process exit
// status (0 only when every artifact was produced). Errors propagate as exceptions.

int cmd_train(const ExperimentConfig& cfg, std::ostream& log);

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::optional<std::filesystem::path> out;  // default: eval.json beside the checkpoint
};
/// Perplexity on the held-out windows of `data`, read with the checkpoint's training
/// settings (val_fraction, seq_len, batch_size, eval_max_windows).
nlohmann::json run_eval(const EvalRequest& req);
int cmd_eval(const EvalRequest& req, std::ostream& log);

enum class AnalysisKind { gates, intervene, lens };
AnalysisKind parse_analysis(std::string_view s);

struct AnalyzeRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  AnalysisKind which = AnalysisKind::gates;
  std::filesystem::path out_dir;  // default: beside the checkpoint
  std::optional<std::filesystem::path> compare;  // second checkpoint for lens
  bool per_head_mean = false;
};
/// Returns the list of files written.
std::vector<std::filesystem::path> run_analyze(const AnalyzeRequest& req);
int cmd_analyze(const AnalyzeRequest& req, std::ostream& log);

/// Perturbs analytic gradients after backward; lets tests stand in a faulty rule.
using GradTamper = std::function<void(ModelWeights<double>&)>;
GradCheckReport run_gradcheck(const ExperimentConfig& cfg, const GradTamper& tamper = {});
int cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& log, const GradTamper& tamper = {});

int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace satlab
