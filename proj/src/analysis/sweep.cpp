#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "satlab/analysis.hpp"

namespace satlab {

namespace {

constexpr const char* kDoneMarker = "done";

}  // namespace

std::string SweepCell::name() const { return fmt::format("{}_s{}", to_string(gate), seed); }

double SweepCell::final_train_loss() const {
  if (log.empty()) throw std::logic_error(fmt::format("sweep cell {} has no metrics", name()));
  return log.back().train_loss;
}

double SweepCell::final_val_loss() const {
  if (log.empty() || !log.back().val_loss) {
    throw std::logic_error(fmt::format("sweep cell {} has no final validation loss", name()));
  }
  return *log.back().val_loss;
}

std::vector<SweepSummaryRow> SweepResult::summary() const {
  std::vector<SweepSummaryRow> rows;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.gate == c.gate; });
    if (it == rows.end()) {
      rows.push_back({c.gate, 0, 0.0, 0.0, 0.0});
      it = rows.end() - 1;
    }
    it->runs += 1;
    it->final_val_mean += c.final_val_loss();
    it->final_train_mean += c.final_train_loss();
  }
  for (auto& r : rows) {
    r.final_val_mean /= static_cast<double>(r.runs);
    r.final_train_mean /= static_cast<double>(r.runs);
    double var = 0.0;
    for (const auto& c : cells) {
      if (c.gate == r.gate) var += (c.final_val_loss() - r.final_val_mean) * (c.final_val_loss() - r.final_val_mean);
    }
    r.final_val_std = std::sqrt(var / static_cast<double>(r.runs));
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.final_val_mean != b.final_val_mean) return a.final_val_mean < b.final_val_mean;
    return to_string(a.gate) < to_string(b.gate);
  });
  return rows;
}

SweepResult ablation_sweep(const ModelConfig& base, const TrainConfig& train_cfg, const SweepSpec& spec,
                           const SweepOptions& options) {
  if (spec.gates.empty() || spec.seeds.empty()) throw std::invalid_argument("sweep: needs at least one gate and one seed");
  for (std::size_t i = 0; i < spec.gates.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.gates.size(); ++j) {
      if (spec.gates[i] == spec.gates[j]) throw std::invalid_argument(fmt::format("sweep: gate {} listed twice", to_string(spec.gates[i])));
    }
  }
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.seeds.size(); ++j) {
      if (spec.seeds[i] == spec.seeds[j]) throw std::invalid_argument(fmt::format("sweep: seed {} listed twice", spec.seeds[i]));
    }
  }

  std::optional<Corpus> owned;
  if (!options.corpus) owned = Corpus::load(train_cfg.corpus_path, train_cfg.val_fraction);
  const Corpus& corpus = options.corpus ? *options.corpus : *owned;

  SweepResult result;
  std::size_t trained = 0;
  for (GateKind gate : spec.gates) {
    for (std::uint64_t seed : spec.seeds) {
      SweepCell cell;
      cell.gate = gate;
      cell.seed = seed;
      ModelConfig mc = base;
      mc.variant = Variant::satformer;
      mc.gate_spec = gate;
      mc.seed = seed;

      const bool persist = !options.out_dir.empty();
      const auto dir = options.out_dir / "cells" / cell.name();
      if (persist && std::filesystem::exists(dir / kDoneMarker)) {
        cell.log = read_metrics_csv(dir / kMetricsFile);
        cell.resumed = true;
      } else {
        if (options.max_new_cells != 0 && trained == options.max_new_cells) return result;
        TrainOptions topt;
        topt.corpus = &corpus;
        if (persist) {
          topt.run_dir = dir;
          if (std::filesystem::exists(dir / kCheckpointFile)) topt.resume_from = dir / kCheckpointFile;
        }
        cell.log = train<float>(mc, train_cfg, topt).log;
        ++trained;
        if (persist) std::ofstream(dir / kDoneMarker) << cell.log.size() << "\n";
      }
      if (options.on_cell) options.on_cell(cell);
      result.cells.push_back(std::move(cell));
    }
  }
  return result;
}

}  // namespace satlab
