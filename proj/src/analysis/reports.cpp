#include <fmt/format.h>

#include <fstream>

#include "satlab/analysis.hpp"

namespace satlab {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  return out;
}

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

}  // namespace

void write_gate_heatmap_csv(const std::filesystem::path& path, const GateStats& s) {
  auto out = open_out(path);
  out << "layer";
  for (std::size_t j = 0; j < s.heads; ++j) out << ",head_" << (j + 1);
  out << "\n";
  for (std::size_t r = 0; r < s.layers; ++r) {
    out << (r + 2);
    for (std::size_t j = 0; j < s.heads; ++j) out << fmt::format(",{}", s.mean(r, j));
    out << "\n";
  }
}

void write_gate_layers_csv(const std::filesystem::path& path, const GateStats& s) {
  auto out = open_out(path);
  out << "layer,mean_alpha,sparsity,head_cv\n";
  for (std::size_t r = 0; r < s.layers; ++r) {
    out << fmt::format("{},{},{},{}\n", r + 2, s.layer_mean[r], s.sparsity[r], s.head_cv[r]);
  }
}

void write_interventions_csv(const std::filesystem::path& path, const InterventionReport& r) {
  const bool heads = !r.rows.empty() && r.rows.front().head_mean.has_value();
  auto out = open_out(path);
  out << "layer,baseline_ppl,zero_ppl,mean_ppl,delta_zero,delta_mean";
  if (heads) out << ",head_mean_ppl,delta_head_mean";
  out << "\n";
  for (const auto& row : r.rows) {
    out << fmt::format("{},{},{},{},{},{}", row.layer, row.baseline, row.zeroed, row.mean, row.delta_zero(),
                       row.delta_mean());
    if (heads) out << fmt::format(",{},{}", opt(row.head_mean), opt(row.delta_head_mean()));
    out << "\n";
  }
}

void write_lens_csv(const std::filesystem::path& path, const LogitLensReport& r) {
  auto out = open_out(path);
  out << "model,layer,loss,perplexity\n";
  for (const auto& row : r.rows) out << fmt::format("{},{},{},{}\n", row.model, row.layer, row.loss, row.perplexity);
}

void write_sweep_curves_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::size_t steps = 0;
  for (const auto& c : r.cells) {
    if (steps != 0 && c.log.size() != steps) {
      throw std::invalid_argument(fmt::format("sweep curves: cell {} has {} steps, expected {}", c.name(), c.log.size(), steps));
    }
    steps = c.log.size();
  }
  auto out = open_out(path);
  out << "step";
  for (const auto& c : r.cells) out << "," << c.name();
  out << "\n";
  for (std::size_t s = 0; s < steps; ++s) {
    out << r.cells.front().log[s].step;
    for (const auto& c : r.cells) {
      if (c.log[s].step != s + 1) throw std::invalid_argument(fmt::format("sweep curves: cell {} is misaligned", c.name()));
      out << fmt::format(",{}", c.log[s].train_loss);
    }
    out << "\n";
  }
}

void write_sweep_summary_csv(const std::filesystem::path& path, const SweepResult& r) {
  auto out = open_out(path);
  out << "rank,gate,runs,final_val_loss_mean,final_val_loss_std,final_train_loss_mean\n";
  std::size_t rank = 1;
  for (const auto& row : r.summary()) {
    out << fmt::format("{},{},{},{},{},{}\n", rank++, to_string(row.gate), row.runs, row.final_val_mean,
                       row.final_val_std, row.final_train_mean);
  }
}

nlohmann::json to_json(const GateStats& s) {
  auto heat = nlohmann::json::array();
  for (std::size_t r = 0; r < s.layers; ++r) {
    heat.push_back(std::vector<double>(s.mean_alpha.begin() + static_cast<std::ptrdiff_t>(r * s.heads),
                                       s.mean_alpha.begin() + static_cast<std::ptrdiff_t>((r + 1) * s.heads)));
  }
  std::vector<std::size_t> layers;
  for (std::size_t r = 0; r < s.layers; ++r) layers.push_back(r + 2);
  return {{"layers", layers},
          {"heads", s.heads},
          {"entries_per_layer", s.entries_per_layer},
          {"mean_alpha", heat},
          {"layer_mean", s.layer_mean},
          {"sparsity", s.sparsity},
          {"head_cv", s.head_cv}};
}

nlohmann::json to_json(const InterventionReport& r) {
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"layer", row.layer},         {"baseline_ppl", row.baseline},     {"zero_ppl", row.zeroed},
                     {"mean_ppl", row.mean},       {"delta_zero", row.delta_zero()},   {"delta_mean", row.delta_mean()}};
    if (row.head_mean) {
      j["head_mean_ppl"] = *row.head_mean;
      j["delta_head_mean"] = *row.delta_head_mean();
    }
    rows.push_back(j);
  }
  return {{"rows", rows}};
}

nlohmann::json to_json(const LogitLensReport& r) {
  auto rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"model", row.model}, {"layer", row.layer}, {"loss", row.loss}, {"perplexity", row.perplexity}});
  }
  return {{"rows", rows}};
}

nlohmann::json to_json(const SweepResult& r) {
  auto cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"name", c.name()},
                     {"gate", to_string(c.gate)},
                     {"seed", c.seed},
                     {"steps", c.log.size()},
                     {"final_train_loss", c.final_train_loss()},
                     {"final_val_loss", c.final_val_loss()}});
  }
  auto summary = nlohmann::json::array();
  for (const auto& row : r.summary()) {
    summary.push_back({{"gate", to_string(row.gate)},
                       {"runs", row.runs},
                       {"final_val_loss_mean", row.final_val_mean},
                       {"final_val_loss_std", row.final_val_std},
                       {"final_train_loss_mean", row.final_train_mean}});
  }
  return {{"cells", cells}, {"summary", summary}};
}

}  // namespace satlab
