#include <fmt/format.h>

#include <cstdlib>
#include <fstream>

#include "config/json_fields.hpp"
#include "satlab/experiment.hpp"

namespace satlab {

std::string_view to_string(DType d) { return d == DType::float32 ? "float32" : "float64"; }

std::filesystem::path ExperimentConfig::run_dir() const {
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return std::filesystem::path(root) / run_name;
  return output_dir / run_name;
}

namespace {

template <typename F>
void collect(std::vector<std::string>& problems, F&& parse) {
  try {
    parse();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
}

SweepSpec sweep_from_json(const nlohmann::json& j, std::vector<std::string>& problems) {
  detail::FieldReader r(j, "sweep", problems);
  std::vector<std::string> gates;
  std::vector<std::uint64_t> seeds;
  r.required("gates", gates);
  r.required("seeds", seeds);
  r.finish();
  SweepSpec s;
  for (const auto& g : gates) {
    collect(problems, [&] { s.gates.push_back(parse_gate(g)); });
  }
  s.seeds = seeds;
  if (r.has("gates") && gates.empty()) r.problem("gates", "must list at least one gate");
  if (r.has("seeds") && seeds.empty()) r.problem("seeds", "must list at least one seed");
  return s;
}

GradCheckSpec gradcheck_from_json(const nlohmann::json& j, std::vector<std::string>& problems) {
  detail::FieldReader r(j, "gradcheck", problems);
  GradCheckSpec g;
  r.optional("samples", g.samples);
  r.optional("eps", g.eps);
  r.optional("seed", g.seed);
  r.optional("batch", g.batch);
  r.optional("seq_len", g.seq_len);
  r.optional("tolerance", g.tolerance);
  r.finish();
  if (g.samples < 200) r.problem("samples", "must be at least 200");
  if (g.batch == 0) r.problem("batch", "must be positive");
  if (g.seq_len == 0) r.problem("seq_len", "must be positive");
  if (!(g.tolerance > 0.0)) r.problem("tolerance", "must be positive");
  return g;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  std::vector<std::string> problems;
  detail::FieldReader r(j, "", problems);
  ExperimentConfig c;
  std::string output_dir;
  std::string dtype = "float32";
  r.required("run_name", c.run_name);
  r.required("output_dir", output_dir);
  r.optional("dtype", dtype);
  if (r.has("model")) {
    collect(problems, [&] { c.model = model_config_from_json(r.at("model")); });
  } else {
    r.problem("model", "missing required field");
  }
  if (r.has("train")) {
    collect(problems, [&] { c.train = train_config_from_json(r.at("train")); });
  } else {
    r.problem("train", "missing required field");
  }
  if (r.has("sweep")) c.sweep = sweep_from_json(r.at("sweep"), problems);
  if (r.has("gradcheck")) c.gradcheck = gradcheck_from_json(r.at("gradcheck"), problems);
  r.finish();

  if (dtype == "float32") {
    c.dtype = DType::float32;
  } else if (dtype == "float64") {
    c.dtype = DType::float64;
  } else {
    r.problem("dtype", fmt::format("unknown value '{}' (float32|float64)", dtype));
  }
  if (r.has("run_name") && c.run_name.empty()) r.problem("run_name", "must not be empty");
  if (c.run_name.find('/') != std::string::npos) r.problem("run_name", "must not contain '/'");
  if (r.has("output_dir") && output_dir.empty()) r.problem("output_dir", "must not be empty");
  if (!problems.empty()) throw ConfigError(std::move(problems));

  c.output_dir = output_dir;
  std::filesystem::path corpus(c.train.corpus_path);
  if (corpus.is_relative() && !base_dir.empty()) c.train.corpus_path = (base_dir / corpus).lexically_normal().string();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open config '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({fmt::format("{}: not valid JSON ({})", path.string(), e.what())});
  }
  return experiment_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j{{"run_name", c.run_name},
                   {"output_dir", c.output_dir.string()},
                   {"dtype", to_string(c.dtype)},
                   {"model", to_json(c.model)},
                   {"train", to_json(c.train)}};
  if (c.sweep) {
    std::vector<std::string> gates;
    for (auto g : c.sweep->gates) gates.emplace_back(to_string(g));
    j["sweep"] = {{"gates", gates}, {"seeds", c.sweep->seeds}};
  }
  if (c.gradcheck) {
    const auto& g = *c.gradcheck;
    j["gradcheck"] = {{"samples", g.samples}, {"eps", g.eps},         {"seed", g.seed},
                      {"batch", g.batch},     {"seq_len", g.seq_len}, {"tolerance", g.tolerance}};
  }
  return j;
}

}  // namespace satlab
