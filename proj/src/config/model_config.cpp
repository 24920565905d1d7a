#include <fmt/format.h>
#include <fmt/ranges.h>

#include "json_fields.hpp"
#include "satlab/config.hpp"

namespace satlab {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::transformer: return "transformer";
    case Variant::resformer: return "resformer";
    case Variant::satformer: return "satformer";
  }
  return "unknown";
}

std::string_view to_string(GateKind g) {
  switch (g) {
    case GateKind::relu: return "relu";
    case GateKind::sigmoid: return "sigmoid";
    case GateKind::softmax: return "softmax";
    case GateKind::softmax_sigmoid: return "softmax_sigmoid";
    case GateKind::tanh: return "tanh";
    case GateKind::identity: return "identity";
  }
  return "unknown";
}

Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::transformer, Variant::resformer, Variant::satformer}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError({fmt::format("variant: unknown value '{}' (transformer|resformer|satformer)", s)});
}

GateKind parse_gate(std::string_view s) {
  for (auto g : kAllGates) {
    if (to_string(g) == s) return g;
  }
  throw ConfigError({fmt::format(
      "gate_spec: unknown value '{}' (relu|sigmoid|softmax|softmax_sigmoid|tanh|identity)", s)});
}

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::invalid_argument(fmt::format("invalid configuration:\n  {}", fmt::join(problems, "\n  "))),
      problems_(std::move(problems)) {}

void ModelConfig::validate() const {
  std::vector<std::string> p;
  if (d_model == 0) p.emplace_back("d_model: must be positive");
  if (n_layers < 2) p.emplace_back("L: must be at least 2 (one source layer plus a consumer)");
  if (n_heads == 0) p.emplace_back("n_heads: must be positive");
  if (n_kv_heads == 0) p.emplace_back("N_kv: must be positive");
  if (d_ff == 0) p.emplace_back("d_ff: must be positive");
  if (vocab_size == 0) p.emplace_back("vocab_size: must be positive");
  if (max_seq_len == 0) p.emplace_back("max_seq_len: must be positive");
  if (n_heads != 0 && d_model % n_heads != 0) {
    p.push_back(fmt::format("d_model: {} is not divisible by n_heads {}", d_model, n_heads));
  }
  if (n_heads != 0 && n_kv_heads != 0 && n_heads % n_kv_heads != 0) {
    p.push_back(fmt::format("N_kv: n_heads {} is not divisible by N_kv {}", n_heads, n_kv_heads));
  }
  if (n_heads != 0 && d_model % n_heads == 0 && (d_model / n_heads) % 2 != 0) {
    p.push_back(fmt::format("d_model: head dimension {} must be even for rotary embedding", d_model / n_heads));
  }
  if (!p.empty()) throw ConfigError(std::move(p));
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.d_model = 768;
  c.n_layers = 11;
  c.n_heads = 12;
  c.n_kv_heads = 12;
  c.d_ff = 3072;
  c.vocab_size = 32000;
  c.max_seq_len = 4096;
  return c;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  detail::FieldReader r(j, "model", problems);
  ModelConfig c;
  std::string variant;
  std::string gate = std::string(to_string(c.gate_spec));
  r.required("variant", variant);
  r.optional("gate_spec", gate);
  r.required("d_model", c.d_model);
  r.required("L", c.n_layers);
  r.required("n_heads", c.n_heads);
  c.n_kv_heads = 0;
  r.optional("N_kv", c.n_kv_heads);
  r.required("d_ff", c.d_ff);
  r.optional("vocab_size", c.vocab_size);
  r.optional("max_seq_len", c.max_seq_len);
  r.optional("tie_embeddings", c.tie_embeddings);
  r.optional("seed", c.seed);
  r.finish();
  if (c.n_kv_heads == 0 && !r.has("N_kv")) c.n_kv_heads = c.n_heads;
  if (!variant.empty()) {
    try {
      c.variant = parse_variant(variant);
    } catch (const ConfigError& e) {
      for (const auto& m : e.problems()) problems.push_back("model." + m);
    }
  }
  try {
    c.gate_spec = parse_gate(gate);
  } catch (const ConfigError& e) {
    for (const auto& m : e.problems()) problems.push_back("model." + m);
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    for (const auto& m : e.problems()) problems.push_back("model." + m);
    throw ConfigError(std::move(problems));
  }
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"variant", to_string(c.variant)},
                        {"gate_spec", to_string(c.gate_spec)},
                        {"d_model", c.d_model},
                        {"L", c.n_layers},
                        {"n_heads", c.n_heads},
                        {"N_kv", c.n_kv_heads},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len},
                        {"tie_embeddings", c.tie_embeddings},
                        {"seed", c.seed}};
}

}  // namespace satlab
