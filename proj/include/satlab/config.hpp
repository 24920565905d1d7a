#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace satlab {

enum class Variant : std::uint8_t { transformer, resformer, satformer };

/// Nonlinearity producing the value-residual mixing coefficient from gate logits.
enum class GateKind : std::uint8_t { relu, sigmoid, softmax, softmax_sigmoid, tanh, identity };

inline constexpr GateKind kAllGates[] = {GateKind::relu,    GateKind::sigmoid,
                                         GateKind::softmax, GateKind::softmax_sigmoid,
                                         GateKind::tanh,    GateKind::identity};

std::string_view to_string(Variant v);
std::string_view to_string(GateKind g);
Variant parse_variant(std::string_view s);
GateKind parse_gate(std::string_view s);

/// Configuration error carrying one message per offending field.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct ModelConfig {
  Variant variant = Variant::satformer;
  GateKind gate_spec = GateKind::relu;
  std::size_t d_model = 64;
  std::size_t n_layers = 6;  // "L"
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;  // "N_kv"
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  bool tie_embeddings = true;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }

  /// Field-by-field validation; throws ConfigError listing every violation.
  void validate() const;

  /// Byte-level laptop configuration used by the smoke experiments.
  static ModelConfig desk();
  /// Reference "Small" shape (d_model 768, 11 layers, 12 heads, d_ff 3072, 32k vocab).
  static ModelConfig small();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Strict JSON: unknown keys and missing required keys are errors. Keys follow the
/// field names d_model, L, n_heads, N_kv, d_ff, vocab_size, max_seq_len, variant,
/// gate_spec, tie_embeddings, seed. Required: variant, d_model, L, n_heads, d_ff.
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);

}  // namespace satlab
