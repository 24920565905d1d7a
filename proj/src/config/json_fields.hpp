#pragma once

#include <fmt/format.h>

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace satlab::detail {

/// Strict reader over one JSON object: records missing/ill-typed fields and flags
/// any key that was never read.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string scope, std::vector<std::string>& problems)
      : j_(j), scope_(std::move(scope)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(fmt::format("{}: expected a JSON object", scope_));
  }

  template <typename V>
  void required(const char* key, V& out) {
    read(key, out, true);
  }
  template <typename V>
  void optional(const char* key, V& out) {
    read(key, out, false);
  }

  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }
  const nlohmann::json& at(const char* key) {
    known_.insert(key);
    return j_.at(key);
  }
  void mark(const char* key) { known_.insert(key); }

  std::string path(const char* key) const { return scope_.empty() ? key : scope_ + "." + key; }

  /// Reports every key that no reader asked for.
  void finish() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) problems_.push_back(fmt::format("{}: unknown key", path(it.key().c_str())));
    }
  }

  void problem(const char* key, const std::string& what) {
    problems_.push_back(fmt::format("{}: {}", path(key), what));
  }

 private:
  template <typename V>
  void read(const char* key, V& out, bool is_required) {
    known_.insert(key);
    if (!j_.is_object()) return;
    if (!j_.contains(key)) {
      if (is_required) problems_.push_back(fmt::format("{}: missing required field", path(key)));
      return;
    }
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<V>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.template get<long long>() < 0) {
            throw std::invalid_argument("expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      out = v.template get<V>();
    } catch (const std::exception& e) {
      problems_.push_back(fmt::format("{}: {}", path(key), e.what()));
    }
  }

  const nlohmann::json& j_;
  std::string scope_;
  std::vector<std::string>& problems_;
  std::set<std::string> known_;
};

}  // namespace satlab::detail
