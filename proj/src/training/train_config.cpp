#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "config/json_fields.hpp"
#include "satlab/training.hpp"

namespace satlab {

std::size_t TrainConfig::warmup_steps() const {
  const auto w = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  return std::max<std::size_t>(1, w);
}

void TrainConfig::validate() const {
  std::vector<std::string> p;
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) p.emplace_back("base_lr: must be a positive finite number");
  if (total_steps == 0) p.emplace_back("total_steps: must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) p.emplace_back("warmup_fraction: must lie in (0, 1)");
  if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0)) p.emplace_back("min_lr_ratio: must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) p.emplace_back("weight_decay: must be non-negative");
  if (!(clip_norm > 0.0)) p.emplace_back("clip_norm: must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) p.emplace_back("adam_beta1: must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) p.emplace_back("adam_beta2: must lie in [0, 1)");
  if (!(adam_eps > 0.0)) p.emplace_back("adam_eps: must be positive");
  if (batch_size == 0) p.emplace_back("batch_size: must be positive");
  if (seq_len == 0) p.emplace_back("seq_len: must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) p.emplace_back("val_fraction: must lie in (0, 1)");
  if (eval_max_windows == 0) p.emplace_back("eval_max_windows: must be positive");
  if (!p.empty()) throw ConfigError(std::move(p));
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  detail::FieldReader r(j, "train", problems);
  TrainConfig c;
  r.required("base_lr", c.base_lr);
  r.required("total_steps", c.total_steps);
  r.optional("warmup_fraction", c.warmup_fraction);
  r.optional("min_lr_ratio", c.min_lr_ratio);
  r.optional("weight_decay", c.weight_decay);
  r.optional("clip_norm", c.clip_norm);
  r.optional("adam_beta1", c.adam_beta1);
  r.optional("adam_beta2", c.adam_beta2);
  r.optional("adam_eps", c.adam_eps);
  r.required("batch_size", c.batch_size);
  r.required("seq_len", c.seq_len);
  r.optional("eval_interval", c.eval_interval);
  r.optional("seed", c.seed);
  r.required("corpus_path", c.corpus_path);
  r.optional("val_fraction", c.val_fraction);
  r.optional("eval_max_windows", c.eval_max_windows);
  r.finish();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    for (const auto& m : e.problems()) problems.push_back("train." + m);
    throw ConfigError(std::move(problems));
  }
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"base_lr", c.base_lr},
                        {"total_steps", c.total_steps},
                        {"warmup_fraction", c.warmup_fraction},
                        {"min_lr_ratio", c.min_lr_ratio},
                        {"weight_decay", c.weight_decay},
                        {"clip_norm", c.clip_norm},
                        {"adam_beta1", c.adam_beta1},
                        {"adam_beta2", c.adam_beta2},
                        {"adam_eps", c.adam_eps},
                        {"batch_size", c.batch_size},
                        {"seq_len", c.seq_len},
                        {"eval_interval", c.eval_interval},
                        {"seed", c.seed},
                        {"corpus_path", c.corpus_path},
                        {"val_fraction", c.val_fraction},
                        {"eval_max_windows", c.eval_max_windows}};
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw std::out_of_range(fmt::format("lr_at: step {} is past total_steps {}", step, cfg.total_steps));
  }
  const std::size_t warm = cfg.warmup_steps();
  if (step <= warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const std::size_t span = cfg.total_steps - warm;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

}  // namespace satlab
