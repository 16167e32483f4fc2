#include "slimfit/optimizer.hpp"

#include <cmath>

namespace slimfit {

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw or sgd)");
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

void OptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup fraction must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
}

double LinearSchedule::at(long step) const {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
  if (total <= warmup) return base;
  const double left = static_cast<double>(total - step) / static_cast<double>(total - warmup);
  return base * std::max(0.0, left);
}

LinearSchedule make_schedule(const OptimizerConfig& config, long total_steps) {
  const long warmup = static_cast<long>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
  return {config.lr, warmup, std::max(total_steps, 1L)};
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(std::vector<Parameter<float>>& params, double lr) {
  if (state_.size() < params.size()) state_.resize(params.size());
  ++global_steps_;
  const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.update_enabled) continue;
    auto& s = state_[i];
    const Vec<float> g = p.grad ? p.grad->data() : Vec<float>::Zero(p.value.numel());
    ++s.steps;
    auto& w = p.value.data();
    // Biases and LayerNorm vectors are not decayed.
    const bool decay = config_.weight_decay > 0.0 && p.value.shape().rank() >= 2;
    if (config_.kind == OptimizerKind::Sgd) {
      if (config_.momentum > 0.0) {
        if (s.m.size() == 0) s.m = Vec<float>::Zero(w.size());
        s.m = static_cast<float>(config_.momentum) * s.m + g;
        w -= static_cast<float>(lr) * s.m;
      } else {
        w -= static_cast<float>(lr) * g;
      }
      if (decay) w *= static_cast<float>(1.0 - lr * config_.weight_decay);
      continue;
    }
    if (s.m.size() == 0) {
      s.m = Vec<float>::Zero(w.size());
      s.v = Vec<float>::Zero(w.size());
    }
    s.m = b1 * s.m + (1.0f - b1) * g;
    s.v = b2 * s.v + (1.0f - b2) * g.cwiseProduct(g);
    const long t = config_.global_step ? global_steps_ : s.steps;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t));
    const auto step_size = static_cast<float>(lr / c1);
    const auto root_c2 = static_cast<float>(std::sqrt(c2));
    const auto eps = static_cast<float>(config_.eps);
    if (decay) w *= static_cast<float>(1.0 - lr * config_.weight_decay);
    w.array() -= step_size * s.m.array() / (s.v.array().sqrt() / root_c2 + eps);
  }
}

}  // namespace slimfit
