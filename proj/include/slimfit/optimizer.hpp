#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slimfit/model.hpp"

namespace slimfit {

enum class OptimizerKind : std::uint8_t { Sgd, AdamW };

OptimizerKind parse_optimizer(const std::string& s);
const char* optimizer_name(OptimizerKind k);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double momentum = 0.0;  // SGD only
  // Bias-correct with the global iteration count instead of the layer's own
  // number of updates.
  bool global_step = false;

  void validate() const;
};

/// Linear warmup from 0 to `base` over `warmup` steps, then linear decay to 0
/// at `total`.
struct LinearSchedule {
  double base = 0.0;
  long warmup = 0;
  long total = 1;

  [[nodiscard]] double at(long step) const;
};

LinearSchedule make_schedule(const OptimizerConfig& config, long total_steps);

/// Updates only parameters whose layer is update-enabled. A frozen parameter's
/// moments and step counter are left untouched and no weight decay applies.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  void step(std::vector<Parameter<float>>& params, double lr);

  [[nodiscard]] const OptimizerConfig& config() const { return config_; }
  [[nodiscard]] long steps_taken(std::size_t param_index) const {
    return param_index < state_.size() ? state_[param_index].steps : 0;
  }
  [[nodiscard]] bool has_moments(std::size_t param_index) const {
    return param_index < state_.size() && state_[param_index].m.size() > 0;
  }

 private:
  struct State {
    Vec<float> m, v;
    long steps = 0;
  };
  OptimizerConfig config_;
  std::vector<State> state_;
  long global_steps_ = 0;
};

}  // namespace slimfit
