#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "slimfit/ops.hpp"

namespace slimfit {

/// Builds a scalar loss from leaf inputs (and any parameters it closes over).
using GradcheckFn =
    std::function<Var<double>(Graph<double>& g, const std::vector<Var<double>>& inputs)>;

/// ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-6)
double gradient_relative_error(const Vec<double>& analytic, const Vec<double>& numeric);

/// Worst tensor-wise relative error between reverse-mode gradients and
/// central finite differences, over every input and every listed parameter.
double check_gradients(const GradcheckFn& fn, std::vector<Tensor<double>> inputs,
                       const std::vector<Parameter<double>*>& params, double step = 1e-4);

/// sum(out * R) for a fixed random R, so every output element gets a distinct
/// upstream gradient.
Var<double> random_projection(const Var<double>& out, std::mt19937_64& rng);

Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double scale = 1.0);

struct GradcheckCase {
  std::string op;
  // Runs one random instance and returns its worst relative error.
  std::function<double(std::mt19937_64& rng)> instance;
};

struct OpCheckReport {
  std::string op;
  int instances = 0;
  double worst_relative_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  double tolerance = 1e-5;
  std::vector<OpCheckReport> ops;
  [[nodiscard]] bool passed() const {
    return std::all_of(ops.begin(), ops.end(), [](const auto& o) { return o.passed; });
  }
};

/// Every differentiable op of the engine plus a small end-to-end transformer.
std::vector<GradcheckCase> default_gradcheck_suite();

GradcheckReport run_gradcheck(const std::vector<GradcheckCase>& suite, int instances_per_op,
                              std::uint64_t seed, double tolerance = 1e-5);

}  // namespace slimfit
