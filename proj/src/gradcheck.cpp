#include "slimfit/gradcheck.hpp"

#include "slimfit/model.hpp"

namespace slimfit {

double gradient_relative_error(const Vec<double>& analytic, const Vec<double>& numeric) {
  if (analytic.size() != numeric.size()) throw ShapeError("gradient length mismatch");
  if (analytic.size() == 0) return 0.0;
  const double diff = (analytic - numeric).cwiseAbs().maxCoeff();
  const double denom = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-6});
  return diff / denom;
}

Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<double> t(s);
  for (Index i = 0; i < t.numel(); ++i) t[i] = n(rng);
  return t;
}

Var<double> random_projection(const Var<double>& out, std::mt19937_64& rng) {
  auto& g = out.graph();
  const Var<double> r = g.constant(random_tensor(out.shape(), rng));
  return sum(mul(out, r));
}

double check_gradients(const GradcheckFn& fn, std::vector<Tensor<double>> inputs,
                       const std::vector<Parameter<double>*>& params, double step) {
  for (auto* p : params) p->zero_grad();
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
  const Var<double> loss = fn(g, vars);
  g.backward(loss);

  auto eval = [&]() {
    Graph<double> ng(false);
    std::vector<Var<double>> nv;
    for (const auto& t : inputs) nv.push_back(ng.leaf(t, false));
    return fn(ng, nv).value()[0];
  };
  auto numeric = [&](Tensor<double>& t) {
    Vec<double> out(t.numel());
    for (Index i = 0; i < t.numel(); ++i) {
      const double keep = t[i];
      auto at = [&](double offset) {
        t[i] = keep + offset;
        return eval();
      };
      // Fourth-order central stencil; the plain two-point rule is too coarse
      // near LayerNorm's high-curvature points.
      const double d1 = at(step) - at(-step), d2 = at(2 * step) - at(-2 * step);
      t[i] = keep;
      out[i] = (8 * d1 - d2) / (12 * step);
    }
    return out;
  };

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = g.grad(vars[k]);
    const Vec<double> a = analytic ? analytic->data() : Vec<double>::Zero(inputs[k].numel());
    worst = std::max(worst, gradient_relative_error(a, numeric(inputs[k])));
  }
  for (auto* p : params) {
    if (!p->update_enabled) continue;
    const Vec<double> a = p->grad ? p->grad->data() : Vec<double>::Zero(p->value.numel());
    worst = std::max(worst, gradient_relative_error(a, numeric(p->value)));
  }
  return worst;
}

namespace {

Parameter<double> make_param(const std::string& name, const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  return Parameter<double>{name, random_tensor(s, rng, scale), std::nullopt, 0, true};
}

Index dim(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

// Unary op on one random input, loss = sum(op(x) * R).
GradcheckCase unary(std::string name, std::function<Shape(std::mt19937_64&)> shape,
                    std::function<Var<double>(const Var<double>&)> op, double scale = 1.0) {
  return {name, [shape, op, scale](std::mt19937_64& rng) {
            const Shape s = shape(rng);
            const std::uint64_t proj_seed = rng();
            return check_gradients(
                [&](Graph<double>&, const std::vector<Var<double>>& in) {
                  std::mt19937_64 pr(proj_seed);
                  return random_projection(op(in[0]), pr);
                },
                {random_tensor(s, rng, scale)}, {});
          }};
}

Shape rank3(std::mt19937_64& rng) { return Shape{dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)}; }

}  // namespace

std::vector<GradcheckCase> default_gradcheck_suite() {
  std::vector<GradcheckCase> suite;

  suite.push_back({"matmul", [](std::mt19937_64& rng) {
                     const Index m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           std::mt19937_64 pr(ps);
                           return random_projection(matmul(in[0], in[1]), pr);
                         },
                         {random_tensor(Shape{m, k}, rng), random_tensor(Shape{k, n}, rng)}, {});
                   }});
  suite.push_back({"matmul_batched", [](std::mt19937_64& rng) {
                     const Index b = dim(rng, 1, 2), h = dim(rng, 1, 3), m = dim(rng, 1, 3), k = dim(rng, 1, 3),
                                 n = dim(rng, 1, 3);
                     const bool broadcast = rng() % 2 == 0;
                     const Shape sb = broadcast ? Shape{k, n} : Shape{b, h, k, n};
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           std::mt19937_64 pr(ps);
                           return random_projection(matmul(in[0], in[1]), pr);
                         },
                         {random_tensor(Shape{b, h, m, k}, rng), random_tensor(sb, rng)}, {});
                   }});
  suite.push_back({"add", [](std::mt19937_64& rng) {
                     const Shape s = rank3(rng);
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           std::mt19937_64 pr(ps);
                           return random_projection(add(in[0], in[1]), pr);
                         },
                         {random_tensor(s, rng), random_tensor(s, rng)}, {});
                   }});
  suite.push_back({"mul", [](std::mt19937_64& rng) {
                     const Shape s = rank3(rng);
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           std::mt19937_64 pr(ps);
                           return random_projection(mul(in[0], in[1]), pr);
                         },
                         {random_tensor(s, rng), random_tensor(s, rng)}, {});
                   }});
  suite.push_back(unary("scale", rank3, [](const Var<double>& x) { return scale(x, -1.7); }));
  suite.push_back(unary("sum", rank3, [](const Var<double>& x) { return scale(sum(x), 0.3); }));
  suite.push_back(unary("reshape", [](std::mt19937_64& rng) { return Shape{dim(rng, 1, 3), 6}; },
                        [](const Var<double>& x) { return reshape(x, Shape{x.shape()[0], 2, 3}); }));
  suite.push_back(unary("transpose", rank3, [](const Var<double>& x) { return transpose(x); }));
  suite.push_back(unary("split_heads", [](std::mt19937_64& rng) { return Shape{dim(rng, 1, 2), dim(rng, 1, 3), 6}; },
                        [](const Var<double>& x) { return split_heads(x, 3); }));
  suite.push_back(unary("merge_heads",
                        [](std::mt19937_64& rng) { return Shape{dim(rng, 1, 2), 2, dim(rng, 1, 3), 3}; },
                        [](const Var<double>& x) { return merge_heads(x); }));
  suite.push_back(unary("select_first", rank3, [](const Var<double>& x) { return select_first(x); }));
  suite.push_back(unary("gelu", rank3, [](const Var<double>& x) { return gelu(x); }, 2.0));
  suite.push_back(unary("tanh", rank3, [](const Var<double>& x) { return tanh(x); }));
  suite.push_back(unary("softmax", rank3, [](const Var<double>& x) { return softmax(x, -1); }, 2.0));
  suite.push_back(unary("softmax_axis0", rank3, [](const Var<double>& x) { return softmax(x, 0); }, 2.0));

  suite.push_back({"layernorm", [](std::mt19937_64& rng) {
                     const Index rows = dim(rng, 1, 4), h = dim(rng, 2, 8);
                     auto gamma = make_param("gamma", Shape{h}, rng);
                     auto beta = make_param("beta", Shape{h}, rng);
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           std::mt19937_64 pr(ps);
                           return random_projection(layernorm(in[0], gamma, beta, 1e-5), pr);
                         },
                         {random_tensor(Shape{rows, h}, rng, 2.0)}, {&gamma, &beta});
                   }});
  suite.push_back({"dense", [](std::mt19937_64& rng) {
                     const Index in = dim(rng, 1, 5), out = dim(rng, 1, 5);
                     auto w = make_param("w", Shape{in, out}, rng);
                     auto b = make_param("b", Shape{out}, rng);
                     const std::uint64_t ps = rng();
                     const Shape xs = rank3(rng);
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& x) {
                           std::mt19937_64 pr(ps);
                           return random_projection(dense(x[0], w, &b), pr);
                         },
                         {random_tensor(Shape{xs[0], xs[1], in}, rng)}, {&w, &b});
                   }});
  suite.push_back({"embedding", [](std::mt19937_64& rng) {
                     const Index vocab = dim(rng, 2, 6), h = dim(rng, 1, 4), b = dim(rng, 1, 3), t = dim(rng, 1, 4);
                     auto table = make_param("table", Shape{vocab, h}, rng);
                     std::vector<std::int32_t> ids(static_cast<std::size_t>(b * t));
                     for (auto& id : ids) id = static_cast<std::int32_t>(dim(rng, 0, vocab - 1));
                     const std::uint64_t ps = rng();
                     return check_gradients(
                         [&](Graph<double>& g, const std::vector<Var<double>>&) {
                           std::mt19937_64 pr(ps);
                           return random_projection(embedding(g, std::span<const std::int32_t>(ids), Shape{b, t}, table), pr);
                         },
                         {}, {&table});
                   }});
  suite.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                     const Index b = dim(rng, 1, 4), c = dim(rng, 2, 5);
                     std::vector<std::int32_t> labels(static_cast<std::size_t>(b));
                     for (auto& l : labels) l = static_cast<std::int32_t>(dim(rng, 0, c - 1));
                     return check_gradients(
                         [&](Graph<double>&, const std::vector<Var<double>>& in) {
                           return cross_entropy(in[0], std::span<const std::int32_t>(labels));
                         },
                         {random_tensor(Shape{b, c}, rng, 2.0)}, {});
                   }});
  suite.push_back({"transformer", [](std::mt19937_64& rng) {
                     ModelConfig cfg;
                     cfg.layers = 1;
                     cfg.hidden = 4;
                     cfg.heads = 2;
                     cfg.max_seq = 3;
                     cfg.vocab = 5;
                     cfg.num_classes = 3;
                     cfg.pre_norm = rng() % 2 == 0;
                     auto model = Model<double>::build(cfg, rng());
                     // Larger weights than the default init so every path carries signal.
                     for (auto& p : model.parameters())
                       if (p.name.ends_with("weight") && p.value.shape().rank() == 2) p.value.data() *= 25.0;
                     Batch batch{2, 3, {}, {}};
                     for (int i = 0; i < 6; ++i) batch.token_ids.push_back(static_cast<std::int32_t>(dim(rng, 0, 4)));
                     batch.labels = {static_cast<std::int32_t>(dim(rng, 0, 2)), static_cast<std::int32_t>(dim(rng, 0, 2))};
                     std::vector<Parameter<double>*> params;
                     for (auto& p : model.parameters()) params.push_back(&p);
                     return check_gradients(
                         [&](Graph<double>& g, const std::vector<Var<double>>&) {
                           return model.loss(g, model.forward(g, batch), batch);
                         },
                         {}, params);
                   }});
  return suite;
}

GradcheckReport run_gradcheck(const std::vector<GradcheckCase>& suite, int instances_per_op, std::uint64_t seed,
                              double tolerance) {
  GradcheckReport report;
  report.tolerance = tolerance;
  std::mt19937_64 rng(seed);
  for (const auto& c : suite) {
    OpCheckReport r;
    r.op = c.op;
    for (int i = 0; i < instances_per_op; ++i) {
      const double e = c.instance(rng);
      r.worst_relative_error = std::max(r.worst_relative_error, std::isfinite(e) ? e : 1e300);
      ++r.instances;
    }
    r.passed = r.worst_relative_error < tolerance;
    report.ops.push_back(r);
  }
  return report;
}

}  // namespace slimfit
