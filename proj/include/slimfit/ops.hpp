#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slimfit/graph.hpp"

namespace slimfit {

namespace detail {

template <typename Scalar>
Tensor<Scalar> need(const SavedPtr<Scalar>& s, const char* what) {
  if (!s) throw InternalError(std::string("missing saved activation: ") + what);
  return s->get();
}

struct BatchedDims {
  Index batch = 1, batch_a = 1, batch_b = 1, m = 0, k = 0, n = 0;
  Shape out;
};

inline BatchedDims matmul_dims(const Shape& a, const Shape& b) {
  auto fail = [&] { return ShapeError("matmul shape mismatch: " + a.str() + " x " + b.str()); };
  if (a.rank() < 2 || b.rank() < 2) throw fail();
  BatchedDims d;
  d.m = a[a.rank() - 2];
  d.k = a[a.rank() - 1];
  d.n = b[b.rank() - 1];
  if (b[b.rank() - 2] != d.k) throw fail();
  d.batch_a = a.numel() / (d.m * d.k);
  d.batch_b = b.numel() / (d.k * d.n);
  std::vector<Index> lead;
  if (a.rank() == b.rank()) {
    for (std::size_t i = 0; i + 2 < a.rank(); ++i)
      if (a[i] != b[i]) throw fail();
    lead.assign(a.dims().begin(), a.dims().end() - 2);
  } else if (b.rank() == 2) {
    lead.assign(a.dims().begin(), a.dims().end() - 2);
  } else if (a.rank() == 2) {
    lead.assign(b.dims().begin(), b.dims().end() - 2);
  } else {
    throw fail();
  }
  d.batch = std::max(d.batch_a, d.batch_b);
  lead.push_back(d.m);
  lead.push_back(d.n);
  d.out = Shape(std::move(lead));
  return d;
}

}  // namespace detail

/// Batched matrix product over the last two axes. Leading axes must match, or
/// one operand may be a plain matrix shared across the batch. Both inputs are
/// cached under `save_a` / `save_b`.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b, const SaveOptions& save_a = {},
                   const SaveOptions& save_b = {}) {
  const auto d = detail::matmul_dims(a.shape(), b.shape());
  Tensor<Scalar> out(d.out);
  const Scalar* pa = a.value().data().data();
  const Scalar* pb = b.value().data().data();
  Scalar* po = out.data().data();
  for (Index i = 0; i < d.batch; ++i) {
    ConstMatMap<Scalar> am(pa + (d.batch_a == 1 ? 0 : i) * d.m * d.k, d.m, d.k);
    ConstMatMap<Scalar> bm(pb + (d.batch_b == 1 ? 0 : i) * d.k * d.n, d.k, d.n);
    MatMap<Scalar>(po + i * d.m * d.n, d.m, d.n).noalias() = am * bm;
  }
  auto& g = a.graph();
  std::vector<SavedPtr<Scalar>> saved;
  if (g.recording()) saved = {g.save(a, save_a), g.save(b, save_b)};
  auto sa = g.recording() ? saved[0] : nullptr;
  auto sb = g.recording() ? saved[1] : nullptr;
  return g.record(OpKind::MatMul, {a, b}, std::move(out), saved, false, false,
                  [d, sa, sb, shape_a = a.shape(), shape_b = b.shape()](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    const Scalar* pg = gout.data().data();
                    if (sink.wants(0)) {
                      const Tensor<Scalar> bv = detail::need(sb, "matmul rhs");
                      Tensor<Scalar> ga(shape_a);
                      ga.data().setZero();
                      for (Index i = 0; i < d.batch; ++i) {
                        ConstMatMap<Scalar> gm(pg + i * d.m * d.n, d.m, d.n);
                        ConstMatMap<Scalar> bm(bv.data().data() + (d.batch_b == 1 ? 0 : i) * d.k * d.n, d.k, d.n);
                        MatMap<Scalar>(ga.data().data() + (d.batch_a == 1 ? 0 : i) * d.m * d.k, d.m, d.k).noalias() +=
                            gm * bm.transpose();
                      }
                      sink.add(0, std::move(ga));
                    }
                    if (sink.wants(1)) {
                      const Tensor<Scalar> av = detail::need(sa, "matmul lhs");
                      Tensor<Scalar> gb(shape_b);
                      gb.data().setZero();
                      for (Index i = 0; i < d.batch; ++i) {
                        ConstMatMap<Scalar> gm(pg + i * d.m * d.n, d.m, d.n);
                        ConstMatMap<Scalar> am(av.data().data() + (d.batch_a == 1 ? 0 : i) * d.m * d.k, d.m, d.k);
                        MatMap<Scalar>(gb.data().data() + (d.batch_b == 1 ? 0 : i) * d.k * d.n, d.k, d.n).noalias() +=
                            am.transpose() * gm;
                      }
                      sink.add(1, std::move(gb));
                    }
                  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add shape mismatch: " + a.shape().str() + " + " + b.shape().str());
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  return a.graph().record(OpKind::Add, {a, b}, std::move(out), {}, false, false,
                          [](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, gout);
                            sink.add(1, gout);
                          });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch: " + a.shape().str() + " * " + b.shape().str());
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  auto& g = a.graph();
  SavedPtr<Scalar> sa = g.save(a, {}), sb = g.save(b, {});
  return g.record(OpKind::Mul, {a, b}, std::move(out), {sa, sb}, false, false,
                  [sa, sb](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    if (sink.wants(0))
                      sink.add(0, Tensor<Scalar>(gout.shape(), gout.data().cwiseProduct(detail::need(sb, "mul").data())));
                    if (sink.wants(1))
                      sink.add(1, Tensor<Scalar>(gout.shape(), gout.data().cwiseProduct(detail::need(sa, "mul").data())));
                  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tensor<Scalar> out(x.shape(), x.value().data() * factor);
  return x.graph().record(OpKind::Scale, {x}, std::move(out), {}, false, false,
                          [factor](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, Tensor<Scalar>(gout.shape(), gout.data() * factor));
                          });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out(Shape{1}, {x.value().data().sum()});
  const Shape s = x.shape();
  return x.graph().record(OpKind::Sum, {x}, std::move(out), {}, false, false,
                          [s](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, Tensor<Scalar>::constant(s, gout[0]));
                          });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape s) {
  Tensor<Scalar> out = x.value().reshaped(s);
  const Shape in = x.shape();
  return x.graph().record(OpKind::Reshape, {x}, std::move(out), {}, false, false,
                          [in](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, gout.reshaped(in));
                          });
}

namespace detail {

// Permutes [A, B, C, D] -> [A, C, B, D].
template <typename Scalar>
Tensor<Scalar> swap_middle(const Tensor<Scalar>& x, Index a, Index b, Index c, Index d) {
  Tensor<Scalar> out(Shape{a, c, b, d});
  const Scalar* src = x.data().data();
  Scalar* dst = out.data().data();
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < b; ++j)
      for (Index k = 0; k < c; ++k)
        std::copy_n(src + ((i * b + j) * c + k) * d, d, dst + ((i * c + k) * b + j) * d);
  return out;
}

}  // namespace detail

/// Swaps the last two axes.
template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + s.str());
  const Index r = s[s.rank() - 2], c = s[s.rank() - 1], batch = s.numel() / (r * c);
  auto dims = s.dims();
  std::swap(dims[dims.size() - 1], dims[dims.size() - 2]);
  Tensor<Scalar> out = detail::swap_middle(x.value(), batch, r, c, Index{1}).reshaped(Shape(dims));
  return x.graph().record(OpKind::Transpose, {x}, std::move(out), {}, false, false,
                          [s, batch, r, c](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, detail::swap_middle(gout, batch, c, r, Index{1}).reshaped(s));
                          });
}

/// [B, T, H] -> [B, heads, T, H/heads]
template <typename Scalar>
Var<Scalar> split_heads(const Var<Scalar>& x, Index heads) {
  const Shape& s = x.shape();
  if (s.rank() != 3 || s[2] % heads != 0) throw ShapeError("split_heads cannot split " + s.str());
  const Index b = s[0], t = s[1], dh = s[2] / heads;
  Tensor<Scalar> out = detail::swap_middle(x.value(), b, t, heads, dh);
  return x.graph().record(OpKind::SplitHeads, {x}, std::move(out), {}, false, false,
                          [s, b, t, heads, dh](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, detail::swap_middle(gout, b, heads, t, dh).reshaped(s));
                          });
}

/// [B, heads, T, dh] -> [B, T, heads*dh]
template <typename Scalar>
Var<Scalar> merge_heads(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.rank() != 4) throw ShapeError("merge_heads expects rank 4, got " + s.str());
  const Index b = s[0], heads = s[1], t = s[2], dh = s[3];
  Tensor<Scalar> out = detail::swap_middle(x.value(), b, heads, t, dh).reshaped(Shape{b, t, heads * dh});
  return x.graph().record(OpKind::MergeHeads, {x}, std::move(out), {}, false, false,
                          [s, b, heads, t, dh](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            sink.add(0, detail::swap_middle(gout, b, t, heads, dh).reshaped(s));
                          });
}

/// [B, T, H] -> [B, H], the first position of every sequence.
template <typename Scalar>
Var<Scalar> select_first(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.rank() != 3) throw ShapeError("select_first expects [B,T,H], got " + s.str());
  const Index b = s[0], t = s[1], h = s[2];
  Tensor<Scalar> out(Shape{b, h});
  for (Index i = 0; i < b; ++i) out.data().segment(i * h, h) = x.value().data().segment(i * t * h, h);
  return x.graph().record(OpKind::SelectFirst, {x}, std::move(out), {}, false, false,
                          [s, b, t, h](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                            Tensor<Scalar> gx(s);
                            for (Index i = 0; i < b; ++i) gx.data().segment(i * t * h, h) = gout.data().segment(i * h, h);
                            sink.add(0, std::move(gx));
                          });
}

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar k = static_cast<Scalar>(0.044715);
  return Scalar{0.5} * x * (Scalar{1} + std::tanh(c * (x + k * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  constexpr Scalar c = static_cast<Scalar>(0.7978845608028654);
  constexpr Scalar k = static_cast<Scalar>(0.044715);
  const Scalar t = std::tanh(c * (x + k * x * x * x));
  return Scalar{0.5} * (Scalar{1} + t) + Scalar{0.5} * x * (Scalar{1} - t * t) * c * (Scalar{1} + 3 * k * x * x);
}

namespace detail {

// Vectorized forms of gelu_value / gelu_derivative.
template <typename Array>
auto gelu_array(const Array& x) {
  using Scalar = typename Array::Scalar;
  const Scalar c = static_cast<Scalar>(0.7978845608028654), k = static_cast<Scalar>(0.044715);
  const auto t = (c * (x + k * x.cube())).tanh().eval();
  return (Scalar{0.5} * x * (Scalar{1} + t)).eval();
}

template <typename Array>
auto gelu_derivative_array(const Array& x) {
  using Scalar = typename Array::Scalar;
  const Scalar c = static_cast<Scalar>(0.7978845608028654), k = static_cast<Scalar>(0.044715);
  const auto t = (c * (x + k * x.cube())).tanh().eval();
  return (Scalar{0.5} * (Scalar{1} + t) + Scalar{0.5} * x * (Scalar{1} - t.square()) * c * (Scalar{1} + 3 * k * x.square()))
      .eval();
}

}  // namespace detail

/// Tanh-approximated GELU; caches its input under `save`.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x, const SaveOptions& save = {}) {
  Tensor<Scalar> out(x.shape(), detail::gelu_array(x.value().data().array()).matrix());
  auto& g = x.graph();
  SavedPtr<Scalar> s = g.save(x, save);
  return g.record(OpKind::Gelu, {x}, std::move(out), {s}, false, false,
                  [s](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    const Tensor<Scalar> in = detail::need(s, "gelu input");
                    sink.add(0, Tensor<Scalar>(gout.shape(),
                                               (gout.data().array() * detail::gelu_derivative_array(in.data().array()))
                                                   .matrix()));
                  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x, const SaveOptions& save = {}) {
  Tensor<Scalar> out(x.shape(), x.value().data().array().tanh().matrix());
  auto& g = x.graph();
  SavedPtr<Scalar> s = g.save_tensor(out, save);
  return g.record(OpKind::Tanh, {x}, std::move(out), {s}, false, false,
                  [s](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    const Tensor<Scalar> y = detail::need(s, "tanh output");
                    sink.add(0, Tensor<Scalar>(gout.shape(),
                                               gout.data().cwiseProduct((Scalar{1} - y.data().array().square()).matrix())));
                  });
}

namespace detail {

struct AxisLayout {
  Index outer, len, inner;
};

inline AxisLayout axis_layout(const Shape& s, int axis) {
  const int rank = static_cast<int>(s.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax axis out of range for " + s.str());
  AxisLayout l{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) l.outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) l.inner *= s[static_cast<std::size_t>(i)];
  return l;
}

}  // namespace detail

/// Softmax along `axis`. The output (not the input) is cached; pass
/// `save.share = true` so a consuming matmul can reuse the same buffer.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, int axis = -1, SaveOptions save = {}) {
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor<Scalar> out(x.shape());
  const Scalar* src = x.value().data().data();
  Scalar* dst = out.data().data();
  for (Index o = 0; o < l.outer; ++o)
    for (Index i = 0; i < l.inner; ++i) {
      const Index base = o * l.len * l.inner + i;
      Scalar mx = src[base];
      for (Index j = 1; j < l.len; ++j) mx = std::max(mx, src[base + j * l.inner]);
      Scalar total = 0;
      for (Index j = 0; j < l.len; ++j) {
        const Scalar e = std::exp(src[base + j * l.inner] - mx);
        dst[base + j * l.inner] = e;
        total += e;
      }
      for (Index j = 0; j < l.len; ++j) dst[base + j * l.inner] /= total;
    }
  auto& g = x.graph();
  // The cached copy is keyed to this node so later consumers can share it.
  SavedPtr<Scalar> s;
  auto result = g.record(OpKind::Softmax, {x}, std::move(out), {}, false, false, nullptr);
  if (!g.recording()) return result;
  s = g.save(result, save);
  g.attach(result, {s}, [s, l](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
    const Tensor<Scalar> y = detail::need(s, "softmax output");
    Tensor<Scalar> gx(gout.shape());
    for (Index o = 0; o < l.outer; ++o)
      for (Index i = 0; i < l.inner; ++i) {
        const Index base = o * l.len * l.inner + i;
        Scalar dot = 0;
        for (Index j = 0; j < l.len; ++j) dot += gout[base + j * l.inner] * y[base + j * l.inner];
        for (Index j = 0; j < l.len; ++j)
          gx[base + j * l.inner] = y[base + j * l.inner] * (gout[base + j * l.inner] - dot);
      }
    sink.add(0, std::move(gx));
  });
  return result;
}

template <typename Scalar>
struct LayerNormGrads {
  Tensor<Scalar> input;
  std::optional<Tensor<Scalar>> gamma;
  std::optional<Tensor<Scalar>> beta;
};

/// LayerNorm backward over the last axis from the standardized input x~ and
/// the per-row 1/sqrt(Var + eps):
///   g  = gamma * dy * rstd / H
///   dx = H*g - sum(g) - x~ * sum(g * x~)
/// Parameter gradients (gamma: sum x~*dy, beta: sum dy) are skipped when frozen.
template <typename Scalar>
LayerNormGrads<Scalar> layernorm_backward(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& normalized,
                                          const Vec<Scalar>& rstd, const Tensor<Scalar>& gamma, bool frozen) {
  if (grad_out.shape() != normalized.shape())
    throw ShapeError("layernorm_backward: grad " + grad_out.shape().str() + " vs saved " + normalized.shape().str());
  const Index rows = grad_out.shape().rows(), h = grad_out.shape().back();
  if (gamma.numel() != h || rstd.size() != rows) throw ShapeError("layernorm_backward: parameter size mismatch");
  const auto dy = grad_out.mat();
  const auto xt = normalized.mat();
  const auto gam = gamma.data().transpose();
  LayerNormGrads<Scalar> r{Tensor<Scalar>(grad_out.shape()), std::nullopt, std::nullopt};
  auto dx = r.input.mat();
  const Scalar hs = static_cast<Scalar>(h);
  for (Index i = 0; i < rows; ++i) {
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> g = dy.row(i).cwiseProduct(gam) * (rstd[i] / hs);
    const Scalar sum_g = g.sum();
    const Scalar sum_gx = g.cwiseProduct(xt.row(i)).sum();
    dx.row(i) = (hs * g).array() - sum_g - xt.row(i).array() * sum_gx;
  }
  if (!frozen) {
    r.gamma = Tensor<Scalar>(gamma.shape(), dy.cwiseProduct(xt).colwise().sum().transpose());
    r.beta = Tensor<Scalar>(gamma.shape(), dy.colwise().sum().transpose());
  }
  return r;
}

/// Caching policy for a LayerNorm: x~ is kept exactly while the layer is
/// active and stored under `frozen_codec` while it is frozen.
struct LayerNormSave {
  CodecSpec frozen_codec = CodecSpec::raw();
  int layer_id = -1;
  std::string label;
};

/// LayerNorm over the last axis with population variance.
template <typename Scalar>
Var<Scalar> layernorm(const Var<Scalar>& x, Parameter<Scalar>& gamma, Parameter<Scalar>& beta, Scalar eps,
                      const LayerNormSave& opt = {}) {
  const Index h = x.shape().back(), rows = x.shape().rows();
  if (gamma.value.numel() != h || beta.value.numel() != h)
    throw ShapeError("layernorm: last axis " + std::to_string(h) + " does not match gamma/beta length " +
                     std::to_string(gamma.value.numel()));
  Tensor<Scalar> normalized(x.shape());
  Tensor<Scalar> out(x.shape());
  Vec<Scalar> rstd(rows);
  const auto xm = x.value().mat();
  auto nm = normalized.mat();
  const auto gam = gamma.value.data().transpose();
  const auto bet = beta.value.data().transpose();
  for (Index i = 0; i < rows; ++i) {
    const Scalar mean = xm.row(i).mean();
    const Scalar var = (xm.row(i).array() - mean).square().mean();
    rstd[i] = Scalar{1} / std::sqrt(var + eps);
    nm.row(i) = (xm.row(i).array() - mean) * rstd[i];
  }
  out.mat() = (nm.array().rowwise() * gam.array()).rowwise() + bet.array();

  auto& g = x.graph();
  const bool active = gamma.update_enabled;
  SaveOptions save{active ? CodecSpec::raw() : opt.frozen_codec, ActivationKind::SemiStatic, opt.layer_id,
                   opt.label, false};
  SavedPtr<Scalar> sx = g.save_tensor(normalized, save);
  SaveOptions stats{CodecSpec::raw(), ActivationKind::SemiStatic, opt.layer_id, opt.label + ".stats", false};
  SavedPtr<Scalar> sr = g.save_tensor(Tensor<Scalar>(Shape{rows}, rstd), stats);
  Parameter<Scalar>* gp = &gamma;
  Parameter<Scalar>* bp = &beta;
  return g.record(OpKind::LayerNorm, {x}, std::move(out), {sx, sr}, active, active,
                  [sx, sr, gp, bp, active](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    const Tensor<Scalar> xt = detail::need(sx, "layernorm x~");
                    const Tensor<Scalar> rs = detail::need(sr, "layernorm stats");
                    auto r = layernorm_backward(gout, xt, rs.data(), gp->value, !active);
                    if (active) {
                      gp->accumulate_grad(r.gamma->data());
                      bp->accumulate_grad(r.beta->data());
                    }
                    sink.add(0, std::move(r.input));
                  });
}

/// y = x W + b over the last axis. The input is cached only while the layer
/// is update-enabled; a frozen dense layer back-propagates through W alone.
template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& x, Parameter<Scalar>& weight, Parameter<Scalar>* bias,
                  const SaveOptions& save = {}) {
  const Shape& ws = weight.value.shape();
  if (ws.rank() != 2 || ws[0] != x.shape().back())
    throw ShapeError("dense shape mismatch: input " + x.shape().str() + " weight " + ws.str());
  const Index in = ws[0], outd = ws[1], rows = x.shape().rows();
  auto dims = x.shape().dims();
  dims.back() = outd;
  Tensor<Scalar> out{Shape(dims)};
  auto om = out.mat();
  om.noalias() = x.value().mat() * weight.value.mat();
  if (bias) {
    if (bias->value.numel() != outd) throw ShapeError("dense bias length mismatch");
    om.rowwise() += bias->value.data().transpose();
  }
  auto& g = x.graph();
  const bool active = weight.update_enabled;
  SavedPtr<Scalar> sx;
  if (active) {
    SaveOptions opt = save;
    opt.kind = ActivationKind::Dynamic;
    sx = g.save(x, opt);
  }
  Parameter<Scalar>* wp = &weight;
  return g.record(OpKind::Dense, {x}, std::move(out), {sx}, active, active,
                  [sx, wp, bias, active, in, outd, rows](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    const auto gm = gout.mat();
                    if (active) {
                      const Tensor<Scalar> xv = detail::need(sx, "dense input");
                      RowMat<Scalar> gw = xv.mat().transpose() * gm;
                      wp->accumulate_grad(Eigen::Map<const Vec<Scalar>>(gw.data(), in * outd));
                      if (bias) bias->accumulate_grad(gm.colwise().sum().transpose());
                    }
                    if (sink.wants(0)) {
                      auto dims = gout.shape().dims();
                      dims.back() = in;
                      Tensor<Scalar> gx{Shape(dims)};
                      gx.mat().noalias() = gm * wp->value.mat().transpose();
                      sink.add(0, std::move(gx));
                    }
                    (void)rows;
                  });
}

/// Row lookup into `table` ([vocab, H]) for every id; output shape is
/// ids_shape + [H]. Ids are cached while the table is update-enabled.
template <typename Scalar>
Var<Scalar> embedding(Graph<Scalar>& g, std::span<const std::int32_t> ids, const Shape& ids_shape,
                      Parameter<Scalar>& table, const SaveOptions& save = {}) {
  const Shape& ts = table.value.shape();
  if (ts.rank() != 2) throw ShapeError("embedding table must be 2-D, got " + ts.str());
  if (static_cast<Index>(ids.size()) != ids_shape.numel()) throw ShapeError("embedding ids do not match their shape");
  const Index vocab = ts[0], h = ts[1];
  auto dims = ids_shape.dims();
  dims.push_back(h);
  Tensor<Scalar> out{Shape(dims)};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw ShapeError("embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) + " rows");
    out.data().segment(static_cast<Index>(i) * h, h) = table.value.data().segment(ids[i] * h, h);
  }
  const bool active = table.update_enabled;
  SavedPtr<Scalar> sid;
  if (active) {
    SaveOptions opt = save;
    opt.kind = ActivationKind::Dynamic;
    sid = g.save_ids(std::vector<std::int32_t>(ids.begin(), ids.end()), opt);
  }
  Parameter<Scalar>* tp = &table;
  return g.record(OpKind::Embedding, {}, std::move(out), {sid}, active, active,
                  [sid, tp, h](const Tensor<Scalar>& gout, GradSink<Scalar>&) {
                    if (!sid) throw InternalError("missing saved activation: embedding ids");
                    Vec<Scalar> grad = Vec<Scalar>::Zero(tp->value.numel());
                    for (std::size_t i = 0; i < sid->ids.size(); ++i)
                      grad.segment(sid->ids[i] * h, h) += gout.data().segment(static_cast<Index>(i) * h, h);
                    tp->accumulate_grad(grad);
                  });
}

/// Mean softmax cross-entropy of [B, C] logits against integer labels.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const std::int32_t> labels,
                          const SaveOptions& save = {}) {
  const Shape& s = logits.shape();
  if (s.rank() != 2 || s[0] != static_cast<Index>(labels.size()))
    throw ShapeError("cross_entropy expects [B,C] logits with B labels, got " + s.str());
  const Index b = s[0], c = s[1];
  Tensor<Scalar> probs(s);
  Scalar loss = 0;
  const auto lm = logits.value().mat();
  auto pm = probs.mat();
  for (Index i = 0; i < b; ++i) {
    const auto label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= c) throw ShapeError("label " + std::to_string(label) + " outside " + std::to_string(c) + " classes");
    const Scalar mx = lm.row(i).maxCoeff();
    pm.row(i) = (lm.row(i).array() - mx).exp();
    const Scalar z = pm.row(i).sum();
    pm.row(i) /= z;
    loss += std::log(z) + mx - lm(i, label);
  }
  loss /= static_cast<Scalar>(b);
  auto& g = logits.graph();
  SaveOptions ps = save;
  ps.label = save.label.empty() ? "loss.probs" : save.label + ".probs";
  SavedPtr<Scalar> sp = g.save_tensor(probs, ps);
  SaveOptions ls = save;
  ls.label = save.label.empty() ? "loss.labels" : save.label + ".labels";
  SavedPtr<Scalar> sl = g.save_ids(std::vector<std::int32_t>(labels.begin(), labels.end()), ls);
  return g.record(OpKind::CrossEntropy, {logits}, Tensor<Scalar>(Shape{1}, {loss}), {sp, sl}, false, false,
                  [sp, sl, b](const Tensor<Scalar>& gout, GradSink<Scalar>& sink) {
                    Tensor<Scalar> gx = detail::need(sp, "cross-entropy probabilities");
                    if (!sl) throw InternalError("missing saved activation: labels");
                    auto gm = gx.mat();
                    for (Index i = 0; i < b; ++i) gm(i, sl->ids[static_cast<std::size_t>(i)]) -= Scalar{1};
                    gx.data() *= gout[0] / static_cast<Scalar>(b);
                    sink.add(0, std::move(gx));
                  });
}

}  // namespace slimfit
