#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "slimfit/codec.hpp"
#include "slimfit/tensor.hpp"

namespace slimfit {

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Mul,
  Scale,
  Gelu,
  Tanh,
  Softmax,
  LayerNorm,
  Dense,
  Embedding,
  CrossEntropy,
  Transpose,
  Reshape,
  SplitHeads,
  MergeHeads,
  SelectFirst,
  Sum,
  Custom,
};

/// Table-2 style classification of a cached tensor.
enum class ActivationKind : std::uint8_t { Dynamic, Static, SemiStatic };

const char* activation_kind_name(ActivationKind k);

/// One cached tensor: a (possibly compressed) float payload or integer ids.
template <typename Scalar>
struct SavedValue {
  CompressedActivation<Scalar> payload;
  std::vector<std::int32_t> ids;
  bool holds_ids = false;
  ActivationKind kind = ActivationKind::Static;
  int layer_id = -1;
  std::string label;

  [[nodiscard]] Tensor<Scalar> get() const { return decompress(payload); }
  [[nodiscard]] std::size_t bytes() const {
    return holds_ids ? ids.size() * sizeof(std::int32_t) : payload.payload_bytes();
  }
};

template <typename Scalar>
using SavedPtr = std::shared_ptr<const SavedValue<Scalar>>;

/// Where and how an op caches one of its tensors.
struct SaveOptions {
  CodecSpec codec = CodecSpec::raw();
  ActivationKind kind = ActivationKind::Static;
  int layer_id = -1;
  std::string label;
  // Reuse an existing SavedValue of the same tensor and codec instead of
  // caching a second copy.
  bool share = false;
};

template <typename Scalar>
class Graph;

/// Handle to a value produced on a graph.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* g, int node, std::shared_ptr<const Tensor<Scalar>> value)
      : graph_(g), node_(node), value_(std::move(value)) {}

  [[nodiscard]] const Tensor<Scalar>& value() const { return *value_; }
  [[nodiscard]] const Shape& shape() const { return value_->shape(); }
  [[nodiscard]] Graph<Scalar>& graph() const { return *graph_; }
  [[nodiscard]] int node() const { return node_; }
  [[nodiscard]] bool requires_grad() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  int node_ = -1;
  std::shared_ptr<const Tensor<Scalar>> value_;
};

/// Collects input gradients produced by one node's backward function.
template <typename Scalar>
class GradSink {
 public:
  GradSink(std::vector<std::optional<Tensor<Scalar>>>& grads, const std::vector<int>& parents,
           const std::vector<bool>& wanted)
      : grads_(grads), parents_(parents), wanted_(wanted) {}

  [[nodiscard]] bool wants(std::size_t k) const { return wanted_[k]; }

  void add(std::size_t k, Tensor<Scalar> g) {
    if (!wanted_[k]) return;
    auto& slot = grads_[static_cast<std::size_t>(parents_[k])];
    if (!slot) {
      slot = std::move(g);
    } else {
      if (slot->numel() != g.numel()) throw InternalError("gradient shape mismatch during accumulation");
      slot->data() += g.data();
    }
  }

 private:
  std::vector<std::optional<Tensor<Scalar>>>& grads_;
  const std::vector<int>& parents_;
  const std::vector<bool>& wanted_;
};

template <typename Scalar>
using BackwardFn = std::function<void(const Tensor<Scalar>& grad_out, GradSink<Scalar>& sink)>;

template <typename Scalar>
struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<int> parents;
  std::vector<SavedPtr<Scalar>> saved;
  bool update_enabled = false;  // copied from the op's parameters at record time
  bool requires_grad = false;
  Shape shape;
  BackwardFn<Scalar> backward;
};

struct SavedTally {
  std::size_t dynamic_bytes = 0;
  std::size_t static_bytes = 0;
  std::size_t semi_static_bytes = 0;
  [[nodiscard]] std::size_t total() const { return dynamic_bytes + static_bytes + semi_static_bytes; }
};

/// Reverse-mode tape. Single-threaded; one instance per forward/backward pass.
template <typename Scalar>
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  [[nodiscard]] bool recording() const { return recording_; }

  Var<Scalar> constant(Tensor<Scalar> t) { return leaf(std::move(t), false); }

  Var<Scalar> leaf(Tensor<Scalar> t, bool requires_grad) {
    auto value = std::make_shared<const Tensor<Scalar>>(std::move(t));
    if (!recording_) return Var<Scalar>(this, -1, std::move(value));
    TapeNode<Scalar> n;
    n.op = OpKind::Leaf;
    n.requires_grad = requires_grad;
    n.shape = value->shape();
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1, std::move(value));
  }

  /// Records an op. `own_grad` marks ops that update parameters of their own.
  Var<Scalar> record(OpKind op, std::vector<Var<Scalar>> inputs, Tensor<Scalar> out,
                     std::vector<SavedPtr<Scalar>> saved, bool update_enabled, bool own_grad,
                     BackwardFn<Scalar> backward) {
    auto value = std::make_shared<const Tensor<Scalar>>(std::move(out));
    if (!recording_) return Var<Scalar>(this, -1, std::move(value));
    TapeNode<Scalar> n;
    n.op = op;
    n.update_enabled = update_enabled;
    n.requires_grad = own_grad;
    for (const auto& v : inputs) {
      if (v.node() < 0) throw UsageError("input was produced outside this recording graph");
      n.parents.push_back(v.node());
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.node())].requires_grad;
    }
    n.saved = std::move(saved);
    n.shape = value->shape();
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1, std::move(value));
  }

  /// Sets cached values and backward of an already recorded node; used by ops
  /// whose cached tensor is their own output.
  void attach(const Var<Scalar>& v, std::vector<SavedPtr<Scalar>> saved, BackwardFn<Scalar> backward) {
    auto& n = nodes_.at(static_cast<std::size_t>(v.node()));
    n.saved = std::move(saved);
    n.backward = std::move(backward);
  }

  /// Caches `value` (produced by `source`) under the given codec.
  SavedPtr<Scalar> save(const Var<Scalar>& source, const SaveOptions& opt) {
    return save_tensor(source.value(), opt, source.node());
  }

  SavedPtr<Scalar> save_tensor(const Tensor<Scalar>& value, const SaveOptions& opt, int source_node = -1) {
    if (!recording_) return nullptr;
    const std::pair<int, CodecSpecKey> key{source_node, CodecSpecKey(opt.codec)};
    if (opt.share && source_node >= 0) {
      if (auto it = shared_.find(key); it != shared_.end()) return it->second;
    }
    auto sv = std::make_shared<SavedValue<Scalar>>();
    sv->payload = compress(value, opt.codec);
    sv->kind = opt.kind;
    sv->layer_id = opt.layer_id;
    sv->label = opt.label;
    SavedPtr<Scalar> ptr = sv;
    registry_.push_back(ptr);
    if (opt.share && source_node >= 0) shared_.emplace(key, ptr);
    return ptr;
  }

  SavedPtr<Scalar> save_ids(std::vector<std::int32_t> ids, const SaveOptions& opt) {
    if (!recording_) return nullptr;
    auto sv = std::make_shared<SavedValue<Scalar>>();
    sv->ids = std::move(ids);
    sv->holds_ids = true;
    sv->kind = opt.kind;
    sv->layer_id = opt.layer_id;
    sv->label = opt.label;
    registry_.push_back(sv);
    return sv;
  }

  [[nodiscard]] const std::vector<TapeNode<Scalar>>& nodes() const { return nodes_; }
  [[nodiscard]] const TapeNode<Scalar>& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// Every distinct cached tensor currently held by the tape.
  [[nodiscard]] const std::vector<SavedPtr<Scalar>>& saved_values() const { return registry_; }

  [[nodiscard]] SavedTally saved_bytes() const {
    SavedTally t;
    for (const auto& s : registry_) {
      switch (s->kind) {
        case ActivationKind::Dynamic: t.dynamic_bytes += s->bytes(); break;
        case ActivationKind::Static: t.static_bytes += s->bytes(); break;
        case ActivationKind::SemiStatic: t.semi_static_bytes += s->bytes(); break;
      }
    }
    return t;
  }

  /// Runs reverse-mode accumulation from a scalar loss. Parameter gradients
  /// land in Parameter::grad; leaf gradients are available through grad().
  void backward(const Var<Scalar>& loss) {
    if (!recording_) throw UsageError("backward on a graph that did not record");
    if (loss.value().numel() != 1)
      throw UsageError("backward needs a scalar loss, got shape " + loss.shape().str());
    if (loss.node() < 0) throw UsageError("loss is not on this graph");
    std::vector<std::optional<Tensor<Scalar>>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node())] = Tensor<Scalar>::constant(loss.shape(), Scalar{1});
    for (int id = loss.node(); id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      auto& g = grads[static_cast<std::size_t>(id)];
      if (!g || !n.requires_grad) {
        g.reset();
        continue;
      }
      if (n.op == OpKind::Leaf) {
        leaf_grads_[id] = std::move(*g);
        g.reset();
        continue;
      }
      std::vector<bool> wanted(n.parents.size());
      for (std::size_t k = 0; k < n.parents.size(); ++k)
        wanted[k] = nodes_[static_cast<std::size_t>(n.parents[k])].requires_grad;
      GradSink<Scalar> sink(grads, n.parents, wanted);
      const Tensor<Scalar> gout = std::move(*g);
      g.reset();
      n.backward(gout, sink);
    }
    backward_done_ = true;
  }

  /// Gradient of a leaf created with requires_grad, after backward().
  [[nodiscard]] std::optional<Tensor<Scalar>> grad(const Var<Scalar>& v) const {
    if (auto it = leaf_grads_.find(v.node()); it != leaf_grads_.end()) return it->second;
    return std::nullopt;
  }

  /// Drops every cached tensor and backward closure.
  void release() {
    for (auto& n : nodes_) {
      n.saved.clear();
      n.backward = nullptr;
    }
    registry_.clear();
    shared_.clear();
  }

 private:
  struct CodecSpecKey {
    explicit CodecSpecKey(const CodecSpec& c)
        : kind(static_cast<int>(c.kind)),
          ib(c.fixed.integer_bits),
          fb(c.fixed.fractional_bits),
          sign(c.fixed.is_signed),
          scale(c.auto_scale),
          keep(c.keep_fraction),
          mag(c.by_magnitude) {}
    int kind, ib, fb;
    bool sign, scale;
    double keep;
    bool mag;
    auto operator<=>(const CodecSpecKey&) const = default;
  };

  bool recording_;
  bool backward_done_ = false;
  std::vector<TapeNode<Scalar>> nodes_;
  std::vector<SavedPtr<Scalar>> registry_;
  std::map<std::pair<int, CodecSpecKey>, SavedPtr<Scalar>> shared_;
  std::unordered_map<int, Tensor<Scalar>> leaf_grads_;
};

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return node_ >= 0 && graph_->node(node_).requires_grad;
}

inline const char* activation_kind_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::Dynamic: return "dynamic";
    case ActivationKind::Static: return "static";
    case ActivationKind::SemiStatic: return "semi-static";
  }
  return "?";
}

}  // namespace slimfit
