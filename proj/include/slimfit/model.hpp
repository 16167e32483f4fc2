#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slimfit/ops.hpp"

namespace slimfit {

struct RegistryError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ModelConfig {
  int layers = 1;
  int hidden = 8;
  int heads = 2;
  int max_seq = 4;
  int vocab = 16;
  int num_classes = 2;
  // FFN width is fixed at 4 * hidden.
  bool pre_norm = false;
  double layernorm_eps = 1e-5;

  [[nodiscard]] int intermediate() const { return 4 * hidden; }
  [[nodiscard]] int head_dim() const { return hidden / heads; }
  void validate() const;

  static ModelConfig bert_base();
};

enum class LayerKind : std::uint8_t { Embedding, Dense, LayerNorm };

const char* layer_kind_name(LayerKind k);

/// Position of a layer inside one encoder block, in registry order.
enum class BlockSlot : std::uint8_t {
  Query,
  Key,
  Value,
  AttentionOutput,
  AttentionLayerNorm,
  Intermediate,
  Output,
  OutputLayerNorm,
};
inline constexpr int kLayersPerBlock = 8;
inline constexpr int kEmbeddingLayers = 4;
inline constexpr int kHeadLayers = 2;

struct LayerInfo {
  int id = 0;
  std::string name;
  LayerKind kind = LayerKind::Dense;
  int block = -1;  // encoder block index, -1 outside the encoder
};

/// Ordered list of every freezable unit; ids are dense 0..n-1.
class LayerRegistry {
 public:
  LayerRegistry() = default;
  explicit LayerRegistry(const ModelConfig& config);

  [[nodiscard]] std::size_t size() const { return layers_.size(); }
  [[nodiscard]] const LayerInfo& at(int id) const;
  [[nodiscard]] int find(const std::string& name) const;
  [[nodiscard]] const std::vector<LayerInfo>& layers() const { return layers_; }

  static int block_layer(int block, BlockSlot slot) {
    return kEmbeddingLayers + block * kLayersPerBlock + static_cast<int>(slot);
  }
  [[nodiscard]] int pooler() const { return static_cast<int>(layers_.size()) - 2; }
  [[nodiscard]] int classifier() const { return static_cast<int>(layers_.size()) - 1; }

 private:
  std::vector<LayerInfo> layers_;
};

/// Which cached activations are compressed, and how.
struct CompressionConfig {
  bool quantize = false;  // 8-bit imbalanced dense + MatMul/Softmax, 4-bit GELU
  bool prune = false;     // frozen LayerNorm keeps its top-magnitude fraction
  double keep_fraction = 0.1;
  bool unsigned_softmax = false;  // store probabilities as unsigned Q0.8

  [[nodiscard]] CodecSpec imbalanced_dense() const { return quantize ? CodecSpec::fixed8() : CodecSpec::raw(); }
  [[nodiscard]] CodecSpec attention_matmul() const { return quantize ? CodecSpec::fixed8() : CodecSpec::raw(); }
  [[nodiscard]] CodecSpec softmax() const {
    if (!quantize) return CodecSpec::raw();
    return CodecSpec::fixed8(unsigned_softmax ? kUQ0_8 : kQ4_4);
  }
  [[nodiscard]] CodecSpec gelu() const { return quantize ? CodecSpec::fixed4() : CodecSpec::raw(); }
  [[nodiscard]] CodecSpec frozen_layernorm() const {
    return prune ? CodecSpec::pruned(keep_fraction) : CodecSpec::raw();
  }

  static CompressionConfig none() { return {}; }
  static CompressionConfig all() { return {true, true, 0.1, false}; }
};

struct Batch {
  Index batch_size = 0;
  Index seq_len = 0;
  std::vector<std::int32_t> token_ids;  // batch_size * seq_len, row-major
  std::vector<std::int32_t> labels;     // batch_size
};

template <typename Scalar>
class Model {
 public:
  Model() = default;

  static Model build(const ModelConfig& config, std::uint64_t seed);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const LayerRegistry& registry() const { return registry_; }
  [[nodiscard]] std::vector<Parameter<Scalar>>& parameters() { return params_; }
  [[nodiscard]] const std::vector<Parameter<Scalar>>& parameters() const { return params_; }
  [[nodiscard]] std::size_t num_layers() const { return registry_.size(); }

  [[nodiscard]] std::span<Parameter<Scalar>> layer_parameters(int layer_id) {
    const auto [first, count] = slices_.at(static_cast<std::size_t>(check_id(layer_id)));
    return {params_.data() + first, count};
  }
  [[nodiscard]] std::span<const Parameter<Scalar>> layer_parameters(int layer_id) const {
    const auto [first, count] = slices_.at(static_cast<std::size_t>(check_id(layer_id)));
    return {params_.data() + first, count};
  }
  [[nodiscard]] bool layer_enabled(int layer_id) const { return layer_parameters(layer_id)[0].update_enabled; }

  /// Disables updates for exactly `frozen` and enables every other layer.
  void freeze_set(std::span<const int> frozen) {
    for (int id : frozen) check_id(id);
    for (auto& p : params_) p.update_enabled = true;
    for (int id : frozen)
      for (auto& p : layer_parameters(id)) p.update_enabled = false;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Logits [B, num_classes].
  Var<Scalar> forward(Graph<Scalar>& g, const Batch& batch, const CompressionConfig& codecs = {});

  /// Mean cross-entropy of forward() against batch.labels.
  Var<Scalar> loss(Graph<Scalar>&, const Var<Scalar>& logits, const Batch& batch) {
    return cross_entropy(logits, std::span<const std::int32_t>(batch.labels),
                         SaveOptions{CodecSpec::raw(), ActivationKind::Static, -1, "loss", false});
  }

  template <typename Other>
  [[nodiscard]] Model<Other> cast() const {
    Model<Other> m;
    m.config_ = config_;
    m.registry_ = registry_;
    m.slices_ = slices_;
    for (const auto& p : params_)
      m.params_.push_back(Parameter<Other>{p.name, p.value.template cast<Other>(), std::nullopt, p.layer_id,
                                           p.update_enabled});
    return m;
  }

 private:
  template <typename>
  friend class Model;

  int check_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= registry_.size())
      throw RegistryError("unknown layer id " + std::to_string(id));
    return id;
  }
  Parameter<Scalar>& param(int layer_id, int k) { return layer_parameters(layer_id)[static_cast<std::size_t>(k)]; }
  Parameter<Scalar>* bias(int layer_id) {
    auto ps = layer_parameters(layer_id);
    return ps.size() > 1 ? &ps[1] : nullptr;
  }
  Var<Scalar> dense_layer(const Var<Scalar>& x, int layer_id, const CodecSpec& codec);
  Var<Scalar> layernorm_layer(const Var<Scalar>& x, int layer_id, const CompressionConfig& codecs);
  Var<Scalar> attention(const Var<Scalar>& x, int block, const CompressionConfig& codecs);
  Var<Scalar> feed_forward(const Var<Scalar>& x, int block, const CompressionConfig& codecs);

  ModelConfig config_;
  LayerRegistry registry_;
  std::vector<Parameter<Scalar>> params_;
  std::vector<std::pair<std::size_t, std::size_t>> slices_;  // layer id -> (first param, count)
};

/// Labels used for cached tensors; the analytic memory model emits the same
/// labels so the two can be compared record by record.
std::string activation_label(const LayerRegistry& registry, int layer_id, const std::string& suffix);
std::string block_label(int block, const std::string& what);

/// Samples N(0, stddev^2) truncated to two standard deviations.
double truncated_normal(std::mt19937_64& rng, double stddev);

template <typename Scalar>
Model<Scalar> Model<Scalar>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.registry_ = LayerRegistry(config);
  std::mt19937_64 rng(seed);
  const Index h = config.hidden, ffn = config.intermediate();
  auto weight = [&](Shape s) {
    Tensor<Scalar> t(std::move(s));
    for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<Scalar>(truncated_normal(rng, 0.02));
    return t;
  };
  for (const auto& layer : m.registry_.layers()) {
    const std::size_t first = m.params_.size();
    auto add = [&](const std::string& suffix, Tensor<Scalar> t) {
      m.params_.push_back(Parameter<Scalar>{layer.name + suffix, std::move(t), std::nullopt, layer.id, true});
    };
    switch (layer.kind) {
      case LayerKind::Embedding: {
        Index rows = config.vocab;
        if (layer.id == 1) rows = config.max_seq;
        if (layer.id == 2) rows = 1;  // single segment
        add(".weight", weight(Shape{rows, h}));
        break;
      }
      case LayerKind::LayerNorm:
        add(".weight", Tensor<Scalar>::constant(Shape{h}, Scalar{1}));
        add(".bias", Tensor<Scalar>::zeros(Shape{h}));
        break;
      case LayerKind::Dense: {
        Index in = h, out = h;
        if (layer.id == m.registry_.classifier()) out = config.num_classes;
        if (layer.block >= 0) {
          const auto slot = static_cast<BlockSlot>(layer.id - LayerRegistry::block_layer(layer.block, BlockSlot::Query));
          if (slot == BlockSlot::Intermediate) out = ffn;
          if (slot == BlockSlot::Output) in = ffn;
        }
        add(".weight", weight(Shape{in, out}));
        add(".bias", Tensor<Scalar>::zeros(Shape{out}));
        break;
      }
    }
    m.slices_.emplace_back(first, m.params_.size() - first);
  }
  return m;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::dense_layer(const Var<Scalar>& x, int layer_id, const CodecSpec& codec) {
  return dense(x, param(layer_id, 0), bias(layer_id),
               SaveOptions{codec, ActivationKind::Dynamic, layer_id, activation_label(registry_, layer_id, "input"), false});
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::layernorm_layer(const Var<Scalar>& x, int layer_id, const CompressionConfig& codecs) {
  return layernorm(x, param(layer_id, 0), param(layer_id, 1), static_cast<Scalar>(config_.layernorm_eps),
                   LayerNormSave{codecs.frozen_layernorm(), layer_id, activation_label(registry_, layer_id, "normalized")});
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::attention(const Var<Scalar>& x, int block, const CompressionConfig& codecs) {
  const Index heads = config_.heads;
  auto layer = [block](BlockSlot s) { return LayerRegistry::block_layer(block, s); };
  const Var<Scalar> q = split_heads(dense_layer(x, layer(BlockSlot::Query), CodecSpec::raw()), heads);
  const Var<Scalar> k = split_heads(dense_layer(x, layer(BlockSlot::Key), CodecSpec::raw()), heads);
  const Var<Scalar> v = split_heads(dense_layer(x, layer(BlockSlot::Value), CodecSpec::raw()), heads);
  const CodecSpec mm = codecs.attention_matmul();
  const Var<Scalar> scores =
      matmul(q, transpose(k), SaveOptions{mm, ActivationKind::Static, -1, block_label(block, "attention.scores.query"), false},
             SaveOptions{mm, ActivationKind::Static, -1, block_label(block, "attention.scores.key"), false});
  const auto scaled = scale(scores, static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(config_.head_dim()))));
  const SaveOptions probs_save{codecs.softmax(), ActivationKind::Static, -1, block_label(block, "attention.probs"), true};
  const Var<Scalar> probs = softmax(scaled, -1, probs_save);
  const Var<Scalar> context =
      matmul(probs, v, probs_save,
             SaveOptions{mm, ActivationKind::Static, -1, block_label(block, "attention.context.value"), false});
  return dense_layer(merge_heads(context), layer(BlockSlot::AttentionOutput), CodecSpec::raw());
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::feed_forward(const Var<Scalar>& x, int block, const CompressionConfig& codecs) {
  const Var<Scalar> inter = dense_layer(x, LayerRegistry::block_layer(block, BlockSlot::Intermediate), CodecSpec::raw());
  const Var<Scalar> act =
      gelu(inter, SaveOptions{codecs.gelu(), ActivationKind::Static, -1, block_label(block, "intermediate.gelu"), false});
  return dense_layer(act, LayerRegistry::block_layer(block, BlockSlot::Output), codecs.imbalanced_dense());
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::forward(Graph<Scalar>& g, const Batch& batch, const CompressionConfig& codecs) {
  const Index b = batch.batch_size, t = batch.seq_len;
  if (b < 1 || t < 1) throw ShapeError("empty batch");
  if (t > config_.max_seq)
    throw ShapeError("sequence length " + std::to_string(t) + " exceeds max " + std::to_string(config_.max_seq));
  if (static_cast<Index>(batch.token_ids.size()) != b * t) throw ShapeError("token_ids do not match batch shape");
  const Shape ids_shape{b, t};
  std::vector<std::int32_t> positions(static_cast<std::size_t>(b * t));
  for (Index i = 0; i < b * t; ++i) positions[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i % t);
  const std::vector<std::int32_t> segments(static_cast<std::size_t>(b * t), 0);
  auto emb = [&](int id, std::span<const std::int32_t> ids) {
    return embedding(g, ids, ids_shape, param(id, 0),
                     SaveOptions{CodecSpec::raw(), ActivationKind::Dynamic, id, activation_label(registry_, id, "ids"), false});
  };
  Var<Scalar> h = add(add(emb(0, batch.token_ids), emb(1, positions)), emb(2, segments));
  h = layernorm_layer(h, 3, codecs);

  for (int blk = 0; blk < config_.layers; ++blk) {
    auto layer = [blk](BlockSlot s) { return LayerRegistry::block_layer(blk, s); };
    if (config_.pre_norm) {
      h = add(h, attention(layernorm_layer(h, layer(BlockSlot::AttentionLayerNorm), codecs), blk, codecs));
      h = add(h, feed_forward(layernorm_layer(h, layer(BlockSlot::OutputLayerNorm), codecs), blk, codecs));
    } else {
      h = layernorm_layer(add(attention(h, blk, codecs), h), layer(BlockSlot::AttentionLayerNorm), codecs);
      h = layernorm_layer(add(feed_forward(h, blk, codecs), h), layer(BlockSlot::OutputLayerNorm), codecs);
    }
  }
  const Var<Scalar> pooled = tanh(dense_layer(select_first(h), registry_.pooler(), CodecSpec::raw()),
                                  SaveOptions{CodecSpec::raw(), ActivationKind::Static, -1, "pooler.tanh", false});
  return dense_layer(pooled, registry_.classifier(), CodecSpec::raw());
}

/// Flat little-endian float32 container `<prefix>.bin` plus a text manifest
/// `<prefix>.manifest` with one "name<TAB>d0,d1,..<TAB>byte_offset" line per
/// parameter.
void save_checkpoint(const Model<float>& model, const std::filesystem::path& prefix);
void load_checkpoint(Model<float>& model, const std::filesystem::path& prefix);

}  // namespace slimfit
