#include "slimfit/memory_model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace slimfit {

namespace {

struct Bytes {
  std::string codec;
  double per_element;
  std::int64_t total;
};

Bytes cached_bytes(const CodecSpec& codec, std::int64_t n) {
  switch (codec.kind) {
    case Codec::Raw: return {"raw", 4.0, 4 * n};
    case Codec::Quantized8: return {"q8", 1.0, n};
    case Codec::Packed4: return {"q4", 0.5, (n + 1) / 2};
    case Codec::PrunedSparse: {
      const auto k = static_cast<std::int64_t>(kept_count(codec.keep_fraction, static_cast<std::size_t>(n)));
      return {"pruned", codec.keep_fraction * 8.0, 8 * k};
    }
  }
  throw InternalError("unhandled codec");
}

class Builder {
 public:
  explicit Builder(MemoryReport& r) : r_(r) {}

  void tensor(std::string name, int layer, ActivationKind kind, std::string expr, std::int64_t n,
              const CodecSpec& codec) {
    const Bytes b = cached_bytes(codec, n);
    push({std::move(name), layer, kind, std::move(expr), n, b.codec, b.per_element, b.total});
  }
  void ids(std::string name, int layer, ActivationKind kind, std::string expr, std::int64_t n) {
    push({std::move(name), layer, kind, std::move(expr), n, "ids", 4.0, 4 * n});
  }

 private:
  void push(ActivationRecord rec) {
    switch (rec.kind) {
      case ActivationKind::Dynamic: r_.dynamic_bytes += rec.bytes; break;
      case ActivationKind::Static: r_.static_bytes += rec.bytes; break;
      case ActivationKind::SemiStatic: r_.semi_static_bytes += rec.bytes; break;
    }
    r_.records.push_back(std::move(rec));
  }
  MemoryReport& r_;
};

}  // namespace

std::map<int, std::int64_t> MemoryReport::per_layer_bytes() const {
  std::map<int, std::int64_t> out;
  for (const auto& r : records) out[r.layer_id] += r.bytes;
  return out;
}

MemoryReport account_iteration(const ModelConfig& config, Index batch, Index seq_len, const FreezeDecision& decision,
                               const CompressionConfig& codecs) {
  config.validate();
  if (batch < 1 || seq_len < 1) throw ConfigError("batch and sequence length must be >= 1");
  const LayerRegistry reg(config);
  for (int id : decision.frozen_ids) (void)reg.at(id);

  MemoryReport r;
  r.batch = batch;
  r.seq_len = seq_len;
  r.freeze_rate = static_cast<double>(decision.frozen_ids.size()) / static_cast<double>(reg.size());
  Builder out(r);
  const std::int64_t b = batch, t = seq_len, h = config.hidden, heads = config.heads;
  const std::int64_t bt = b * t, bth = bt * h;
  auto active = [&](int id) { return !decision.frozen(id); };
  auto dense_input = [&](int id, std::int64_t n, const char* expr, const CodecSpec& codec) {
    if (active(id)) out.tensor(activation_label(reg, id, "input"), id, ActivationKind::Dynamic, expr, n, codec);
  };
  auto layernorm = [&](int id) {
    const CodecSpec codec = active(id) ? CodecSpec::raw() : codecs.frozen_layernorm();
    out.tensor(activation_label(reg, id, "normalized"), id, ActivationKind::SemiStatic, "B*T*H", bth, codec);
    out.tensor(activation_label(reg, id, "normalized") + ".stats", id, ActivationKind::SemiStatic, "B*T", bt,
               CodecSpec::raw());
  };

  for (int id = 0; id < 3; ++id)
    if (active(id)) out.ids(activation_label(reg, id, "ids"), id, ActivationKind::Dynamic, "B*T", bt);
  layernorm(3);

  const CodecSpec mm = codecs.attention_matmul();
  for (int blk = 0; blk < config.layers; ++blk) {
    auto layer = [blk](BlockSlot s) { return LayerRegistry::block_layer(blk, s); };
    dense_input(layer(BlockSlot::Query), bth, "B*T*H", CodecSpec::raw());
    dense_input(layer(BlockSlot::Key), bth, "B*T*H", CodecSpec::raw());
    dense_input(layer(BlockSlot::Value), bth, "B*T*H", CodecSpec::raw());
    out.tensor(block_label(blk, "attention.scores.query"), -1, ActivationKind::Static, "B*T*H", bth, mm);
    out.tensor(block_label(blk, "attention.scores.key"), -1, ActivationKind::Static, "B*T*H", bth, mm);
    out.tensor(block_label(blk, "attention.probs"), -1, ActivationKind::Static, "B*heads*T*T", b * heads * t * t,
               codecs.softmax());
    out.tensor(block_label(blk, "attention.context.value"), -1, ActivationKind::Static, "B*T*H", bth, mm);
    dense_input(layer(BlockSlot::AttentionOutput), bth, "B*T*H", CodecSpec::raw());
    layernorm(layer(BlockSlot::AttentionLayerNorm));
    dense_input(layer(BlockSlot::Intermediate), bth, "B*T*H", CodecSpec::raw());
    out.tensor(block_label(blk, "intermediate.gelu"), -1, ActivationKind::Static, "B*T*4H", 4 * bth, codecs.gelu());
    dense_input(layer(BlockSlot::Output), 4 * bth, "B*T*4H", codecs.imbalanced_dense());
    layernorm(layer(BlockSlot::OutputLayerNorm));
  }

  dense_input(reg.pooler(), b * h, "B*H", CodecSpec::raw());
  out.tensor("pooler.tanh", -1, ActivationKind::Static, "B*H", b * h, CodecSpec::raw());
  dense_input(reg.classifier(), b * h, "B*H", CodecSpec::raw());
  out.tensor("loss.probs", -1, ActivationKind::Static, "B*C", b * config.num_classes, CodecSpec::raw());
  out.ids("loss.labels", -1, ActivationKind::Static, "B", b);
  return r;
}

FootprintSummary summarize_footprint(std::span<const std::int64_t> per_iteration_totals) {
  FootprintSummary s;
  s.per_iteration.assign(per_iteration_totals.begin(), per_iteration_totals.end());
  if (!s.per_iteration.empty()) {
    s.max_bytes = *std::max_element(s.per_iteration.begin(), s.per_iteration.end());
    s.min_bytes = *std::min_element(s.per_iteration.begin(), s.per_iteration.end());
  }
  return s;
}

std::vector<std::int64_t> block_layer_input_elements(const ModelConfig& config, Index batch, Index seq_len) {
  config.validate();
  const std::int64_t bth = static_cast<std::int64_t>(batch) * seq_len * config.hidden;
  // query, key, value, attention out, attention LayerNorm, intermediate, output, output LayerNorm
  return {bth, bth, bth, bth, bth, bth, 4 * bth, bth};
}

double imbalance_ratio(const ModelConfig& config) {
  const auto e = block_layer_input_elements(config, 1, 1);
  return static_cast<double>(*std::max_element(e.begin(), e.end())) /
         static_cast<double>(*std::min_element(e.begin(), e.end()));
}

double imbalance_byte_ratio(const ModelConfig& config, const CompressionConfig& codecs) {
  const auto e = block_layer_input_elements(config, 1, 1);
  std::vector<std::int64_t> bytes;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const bool imbalanced = i == static_cast<std::size_t>(BlockSlot::Output);
    bytes.push_back(cached_bytes(imbalanced ? codecs.imbalanced_dense() : CodecSpec::raw(), e[i]).total);
  }
  return static_cast<double>(*std::max_element(bytes.begin(), bytes.end())) /
         static_cast<double>(*std::min_element(bytes.begin(), bytes.end()));
}

ParameterMemory parameter_memory(const ModelConfig& config) {
  config.validate();
  const std::int64_t h = config.hidden, ffn = config.intermediate();
  std::int64_t n = (static_cast<std::int64_t>(config.vocab) + config.max_seq + 1) * h + 2 * h;
  n += config.layers * (4 * (h * h + h) + 2 * (h * ffn) + ffn + h + 4 * h);
  n += h * h + h + h * config.num_classes + config.num_classes;
  return {n, 4 * n, 4 * n, 8 * n};
}

std::string memory_report_json(const MemoryReport& report, const ModelConfig& config) {
  nlohmann::ordered_json j;
  j["config"] = {{"layers", config.layers},      {"hidden", config.hidden},   {"heads", config.heads},
                 {"batch", report.batch},         {"seq_len", report.seq_len}, {"num_classes", config.num_classes},
                 {"freeze_rate", report.freeze_rate}};
  j["totals"] = {{"dynamic_bytes", report.dynamic_bytes},
                 {"static_bytes", report.static_bytes},
                 {"semi_static_bytes", report.semi_static_bytes},
                 {"total_bytes", report.total()},
                 {"total_gb", to_gb(report.total())}};
  const auto pm = parameter_memory(config);
  j["parameters"] = {{"count", pm.parameters},
                     {"weight_bytes", pm.weight_bytes},
                     {"gradient_bytes", pm.gradient_bytes},
                     {"optimizer_bytes", pm.optimizer_bytes}};
  j["imbalance_ratio"] = imbalance_ratio(config);
  auto& recs = j["records"] = nlohmann::ordered_json::array();
  for (const auto& r : report.records)
    recs.push_back({{"name", r.name},
                    {"layer_id", r.layer_id},
                    {"kind", activation_kind_name(r.kind)},
                    {"count", r.count_expr},
                    {"elements", r.elements},
                    {"codec", r.codec},
                    {"bytes_per_element", r.bytes_per_element},
                    {"bytes", r.bytes}});
  return j.dump(2);
}

}  // namespace slimfit
