#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "slimfit/graph.hpp"
#include "slimfit/model.hpp"
#include "slimfit/scheduler.hpp"

namespace slimfit {

/// One cached tensor of one training iteration.
struct ActivationRecord {
  std::string name;        // same label the engine attaches to the cached tensor
  int layer_id = -1;       // owning freezable layer, -1 for op-level (static) caches
  ActivationKind kind = ActivationKind::Static;
  std::string count_expr;  // e.g. "B*T*4H"
  std::int64_t elements = 0;
  std::string codec;       // raw, q8, q4, pruned, ids
  double bytes_per_element = 4.0;
  std::int64_t bytes = 0;
};

struct MemoryReport {
  Index batch = 0;
  Index seq_len = 0;
  double freeze_rate = 0.0;
  std::vector<ActivationRecord> records;
  std::int64_t dynamic_bytes = 0;
  std::int64_t static_bytes = 0;
  std::int64_t semi_static_bytes = 0;

  [[nodiscard]] std::int64_t total() const { return dynamic_bytes + static_bytes + semi_static_bytes; }
  [[nodiscard]] std::map<int, std::int64_t> per_layer_bytes() const;
};

/// Activation bytes of one iteration given which layers are frozen.
MemoryReport account_iteration(const ModelConfig& config, Index batch, Index seq_len, const FreezeDecision& decision,
                               const CompressionConfig& codecs);

/// Largest per-iteration total, the figure a run actually needs.
struct FootprintSummary {
  std::vector<std::int64_t> per_iteration;
  std::int64_t max_bytes = 0;
  std::int64_t min_bytes = 0;
  [[nodiscard]] double spread() const {
    return min_bytes > 0 ? static_cast<double>(max_bytes - min_bytes) / static_cast<double>(min_bytes) : 0.0;
  }
};
FootprintSummary summarize_footprint(std::span<const std::int64_t> per_iteration_totals);

/// Element counts of the eight trainable layer inputs of one block, in
/// registry order.
std::vector<std::int64_t> block_layer_input_elements(const ModelConfig& config, Index batch, Index seq_len);

/// max/min over a block's trainable layer inputs (elements).
double imbalance_ratio(const ModelConfig& config);
/// Same ratio measured in cached bytes under `codecs` with every layer active.
double imbalance_byte_ratio(const ModelConfig& config, const CompressionConfig& codecs);

/// Closed-form training-state sizes: 4 bytes per weight, 4 per gradient, 8
/// per AdamW parameter for the moments.
struct ParameterMemory {
  std::int64_t parameters = 0;
  std::int64_t weight_bytes = 0;
  std::int64_t gradient_bytes = 0;
  std::int64_t optimizer_bytes = 0;
};
ParameterMemory parameter_memory(const ModelConfig& config);

struct AuditResult {
  std::int64_t analytic_bytes = 0;
  std::int64_t instrumented_bytes = 0;
  double relative_difference = 0.0;
  std::vector<std::string> mismatches;  // labels whose byte counts differ
};

/// Compares cached tensors held by a recorded graph with the analytic report.
template <typename Scalar>
AuditResult audit_runtime(const Graph<Scalar>& graph, const MemoryReport& report) {
  static_assert(sizeof(Scalar) == 4, "analytic byte counts assume 32-bit activations");
  std::map<std::string, std::int64_t> engine, model;
  AuditResult r;
  for (const auto& s : graph.saved_values()) {
    engine[s->label] += static_cast<std::int64_t>(s->bytes());
    r.instrumented_bytes += static_cast<std::int64_t>(s->bytes());
  }
  for (const auto& rec : report.records) model[rec.name] += rec.bytes;
  r.analytic_bytes = report.total();
  for (const auto& [label, bytes] : engine)
    if (auto it = model.find(label); it == model.end() || it->second != bytes) r.mismatches.push_back(label);
  for (const auto& [label, bytes] : model)
    if (!engine.contains(label)) r.mismatches.push_back(label);
  r.relative_difference = r.analytic_bytes > 0 ? std::abs(static_cast<double>(r.instrumented_bytes - r.analytic_bytes)) /
                                                     static_cast<double>(r.analytic_bytes)
                                               : 0.0;
  return r;
}

/// JSON document with stable keys: config, totals, records, parameters.
std::string memory_report_json(const MemoryReport& report, const ModelConfig& config);

inline double to_gb(std::int64_t bytes) { return static_cast<double>(bytes) / 1e9; }

}  // namespace slimfit
