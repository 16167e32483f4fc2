#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "slimfit/data.hpp"
#include "slimfit/memory_model.hpp"
#include "slimfit/model.hpp"
#include "slimfit/optimizer.hpp"
#include "slimfit/scheduler.hpp"

namespace slimfit {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  SchedulerKind scheduler = SchedulerKind::Ils;
  double freeze_rate = 0.5;
  int epochs = 3;
  int batch_size = 32;
  std::uint64_t seed = 1;
  CompressionConfig codecs;
  OptimizerConfig optimizer;
  // Keep pooler and classifier out of the freezing schedule.
  bool train_head_always = false;
  // Check every iteration's cached tensors against account_iteration.
  bool audit_memory = true;

  void validate() const;
};

struct MetricsRow {
  long iteration;
  double loss;
  double accuracy;
  double lr;
};

struct ScheduleRow {
  long iteration;
  int layer_id;
  bool frozen;
  double distance;  // value the freeze decision was based on
};

struct MemoryRow {
  long iteration;
  std::int64_t dynamic_bytes;
  std::int64_t static_bytes;  // includes semi-static LayerNorm caches
  std::int64_t analytic_bytes = -1;  // -1 when auditing is off
  std::size_t audit_mismatches = 0;
  [[nodiscard]] std::int64_t total() const { return dynamic_bytes + static_bytes; }
};

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t examples = 0;
};

struct RunLog {
  std::vector<std::string> layer_names;
  std::vector<MetricsRow> metrics;
  std::vector<ScheduleRow> schedule;
  std::vector<MemoryRow> memory;
  std::vector<long> update_count;                  // per layer
  std::vector<std::vector<double>> distance_trace;  // per layer, one entry per active iteration
  std::vector<FreezeDecision> decisions;
  EvalMetrics final_eval;
  long iterations = 0;

  /// metrics.csv, schedule.csv, heatmap.csv and memory.csv.
  void write(const std::filesystem::path& dir) const;
};

/// Accuracy and mean loss without recording a tape.
EvalMetrics evaluate(Model<float>& model, const Dataset& data, int batch_size = 256);

/// One iteration per batch: select frozen set, freeze, forward, backward,
/// step active layers, refresh distances. `val` (optional) is evaluated once
/// at the end.
RunLog fine_tune(Model<float>& model, const Dataset& train, const Dataset* val, const RunConfig& config);

struct PretrainConfig {
  long steps = 0;
  int batch_size = 32;
  double lr = 1e-3;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 1;
};

/// Trains every layer on a source task. Returns the loss of the last step
/// (NaN when steps == 0).
double pretrain_synthetic(Model<float>& model, const Dataset& data, const PretrainConfig& config);

/// Flattened parameters of each layer (weight then bias) in double.
std::vector<std::vector<double>> layer_snapshot(const Model<float>& model);

}  // namespace slimfit
