#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "slimfit/config.hpp"
#include "slimfit/memory_model.hpp"

namespace slimfit {

/// Pretrains a model on the source variant of the task (no token remapping)
/// when pretrain.steps > 0.
Model<float> prepare_model(const AppConfig& config, std::ostream* progress = nullptr);

/// The fine-tuning dataset described by [task].
SplitDataset target_data(const AppConfig& config);
/// The pretraining dataset: [task] with remapping disabled and its own seed.
Dataset source_data(const AppConfig& config);

struct SweepRow {
  SchedulerKind scheduler;
  double freeze_rate;
  double accuracy;
  double final_loss;
};

/// Frozen set with the largest footprint among all sets of int(n*F) layers.
/// Each layer's cached bytes depend only on its own state, so freezing the
/// layers that save least is the exact maximum.
FreezeDecision peak_decision(const ModelConfig& config, Index batch, Index seq_len, double freeze_rate,
                             const CompressionConfig& codecs);

struct MemoryComparison {
  MemoryReport baseline;  // F = 0, no codecs
  MemoryReport slimfit;   // peak over decisions at F with codecs
  double reduction = 0.0;
};
MemoryComparison compare_memory(const ModelConfig& config, Index batch, Index seq_len, double freeze_rate,
                                const CompressionConfig& codecs);

int cmd_train(const AppConfig& config, std::ostream& out);
int cmd_sweep(const AppConfig& config, std::ostream& out);
int cmd_memory_report(const AppConfig& config, std::ostream& out);
int cmd_gradcheck(int instances, std::uint64_t seed, std::ostream& out);
int cmd_gen_data(const AppConfig& config, std::ostream& out);

std::vector<SweepRow> run_sweep(const AppConfig& config, std::ostream* progress = nullptr);

}  // namespace slimfit
