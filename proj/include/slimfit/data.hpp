#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slimfit/model.hpp"

namespace slimfit {

enum class TaskKind : std::uint8_t { Parity, CopyClass, ClusterTokens };

TaskKind parse_task(const std::string& s);
const char* task_name(TaskKind k);

/// With `cls_token` set, token 0 is reserved as the leading classification
/// token and content tokens are drawn from 1..vocab-1.
inline constexpr std::int32_t kClsToken = 0;

struct SyntheticTask {
  TaskKind kind = TaskKind::ClusterTokens;
  int vocab = 32;
  int seq_len = 16;  // including the leading classification token
  int num_classes = 4;
  int train_size = 2048;
  int val_size = 512;
  std::uint64_t seed = 1;
  // cluster-tokens only: seed of the token -> cluster assignment, and the
  // fraction of content tokens moved to the next cluster afterwards.
  std::uint64_t cluster_seed = 7;
  double remap_fraction = 0.0;
  bool cls_token = true;

  [[nodiscard]] int first_content_token() const { return cls_token ? 1 : 0; }

  void validate() const;
};

struct Dataset {
  int seq_len = 0;
  int num_classes = 0;
  std::vector<std::int32_t> tokens;  // size() * seq_len
  std::vector<std::int32_t> labels;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] std::span<const std::int32_t> sequence(std::size_t i) const {
    return {tokens.data() + i * static_cast<std::size_t>(seq_len), static_cast<std::size_t>(seq_len)};
  }
  [[nodiscard]] Batch batch(std::span<const std::size_t> rows) const;
  [[nodiscard]] Batch batch(std::size_t first, std::size_t count) const;
};

struct SplitDataset {
  Dataset train;
  Dataset val;
};

/// Cluster id of every token (index = token id); empty for other kinds.
std::vector<int> cluster_assignment(const SyntheticTask& task);

/// Label of one sequence under `task` (a leading classification token is ignored).
std::int32_t label_of(const SyntheticTask& task, std::span<const std::int32_t> sequence,
                      const std::vector<int>& clusters);

/// Deterministic in `task`; no sequence occurs in both splits.
SplitDataset gen_synthetic(const SyntheticTask& task);

void write_dataset_csv(const Dataset& data, const std::string& path);

}  // namespace slimfit
