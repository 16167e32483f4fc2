#include "slimfit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string_view>
#include <unordered_set>

namespace slimfit {

TaskKind parse_task(const std::string& s) {
  if (s == "parity") return TaskKind::Parity;
  if (s == "copy-class") return TaskKind::CopyClass;
  if (s == "cluster-tokens") return TaskKind::ClusterTokens;
  throw ConfigError("unknown task '" + s + "' (expected parity, copy-class or cluster-tokens)");
}

const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Parity: return "parity";
    case TaskKind::CopyClass: return "copy-class";
    case TaskKind::ClusterTokens: return "cluster-tokens";
  }
  return "?";
}

void SyntheticTask::validate() const {
  if (vocab - first_content_token() < 1 || vocab < 2) throw ConfigError("task vocab too small");
  if (seq_len < 2) throw ConfigError("task seq_len must be >= 2");
  if (num_classes < 2) throw ConfigError("task num_classes must be >= 2");
  if (train_size < 1 || val_size < 0) throw ConfigError("task sizes must be positive");
  if (kind == TaskKind::ClusterTokens && vocab - first_content_token() < num_classes)
    throw ConfigError("cluster-tokens needs at least one content token per class");
  if (!(remap_fraction >= 0.0 && remap_fraction <= 1.0)) throw ConfigError("remap_fraction must lie in [0, 1]");
}

Batch Dataset::batch(std::span<const std::size_t> rows) const {
  Batch b;
  b.batch_size = static_cast<Index>(rows.size());
  b.seq_len = seq_len;
  b.token_ids.reserve(rows.size() * static_cast<std::size_t>(seq_len));
  for (std::size_t r : rows) {
    const auto s = sequence(r);
    b.token_ids.insert(b.token_ids.end(), s.begin(), s.end());
    b.labels.push_back(labels.at(r));
  }
  return b;
}

Batch Dataset::batch(std::size_t first, std::size_t count) const {
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), first);
  return batch(rows);
}

std::vector<int> cluster_assignment(const SyntheticTask& task) {
  if (task.kind != TaskKind::ClusterTokens) return {};
  std::vector<int> content(static_cast<std::size_t>(task.vocab - task.first_content_token()));
  std::iota(content.begin(), content.end(), task.first_content_token());
  std::mt19937_64 rng(task.cluster_seed);
  std::shuffle(content.begin(), content.end(), rng);
  std::vector<int> cluster(static_cast<std::size_t>(task.vocab), -1);
  for (std::size_t i = 0; i < content.size(); ++i)
    cluster[static_cast<std::size_t>(content[i])] = static_cast<int>(i % static_cast<std::size_t>(task.num_classes));
  const auto moved = static_cast<std::size_t>(std::floor(task.remap_fraction * static_cast<double>(content.size()) + 1e-9));
  std::shuffle(content.begin(), content.end(), rng);
  for (std::size_t i = 0; i < moved; ++i) {
    auto& c = cluster[static_cast<std::size_t>(content[i])];
    c = (c + 1) % task.num_classes;
  }
  return cluster;
}

std::int32_t label_of(const SyntheticTask& task, std::span<const std::int32_t> sequence,
                      const std::vector<int>& clusters) {
  const auto content = sequence.subspan(static_cast<std::size_t>(task.first_content_token()));
  switch (task.kind) {
    case TaskKind::Parity: {
      long total = 0;
      for (auto t : content) total += t;
      return static_cast<std::int32_t>(total % task.num_classes);
    }
    case TaskKind::CopyClass:
      return content[0] % task.num_classes;
    case TaskKind::ClusterTokens: {
      std::vector<int> counts(static_cast<std::size_t>(task.num_classes), 0);
      for (auto t : content) ++counts[static_cast<std::size_t>(clusters.at(static_cast<std::size_t>(t)))];
      // max_element returns the first maximum, so ties go to the lowest cluster.
      return static_cast<std::int32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  throw InternalError("unhandled task kind");
}

SplitDataset gen_synthetic(const SyntheticTask& task) {
  task.validate();
  const auto clusters = cluster_assignment(task);
  std::mt19937_64 rng(task.seed);
  std::uniform_int_distribution<std::int32_t> token(task.first_content_token(), task.vocab - 1);
  std::unordered_set<std::string> seen;
  const auto len = static_cast<std::size_t>(task.seq_len);

  auto fill = [&](Dataset& d, int count) {
    d.seq_len = task.seq_len;
    d.num_classes = task.num_classes;
    std::vector<std::int32_t> seq(len);
    const long budget = 100L * count + 1000;
    long attempts = 0;
    while (static_cast<int>(d.size()) < count) {
      if (++attempts > budget)
        throw ConfigError("cannot draw " + std::to_string(count) + " distinct sequences; enlarge vocab or seq_len");
      const auto start = static_cast<std::size_t>(task.first_content_token());
      if (task.cls_token) seq[0] = kClsToken;
      for (std::size_t i = start; i < len; ++i) seq[i] = token(rng);
      std::string key(reinterpret_cast<const char*>(seq.data()), len * sizeof(std::int32_t));
      if (!seen.insert(std::move(key)).second) continue;
      d.tokens.insert(d.tokens.end(), seq.begin(), seq.end());
      d.labels.push_back(label_of(task, seq, clusters));
    }
  };
  SplitDataset out;
  fill(out.train, task.train_size);
  fill(out.val, task.val_size);
  return out;
}

void write_dataset_csv(const Dataset& data, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "label";
  for (int i = 0; i < data.seq_len; ++i) os << ",t" << i;
  os << '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    os << data.labels[r];
    for (auto t : data.sequence(r)) os << ',' << t;
    os << '\n';
  }
}

}  // namespace slimfit
