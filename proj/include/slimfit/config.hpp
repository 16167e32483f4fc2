#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "slimfit/data.hpp"
#include "slimfit/model.hpp"
#include "slimfit/trainer.hpp"

namespace slimfit {

/// Raw `[section]` / `key = value` document. Values keep the line they came
/// from so later validation errors can point at it.
struct IniValue {
  std::string text;
  int line = 0;
};
using IniDocument = std::map<std::string, std::map<std::string, IniValue>>;

/// Grammar, one statement per line:
///   # comment            (also ';')
///   [section]
///   key = value          (value runs to end of line, trailing comment allowed
///                         after whitespace + '#')
/// Keys before the first section belong to section "".
IniDocument parse_ini(const std::string& text, const std::string& source = "<config>");

struct SweepConfig {
  std::vector<double> freeze_rates{0.0, 0.5, 0.9};
  std::vector<SchedulerKind> schedulers{SchedulerKind::Ils, SchedulerKind::Random, SchedulerKind::Progressive};
};

/// Inputs of memory-report; defaults are BERT-base at B=32, T=128.
struct MemoryConfig {
  ModelConfig model = ModelConfig::bert_base();
  int batch = 32;
  int seq_len = 128;
};

struct AppConfig {
  ModelConfig model;
  SyntheticTask task;
  PretrainConfig pretrain;
  int pretrain_train_size = 0;  // 0: same as task.train_size
  RunConfig run;
  SweepConfig sweep;
  MemoryConfig memory;
  std::filesystem::path out_dir = "runs/latest";
  bool save_checkpoint = true;

  void validate() const;
};

/// Reads a document produced by parse_ini; unknown sections or keys and
/// malformed values raise ConfigError naming source and line.
AppConfig load_config_text(const std::string& text, const std::string& source = "<config>");
AppConfig load_config_file(const std::filesystem::path& path);

/// Resolved configuration in the same grammar (round-trips through
/// load_config_text).
std::string to_config_text(const AppConfig& config);

bool parse_bool(const std::string& s);

}  // namespace slimfit
