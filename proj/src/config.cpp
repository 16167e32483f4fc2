#include "slimfit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace slimfit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string strip_comment(const std::string& value) {
  for (std::size_t i = 1; i < value.size(); ++i)
    if ((value[i] == '#' || value[i] == ';') && (value[i - 1] == ' ' || value[i - 1] == '\t'))
      return trim(value.substr(0, i));
  return value;
}

std::string where(const std::string& source, int line) { return source + ":" + std::to_string(line) + ": "; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

long long to_int(const std::string& s) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not an integer");
  return v;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

bool parse_bool(const std::string& s) {
  if (s == "on" || s == "true" || s == "yes" || s == "1") return true;
  if (s == "off" || s == "false" || s == "no" || s == "0") return false;
  throw ConfigError("expected on/off, got '" + s + "'");
}

IniDocument parse_ini(const std::string& text, const std::string& source) {
  IniDocument doc;
  std::string section;
  std::istringstream in(text);
  int lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where(source, lineno) + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      doc[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where(source, lineno) + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where(source, lineno) + "empty key");
    auto& slot = doc[section];
    if (slot.contains(key)) throw ConfigError(where(source, lineno) + "duplicate key '" + key + "'");
    slot[key] = IniValue{strip_comment(trim(line.substr(eq + 1))), lineno};
  }
  return doc;
}

void AppConfig::validate() const {
  model.validate();
  task.validate();
  run.validate();
  memory.model.validate();
  if (model.max_seq < task.seq_len) throw ConfigError("model max_seq is shorter than task seq_len");
  if (pretrain.steps < 0) throw ConfigError("pretrain steps must be >= 0");
  if (memory.batch < 1 || memory.seq_len < 1) throw ConfigError("memory batch and seq_len must be >= 1");
  for (double f : sweep.freeze_rates)
    if (!(f >= 0.0 && f < 1.0)) throw ConfigError("sweep freeze rates must lie in [0, 1)");
}

AppConfig load_config_text(const std::string& text, const std::string& source) {
  const IniDocument doc = parse_ini(text, source);
  AppConfig c;
  bool max_seq_set = false;
  using Setter = std::function<void(const std::string&)>;
  auto integer = [](auto& field) {
    return Setter([&field](const std::string& v) { field = static_cast<std::remove_reference_t<decltype(field)>>(to_int(v)); });
  };
  auto real = [](double& field) { return Setter([&field](const std::string& v) { field = to_double(v); }); };
  auto boolean = [](bool& field) { return Setter([&field](const std::string& v) { field = parse_bool(v); }); };

  std::map<std::string, std::map<std::string, Setter>> keys;
  keys["model"] = {
      {"layers", integer(c.model.layers)},
      {"hidden", integer(c.model.hidden)},
      {"heads", integer(c.model.heads)},
      {"max_seq", Setter([&](const std::string& v) {
         c.model.max_seq = static_cast<int>(to_int(v));
         max_seq_set = true;
       })},
      {"pre_norm", boolean(c.model.pre_norm)},
      {"layernorm_eps", real(c.model.layernorm_eps)},
  };
  keys["task"] = {
      {"kind", Setter([&](const std::string& v) { c.task.kind = parse_task(v); })},
      {"vocab", integer(c.task.vocab)},
      {"seq_len", integer(c.task.seq_len)},
      {"num_classes", integer(c.task.num_classes)},
      {"train_size", integer(c.task.train_size)},
      {"val_size", integer(c.task.val_size)},
      {"seed", integer(c.task.seed)},
      {"cluster_seed", integer(c.task.cluster_seed)},
      {"remap_fraction", real(c.task.remap_fraction)},
      {"cls_token", boolean(c.task.cls_token)},
  };
  keys["pretrain"] = {
      {"steps", integer(c.pretrain.steps)},
      {"batch_size", integer(c.pretrain.batch_size)},
      {"lr", real(c.pretrain.lr)},
      {"warmup_fraction", real(c.pretrain.warmup_fraction)},
      {"seed", integer(c.pretrain.seed)},
      {"train_size", integer(c.pretrain_train_size)},
  };
  keys["train"] = {
      {"scheduler", Setter([&](const std::string& v) { c.run.scheduler = parse_scheduler(v); })},
      {"freeze_rate", real(c.run.freeze_rate)},
      {"epochs", integer(c.run.epochs)},
      {"batch_size", integer(c.run.batch_size)},
      {"seed", integer(c.run.seed)},
      {"optimizer", Setter([&](const std::string& v) { c.run.optimizer.kind = parse_optimizer(v); })},
      {"lr", real(c.run.optimizer.lr)},
      {"warmup_fraction", real(c.run.optimizer.warmup_fraction)},
      {"weight_decay", real(c.run.optimizer.weight_decay)},
      {"momentum", real(c.run.optimizer.momentum)},
      {"global_step", boolean(c.run.optimizer.global_step)},
      {"train_head_always", boolean(c.run.train_head_always)},
      {"audit_memory", boolean(c.run.audit_memory)},
  };
  keys["compression"] = {
      {"quant", boolean(c.run.codecs.quantize)},
      {"prune", boolean(c.run.codecs.prune)},
      {"keep_fraction", real(c.run.codecs.keep_fraction)},
      {"unsigned_softmax", boolean(c.run.codecs.unsigned_softmax)},
  };
  keys["sweep"] = {
      {"freeze_rates", Setter([&](const std::string& v) {
         c.sweep.freeze_rates.clear();
         for (const auto& s : split_list(v)) c.sweep.freeze_rates.push_back(to_double(s));
       })},
      {"schedulers", Setter([&](const std::string& v) {
         c.sweep.schedulers.clear();
         for (const auto& s : split_list(v)) c.sweep.schedulers.push_back(parse_scheduler(s));
       })},
  };
  keys["memory"] = {
      {"layers", integer(c.memory.model.layers)},
      {"hidden", integer(c.memory.model.hidden)},
      {"heads", integer(c.memory.model.heads)},
      {"vocab", integer(c.memory.model.vocab)},
      {"num_classes", integer(c.memory.model.num_classes)},
      {"batch", integer(c.memory.batch)},
      {"seq_len", integer(c.memory.seq_len)},
  };
  keys["output"] = {
      {"dir", Setter([&](const std::string& v) { c.out_dir = v; })},
      {"checkpoint", boolean(c.save_checkpoint)},
  };

  for (const auto& [section, entries] : doc) {
    auto sec = keys.find(section);
    if (sec == keys.end()) {
      const int line = entries.empty() ? 0 : entries.begin()->second.line;
      throw ConfigError(where(source, line) + "unknown section [" + section + "]");
    }
    for (const auto& [key, value] : entries) {
      auto setter = sec->second.find(key);
      if (setter == sec->second.end())
        throw ConfigError(where(source, value.line) + "unknown key '" + key + "' in [" + section + "]");
      try {
        setter->second(value.text);
      } catch (const ConfigError& e) {
        throw ConfigError(where(source, value.line) + e.what());
      } catch (const std::exception&) {
        throw ConfigError(where(source, value.line) + "bad value '" + value.text + "' for " + section + "." + key);
      }
    }
  }
  c.model.vocab = c.task.vocab;
  c.model.num_classes = c.task.num_classes;
  if (!max_seq_set) c.model.max_seq = c.task.seq_len;
  c.memory.model.max_seq = std::max(c.memory.model.max_seq, c.memory.seq_len);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

AppConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config_text(ss.str(), path.string());
}

std::string to_config_text(const AppConfig& c) {
  std::ostringstream os;
  auto on = [](bool b) { return b ? "on" : "off"; };
  os << "[model]\nlayers = " << c.model.layers << "\nhidden = " << c.model.hidden << "\nheads = " << c.model.heads
     << "\nmax_seq = " << c.model.max_seq << "\npre_norm = " << on(c.model.pre_norm)
     << "\nlayernorm_eps = " << fmt(c.model.layernorm_eps) << "\n\n";
  os << "[task]\nkind = " << task_name(c.task.kind) << "\nvocab = " << c.task.vocab << "\nseq_len = " << c.task.seq_len
     << "\nnum_classes = " << c.task.num_classes << "\ntrain_size = " << c.task.train_size
     << "\nval_size = " << c.task.val_size << "\nseed = " << c.task.seed << "\ncluster_seed = " << c.task.cluster_seed
     << "\nremap_fraction = " << fmt(c.task.remap_fraction) << "\ncls_token = " << on(c.task.cls_token) << "\n\n";
  os << "[pretrain]\nsteps = " << c.pretrain.steps << "\nbatch_size = " << c.pretrain.batch_size
     << "\nlr = " << fmt(c.pretrain.lr) << "\nwarmup_fraction = " << fmt(c.pretrain.warmup_fraction)
     << "\nseed = " << c.pretrain.seed << "\ntrain_size = " << c.pretrain_train_size << "\n\n";
  os << "[train]\nscheduler = " << scheduler_name(c.run.scheduler) << "\nfreeze_rate = " << fmt(c.run.freeze_rate)
     << "\nepochs = " << c.run.epochs << "\nbatch_size = " << c.run.batch_size << "\nseed = " << c.run.seed
     << "\noptimizer = " << optimizer_name(c.run.optimizer.kind) << "\nlr = " << fmt(c.run.optimizer.lr)
     << "\nwarmup_fraction = " << fmt(c.run.optimizer.warmup_fraction)
     << "\nweight_decay = " << fmt(c.run.optimizer.weight_decay) << "\nmomentum = " << fmt(c.run.optimizer.momentum)
     << "\nglobal_step = " << on(c.run.optimizer.global_step)
     << "\ntrain_head_always = " << on(c.run.train_head_always) << "\naudit_memory = " << on(c.run.audit_memory)
     << "\n\n";
  os << "[compression]\nquant = " << on(c.run.codecs.quantize) << "\nprune = " << on(c.run.codecs.prune)
     << "\nkeep_fraction = " << fmt(c.run.codecs.keep_fraction)
     << "\nunsigned_softmax = " << on(c.run.codecs.unsigned_softmax) << "\n\n";
  os << "[sweep]\nfreeze_rates = ";
  for (std::size_t i = 0; i < c.sweep.freeze_rates.size(); ++i) os << (i ? ", " : "") << fmt(c.sweep.freeze_rates[i]);
  os << "\nschedulers = ";
  for (std::size_t i = 0; i < c.sweep.schedulers.size(); ++i) os << (i ? ", " : "") << scheduler_name(c.sweep.schedulers[i]);
  os << "\n\n[memory]\nlayers = " << c.memory.model.layers << "\nhidden = " << c.memory.model.hidden
     << "\nheads = " << c.memory.model.heads << "\nvocab = " << c.memory.model.vocab
     << "\nnum_classes = " << c.memory.model.num_classes << "\nbatch = " << c.memory.batch
     << "\nseq_len = " << c.memory.seq_len << "\n\n";
  os << "[output]\ndir = " << c.out_dir.string() << "\ncheckpoint = " << on(c.save_checkpoint) << "\n";
  return os.str();
}

}  // namespace slimfit
