#include "slimfit/commands.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "slimfit/gradcheck.hpp"

namespace slimfit {

namespace {

FreezeDecision decision_for(std::size_t n, std::vector<int> frozen) {
  std::sort(frozen.begin(), frozen.end());
  FreezeDecision d;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::binary_search(frozen.begin(), frozen.end(), static_cast<int>(i))) d.active_ids.push_back(static_cast<int>(i));
  d.frozen_ids = std::move(frozen);
  return d;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

}  // namespace

Dataset source_data(const AppConfig& config) {
  SyntheticTask src = config.task;
  src.remap_fraction = 0.0;
  src.seed = config.task.seed ^ 0x9e3779b97f4a7c15ULL;
  if (config.pretrain_train_size > 0) src.train_size = config.pretrain_train_size;
  src.val_size = 0;
  return gen_synthetic(src).train;
}

SplitDataset target_data(const AppConfig& config) { return gen_synthetic(config.task); }

Model<float> prepare_model(const AppConfig& config, std::ostream* progress) {
  auto model = Model<float>::build(config.model, config.pretrain.seed);
  if (config.pretrain.steps > 0) {
    const Dataset src = source_data(config);
    const double loss = pretrain_synthetic(model, src, config.pretrain);
    if (progress) *progress << "pretrained " << config.pretrain.steps << " steps, last loss " << loss << '\n';
  }
  return model;
}

FreezeDecision peak_decision(const ModelConfig& config, Index batch, Index seq_len, double freeze_rate,
                             const CompressionConfig& codecs) {
  const std::size_t n = LayerRegistry(config).size();
  const std::size_t k = frozen_count(n, freeze_rate);
  const std::int64_t full = account_iteration(config, batch, seq_len, decision_for(n, {}), codecs).total();
  std::vector<std::pair<std::int64_t, int>> savings;
  for (std::size_t id = 0; id < n; ++id) {
    const auto one = account_iteration(config, batch, seq_len, decision_for(n, {static_cast<int>(id)}), codecs);
    savings.emplace_back(full - one.total(), static_cast<int>(id));
  }
  std::stable_sort(savings.begin(), savings.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<int> frozen;
  for (std::size_t i = 0; i < k; ++i) frozen.push_back(savings[i].second);
  return decision_for(n, std::move(frozen));
}

MemoryComparison compare_memory(const ModelConfig& config, Index batch, Index seq_len, double freeze_rate,
                                const CompressionConfig& codecs) {
  MemoryComparison m;
  const std::size_t n = LayerRegistry(config).size();
  m.baseline = account_iteration(config, batch, seq_len, decision_for(n, {}), CompressionConfig::none());
  m.slimfit = account_iteration(config, batch, seq_len, peak_decision(config, batch, seq_len, freeze_rate, codecs), codecs);
  m.reduction = static_cast<double>(m.baseline.total()) / static_cast<double>(m.slimfit.total());
  return m;
}

int cmd_train(const AppConfig& config, std::ostream& out) {
  std::filesystem::create_directories(config.out_dir);
  {
    auto os = open_out(config.out_dir / "config.resolved.ini");
    os << to_config_text(config);
  }
  auto model = prepare_model(config, &out);
  const SplitDataset data = target_data(config);
  const RunLog log = fine_tune(model, data.train, &data.val, config.run);
  log.write(config.out_dir);
  if (config.save_checkpoint) save_checkpoint(model, config.out_dir / "model");
  const auto fp = summarize_footprint([&] {
    std::vector<std::int64_t> v;
    for (const auto& r : log.memory) v.push_back(r.total());
    return v;
  }());
  out << "scheduler " << scheduler_name(config.run.scheduler) << " F=" << config.run.freeze_rate << ": "
      << log.iterations << " iterations, first loss " << log.metrics.front().loss << ", last loss "
      << log.metrics.back().loss << '\n'
      << "validation accuracy " << log.final_eval.accuracy << ", loss " << log.final_eval.loss << '\n'
      << "peak cached activations " << fp.max_bytes << " bytes\n"
      << "wrote " << config.out_dir.string() << '\n';
  return 0;
}

std::vector<SweepRow> run_sweep(const AppConfig& config, std::ostream* progress) {
  const Model<float> pretrained = prepare_model(config, progress);
  const SplitDataset data = target_data(config);
  std::vector<SweepRow> rows;
  for (SchedulerKind kind : config.sweep.schedulers)
    for (double f : config.sweep.freeze_rates) {
      RunConfig rc = config.run;
      rc.scheduler = kind;
      rc.freeze_rate = f;
      Model<float> model = pretrained;
      const RunLog log = fine_tune(model, data.train, &data.val, rc);
      rows.push_back({kind, f, log.final_eval.accuracy, log.metrics.back().loss});
      if (progress)
        *progress << scheduler_name(kind) << " F=" << f << " accuracy " << log.final_eval.accuracy << '\n';
    }
  return rows;
}

int cmd_sweep(const AppConfig& config, std::ostream& out) {
  std::filesystem::create_directories(config.out_dir);
  const auto rows = run_sweep(config, &out);
  auto os = open_out(config.out_dir / "sweep.csv");
  os << "scheduler,F,final_accuracy\n";
  for (const auto& r : rows) os << scheduler_name(r.scheduler) << ',' << r.freeze_rate << ',' << r.accuracy << '\n';
  out << "wrote " << (config.out_dir / "sweep.csv").string() << '\n';
  return 0;
}

int cmd_memory_report(const AppConfig& config, std::ostream& out) {
  const auto& mc = config.memory;
  const auto cmp = compare_memory(mc.model, mc.batch, mc.seq_len, config.run.freeze_rate, config.run.codecs);
  std::filesystem::create_directories(config.out_dir);
  {
    auto os = open_out(config.out_dir / "memory_report.json");
    os << memory_report_json(cmp.slimfit, mc.model) << '\n';
  }
  {
    auto os = open_out(config.out_dir / "memory_baseline.json");
    os << memory_report_json(cmp.baseline, mc.model) << '\n';
  }
  out << std::fixed << std::setprecision(3);
  out << "model L=" << mc.model.layers << " H=" << mc.model.hidden << " heads=" << mc.model.heads << " B=" << mc.batch
      << " T=" << mc.seq_len << '\n';
  out << "imbalance_ratio " << std::setprecision(1) << imbalance_ratio(mc.model) << std::setprecision(3) << '\n';
  out << "imbalance_byte_ratio " << imbalance_byte_ratio(mc.model, config.run.codecs) << '\n';
  auto line = [&](const char* name, const MemoryReport& r) {
    out << name << " dynamic_gb " << to_gb(r.dynamic_bytes) << " static_gb " << to_gb(r.static_bytes)
        << " semi_static_gb " << to_gb(r.semi_static_bytes) << " total_gb " << to_gb(r.total()) << '\n';
  };
  line("baseline F=0 codecs=off", cmp.baseline);
  out << "slimfit F=" << config.run.freeze_rate << " quant=" << (config.run.codecs.quantize ? "on" : "off")
      << " prune=" << (config.run.codecs.prune ? "on" : "off") << '\n';
  line("slimfit peak", cmp.slimfit);
  out << "reduction " << cmp.reduction << "x\n";
  const auto pm = parameter_memory(mc.model);
  out << "parameters " << pm.parameters << " weights_gb " << to_gb(pm.weight_bytes) << " optimizer_gb "
      << to_gb(pm.optimizer_bytes) << '\n';
  return 0;
}

int cmd_gradcheck(int instances, std::uint64_t seed, std::ostream& out) {
  const auto report = run_gradcheck(default_gradcheck_suite(), instances, seed);
  out << std::scientific << std::setprecision(3);
  for (const auto& op : report.ops)
    out << (op.passed ? "PASS " : "FAIL ") << std::left << std::setw(16) << op.op << " instances " << op.instances
        << " worst_rel_err " << op.worst_relative_error << '\n';
  out << (report.passed() ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << report.tolerance << ")\n";
  return report.passed() ? 0 : 1;
}

int cmd_gen_data(const AppConfig& config, std::ostream& out) {
  std::filesystem::create_directories(config.out_dir);
  const auto data = target_data(config);
  write_dataset_csv(data.train, (config.out_dir / "train.csv").string());
  write_dataset_csv(data.val, (config.out_dir / "val.csv").string());
  out << "wrote " << data.train.size() << " train and " << data.val.size() << " val sequences to "
      << config.out_dir.string() << '\n';
  return 0;
}

}  // namespace slimfit
