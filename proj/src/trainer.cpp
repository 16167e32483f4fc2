#include "slimfit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace slimfit {

void RunConfig::validate() const {
  if (!(freeze_rate >= 0.0 && freeze_rate < 1.0)) throw ConfigError("freeze_rate must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (codecs.prune && !(codecs.keep_fraction > 0.0 && codecs.keep_fraction <= 1.0))
    throw ConfigError("keep_fraction must lie in (0, 1]");
  optimizer.validate();
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

double batch_accuracy(const Tensor<float>& logits, const std::vector<std::int32_t>& labels) {
  const auto m = logits.mat();
  std::size_t correct = 0;
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    m.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x51u};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::string non_finite_report(const Model<float>& model, long iteration, double lr, double loss,
                              const FreezeDecision& dec) {
  std::ostringstream os;
  os << "non-finite loss " << loss << " at iteration " << iteration << " (lr " << lr << ", " << dec.frozen_ids.size()
     << " frozen layers)";
  for (const auto& p : model.parameters())
    if (!p.value.data().allFinite()) os << "; non-finite values in " << p.name;
  return os.str();
}

}  // namespace

std::vector<std::vector<double>> layer_snapshot(const Model<float>& model) {
  std::vector<std::vector<double>> out(model.num_layers());
  for (std::size_t id = 0; id < model.num_layers(); ++id)
    for (const auto& p : model.layer_parameters(static_cast<int>(id)))
      for (Index i = 0; i < p.value.numel(); ++i) out[id].push_back(p.value[i]);
  return out;
}

EvalMetrics evaluate(Model<float>& model, const Dataset& data, int batch_size) {
  EvalMetrics m;
  if (data.size() == 0) return m;
  double loss_sum = 0.0, correct = 0.0;
  for (std::size_t first = 0; first < data.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), data.size() - first);
    const Batch b = data.batch(first, count);
    Graph<float> g(false);
    const auto logits = model.forward(g, b);
    const auto loss = model.loss(g, logits, b);
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(count);
    correct += batch_accuracy(logits.value(), b.labels) * static_cast<double>(count);
  }
  m.examples = data.size();
  m.loss = loss_sum / static_cast<double>(data.size());
  m.accuracy = correct / static_cast<double>(data.size());
  return m;
}

RunLog fine_tune(Model<float>& model, const Dataset& train, const Dataset* val, const RunConfig& config) {
  config.validate();
  if (train.size() == 0) throw ConfigError("training set is empty");
  const std::size_t n = model.num_layers();
  const auto per_epoch = static_cast<long>(train.size() / static_cast<std::size_t>(config.batch_size));
  if (per_epoch < 1) throw ConfigError("batch_size exceeds the training set");
  const long total = per_epoch * config.epochs;

  std::vector<int> always_active;
  if (config.train_head_always) always_active = {model.registry().pooler(), model.registry().classifier()};
  LayerScheduler scheduler(config.scheduler, n, config.freeze_rate, config.seed, always_active);
  Optimizer optimizer(config.optimizer);
  const LinearSchedule lr_schedule = make_schedule(config.optimizer, total);

  RunLog log;
  for (const auto& l : model.registry().layers()) log.layer_names.push_back(l.name);
  log.update_count.assign(n, 0);
  log.distance_trace.resize(n);

  long it = 0;
  for (long epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), config.seed, epoch);
    for (long k = 0; k < per_epoch; ++k, ++it) {
      const FreezeDecision dec = scheduler.decide(it, total);
      model.freeze_set(dec.frozen_ids);
      model.zero_grad();
      const Batch batch = train.batch(std::span<const std::size_t>(order).subspan(
          static_cast<std::size_t>(k * config.batch_size), static_cast<std::size_t>(config.batch_size)));
      const double lr = lr_schedule.at(it);

      Graph<float> g;
      const auto logits = model.forward(g, batch, config.codecs);
      const auto loss = model.loss(g, logits, batch);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) throw TrainingError(non_finite_report(model, it, lr, loss_value, dec));
      const SavedTally tally = g.saved_bytes();
      MemoryRow mem{it, static_cast<std::int64_t>(tally.dynamic_bytes),
                    static_cast<std::int64_t>(tally.static_bytes + tally.semi_static_bytes)};
      if (config.audit_memory) {
        const auto audit = audit_runtime(
            g, account_iteration(model.config(), batch.batch_size, batch.seq_len, dec, config.codecs));
        mem.analytic_bytes = audit.analytic_bytes;
        mem.audit_mismatches = audit.mismatches.size();
      }
      g.backward(loss);
      g.release();

      const auto before = layer_snapshot(model);
      for (std::size_t id = 0; id < n; ++id)
        log.schedule.push_back({it, static_cast<int>(id), dec.frozen(static_cast<int>(id)), scheduler.distances().d[id]});
      optimizer.step(model.parameters(), lr);
      scheduler.observe(before, layer_snapshot(model), dec);

      for (int id : dec.active_ids) {
        ++log.update_count[static_cast<std::size_t>(id)];
        log.distance_trace[static_cast<std::size_t>(id)].push_back(scheduler.distances().d[static_cast<std::size_t>(id)]);
      }
      log.metrics.push_back({it, loss_value, batch_accuracy(logits.value(), batch.labels), lr});
      log.memory.push_back(mem);
      log.decisions.push_back(dec);
    }
  }
  log.iterations = it;
  model.freeze_set({});
  if (val) log.final_eval = evaluate(model, *val);
  return log;
}

double pretrain_synthetic(Model<float>& model, const Dataset& data, const PretrainConfig& config) {
  if (config.steps <= 0) return std::nan("");
  if (data.size() < static_cast<std::size_t>(config.batch_size)) throw ConfigError("pretraining set smaller than a batch");
  OptimizerConfig oc;
  oc.lr = config.lr;
  oc.warmup_fraction = config.warmup_fraction;
  Optimizer optimizer(oc);
  const LinearSchedule schedule = make_schedule(oc, config.steps);
  model.freeze_set({});
  const auto per_epoch = static_cast<long>(data.size() / static_cast<std::size_t>(config.batch_size));
  std::vector<std::size_t> order;
  double last = 0.0;
  for (long step = 0; step < config.steps; ++step) {
    const long k = step % per_epoch;
    if (k == 0) order = epoch_order(data.size(), config.seed, step / per_epoch);
    const Batch batch = data.batch(std::span<const std::size_t>(order).subspan(
        static_cast<std::size_t>(k * config.batch_size), static_cast<std::size_t>(config.batch_size)));
    model.zero_grad();
    Graph<float> g;
    const auto loss = model.loss(g, model.forward(g, batch), batch);
    last = loss.value()[0];
    if (!std::isfinite(last))
      throw TrainingError(non_finite_report(model, step, schedule.at(step), last, FreezeDecision{}));
    g.backward(loss);
    optimizer.step(model.parameters(), schedule.at(step));
  }
  model.zero_grad();
  return last;
}

void RunLog::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    auto os = open_csv(dir / "metrics.csv");
    os << "iteration,loss,accuracy,lr\n";
    for (const auto& r : metrics)
      os << r.iteration << ',' << fmt(r.loss) << ',' << fmt(r.accuracy) << ',' << fmt(r.lr) << '\n';
  }
  {
    auto os = open_csv(dir / "schedule.csv");
    os << "iteration,layer_id,frozen,d_i\n";
    for (const auto& r : schedule) os << r.iteration << ',' << r.layer_id << ',' << (r.frozen ? 1 : 0) << ',' << fmt(r.distance) << '\n';
  }
  {
    auto os = open_csv(dir / "heatmap.csv");
    os << "layer_id,name,update_count\n";
    for (std::size_t i = 0; i < layer_names.size(); ++i) os << i << ',' << layer_names[i] << ',' << update_count[i] << '\n';
  }
  {
    auto os = open_csv(dir / "memory.csv");
    os << "iteration,dynamic_bytes,static_bytes,total,analytic_bytes,audit_mismatches\n";
    for (const auto& r : memory)
      os << r.iteration << ',' << r.dynamic_bytes << ',' << r.static_bytes << ',' << r.total() << ',' << r.analytic_bytes
         << ',' << r.audit_mismatches << '\n';
  }
}

}  // namespace slimfit
