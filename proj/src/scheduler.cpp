#include "slimfit/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "slimfit/tensor.hpp"

namespace slimfit {

const char* scheduler_name(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::Ils: return "ils";
    case SchedulerKind::Random: return "random";
    case SchedulerKind::Progressive: return "progressive";
    case SchedulerKind::None: return "none";
  }
  return "?";
}

SchedulerKind parse_scheduler(const std::string& s) {
  if (s == "ils") return SchedulerKind::Ils;
  if (s == "random") return SchedulerKind::Random;
  if (s == "progressive") return SchedulerKind::Progressive;
  if (s == "none") return SchedulerKind::None;
  throw ConfigError("unknown scheduler '" + s + "' (expected ils, random, progressive or none)");
}

namespace {

void check_rate(double f) {
  if (!(f >= 0.0 && f < 1.0)) throw ConfigError("freeze rate must lie in [0, 1), got " + std::to_string(f));
}

std::vector<bool> mask_of(std::size_t n, std::span<const int> ids) {
  std::vector<bool> m(n, false);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) throw ConfigError("layer id out of range: " + std::to_string(id));
    m[static_cast<std::size_t>(id)] = true;
  }
  return m;
}

FreezeDecision from_frozen(std::size_t n, std::vector<int> frozen, long iteration) {
  std::sort(frozen.begin(), frozen.end());
  FreezeDecision dec;
  dec.iteration = iteration;
  std::vector<bool> is_frozen(n, false);
  for (int id : frozen) is_frozen[static_cast<std::size_t>(id)] = true;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_frozen[i]) dec.active_ids.push_back(static_cast<int>(i));
  dec.frozen_ids = std::move(frozen);
  return dec;
}

// Ids eligible for freezing, and how many of them to freeze.
std::pair<std::vector<int>, std::size_t> candidates(std::size_t n, double f, std::span<const int> always_active) {
  check_rate(f);
  const auto keep = mask_of(n, always_active);
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i)
    if (!keep[i]) ids.push_back(static_cast<int>(i));
  return {ids, std::min(frozen_count(n, f), ids.size())};
}

}  // namespace

bool FreezeDecision::frozen(int id) const { return std::binary_search(frozen_ids.begin(), frozen_ids.end(), id); }

std::size_t frozen_count(std::size_t n, double freeze_rate) {
  check_rate(freeze_rate);
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * freeze_rate + 1e-9));
}

DistanceVector init_distances(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("distance vector needs at least one layer");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(kDistanceInitLow, kDistanceInitHigh);
  DistanceVector v;
  v.d.resize(n);
  for (auto& x : v.d) x = u(rng);
  v.initialized.assign(n, false);
  v.snapshot.resize(n);
  return v;
}

FreezeDecision select_frozen(std::span<const double> d, double freeze_rate, long iteration,
                             std::span<const int> always_active) {
  auto [ids, k] = candidates(d.size(), freeze_rate, always_active);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return d[static_cast<std::size_t>(a)] < d[static_cast<std::size_t>(b)];
  });
  ids.resize(k);
  return from_frozen(d.size(), std::move(ids), iteration);
}

double layer_distance(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw ShapeError("layer_distance: snapshot sizes differ");
  if (before.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    total += std::abs(after[i] - before[i]) / (std::abs(before[i]) + kDistanceEps);
  return total / static_cast<double>(before.size());
}

void update_distances(DistanceVector& d, const std::vector<std::vector<double>>& before,
                      const std::vector<std::vector<double>>& after, std::span<const int> active_ids) {
  for (int id : active_ids) {
    const auto i = static_cast<std::size_t>(id);
    if (i >= d.size() || i >= before.size() || i >= after.size())
      throw ConfigError("update_distances: layer id out of range: " + std::to_string(id));
    d.d[i] = layer_distance(before[i], after[i]);
    d.initialized[i] = true;
    d.snapshot[i] = after[i];
  }
}

FreezeDecision baseline_random(std::size_t n, double freeze_rate, std::uint64_t seed, long iteration,
                               std::span<const int> always_active) {
  auto [ids, k] = candidates(n, freeze_rate, always_active);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(0x7a3du)};
  std::mt19937_64 rng(seq);
  // Partial Fisher-Yates: the first k slots become a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  return from_frozen(n, std::move(ids), iteration);
}

FreezeDecision baseline_progressive(std::size_t n, double freeze_rate, long iteration, long total_iterations,
                                    std::span<const int> always_active) {
  (void)total_iterations;
  auto [ids, k] = candidates(n, freeze_rate, always_active);
  ids.resize(k);
  return from_frozen(n, std::move(ids), iteration);
}

LayerScheduler::LayerScheduler(SchedulerKind kind, std::size_t n, double freeze_rate, std::uint64_t seed,
                               std::vector<int> always_active)
    : kind_(kind),
      n_(n),
      freeze_rate_(freeze_rate),
      seed_(seed),
      always_active_(std::move(always_active)),
      dist_(init_distances(n, seed)) {
  check_rate(freeze_rate);
  mask_of(n, always_active_);
}

FreezeDecision LayerScheduler::decide(long iteration, long total_iterations) const {
  switch (kind_) {
    case SchedulerKind::Ils: return select_frozen(dist_, freeze_rate_, iteration, always_active_);
    case SchedulerKind::Random: return baseline_random(n_, freeze_rate_, seed_, iteration, always_active_);
    case SchedulerKind::Progressive:
      return baseline_progressive(n_, freeze_rate_, iteration, total_iterations, always_active_);
    case SchedulerKind::None: return from_frozen(n_, {}, iteration);
  }
  throw InternalError("unhandled scheduler kind");
}

void LayerScheduler::observe(const std::vector<std::vector<double>>& before,
                             const std::vector<std::vector<double>>& after, const FreezeDecision& decision) {
  update_distances(dist_, before, after, decision.active_ids);
}

}  // namespace slimfit
