#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace slimfit {

enum class SchedulerKind : std::uint8_t { Ils, Random, Progressive, None };

const char* scheduler_name(SchedulerKind k);
SchedulerKind parse_scheduler(const std::string& s);

inline constexpr double kDistanceInitLow = 1e6;
inline constexpr double kDistanceInitHigh = 2e6;
inline constexpr double kDistanceEps = 1e-12;

/// int(n * F) with a small guard so 0.3 * 10 freezes 3, not 2.
std::size_t frozen_count(std::size_t n, double freeze_rate);

struct DistanceVector {
  std::vector<double> d;
  std::vector<bool> initialized;
  std::vector<std::vector<double>> snapshot;  // last parameters seen while active

  [[nodiscard]] std::size_t size() const { return d.size(); }
};

struct FreezeDecision {
  long iteration = 0;
  std::vector<int> frozen_ids;  // ascending
  std::vector<int> active_ids;  // ascending

  [[nodiscard]] bool frozen(int id) const;
};

DistanceVector init_distances(std::size_t n, std::uint64_t seed);

/// Freezes the int(n*F) smallest distances; equal distances freeze the lower id
/// first. Layers in `always_active` are never chosen.
FreezeDecision select_frozen(std::span<const double> d, double freeze_rate, long iteration = 0,
                             std::span<const int> always_active = {});
inline FreezeDecision select_frozen(const DistanceVector& d, double freeze_rate, long iteration = 0,
                                    std::span<const int> always_active = {}) {
  return select_frozen(d.d, freeze_rate, iteration, always_active);
}

/// mean(|after - before| / (|before| + eps)), accumulated in double.
double layer_distance(std::span<const double> before, std::span<const double> after);

/// Refreshes d, initialized and snapshot for the active layers only.
/// `before`/`after` are indexed by layer id and hold each layer's parameters
/// flattened (weight then bias).
void update_distances(DistanceVector& d, const std::vector<std::vector<double>>& before,
                      const std::vector<std::vector<double>>& after, std::span<const int> active_ids);

FreezeDecision baseline_random(std::size_t n, double freeze_rate, std::uint64_t seed, long iteration,
                               std::span<const int> always_active = {});

/// The first int(n*F) layers in registry order, at every iteration.
FreezeDecision baseline_progressive(std::size_t n, double freeze_rate, long iteration, long total_iterations,
                                    std::span<const int> always_active = {});

/// Picks the frozen set per iteration for any scheduler kind.
class LayerScheduler {
 public:
  LayerScheduler(SchedulerKind kind, std::size_t n, double freeze_rate, std::uint64_t seed,
                 std::vector<int> always_active = {});

  FreezeDecision decide(long iteration, long total_iterations) const;
  void observe(const std::vector<std::vector<double>>& before, const std::vector<std::vector<double>>& after,
               const FreezeDecision& decision);

  [[nodiscard]] const DistanceVector& distances() const { return dist_; }
  [[nodiscard]] SchedulerKind kind() const { return kind_; }
  [[nodiscard]] double freeze_rate() const { return freeze_rate_; }

 private:
  SchedulerKind kind_;
  std::size_t n_;
  double freeze_rate_;
  std::uint64_t seed_;
  std::vector<int> always_active_;
  DistanceVector dist_;
};

}  // namespace slimfit
