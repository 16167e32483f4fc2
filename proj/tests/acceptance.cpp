// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Optional argv[1]: toy config path.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "slimfit/commands.hpp"
#include "slimfit/gradcheck.hpp"

using namespace slimfit;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Mean loss over the first and last `k` iterations; single batches are too noisy to compare.
std::pair<double, double> loss_ends(const RunLog& log, std::size_t k = 16) {
  double first = 0, last = 0;
  for (std::size_t i = 0; i < k; ++i) {
    first += log.metrics[i].loss;
    last += log.metrics[log.metrics.size() - 1 - i].loss;
  }
  return {first / k, last / k};
}

// --- criterion 5 helpers ---

struct Chain {
  std::vector<Parameter<float>> w, b;
};

Chain make_chain(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Chain c;
  for (int i = 0; i < 3; ++i) {
    c.w.push_back({"w", random_tensor(Shape{6, 6}, rng).cast<float>(), std::nullopt, i, true});
    c.b.push_back({"b", random_tensor(Shape{6}, rng).cast<float>(), std::nullopt, i, true});
  }
  return c;
}

void run_chain(Chain& c, const Tensor<float>& x) {
  Graph<float> g;
  auto h = g.constant(x);
  for (int i = 0; i < 3; ++i) h = gelu(dense(h, c.w[static_cast<std::size_t>(i)], &c.b[static_cast<std::size_t>(i)]));
  g.backward(sum(h));
}

// Compares every gradient of `frozen` against `all`: frozen parameters must
// have none, the rest must be bit-identical.
bool same_surviving_grads(const std::vector<Parameter<float>>& all, const std::vector<Parameter<float>>& frozen) {
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& f = frozen[i];
    if (!f.update_enabled) {
      if (f.grad) return false;
      continue;
    }
    if (!f.grad || !all[i].grad) return false;
    if (f.grad->data() != all[i].grad->data()) return false;
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string toy_path = argc > 1 ? argv[1] : std::string(SLIMFIT_SOURCE_DIR) + "/configs/toy.ini";
  const ModelConfig bert = ModelConfig::bert_base();

  report(1, "memory arithmetic", [&] {
    const auto cmp = compare_memory(bert, 32, 128, 0.95, CompressionConfig::all());
    const double base = to_gb(cmp.baseline.total()), slim = to_gb(cmp.slimfit.total());
    const bool ok = std::abs(base - 3.2) <= 0.25 * 3.2 && std::abs(slim - 0.5) <= 0.30 * 0.5;
    return Outcome{ok, fmt("baseline %.3f GB (target 3.2 +-25%%), F=0.95 with codecs %.3f GB (target 0.5 +-30%%)",
                           base, slim)};
  });

  report(2, "imbalance", [&] {
    std::vector<ModelConfig> configs{bert, load_config_file(toy_path).model};
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
      ModelConfig c;
      c.heads = 1 + static_cast<int>(rng() % 8);
      c.hidden = c.heads * (1 + static_cast<int>(rng() % 64));
      c.layers = 1 + static_cast<int>(rng() % 24);
      configs.push_back(c);
    }
    bool ok = true;
    for (const auto& c : configs)
      ok &= imbalance_ratio(c) == 4.0 && imbalance_byte_ratio(c, CompressionConfig::all()) == 1.0;
    return Outcome{ok, fmt("ratio %.1f, byte ratio with 8-bit codec %.1f over %zu configs", imbalance_ratio(bert),
                           imbalance_byte_ratio(bert, CompressionConfig::all()), configs.size())};
  });

  report(3, "linearity in batch", [&] {
    bool ok = true;
    std::ostringstream s;
    for (const auto& codecs : {CompressionConfig::none(), CompressionConfig::all()})
      for (double f : {0.0, 0.5, 0.95}) {
        const auto dec = peak_decision(bert, 32, 128, f, codecs);
        const auto b32 = account_iteration(bert, 32, 128, dec, codecs).total();
        const auto b64 = account_iteration(bert, 64, 128, dec, codecs).total();
        const auto b128 = account_iteration(bert, 128, 128, dec, codecs).total();
        ok &= b64 == 2 * b32 && b128 == 4 * b32;
        if (f == 0.0 && !codecs.quantize) s << fmt("%.2f/%.2f/%.2f GB", to_gb(b32), to_gb(b64), to_gb(b128));
      }
    return Outcome{ok, s.str() + " at B=32/64/128, exact for 6 settings"};
  });

  report(4, "gradient oracle", [&] {
    const auto r = run_gradcheck(default_gradcheck_suite(), 20, 4242, 1e-5);
    double worst = 0;
    std::string worst_op;
    for (const auto& op : r.ops)
      if (op.worst_relative_error >= worst) worst = op.worst_relative_error, worst_op = op.op;
    return Outcome{r.passed(), fmt("%zu ops x 20 instances, worst relative error %.2e (%s)", r.ops.size(), worst,
                                   worst_op.c_str())};
  });

  report(5, "frozen-path equivalence", [&] {
    std::mt19937_64 rng(9);
    const auto x = random_tensor(Shape{5, 6}, rng).cast<float>();
    Chain all = make_chain(1);
    run_chain(all, x);
    std::vector<Parameter<float>> all_params;
    for (int i = 0; i < 3; ++i) all_params.push_back(all.w[i]), all_params.push_back(all.b[i]);
    int cases = 0;
    bool ok = true;
    for (int mask = 1; mask < 8; ++mask) {
      Chain c = make_chain(1);
      for (int i = 0; i < 3; ++i)
        if (mask & (1 << i)) c.w[i].update_enabled = c.b[i].update_enabled = false;
      run_chain(c, x);
      std::vector<Parameter<float>> ps;
      for (int i = 0; i < 3; ++i) ps.push_back(c.w[i]), ps.push_back(c.b[i]);
      ok &= same_surviving_grads(all_params, ps);
      ++cases;
    }

    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 16;
    mc.heads = 4;
    mc.max_seq = 8;
    mc.vocab = 20;
    mc.num_classes = 3;
    auto model = Model<float>::build(mc, 7);
    Batch batch{4, 8, {}, {0, 1, 2, 1}};
    for (int i = 0; i < 32; ++i) batch.token_ids.push_back(static_cast<std::int32_t>(rng() % 20));
    auto grads = [&](std::span<const int> frozen) {
      model.freeze_set(frozen);
      model.zero_grad();
      Graph<float> g;
      g.backward(model.loss(g, model.forward(g, batch), batch));
      return model.parameters();
    };
    const auto reference = grads({});
    const int n = static_cast<int>(model.num_layers());
    for (int trial = 0; trial < 300; ++trial) {
      // any subset of layers strictly between the first and the last
      std::vector<int> frozen;
      for (int id = 1; id < n - 1; ++id)
        if (trial < n - 2 ? id == trial + 1 : rng() % 2 == 1) frozen.push_back(id);
      ok &= same_surviving_grads(reference, grads(frozen));
      ++cases;
    }
    return Outcome{ok, fmt("%d frozen subsets (3-layer chain and 2-block transformer), surviving gradients %s", cases,
                           ok ? "bit-identical" : "DIFFER")};
  });

  report(6, "codec round trips", [&] {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> in_range(kQ4_4.min_value(), kQ4_4.max_value());
    double worst = 0;
    for (int i = 0; i < 100000; ++i) {
      const double v = in_range(rng);
      worst = std::max(worst, std::abs(dequantize_value(quantize_value(v, kQ4_4), kQ4_4) - v));
    }
    const bool bound = worst <= std::ldexp(1.0, -kQ4_4.fractional_bits - 1);
    const bool saturate = dequantize_value(127, kQ4_4) == 7.9375 && quantize_value(100.0, kQ4_4) == 127 &&
                          quantize_value(-100.0, kQ4_4) == -128 && dequantize_value(-128, kQ4_4) == -8.0;
    std::vector<std::int32_t> nibbles(200000);
    for (auto& c : nibbles) c = static_cast<std::int32_t>(rng() % 16) - 8;
    const bool bijection = unpack4(pack4(nibbles), nibbles.size()) == nibbles;
    Tensor<float> t(Shape{37, 29});
    std::normal_distribution<float> nd;
    for (Index i = 0; i < t.numel(); ++i) {
      float v = 0;
      while (v == 0.0f) v = nd(rng);
      t[i] = v;
    }
    const bool lossless = restore(prune_topk(t, 1.0)).data() == t.data();
    const auto r = restore(prune_topk(t, 0.1));
    const auto nz = static_cast<std::size_t>((r.data().array() != 0.0f).count());
    const auto expect = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(t.numel())));
    const bool ok = bound && saturate && bijection && lossless && nz == expect;
    return Outcome{ok, fmt("max error %.5f (bound %.5f), saturation %s, pack4 bijection on 1e5 pairs %s, "
                           "keep=1.0 lossless %s, restore nonzeros %zu (expect %zu)",
                           worst, std::ldexp(1.0, -5), saturate ? "ok" : "BAD", bijection ? "ok" : "BAD",
                           lossless ? "ok" : "BAD", nz, expect)};
  });

  report(7, "scheduler contracts", [&] {
    bool ok = true;
    const std::vector<double> d{5, 1, 3, 2};
    const bool oracle = select_frozen(d, 0.5).frozen_ids == std::vector<int>{1, 3};
    ok &= oracle;
    int runs = 0;
    for (std::size_t n : {8u, 26u, 30u, 102u})
      for (double f : {0.1, 0.5, 0.75, 0.9, 0.95}) {
        auto run = [&](std::uint64_t seed) {
          LayerScheduler s(SchedulerKind::Ils, n, f, seed);
          std::mt19937_64 rng(seed * 31 + n);
          std::vector<std::vector<double>> params(n, std::vector<double>(4, 1.0));
          std::vector<bool> seen(n, false);
          const long window = static_cast<long>(std::ceil(1.0 / (1.0 - f)));
          std::vector<std::vector<int>> trace;
          for (long it = 0; it < 60; ++it) {
            const auto dec = s.decide(it, 60);
            ok &= dec.frozen_ids.size() == frozen_count(n, f);
            for (int id : dec.active_ids) seen[static_cast<std::size_t>(id)] = true;
            if (it + 1 == window) ok &= std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
            auto next = params;
            std::uniform_real_distribution<double> step(0.0, 0.05);
            for (int id : dec.active_ids)
              for (auto& v : next[static_cast<std::size_t>(id)]) v *= 1.0 + step(rng);
            const auto before = s.distances().d;
            s.observe(params, next, dec);
            for (int id : dec.frozen_ids)
              ok &= s.distances().d[static_cast<std::size_t>(id)] == before[static_cast<std::size_t>(id)];
            params = next;
            trace.push_back(dec.frozen_ids);
          }
          return trace;
        };
        ok &= run(17) == run(17);
        ++runs;
      }
    return Outcome{ok, fmt("hand oracle %s; exact int(n*F), warm-start coverage, frozen distances immutable and "
                           "determinism over %d (n, F) settings x 60 iterations",
                           oracle ? "ok" : "BAD", runs)};
  });

  // Criteria 8-10 share one pretrained toy model.
  AppConfig toy = load_config_file(toy_path);
  const auto t0 = std::chrono::steady_clock::now();
  const Model<float> pretrained = prepare_model(toy);
  const SplitDataset data = target_data(toy);
  std::printf("toy model: L=%d H=%d, n=%zu layers, pretrained %ld steps in %.1fs; fine-tune %d epochs on %zu examples\n",
              toy.model.layers, toy.model.hidden, pretrained.num_layers(), toy.pretrain.steps,
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), toy.run.epochs,
              data.train.size());
  auto fine = [&](SchedulerKind kind, double f, std::uint64_t seed, bool codecs) {
    Model<float> m = pretrained;
    RunConfig rc = toy.run;
    rc.scheduler = kind;
    rc.freeze_rate = f;
    rc.seed = seed;
    rc.codecs = codecs ? CompressionConfig::all() : CompressionConfig::none();
    return fine_tune(m, data.train, &data.val, rc);
  };
  const std::vector<std::uint64_t> seeds{toy.run.seed, toy.run.seed + 1, toy.run.seed + 2};
  const double f_main = toy.run.freeze_rate;
  std::map<std::pair<std::string, double>, std::vector<double>> acc;
  std::map<std::uint64_t, RunLog> main_runs;  // ILS at f_main, codecs off
  bool converged = true;
  int run_count = 0;

  report(8, "training dynamics", [&] {
    const std::vector<std::pair<SchedulerKind, double>> plan{
        {SchedulerKind::Ils, 0.0},    {SchedulerKind::Ils, 0.5},    {SchedulerKind::Ils, 0.8},
        {SchedulerKind::Ils, 0.9},    {SchedulerKind::Random, 0.9}, {SchedulerKind::Progressive, 0.9}};
    for (auto seed : seeds)
      for (auto [kind, f] : plan) {
        RunLog log = fine(kind, f, seed, false);
        const auto [first, last] = loss_ends(log);
        converged &= last < first;
        ++run_count;
        acc[{scheduler_name(kind), f}].push_back(log.final_eval.accuracy);
        std::printf("  seed %llu %-11s F=%.2f accuracy %.4f loss %.4f -> %.4f\n", static_cast<unsigned long long>(seed),
                    scheduler_name(kind), f, log.final_eval.accuracy, first, last);
        if (kind == SchedulerKind::Ils && f == f_main) main_runs[seed] = std::move(log);
      }
    if (!main_runs.contains(seeds[0])) main_runs[seeds[0]] = fine(SchedulerKind::Ils, f_main, seeds[0], false);

    const RunLog& main = main_runs.at(seeds[0]);
    int decayed = 0;
    for (const auto& trace : main.distance_trace) {
      const std::size_t q = trace.size() / 4;
      if (q == 0) continue;
      const std::vector<double> head(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(q));
      const std::vector<double> tail(trace.end() - static_cast<std::ptrdiff_t>(q), trace.end());
      decayed += median(tail) < median(head);
    }
    const double decay_share = decayed / static_cast<double>(main.distance_trace.size());

    const double base = mean(acc[{"ils", 0.0}]);
    double worst_gap = 0;
    for (double f : {0.5, 0.8}) worst_gap = std::max(worst_gap, base - mean(acc[{"ils", f}]));
    const double ils9 = mean(acc[{"ils", 0.9}]), rnd9 = mean(acc[{"random", 0.9}]),
                 prog9 = mean(acc[{"progressive", 0.9}]);
    const bool a = decay_share >= 0.8, b = worst_gap <= 0.02, c1 = ils9 >= rnd9, c2 = rnd9 >= prog9 - 0.01,
               d = converged;
    std::printf("  (a) distance decay in %d/%zu layers (%.0f%%, ILS F=%.2f seed %llu) %s\n", decayed,
                main.distance_trace.size(), 100 * decay_share, f_main, static_cast<unsigned long long>(seeds[0]),
                a ? "ok" : "FAIL");
    std::printf("  (b) mean accuracy F=0 %.4f, ILS F=0.5 %.4f, ILS F=0.8 %.4f, largest drop %.2f points %s\n", base,
                mean(acc[{"ils", 0.5}]), mean(acc[{"ils", 0.8}]), 100 * worst_gap, b ? "ok" : "FAIL");
    std::printf("  (c) F=0.9 mean accuracy ILS %.4f, random %.4f, progressive %.4f: ILS>=random %s, "
                "random>=progressive-1pt %s\n",
                ils9, rnd9, prog9, c1 ? "ok" : "FAIL", c2 ? "ok" : "FAIL");
    std::printf("  (d) mean loss of last 16 iterations below first 16 in %s of %d runs\n", d ? "all" : "NOT all",
                run_count);
    return Outcome{a && b && c1 && c2 && d,
                   fmt("(a) %s (b) %s (c) %s/%s (d) %s; accuracies are means over seeds %llu-%llu", a ? "ok" : "FAIL",
                       b ? "ok" : "FAIL", c1 ? "ok" : "FAIL", c2 ? "ok" : "FAIL", d ? "ok" : "FAIL",
                       static_cast<unsigned long long>(seeds.front()), static_cast<unsigned long long>(seeds.back()))};
  });

  std::map<std::uint64_t, RunLog> codec_runs;
  report(9, "footprint balance", [&] {
    codec_runs[seeds[0]] = fine(SchedulerKind::Ils, f_main, seeds[0], true);
    const RunLog& log = codec_runs.at(seeds[0]);
    const long warm = static_cast<long>(std::ceil(1.0 / (1.0 - f_main)));
    std::int64_t lo = INT64_MAX, hi = 0;
    double audit_worst = 0;
    std::size_t mismatches = 0;
    for (const auto& r : log.memory) {
      audit_worst = std::max(audit_worst, std::abs(static_cast<double>(r.total() - r.analytic_bytes)) /
                                              static_cast<double>(r.analytic_bytes));
      mismatches += r.audit_mismatches;
      if (r.iteration < warm) continue;
      lo = std::min(lo, r.total());
      hi = std::max(hi, r.total());
    }
    const double spread = static_cast<double>(hi - lo) / static_cast<double>(lo);
    // Same decisions, block layers only: the cheap embedding/head layers are
    // what moves the total.
    const auto& reg = pretrained.registry();
    std::int64_t blo = INT64_MAX, bhi = 0;
    for (const auto& dec : log.decisions) {
      if (dec.iteration < warm) continue;
      const auto rep = account_iteration(toy.model, toy.run.batch_size, toy.task.seq_len, dec, CompressionConfig::all());
      std::int64_t block = 0;
      for (const auto& [id, bytes] : rep.per_layer_bytes())
        if (id >= 0 && reg.at(id).block >= 0) block += bytes;
      blo = std::min(blo, block);
      bhi = std::max(bhi, block);
    }
    std::printf("  block-layer caches alone vary %.1f%% (%lld..%lld bytes)\n",
                100.0 * static_cast<double>(bhi - blo) / static_cast<double>(blo), static_cast<long long>(blo),
                static_cast<long long>(bhi));
    const bool ok = spread < 0.10 && audit_worst <= 0.01 && mismatches == 0;
    return Outcome{ok, fmt("ILS F=%.2f with codecs: per-iteration bytes %lld..%lld after warm-start, spread %.1f%% "
                           "(limit 10%%); audit worst difference %.2f%%, %zu label mismatches",
                           f_main, static_cast<long long>(lo), static_cast<long long>(hi), 100 * spread,
                           100 * audit_worst, mismatches)};
  });

  report(10, "compression accuracy", [&] {
    bool ok = true;
    std::ostringstream s;
    for (auto seed : seeds) {
      if (!codec_runs.contains(seed)) codec_runs[seed] = fine(SchedulerKind::Ils, f_main, seed, true);
      if (!main_runs.contains(seed)) main_runs[seed] = fine(SchedulerKind::Ils, f_main, seed, false);
      const double off = main_runs.at(seed).final_eval.accuracy, on = codec_runs.at(seed).final_eval.accuracy;
      ok &= std::abs(on - off) <= 0.01 + 1e-12;
      s << fmt("seed %llu: %.4f off, %.4f on; ", static_cast<unsigned long long>(seed), off, on);
    }
    return Outcome{ok, s.str() + fmt("ILS F=%.2f, limit 1 point per seed", f_main)};
  });

  std::printf("%s: %d of 10 criteria failed\n", failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED", failures);
  return failures ? 1 : 0;
}
