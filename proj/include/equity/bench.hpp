#pragma once

// Evaluation harness: dihedral-augmented inference, per-method batch
// evaluation with timing, report emission, and serial/parallel throughput.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "equity/error.hpp"
#include "equity/instance.hpp"
#include "equity/model.hpp"
#include "equity/oracle.hpp"
#include "equity/routing.hpp"

namespace equity {

struct AugmentedResult {
  Solution solution;
  double cost = 0.0;
  int best_variant = 0;
};

// Greedy rollouts on the first `width` dihedral images (identity first). Labels
// are unchanged by the transforms, so every candidate is scored on the
// original instance and the cheapest wins; ties keep the earlier variant.
inline AugmentedResult solve_augmented(const Instance& inst, const ModelParams& params, const ModelConfig& config,
                                       int width) {
  if (width < 1 || width > 8) fail(ErrorKind::kInvalidArgument, "augmentation width must be in 1..8");
  AugmentedResult best;
  for (int k = 0; k < width; ++k) {
    const Instance variant = k == 0 ? inst : apply_transform(inst, GeometricTransform::dihedral(k));
    RolloutResult r = greedy_rollout(variant, params, config);
    r.solution.instance_id = inst.id;
    const double cost = minmax_cost(r.solution, inst);
    if (k == 0 || cost < best.cost) best = {std::move(r.solution), cost, k};
  }
  return best;
}

enum class Method { kModelGreedy, kModelAugmented, kGreedyMakespan, kRandom, kBruteForce };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kModelGreedy: return "model-greedy";
    case Method::kModelAugmented: return "model-augmented";
    case Method::kGreedyMakespan: return "greedy_makespan";
    case Method::kRandom: return "random";
    case Method::kBruteForce: return "brute_force";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::kModelGreedy, Method::kModelAugmented, Method::kGreedyMakespan, Method::kRandom,
                   Method::kBruteForce})
    if (to_string(m) == s) return m;
  fail(ErrorKind::kInvalidConfig, "unknown method '" + std::string(s) + "'");
}

inline bool needs_model(Method m) { return m == Method::kModelGreedy || m == Method::kModelAugmented; }

struct EvalRecord {
  std::string instance_id;
  int n = 0;
  int m = 0;
  double cost = 0.0;  // original units
  double seconds = 0.0;
  bool skipped = false;
  std::string note;
  Solution solution;
};

struct EvalReport {
  std::string method;
  std::vector<EvalRecord> records;  // sorted by instance id
  double mean_cost = 0.0;           // over evaluated records
  double mean_seconds = 0.0;
  int evaluated = 0;
  int skipped = 0;
  int n = 0;
  int m = 0;
};

struct EvalOptions {
  int augment_width = 8;
  std::uint64_t seed = 0;
  bool allow_empty_tours = false;  // brute force only
};

struct Model {
  ModelConfig config;
  ModelParams params;
};

// Wall time covers the solve only.
inline EvalReport evaluate(Method method, const std::vector<Instance>& instances, const Model* model = nullptr,
                           const EvalOptions& options = {}) {
  if (needs_model(method) && model == nullptr)
    fail(ErrorKind::kInvalidConfig, std::string(to_string(method)) + " needs model parameters");
  EvalReport report;
  report.method = std::string(to_string(method));
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Instance& inst = instances[i];
    EvalRecord rec;
    rec.instance_id = inst.id;
    rec.n = inst.num_cities();
    rec.m = inst.num_agents();
    const auto start = std::chrono::steady_clock::now();
    try {
      switch (method) {
        case Method::kModelGreedy: rec.solution = greedy_rollout(inst, model->params, model->config).solution; break;
        case Method::kModelAugmented:
          rec.solution = solve_augmented(inst, model->params, model->config, options.augment_width).solution;
          break;
        case Method::kGreedyMakespan: rec.solution = greedy_makespan(inst); break;
        case Method::kRandom: {
          Rng rng = make_stream(options.seed, i);
          rec.solution = random_policy(inst, rng);
          break;
        }
        case Method::kBruteForce: rec.solution = brute_force(inst, options.allow_empty_tours).solution; break;
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rec.cost = minmax_cost(rec.solution, inst);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kBudgetExceeded && e.kind() != ErrorKind::kInfeasibleInstance) throw;
      rec.skipped = true;
      rec.note = e.what();
    }
    report.records.push_back(std::move(rec));
  }
  std::stable_sort(report.records.begin(), report.records.end(),
                   [](const EvalRecord& a, const EvalRecord& b) { return a.instance_id < b.instance_id; });
  for (const auto& r : report.records) {
    report.n = r.n;
    report.m = r.m;
    if (r.skipped) {
      ++report.skipped;
      continue;
    }
    ++report.evaluated;
    report.mean_cost += r.cost;
    report.mean_seconds += r.seconds;
  }
  if (report.evaluated > 0) {
    report.mean_cost /= report.evaluated;
    report.mean_seconds /= report.evaluated;
  }
  return report;
}

// One row per instance; `seconds` and `cost` give time-versus-cost plots.
inline void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIoError, "cannot write " + path);
  out.precision(17);
  out << "method,instance_id,n,m,cost,seconds,status\n";
  for (const auto& r : report.records)
    out << report.method << ',' << r.instance_id << ',' << r.n << ',' << r.m << ',' << (r.skipped ? 0.0 : r.cost)
        << ',' << r.seconds << ',' << (r.skipped ? "skipped" : "ok") << '\n';
}

inline nlohmann::json report_summary(const EvalReport& report) {
  return {{"method", report.method},     {"instances", report.records.size()}, {"evaluated", report.evaluated},
          {"skipped", report.skipped},   {"mean_cost", report.mean_cost},      {"mean_seconds", report.mean_seconds},
          {"n", report.n},               {"m", report.m}};
}

// ---------------------------------------------------------------------------
// Throughput

enum class ExecMode { kSerial, kParallel };

// Runs fn(i) for i in [0, count) on `threads` workers pulling from a shared counter.
template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(count)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) fn(i);
  };
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
}

struct ThroughputResult {
  double seconds = 0.0;
  double mean_cost = 0.0;
  unsigned threads = 1;
};

// Greedy solves of `instance_count` generated instances. Parameters are shared
// read-only across workers; generation is excluded from the timing.
inline ThroughputResult throughput_bench(const ModelParams& params, const ModelConfig& config, int instance_count,
                                         int n, int m, ExecMode mode, std::uint64_t seed = 0,
                                         unsigned threads = std::thread::hardware_concurrency()) {
  const auto instances = generate_set(TaskKind::kMtsp, n, m, seed, instance_count);
  std::vector<double> costs(instances.size());
  ThroughputResult result;
  result.threads = mode == ExecMode::kSerial ? 1u : std::max(1u, threads);
  const auto start = std::chrono::steady_clock::now();
  parallel_for(instances.size(), result.threads,
               [&](std::size_t i) { costs[i] = greedy_rollout(instances[i], params, config).cost; });
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (double c : costs) result.mean_cost += c / static_cast<double>(costs.size());
  return result;
}

}  // namespace equity
