#include "equity/oracle.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace equity {
namespace {

Instance make_mtsp(std::vector<Point> cities, Point depot, int m) {
  Instance inst;
  inst.cities = std::move(cities);
  inst.depots.assign(static_cast<std::size_t>(m), depot);
  inst.id = "hand";
  return inst;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIoError;
}

TEST(BruteForce, UnitSquareCorners) {
  const Instance inst = make_mtsp({{0, 1}, {1, 0}, {1, 1}}, {0, 0}, 2);
  for (bool allow_empty : {true, false}) {
    const OracleResult r = brute_force(inst, allow_empty);
    EXPECT_NEAR(r.cost, 2.0 + std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(minmax_cost(r.solution, inst), r.cost, 1e-12);
    EXPECT_NEAR(exact_minmax_cost(inst, allow_empty), r.cost, 1e-12);
  }
}

TEST(BruteForce, SingleCity) {
  const Instance inst = make_mtsp({{0.3, 0.4}}, {0, 0}, 1);
  const OracleResult r = brute_force(inst, false);
  EXPECT_NEAR(r.cost, 1.0, 1e-12);
  EXPECT_EQ(r.solution.sequence, (std::vector<int>{1, 2}));
}

TEST(BruteForce, PigeonholeIsInfeasible) {
  const Instance inst = make_mtsp({{0.3, 0.4}}, {0, 0}, 2);
  EXPECT_EQ(kind_of([&] { brute_force(inst, false); }), ErrorKind::kInfeasibleInstance);
  EXPECT_NEAR(brute_force(inst, true).cost, 1.0, 1e-12);
  EXPECT_EQ(brute_force(inst, true).solution.sequence, (std::vector<int>{1, 2, 3}));
}

TEST(BruteForce, BudgetRefusal) {
  EXPECT_TRUE(within_brute_force_budget(8, 2));
  EXPECT_FALSE(within_brute_force_budget(9, 2));
  EXPECT_TRUE(within_brute_force_budget(7, 3));
  EXPECT_FALSE(within_brute_force_budget(8, 3));
  EXPECT_TRUE(within_brute_force_budget(6, 4));  // 9!/3! = 60480
  EXPECT_FALSE(within_brute_force_budget(7, 4));
  const Instance big = generate_uniform(TaskKind::kMtsp, 9, 2, 1);
  EXPECT_EQ(kind_of([&] { brute_force(big, false); }), ErrorKind::kBudgetExceeded);
}

TEST(BruteForce, EmptyToursNeverHurt) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Instance inst = generate_uniform(TaskKind::kMtsp, 5, 3, seed);
    EXPECT_LE(brute_force(inst, true).cost, brute_force(inst, false).cost + 1e-12);
  }
}

TEST(BruteForce, AgreesWithSubsetProgram) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int n = 3 + static_cast<int>(seed % 5);
    const int m = 1 + static_cast<int>(seed % 3);
    if (n < m) continue;
    const Instance inst = generate_uniform(TaskKind::kMtsp, n, m, 500 + seed);
    const OracleResult r = brute_force(inst, false);
    EXPECT_NEAR(exact_minmax_cost(inst, false), r.cost, 1e-9) << "N=" << n << " M=" << m;
    EXPECT_NEAR(exact_minmax_cost(inst, true), brute_force(inst, true).cost, 1e-9);
  }
}

TEST(BruteForce, PickupDeliveryAgreesWithSubsetProgram) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int n = seed % 2 == 0 ? 4 : 6;
    const int m = seed % 3 == 0 ? 1 : 2;
    const Instance inst = generate_uniform(TaskKind::kMpdp, n, m, 700 + seed);
    const OracleResult r = brute_force(inst, false);
    EXPECT_TRUE(validate(r.solution, inst).empty());
    EXPECT_NEAR(minmax_cost(r.solution, inst), r.cost, 1e-9);
    EXPECT_NEAR(exact_minmax_cost(inst, false), r.cost, 1e-9);
  }
}

TEST(BruteForce, ScaleFactorApplies) {
  Instance inst = make_mtsp({{0, 1}, {1, 0}, {1, 1}}, {0, 0}, 2);
  inst.scale_factor = 3.0;
  EXPECT_NEAR(brute_force(inst, false).cost, 3.0 * (2.0 + std::sqrt(2.0)), 1e-12);
  EXPECT_NEAR(exact_minmax_cost(inst, false), 3.0 * (2.0 + std::sqrt(2.0)), 1e-12);
}

TEST(GreedyMakespan, SymmetricPair) {
  const Instance inst = make_mtsp({{0.9, 0.5}, {0.1, 0.5}}, {0.5, 0.5}, 2);
  const Solution sol = greedy_makespan(inst);
  EXPECT_EQ(sol.sequence, (std::vector<int>{1, 3, 2, 4}));
  EXPECT_NEAR(minmax_cost(sol, inst), 0.8, 1e-12);
}

TEST(GreedyMakespan, ValidAndBoundedByOptimum) {
  for (TaskKind task : {TaskKind::kMtsp, TaskKind::kMpdp}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Instance inst = generate_uniform(task, 6, 2, seed);
      const Solution sol = greedy_makespan(inst);
      EXPECT_TRUE(validate(sol, inst).empty()) << to_string(task) << " seed " << seed;
      EXPECT_GE(minmax_cost(sol, inst), brute_force(inst, false).cost - 1e-12);
    }
  }
}

TEST(GreedyMakespan, EveryAgentGetsWork) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Instance inst = generate_uniform(TaskKind::kMtsp, 5, 5, seed);
    const auto tours = decompose(greedy_makespan(inst), inst);
    for (const auto& t : tours) EXPECT_EQ(t.size(), 2u);
  }
  EXPECT_EQ(kind_of([] { greedy_makespan(generate_uniform(TaskKind::kMtsp, 2, 3, 0)); }),
            ErrorKind::kInfeasibleInstance);
}

TEST(RandomPolicy, ValidAndSeeded) {
  for (TaskKind task : {TaskKind::kMtsp, TaskKind::kMpdp}) {
    const Instance inst = generate_uniform(task, 20, 4, 3);
    Rng a(8), b(8);
    const Solution sa = random_policy(inst, a);
    EXPECT_TRUE(validate(sa, inst).empty());
    EXPECT_EQ(sa.sequence, random_policy(inst, b).sequence);
  }
}

TEST(RandomPolicy, NeverBeatsOptimum) {
  const Instance inst = generate_uniform(TaskKind::kMtsp, 6, 2, 42);
  const double best = exact_minmax_cost(inst, false);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) EXPECT_GE(minmax_cost(random_policy(inst, rng), inst), best - 1e-12);
}

}  // namespace
}  // namespace equity
