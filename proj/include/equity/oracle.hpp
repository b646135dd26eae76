#pragma once

// Reference solvers: exhaustive enumeration for tiny instances, an exact
// subset dynamic program for slightly larger shared-depot instances, a greedy
// makespan heuristic, and a uniformly random feasible policy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "equity/error.hpp"
#include "equity/instance.hpp"
#include "equity/random.hpp"
#include "equity/routing.hpp"

namespace equity {

struct OracleResult {
  double cost = 0.0;  // original units
  Solution solution;
};

inline constexpr std::uint64_t kBruteForceSequenceBudget = 362880;  // 9!

// Enumeration limits: N <= 8 for M <= 2, N <= 7 for M = 3, and for M >= 4
// at most (N+M-1)!/(M-1)! candidate sequences.
inline bool within_brute_force_budget(int n, int m) {
  if (m <= 2) return n <= 8;
  if (m == 3) return n <= 7;
  std::uint64_t count = 1;
  for (int k = m; k <= n + m - 1; ++k) {
    count *= static_cast<std::uint64_t>(k);
    if (count > kBruteForceSequenceBudget) return false;
  }
  return true;
}

namespace detail {

// Depth-first enumeration in lexicographic token order. Independent of the
// environment's masking so the two can check each other.
class Enumerator {
 public:
  Enumerator(const Instance& inst, bool allow_empty)
      : inst_(inst),
        n_(inst.num_cities()),
        m_(inst.num_agents()),
        allow_empty_(allow_empty),
        placed_(static_cast<std::size_t>(inst.num_tokens()) + 1, 0),
        tour_of_(static_cast<std::size_t>(n_) + 1, -1) {
    const int total = inst.num_tokens();
    dist_.assign(static_cast<std::size_t>((total + 1) * (total + 1)), 0.0);
    for (int a = 1; a <= total; ++a)
      for (int b = 1; b <= total; ++b) dist_[index(a, b)] = distance(inst.point(a), inst.point(b));
  }

  std::optional<std::pair<double, std::vector<int>>> run() {
    sequence_.clear();
    search(1, inst_.depot_token(1), 0, 0.0, 0.0);
    if (best_sequence_.empty()) return std::nullopt;
    return std::make_pair(best_cost_, best_sequence_);
  }

  std::uint64_t leaves() const { return leaves_; }

 private:
  std::size_t index(int a, int b) const {
    return static_cast<std::size_t>(a) * static_cast<std::size_t>(inst_.num_tokens() + 1) + static_cast<std::size_t>(b);
  }

  void search(int agent, int last, int tour_cities, double tour_len, double worst) {
    if (agent > m_) {
      ++leaves_;
      if (static_cast<int>(sequence_.size()) == inst_.num_tokens() && worst < best_cost_ - 1e-12) {
        best_cost_ = worst;
        best_sequence_ = sequence_;
      }
      return;
    }
    for (int c = 1; c <= n_; ++c) {
      if (placed_[static_cast<std::size_t>(c)]) continue;
      if (inst_.task == TaskKind::kMpdp && inst_.role(c) == NodeRole::kDelivery &&
          tour_of_[static_cast<std::size_t>(inst_.partner(c))] != agent)
        continue;
      placed_[static_cast<std::size_t>(c)] = 1;
      tour_of_[static_cast<std::size_t>(c)] = agent;
      sequence_.push_back(c);
      ++cities_done_;
      search(agent, c, tour_cities + 1, tour_len + dist_[index(last, c)], worst);
      --cities_done_;
      sequence_.pop_back();
      tour_of_[static_cast<std::size_t>(c)] = -1;
      placed_[static_cast<std::size_t>(c)] = 0;
    }
    // Close this agent's tour.
    if (tour_cities == 0 && !allow_empty_) return;
    if (agent == m_ && cities_done_ < n_) return;
    if (inst_.task == TaskKind::kMpdp && has_open_pickup(agent)) return;
    const int depot = inst_.depot_token(agent);
    const double closed = tour_len + dist_[index(last, depot)];
    sequence_.push_back(depot);
    placed_[static_cast<std::size_t>(depot)] = 1;
    const int next_depot = agent < m_ ? inst_.depot_token(agent + 1) : 0;
    search(agent + 1, next_depot, 0, 0.0, std::max(worst, closed));
    placed_[static_cast<std::size_t>(depot)] = 0;
    sequence_.pop_back();
  }

  bool has_open_pickup(int agent) const {
    for (int p = 1; p <= n_ / 2; ++p)
      if (tour_of_[static_cast<std::size_t>(p)] == agent && !placed_[static_cast<std::size_t>(inst_.partner(p))])
        return true;
    return false;
  }

  const Instance& inst_;
  int n_, m_;
  bool allow_empty_;
  std::vector<double> dist_;
  std::vector<std::uint8_t> placed_;
  std::vector<int> tour_of_;
  std::vector<int> sequence_;
  int cities_done_ = 0;
  double best_cost_ = std::numeric_limits<double>::infinity();
  std::vector<int> best_sequence_;
  std::uint64_t leaves_ = 0;
};

}  // namespace detail

// Exhaustive search over every assignment and visiting order. Returns the
// minimum min-max cost and the lexicographically smallest arg-min sequence.
inline OracleResult brute_force(const Instance& inst, bool allow_empty_tours) {
  validate_instance(inst, false);
  if (!within_brute_force_budget(inst.num_cities(), inst.num_agents()))
    fail(ErrorKind::kBudgetExceeded, "brute force refuses N=" + std::to_string(inst.num_cities()) +
                                         ", M=" + std::to_string(inst.num_agents()) +
                                         " (limits: N<=8 for M<=2, N<=7 for M=3)");
  detail::Enumerator e(inst, allow_empty_tours);
  auto found = e.run();
  if (!found)
    fail(ErrorKind::kInfeasibleInstance, "no feasible solution: N=" + std::to_string(inst.num_cities()) +
                                             ", M=" + std::to_string(inst.num_agents()) +
                                             (allow_empty_tours ? "" : " with non-empty tours"));
  return {found->first * inst.scale_factor, {found->second, inst.id}};
}

// Exact optimum via a subset dynamic program: the best closed tour for every
// city subset, then the best split of all cities into M subsets. Requires all
// agents to share a depot. Cost only.
inline double exact_minmax_cost(const Instance& inst, bool allow_empty_tours) {
  validate_instance(inst, false);
  const int n = inst.num_cities();
  const int m = inst.num_agents();
  if (n > 16) fail(ErrorKind::kBudgetExceeded, "subset DP supports N <= 16");
  if (!inst.shared_depot()) fail(ErrorKind::kInvalidArgument, "subset DP needs a shared depot");
  const bool pdp = inst.task == TaskKind::kMpdp;
  const double inf = std::numeric_limits<double>::infinity();
  const std::size_t full = (std::size_t{1} << n);
  const Point& depot = inst.depots.front();

  std::vector<double> d(static_cast<std::size_t>(n * n));
  std::vector<double> from_depot(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    from_depot[static_cast<std::size_t>(i)] = distance(depot, inst.cities[static_cast<std::size_t>(i)]);
    for (int j = 0; j < n; ++j)
      d[static_cast<std::size_t>(i * n + j)] = distance(inst.cities[static_cast<std::size_t>(i)], inst.cities[static_cast<std::size_t>(j)]);
  }
  auto is_delivery = [&](int i) { return pdp && inst.role(i + 1) == NodeRole::kDelivery; };
  auto pickup_of = [&](int i) { return inst.partner(i + 1) - 1; };

  // path[S * n + j]: shortest depot -> ... -> j covering exactly S.
  std::vector<double> path(full * static_cast<std::size_t>(n), inf);
  for (int j = 0; j < n; ++j)
    if (!is_delivery(j)) path[(std::size_t{1} << j) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)] = from_depot[static_cast<std::size_t>(j)];
  for (std::size_t s = 1; s < full; ++s) {
    for (int j = 0; j < n; ++j) {
      const double base = path[s * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
      if (!(s >> j & 1) || base == inf) continue;
      for (int k = 0; k < n; ++k) {
        if (s >> k & 1) continue;
        if (is_delivery(k) && !(s >> pickup_of(k) & 1)) continue;
        const std::size_t t = s | (std::size_t{1} << k);
        double& slot = path[t * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)];
        slot = std::min(slot, base + d[static_cast<std::size_t>(j * n + k)]);
      }
    }
  }
  std::vector<double> tour(full, inf);
  tour[0] = allow_empty_tours ? 0.0 : inf;
  for (std::size_t s = 1; s < full; ++s) {
    if (pdp) {
      bool paired = true;
      for (int i = 0; i < n / 2 && paired; ++i) paired = ((s >> i) & 1) == ((s >> (i + n / 2)) & 1);
      if (!paired) continue;
    }
    for (int j = 0; j < n; ++j) {
      const double p = path[s * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
      if (p != inf) tour[s] = std::min(tour[s], p + from_depot[static_cast<std::size_t>(j)]);
    }
  }

  // split[S]: best makespan of k tours covering S.
  std::vector<double> split = tour;
  for (int k = 2; k <= m; ++k) {
    std::vector<double> next(full, inf);
    for (std::size_t s = 0; s < full; ++s) {
      double best = allow_empty_tours ? std::max(tour[0], split[s]) : inf;
      for (std::size_t sub = s; sub > 0; sub = (sub - 1) & s) {
        const double rest = split[s & ~sub];
        if (rest == inf || tour[sub] == inf) continue;
        best = std::min(best, std::max(tour[sub], rest));
      }
      next[s] = best;
    }
    split = std::move(next);
  }
  const double result = split[full - 1];
  if (result == inf) fail(ErrorKind::kInfeasibleInstance, "no feasible split of the cities");
  return result * inst.scale_factor;
}

// Greedy makespan construction. Each iteration appends the (agent, city) pair
// that minimizes the resulting largest projected closed-tour length; ties go
// to the lowest city, then the lowest agent. Agents without a city are served
// first once the remaining work only just covers them.
inline Solution greedy_makespan(const Instance& inst) {
  check_routable(inst);
  const int n = inst.num_cities();
  const int m = inst.num_agents();
  const bool pdp = inst.task == TaskKind::kMpdp;

  std::vector<std::vector<int>> tours(static_cast<std::size_t>(m));
  std::vector<double> open_len(static_cast<std::size_t>(m), 0.0);
  std::vector<int> last(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) last[static_cast<std::size_t>(a)] = inst.depot_token(a + 1);
  std::vector<int> owner(static_cast<std::size_t>(n) + 1, 0);  // agent (1-based) serving each city
  int unvisited = n;
  int unvisited_units = pdp ? n / 2 : n;

  auto projected = [&](int a) {
    const auto i = static_cast<std::size_t>(a);
    if (tours[i].empty()) return 0.0;
    return open_len[i] + distance(inst.point(last[i]), inst.depots[i]);
  };

  while (unvisited > 0) {
    int empty_agents = 0;
    for (const auto& t : tours) empty_agents += t.empty() ? 1 : 0;
    const bool only_empty = unvisited_units == empty_agents;

    std::vector<double> proj(static_cast<std::size_t>(m));
    for (int a = 0; a < m; ++a) proj[static_cast<std::size_t>(a)] = projected(a);

    double best_score = std::numeric_limits<double>::infinity();
    int best_city = 0, best_agent = 0;
    for (int c = 1; c <= n; ++c) {
      if (owner[static_cast<std::size_t>(c)] != 0) continue;
      const bool delivery = pdp && inst.role(c) == NodeRole::kDelivery;
      for (int a = 0; a < m; ++a) {
        const auto i = static_cast<std::size_t>(a);
        if (delivery) {
          if (owner[static_cast<std::size_t>(inst.partner(c))] != a + 1) continue;
        } else if (only_empty && !tours[i].empty()) {
          continue;
        }
        const double grown = open_len[i] + distance(inst.point(last[i]), inst.point(c)) +
                             distance(inst.point(c), inst.depots[i]);
        double score = grown;
        for (int b = 0; b < m; ++b)
          if (b != a) score = std::max(score, proj[static_cast<std::size_t>(b)]);
        if (score < best_score - 1e-12) {
          best_score = score;
          best_city = c;
          best_agent = a;
        }
      }
    }
    const auto i = static_cast<std::size_t>(best_agent);
    open_len[i] += distance(inst.point(last[i]), inst.point(best_city));
    last[i] = best_city;
    tours[i].push_back(best_city);
    owner[static_cast<std::size_t>(best_city)] = best_agent + 1;
    --unvisited;
    if (!pdp || inst.role(best_city) == NodeRole::kPickup) --unvisited_units;
  }

  Solution sol;
  sol.instance_id = inst.id;
  for (int a = 0; a < m; ++a) {
    for (int c : tours[static_cast<std::size_t>(a)]) sol.sequence.push_back(c);
    sol.sequence.push_back(inst.depot_token(a + 1));
  }
  return sol;
}

// Uniform choice among the feasible actions at every step.
inline Solution random_policy(const Instance& inst, Rng& rng) {
  SequenceState s = initial_state(inst);
  std::vector<int> options;
  while (!s.terminal()) {
    const ActionMask mask = feasible_actions(s, inst);
    options.clear();
    for (std::size_t j = 0; j < mask.size(); ++j)
      if (mask[j]) options.push_back(static_cast<int>(j) + 1);
    s = apply_action(s, options[uniform_index(rng, options.size())], inst);
  }
  return {s.partial_sequence, inst.id};
}

}  // namespace equity
