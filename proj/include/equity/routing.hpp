#pragma once

// The sequential-generation environment. A solution is a permutation of the
// tokens 1..N+M; depot token N+m closes agent m's tour, so the sequence splits
// into M tours in agent order.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "equity/error.hpp"
#include "equity/instance.hpp"

namespace equity {

struct Solution {
  std::vector<int> sequence;
  std::string instance_id;

  friend bool operator==(const Solution&, const Solution&) = default;
};

using Tour = std::vector<int>;
using ActionMask = std::vector<std::uint8_t>;  // indexed by token - 1

struct SequenceState {
  int t = 0;
  int active_agent = 1;  // M + 1 once every tour is closed
  std::vector<std::uint8_t> visited;
  int last_node = 0;
  std::vector<double> per_agent_length;
  int remaining_cities = 0;  // N_t
  int idle_agents = 0;       // M_t
  int remaining_pickups = 0;
  int tour_cities = 0;  // cities in the active agent's current tour
  std::vector<int> open_pickups;
  std::vector<int> partial_sequence;

  bool terminal() const { return idle_agents == 0; }
  double active_length() const { return per_agent_length[static_cast<std::size_t>(active_agent - 1)]; }
  bool is_visited(int token) const { return visited[static_cast<std::size_t>(token - 1)] != 0; }
  bool is_open_pickup(int city) const {
    return std::binary_search(open_pickups.begin(), open_pickups.end(), city);
  }
};

// Empty tours are forbidden, so every agent needs its own city (MTSP) or its
// own pickup/delivery pair (MPDP).
inline void check_routable(const Instance& inst) {
  validate_instance(inst, false);
  const int units = inst.task == TaskKind::kMtsp ? inst.num_cities() : inst.num_cities() / 2;
  if (units < inst.num_agents())
    fail(ErrorKind::kInfeasibleInstance,
         std::to_string(inst.num_agents()) + " agents cannot all receive a non-empty tour with " +
             std::to_string(inst.num_cities()) + " cities");
}

inline SequenceState initial_state(const Instance& inst) {
  check_routable(inst);
  SequenceState s;
  s.visited.assign(static_cast<std::size_t>(inst.num_tokens()), 0);
  s.last_node = inst.depot_token(1);
  s.per_agent_length.assign(static_cast<std::size_t>(inst.num_agents()), 0.0);
  s.remaining_cities = inst.num_cities();
  s.idle_agents = inst.num_agents();
  s.remaining_pickups = inst.task == TaskKind::kMpdp ? inst.num_cities() / 2 : 0;
  return s;
}

// Returns a description of the masking rule that forbids `token`, if any.
//   (a) visited   (b) foreign depot   (c) empty tour   (d) last agent leaves cities behind
//   (e) delivery without its pickup   (g) depot with undelivered pickups
//   (h) token needed by a later agent's non-empty tour
inline std::optional<std::string> violated_rule(const SequenceState& s, const Instance& inst, int token) {
  if (token < 1 || token > inst.num_tokens()) return "index out of range";
  if (s.is_visited(token)) return "(a) already visited";
  const int later_agents = inst.num_agents() - s.active_agent;
  if (inst.is_depot(token)) {
    if (token != inst.depot_token(s.active_agent)) return "(b) depot of another agent";
    if (s.tour_cities == 0) return "(c) empty tour";
    if (later_agents == 0 && s.remaining_cities > 0) return "(d) last agent must visit every remaining city";
    if (!s.open_pickups.empty()) return "(g) pending deliveries";
    return std::nullopt;
  }
  if (inst.task == TaskKind::kMtsp) {
    if (s.remaining_cities - 1 < later_agents) return "(h) city reserved for a later agent";
    return std::nullopt;
  }
  if (inst.role(token) == NodeRole::kDelivery) {
    if (!s.is_open_pickup(inst.partner(token))) return "(e) paired pickup not in the current tour";
    return std::nullopt;
  }
  if (s.remaining_pickups - 1 < later_agents) return "(h) pickup reserved for a later agent";
  return std::nullopt;
}

inline ActionMask feasible_actions(const SequenceState& s, const Instance& inst) {
  if (s.terminal()) fail(ErrorKind::kIllegalState, "no actions in a terminal state");
  ActionMask mask(static_cast<std::size_t>(inst.num_tokens()), 0);
  for (int token = 1; token <= inst.num_cities(); ++token)
    mask[static_cast<std::size_t>(token - 1)] = !violated_rule(s, inst, token).has_value();
  const int depot = inst.depot_token(s.active_agent);
  mask[static_cast<std::size_t>(depot - 1)] = !violated_rule(s, inst, depot).has_value();
  return mask;
}

inline SequenceState apply_action(const SequenceState& s, int token, const Instance& inst) {
  if (s.terminal()) fail(ErrorKind::kIllegalState, "state is terminal");
  if (auto rule = violated_rule(s, inst, token))
    fail(ErrorKind::kConstraintViolation, "token " + std::to_string(token) + ": " + *rule);

  SequenceState next = s;
  const auto agent = static_cast<std::size_t>(s.active_agent - 1);
  next.t += 1;
  next.visited[static_cast<std::size_t>(token - 1)] = 1;
  next.partial_sequence.push_back(token);
  next.per_agent_length[agent] += distance(inst.point(s.last_node), inst.point(token));

  if (inst.is_city(token)) {
    next.last_node = token;
    next.remaining_cities -= 1;
    next.tour_cities += 1;
    if (inst.task == TaskKind::kMpdp) {
      if (inst.role(token) == NodeRole::kPickup) {
        next.remaining_pickups -= 1;
        next.open_pickups.insert(std::upper_bound(next.open_pickups.begin(), next.open_pickups.end(), token),
                                 token);
      } else {
        auto it = std::lower_bound(next.open_pickups.begin(), next.open_pickups.end(), inst.partner(token));
        next.open_pickups.erase(it);
      }
    }
    return next;
  }

  next.idle_agents -= 1;
  next.active_agent += 1;
  next.tour_cities = 0;
  next.last_node = next.terminal() ? 0 : inst.depot_token(next.active_agent);
  return next;
}

// ---------------------------------------------------------------------------
// Solutions

// Checks every Solution invariant and reports all violations.
inline std::vector<std::string> validate(const Solution& sol, const Instance& inst) {
  std::vector<std::string> violations;
  const int n = inst.num_cities();
  const int total = inst.num_tokens();
  const auto& seq = sol.sequence;

  if (static_cast<int>(seq.size()) != total)
    violations.push_back("wrong length: expected " + std::to_string(total) + ", got " + std::to_string(seq.size()));

  std::vector<int> seen(static_cast<std::size_t>(total) + 1, 0);
  bool in_range = true;
  for (int token : seq) {
    if (token < 1 || token > total) {
      in_range = false;
      continue;
    }
    ++seen[static_cast<std::size_t>(token)];
  }
  if (!in_range) violations.push_back("index out of range");
  bool permutation = in_range && static_cast<int>(seq.size()) == total;
  for (int token = 1; token <= total && permutation; ++token)
    if (seen[static_cast<std::size_t>(token)] != 1) permutation = false;
  if (!permutation) violations.push_back("not a permutation");

  int expected_depot = n + 1;
  bool ordered = true;
  for (int token : seq) {
    if (token <= n || token > total) continue;
    if (token != expected_depot) ordered = false;
    ++expected_depot;
  }
  if (!ordered) violations.push_back("depot tokens out of agent order");
  if (seq.empty() || seq.back() != total) violations.push_back("last entry is not the final depot token");

  if (inst.task == TaskKind::kMpdp) {
    // Tour index and position of every city.
    std::vector<int> tour_of(static_cast<std::size_t>(n) + 1, -1), pos(static_cast<std::size_t>(n) + 1, -1);
    int tour = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int token = seq[i];
      if (token < 1 || token > total) continue;
      if (token > n) {
        ++tour;
        continue;
      }
      tour_of[static_cast<std::size_t>(token)] = tour;
      pos[static_cast<std::size_t>(token)] = static_cast<int>(i);
    }
    bool precedence = true, together = true;
    for (int p = 1; p <= n / 2; ++p) {
      const auto pi = static_cast<std::size_t>(p), di = static_cast<std::size_t>(p + n / 2);
      if (pos[pi] < 0 || pos[di] < 0) continue;
      if (tour_of[pi] != tour_of[di]) together = false;
      else if (pos[di] < pos[pi]) precedence = false;
    }
    if (!precedence) violations.push_back("precedence: delivery before its pickup");
    if (!together) violations.push_back("pickup and delivery served by different agents");
  }
  return violations;
}

inline std::vector<Tour> decompose(const Solution& sol, const Instance& inst) {
  if (auto violations = validate(sol, inst); !violations.empty()) {
    std::string msg;
    for (const auto& v : violations) msg += (msg.empty() ? "" : "; ") + v;
    fail(ErrorKind::kInvalidSolution, msg);
  }
  std::vector<Tour> tours;
  Tour current;
  for (int token : sol.sequence) {
    current.push_back(token);
    if (inst.is_depot(token)) {
      tours.push_back(std::move(current));
      current.clear();
    }
  }
  return tours;
}

// Interior edges plus the closing edge between the first and last entries.
inline double tour_length(const Tour& tour, const Instance& inst) {
  if (tour.empty()) fail(ErrorKind::kInvalidArgument, "empty tour");
  double length = 0.0;
  for (std::size_t i = 1; i < tour.size(); ++i) length += distance(inst.point(tour[i]), inst.point(tour[i - 1]));
  length += distance(inst.point(tour.front()), inst.point(tour.back()));
  return length;
}

// Maximum tour length in original units.
inline double minmax_cost(const Solution& sol, const Instance& inst) {
  double worst = 0.0;
  for (const auto& tour : decompose(sol, inst)) worst = std::max(worst, tour_length(tour, inst));
  return worst * inst.scale_factor;
}

// Replays a sequence through the environment from the initial state.
inline SequenceState replay(const std::vector<int>& sequence, const Instance& inst) {
  SequenceState s = initial_state(inst);
  for (int token : sequence) s = apply_action(s, token, inst);
  return s;
}

// ---------------------------------------------------------------------------
// Solution files

inline nlohmann::json to_json(const Solution& sol, double cost) {
  return {{"instance_id", sol.instance_id}, {"sequence", sol.sequence}, {"cost", cost}};
}

struct SolutionRecord {
  Solution solution;
  double cost = 0.0;
};

inline SolutionRecord solution_from_json(const nlohmann::json& j) {
  try {
    SolutionRecord rec;
    rec.solution.instance_id = j.at("instance_id").get<std::string>();
    rec.solution.sequence = j.at("sequence").get<std::vector<int>>();
    rec.cost = j.at("cost").get<double>();
    return rec;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseError, std::string("solution JSON: ") + e.what());
  }
}

inline std::vector<SolutionRecord> load_solutions(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIoError, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseError, path + ": " + e.what());
  }
  std::vector<SolutionRecord> out;
  if (j.is_array()) {
    for (const auto& item : j) out.push_back(solution_from_json(item));
  } else {
    out.push_back(solution_from_json(j));
  }
  return out;
}

inline void save_solutions(const std::string& path, const std::vector<SolutionRecord>& records) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIoError, "cannot write " + path);
  if (records.size() == 1) {
    out << to_json(records.front().solution, records.front().cost).dump(2) << '\n';
    return;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) arr.push_back(to_json(r.solution, r.cost));
  out << arr.dump(2) << '\n';
}

}  // namespace equity
