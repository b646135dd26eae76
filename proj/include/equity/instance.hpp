#pragma once

// Routing problem instances: generation, TSPLIB import, normalization,
// isometric transforms, and the JSON instance file format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "equity/error.hpp"
#include "equity/random.hpp"

namespace equity {

enum class TaskKind { kMtsp, kMpdp };

inline std::string_view to_string(TaskKind task) { return task == TaskKind::kMtsp ? "mtsp" : "mpdp"; }

inline TaskKind parse_task(std::string_view text) {
  if (text == "mtsp") return TaskKind::kMtsp;
  if (text == "mpdp") return TaskKind::kMpdp;
  fail(ErrorKind::kInvalidArgument, "unknown task kind '" + std::string(text) + "'");
}

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

enum class NodeRole : std::uint8_t { kCity, kPickup, kDelivery };

// Token numbering is 1-based throughout: 1..N are cities, N+1..N+M are the
// per-agent depot tokens.
struct Instance {
  TaskKind task = TaskKind::kMtsp;
  std::vector<Point> cities;
  std::vector<Point> depots;
  double scale_factor = 1.0;
  std::string id;

  int num_cities() const { return static_cast<int>(cities.size()); }
  int num_agents() const { return static_cast<int>(depots.size()); }
  int num_tokens() const { return num_cities() + num_agents(); }

  bool is_city(int token) const { return token >= 1 && token <= num_cities(); }
  bool is_depot(int token) const { return token > num_cities() && token <= num_tokens(); }
  int depot_token(int agent) const { return num_cities() + agent; }

  const Point& point(int token) const {
    return token <= num_cities() ? cities[static_cast<std::size_t>(token - 1)]
                                 : depots[static_cast<std::size_t>(token - num_cities() - 1)];
  }

  // Per-city feature: MPDP cities 1..N/2 are pickups, N/2+1..N deliveries.
  NodeRole role(int city) const {
    if (task == TaskKind::kMtsp) return NodeRole::kCity;
    return city <= num_cities() / 2 ? NodeRole::kPickup : NodeRole::kDelivery;
  }

  // The pickup/delivery partner of an MPDP city.
  int partner(int city) const {
    const int half = num_cities() / 2;
    return city <= half ? city + half : city - half;
  }

  bool shared_depot() const {
    return std::all_of(depots.begin(), depots.end(), [&](const Point& p) { return p == depots.front(); });
  }
};

// Checks the structural invariants. Coordinates are checked against the unit
// square only when `require_unit_square` is set.
inline void validate_instance(const Instance& inst, bool require_unit_square = true) {
  if (inst.num_cities() < 1) fail(ErrorKind::kInvalidArgument, "instance has no cities");
  if (inst.num_agents() < 1) fail(ErrorKind::kInvalidArgument, "instance has no agents");
  if (inst.task == TaskKind::kMpdp && inst.num_cities() % 2 != 0)
    fail(ErrorKind::kInvalidArgument, "MPDP instance needs an even number of cities");
  if (!(inst.scale_factor > 0.0) || !std::isfinite(inst.scale_factor))
    fail(ErrorKind::kInvalidArgument, "scale_factor must be positive");
  if (require_unit_square) {
    auto inside = [](const Point& p) { return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0; };
    if (!std::all_of(inst.cities.begin(), inst.cities.end(), inside) ||
        !std::all_of(inst.depots.begin(), inst.depots.end(), inside))
      fail(ErrorKind::kInvalidArgument, "coordinates outside the unit square");
  }
}

inline Instance generate_uniform(TaskKind task, int n_cities, int m_agents, std::uint64_t seed) {
  if (n_cities < 1) fail(ErrorKind::kInvalidArgument, "n_cities must be >= 1");
  if (m_agents < 1) fail(ErrorKind::kInvalidArgument, "m_agents must be >= 1");
  if (task == TaskKind::kMpdp && n_cities % 2 != 0)
    fail(ErrorKind::kInvalidArgument, "MPDP needs an even number of cities, got " + std::to_string(n_cities));

  Rng rng(seed);
  Instance inst;
  inst.task = task;
  // The depot is drawn first, like any other node.
  const Point depot{uniform01(rng), uniform01(rng)};
  inst.depots.assign(static_cast<std::size_t>(m_agents), depot);
  inst.cities.reserve(static_cast<std::size_t>(n_cities));
  for (int i = 0; i < n_cities; ++i) {
    const double x = uniform01(rng);
    inst.cities.push_back({x, uniform01(rng)});
  }
  inst.id = std::string(to_string(task)) + "-n" + std::to_string(n_cities) + "-m" + std::to_string(m_agents) +
            "-s" + std::to_string(seed);
  return inst;
}

// A set of `count` instances drawn from consecutive seeds.
inline std::vector<Instance> generate_set(TaskKind task, int n_cities, int m_agents, std::uint64_t seed,
                                          int count) {
  std::vector<Instance> set;
  set.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) set.push_back(generate_uniform(task, n_cities, m_agents, seed + i));
  return set;
}

// ---------------------------------------------------------------------------
// Isometric transforms

enum class TransformKind { kRotation, kDihedral };

struct GeometricTransform {
  TransformKind kind = TransformKind::kDihedral;
  double angle = 0.0;   // radians, rotations only
  int element = 0;      // 0..7, dihedral only; 0 is the identity
  bool reflect = false; // rotations only: mirror across x = pivot.x before rotating
  Point pivot{0.5, 0.5};

  static GeometricTransform dihedral(int element) {
    if (element < 0 || element > 7) fail(ErrorKind::kInvalidTransform, "dihedral element must be in 0..7");
    GeometricTransform t;
    t.element = element;
    return t;
  }

  static GeometricTransform rotation(double angle, bool reflect = false, Point pivot = {0.5, 0.5}) {
    GeometricTransform t;
    t.kind = TransformKind::kRotation;
    t.angle = angle;
    t.reflect = reflect;
    t.pivot = pivot;
    return t;
  }

  bool is_identity() const {
    return kind == TransformKind::kDihedral ? element == 0 : (angle == 0.0 && !reflect);
  }

  Point apply(const Point& p) const {
    const double u = p.x - pivot.x;
    const double v = p.y - pivot.y;
    if (kind == TransformKind::kDihedral) {
      // (u', v') for each element of the symmetry group of the square.
      switch (element) {
        case 0: return {pivot.x + u, pivot.y + v};
        case 1: return {pivot.x - u, pivot.y + v};
        case 2: return {pivot.x + u, pivot.y - v};
        case 3: return {pivot.x - u, pivot.y - v};
        case 4: return {pivot.x + v, pivot.y + u};
        case 5: return {pivot.x - v, pivot.y + u};
        case 6: return {pivot.x + v, pivot.y - u};
        default: return {pivot.x - v, pivot.y - u};
      }
    }
    const double ru = reflect ? -u : u;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    return {pivot.x + c * ru - s * v, pivot.y + s * ru + c * v};
  }

  GeometricTransform inverse() const {
    GeometricTransform inv = *this;
    if (kind == TransformKind::kDihedral) {
      if (element == 5) inv.element = 6;
      if (element == 6) inv.element = 5;
      return inv;
    }
    // (R F)^-1 = F R^-1, and F R(-a) = R(a) F, so a reflected rotation is an involution.
    if (!reflect) inv.angle = -angle;
    return inv;
  }
};

// Maps every node without checking bounds. Training symmetries use this:
// rotated coordinates may leave the unit square.
inline Instance transform_unchecked(const Instance& inst, const GeometricTransform& t) {
  Instance out = inst;
  for (auto& p : out.cities) p = t.apply(p);
  for (auto& p : out.depots) p = t.apply(p);
  return out;
}

inline Instance apply_transform(const Instance& inst, const GeometricTransform& t) {
  constexpr double kNoise = 1e-9;
  Instance out = transform_unchecked(inst, t);
  auto clamp = [&](Point& p) {
    for (double* c : {&p.x, &p.y}) {
      if (*c < -kNoise || *c > 1.0 + kNoise)
        fail(ErrorKind::kInvalidTransform, "transform moves a point outside the unit square");
      *c = std::clamp(*c, 0.0, 1.0);
    }
  };
  for (auto& p : out.cities) clamp(p);
  for (auto& p : out.depots) clamp(p);
  return out;
}

inline std::array<GeometricTransform, 8> dihedral_group() {
  std::array<GeometricTransform, 8> group;
  for (int k = 0; k < 8; ++k) group[static_cast<std::size_t>(k)] = GeometricTransform::dihedral(k);
  return group;
}

// Uniform angle in [0, 2pi) composed with a fair-coin reflection.
inline GeometricTransform random_symmetry(Rng& rng) {
  const double angle = 2.0 * std::numbers::pi * uniform01(rng);
  const bool reflect = (rng() >> 63) != 0;
  return GeometricTransform::rotation(angle, reflect);
}

// ---------------------------------------------------------------------------
// TSPLIB (EUC_2D subset)

struct TsplibNode {
  int index = 0;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const TsplibNode&, const TsplibNode&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

inline std::vector<TsplibNode> parse_tsplib(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  long dimension = -1;
  std::string weight_type;
  bool in_coords = false;
  std::vector<TsplibNode> nodes;

  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    if (body == "EOF") break;
    if (in_coords) {
      std::istringstream fields(body);
      TsplibNode node;
      std::string extra;
      if (!(fields >> node.index >> node.x >> node.y) || (fields >> extra))
        fail(ErrorKind::kParseError, "malformed coordinate at line " + std::to_string(line_no) + ": '" + body + "'");
      nodes.push_back(node);
      continue;
    }
    if (body.rfind("NODE_COORD_SECTION", 0) == 0) {
      if (weight_type != "EUC_2D")
        fail(ErrorKind::kUnsupportedFormat,
             "EDGE_WEIGHT_TYPE '" + weight_type + "' is not supported (EUC_2D only)");
      in_coords = true;
      continue;
    }
    const auto colon = body.find(':');
    if (colon == std::string::npos) {
      // Sections other than node coordinates (EDGE_WEIGHT_SECTION, ...) are unsupported.
      if (body.find("_SECTION") != std::string::npos)
        fail(ErrorKind::kUnsupportedFormat, "section '" + body + "' is not supported");
      continue;
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, colon));
    const std::string value = detail::trim(std::string_view(body).substr(colon + 1));
    if (key == "DIMENSION") {
      try {
        dimension = std::stol(value);
      } catch (const std::exception&) {
        fail(ErrorKind::kParseError, "bad DIMENSION at line " + std::to_string(line_no));
      }
    } else if (key == "EDGE_WEIGHT_TYPE") {
      weight_type = value;
      if (weight_type != "EUC_2D")
        fail(ErrorKind::kUnsupportedFormat, "EDGE_WEIGHT_TYPE '" + weight_type + "' is not supported (EUC_2D only)");
    }
  }
  if (dimension < 0) fail(ErrorKind::kParseError, "missing DIMENSION");
  if (!in_coords) fail(ErrorKind::kParseError, "missing NODE_COORD_SECTION");
  if (static_cast<long>(nodes.size()) != dimension)
    fail(ErrorKind::kParseError, "expected " + std::to_string(dimension) + " coordinates, found " +
                                     std::to_string(nodes.size()));
  return nodes;
}

// First coordinate becomes the shared depot; the rest become cities. The
// bounding box is scaled uniformly into the unit square and `scale_factor`
// restores original units.
inline Instance to_routing_instance(const std::vector<Point>& coords, int m_agents, std::string id = "tsplib") {
  if (m_agents < 1) fail(ErrorKind::kInvalidArgument, "m_agents must be >= 1");
  if (coords.size() < 2) fail(ErrorKind::kInvalidArgument, "need a depot and at least one city");
  double min_x = coords[0].x, max_x = coords[0].x, min_y = coords[0].y, max_y = coords[0].y;
  for (const auto& p : coords) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const double side = std::max(max_x - min_x, max_y - min_y);
  if (!(side > 0.0)) fail(ErrorKind::kInvalidArgument, "all coordinates coincide");

  auto normalize = [&](const Point& p) {
    return Point{std::clamp((p.x - min_x) / side, 0.0, 1.0), std::clamp((p.y - min_y) / side, 0.0, 1.0)};
  };
  Instance inst;
  inst.task = TaskKind::kMtsp;
  inst.id = std::move(id);
  inst.scale_factor = side;
  inst.depots.assign(static_cast<std::size_t>(m_agents), normalize(coords.front()));
  for (std::size_t i = 1; i < coords.size(); ++i) inst.cities.push_back(normalize(coords[i]));
  return inst;
}

inline Instance to_routing_instance(const std::vector<TsplibNode>& nodes, int m_agents, std::string id = "tsplib") {
  std::vector<Point> coords;
  coords.reserve(nodes.size());
  for (const auto& n : nodes) coords.push_back({n.x, n.y});
  return to_routing_instance(coords, m_agents, std::move(id));
}

// ---------------------------------------------------------------------------
// JSON instance files

inline nlohmann::json to_json(const Instance& inst) {
  nlohmann::json j;
  j["task"] = std::string(to_string(inst.task));
  j["n"] = inst.num_cities();
  j["m"] = inst.num_agents();
  auto& cities = j["cities"] = nlohmann::json::array();
  for (const auto& p : inst.cities) cities.push_back({p.x, p.y});
  j["depot"] = {inst.depots.front().x, inst.depots.front().y};
  if (!inst.shared_depot()) {
    auto& depots = j["depots"] = nlohmann::json::array();
    for (const auto& p : inst.depots) depots.push_back({p.x, p.y});
  }
  j["scale_factor"] = inst.scale_factor;
  j["id"] = inst.id;
  return j;
}

inline Instance instance_from_json(const nlohmann::json& j) {
  try {
    Instance inst;
    inst.task = parse_task(j.at("task").get<std::string>());
    const int n = j.at("n").get<int>();
    const int m = j.at("m").get<int>();
    for (const auto& c : j.at("cities")) inst.cities.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (j.contains("depots")) {
      for (const auto& c : j.at("depots")) inst.depots.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    } else {
      const auto& d = j.at("depot");
      inst.depots.assign(static_cast<std::size_t>(std::max(m, 0)), Point{d.at(0).get<double>(), d.at(1).get<double>()});
    }
    inst.scale_factor = j.value("scale_factor", 1.0);
    inst.id = j.value("id", std::string{});
    if (inst.num_cities() != n) fail(ErrorKind::kParseError, "'n' does not match the number of cities");
    if (inst.num_agents() != m) fail(ErrorKind::kParseError, "'m' does not match the number of depots");
    validate_instance(inst);
    return inst;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseError, std::string("instance JSON: ") + e.what());
  }
}

// Instance files hold a single object or an array of objects.
inline std::vector<Instance> load_instances(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIoError, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParseError, path + ": " + e.what());
  }
  std::vector<Instance> out;
  if (j.is_array()) {
    for (const auto& item : j) out.push_back(instance_from_json(item));
  } else {
    out.push_back(instance_from_json(j));
  }
  return out;
}

inline void save_instances(const std::string& path, const std::vector<Instance>& instances) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIoError, "cannot write " + path);
  if (instances.size() == 1) {
    out << to_json(instances.front()).dump(2) << '\n';
    return;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& inst : instances) arr.push_back(to_json(inst));
  out << arr.dump(2) << '\n';
}

}  // namespace equity
