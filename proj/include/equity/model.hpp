#pragma once

// The equity-context transformer policy.
//
// Encoder: city and agent tokens are projected to D dimensions; agent rows
// get a sinusoidal positional signal so identical agents acquire a virtual
// order. A stack of attention / normalization / feedforward blocks follows.
//
// Context: at every step the decoder query is built from the mean node
// embedding, the active agent and its current node, the ratio of remaining
// cities to idle agents, and the (tour length so far, farthest remaining
// city) distance pair.
//
// Decoder: a masked multi-head glimpse over the node embeddings followed by a
// clipped single-head pointer over all N+M tokens.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "equity/autodiff.hpp"
#include "equity/error.hpp"
#include "equity/instance.hpp"
#include "equity/random.hpp"
#include "equity/routing.hpp"

namespace equity {

using Matrix = ad::Matrix;
using RowVector = ad::RowVector;

struct ModelConfig {
  int embed_dim = 128;
  int num_heads = 8;
  int num_encoder_layers = 3;
  int feedforward_dim = 512;
  double logit_clip = 10.0;
  bool use_mpe = true;
  bool use_context_encoder = true;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate_config(const ModelConfig& c) {
  if (c.embed_dim < 1 || c.num_heads < 1 || c.num_encoder_layers < 1 || c.feedforward_dim < 1)
    fail(ErrorKind::kInvalidConfig, "model dimensions must be positive");
  if (c.embed_dim % c.num_heads != 0)
    fail(ErrorKind::kInvalidConfig, "embed_dim " + std::to_string(c.embed_dim) + " is not divisible by num_heads " +
                                        std::to_string(c.num_heads));
  if (!(c.logit_clip > 0.0)) fail(ErrorKind::kInvalidConfig, "logit_clip must be positive");
}

// ---------------------------------------------------------------------------
// Parameters

struct EncoderLayerParams {
  Matrix wq, wk, wv, wo;
  Matrix norm1_gain, norm1_bias;
  Matrix ff_w1, ff_b1, ff_w2, ff_b2;
  Matrix norm2_gain, norm2_bias;
};

// theta_en
struct EncoderParams {
  Matrix city_w, city_b;    // g_city
  Matrix agent_w, agent_b;  // g_agent
  Matrix role;              // pickup / delivery embedding (MPDP)
  std::vector<EncoderLayerParams> layers;
};

// theta_context
struct ContextParams {
  Matrix agent_w;     // [h_acting ; h_current] -> D
  Matrix scale_w;     // N_t / M_t -> D
  Matrix distance_w;  // [d_source ; d_target] -> D
  Matrix ce_w1, ce_b1, ce_w2, ce_b2;
  Matrix plain_w;     // [h_problem ; h_agent] -> D, used without the context encoder
};

// theta_de
struct DecoderParams {
  Matrix glimpse_q, glimpse_k, glimpse_v, glimpse_out;
  Matrix pointer_k;
};

enum class ParamGroup { kEncoder, kContext, kDecoder };

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEncoder: return "theta_en";
    case ParamGroup::kContext: return "theta_context";
    case ParamGroup::kDecoder: return "theta_de";
  }
  return "?";
}

inline constexpr std::array<ParamGroup, 3> kAllGroups{ParamGroup::kEncoder, ParamGroup::kContext,
                                                      ParamGroup::kDecoder};

struct ModelParams {
  EncoderParams encoder;
  ContextParams context;
  DecoderParams decoder;
};

template <class Self, class F>
void visit_group(Self& enc, F&& f)
  requires std::is_same_v<std::remove_const_t<Self>, EncoderParams>
{
  f("city_w", enc.city_w);
  f("city_b", enc.city_b);
  f("agent_w", enc.agent_w);
  f("agent_b", enc.agent_b);
  f("role", enc.role);
  for (std::size_t i = 0; i < enc.layers.size(); ++i) {
    auto& l = enc.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    f(p + "wq", l.wq);
    f(p + "wk", l.wk);
    f(p + "wv", l.wv);
    f(p + "wo", l.wo);
    f(p + "norm1_gain", l.norm1_gain);
    f(p + "norm1_bias", l.norm1_bias);
    f(p + "ff_w1", l.ff_w1);
    f(p + "ff_b1", l.ff_b1);
    f(p + "ff_w2", l.ff_w2);
    f(p + "ff_b2", l.ff_b2);
    f(p + "norm2_gain", l.norm2_gain);
    f(p + "norm2_bias", l.norm2_bias);
  }
}

template <class Self, class F>
void visit_group(Self& ctx, F&& f)
  requires std::is_same_v<std::remove_const_t<Self>, ContextParams>
{
  f("agent_w", ctx.agent_w);
  f("scale_w", ctx.scale_w);
  f("distance_w", ctx.distance_w);
  f("ce_w1", ctx.ce_w1);
  f("ce_b1", ctx.ce_b1);
  f("ce_w2", ctx.ce_w2);
  f("ce_b2", ctx.ce_b2);
  f("plain_w", ctx.plain_w);
}

template <class Self, class F>
void visit_group(Self& dec, F&& f)
  requires std::is_same_v<std::remove_const_t<Self>, DecoderParams>
{
  f("glimpse_q", dec.glimpse_q);
  f("glimpse_k", dec.glimpse_k);
  f("glimpse_v", dec.glimpse_v);
  f("glimpse_out", dec.glimpse_out);
  f("pointer_k", dec.pointer_k);
}

// Calls f(group, name, tensor) for every tensor in a fixed order.
template <class Self, class F>
void visit_params(Self& p, F&& f)
  requires std::is_same_v<std::remove_const_t<Self>, ModelParams>
{
  visit_group(p.encoder, [&](const std::string& n, auto& m) { f(ParamGroup::kEncoder, n, m); });
  visit_group(p.context, [&](const std::string& n, auto& m) { f(ParamGroup::kContext, n, m); });
  visit_group(p.decoder, [&](const std::string& n, auto& m) { f(ParamGroup::kDecoder, n, m); });
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t count = 0;
  visit_params(p, [&](ParamGroup, const std::string&, const Matrix& m) { count += static_cast<std::size_t>(m.size()); });
  return count;
}

// Same shapes, all zeros.
inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  visit_params(z, [](ParamGroup, const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

// FNV-1a over the raw bytes of one group's tensors.
inline std::uint64_t checksum(const ModelParams& p, ParamGroup group) {
  std::uint64_t h = 1469598103934665603ULL;
  visit_params(p, [&](ParamGroup g, const std::string&, const Matrix& m) {
    if (g != group) return;
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  });
  return h;
}

namespace detail {

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = bound * (2.0 * uniform01(rng) - 1.0);
  return m;
}

// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Matrix weight(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return uniform_matrix(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

inline Matrix bias(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return uniform_matrix(1, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace detail

inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  Rng rng(seed);
  const Eigen::Index d = config.embed_dim;
  const Eigen::Index f = config.feedforward_dim;
  using detail::bias;
  using detail::weight;

  ModelParams p;
  p.encoder.city_w = weight(2, d, rng);
  p.encoder.city_b = bias(2, d, rng);
  p.encoder.agent_w = weight(2, d, rng);
  p.encoder.agent_b = bias(2, d, rng);
  p.encoder.role = weight(2, d, rng);
  for (int l = 0; l < config.num_encoder_layers; ++l) {
    EncoderLayerParams layer;
    layer.wq = weight(d, d, rng);
    layer.wk = weight(d, d, rng);
    layer.wv = weight(d, d, rng);
    layer.wo = weight(d, d, rng);
    layer.norm1_gain = Matrix::Ones(1, d);
    layer.norm1_bias = Matrix::Zero(1, d);
    layer.ff_w1 = weight(d, f, rng);
    layer.ff_b1 = bias(d, f, rng);
    layer.ff_w2 = weight(f, d, rng);
    layer.ff_b2 = bias(f, d, rng);
    layer.norm2_gain = Matrix::Ones(1, d);
    layer.norm2_bias = Matrix::Zero(1, d);
    p.encoder.layers.push_back(std::move(layer));
  }

  p.context.agent_w = weight(2 * d, d, rng);
  p.context.scale_w = weight(1, d, rng);
  p.context.distance_w = weight(2, d, rng);
  p.context.ce_w1 = weight(4 * d, d, rng);
  p.context.ce_b1 = bias(4 * d, d, rng);
  p.context.ce_w2 = weight(d, d, rng);
  p.context.ce_b2 = bias(d, d, rng);
  p.context.plain_w = weight(2 * d, d, rng);

  p.decoder.glimpse_q = weight(d, d, rng);
  p.decoder.glimpse_k = weight(d, d, rng);
  p.decoder.glimpse_v = weight(d, d, rng);
  p.decoder.glimpse_out = weight(d, d, rng);
  p.decoder.pointer_k = weight(d, d, rng);
  return p;
}

inline void check_shapes(const ModelParams& p, const ModelConfig& c) {
  validate_config(c);
  const Eigen::Index d = c.embed_dim;
  auto expect = [](const Matrix& m, Eigen::Index r, Eigen::Index cols, const char* what) {
    if (m.rows() != r || m.cols() != cols)
      fail(ErrorKind::kInvalidConfig, std::string(what) + " has shape " + std::to_string(m.rows()) + "x" +
                                          std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                                          std::to_string(cols));
  };
  expect(p.encoder.city_w, 2, d, "city_w");
  expect(p.encoder.agent_w, 2, d, "agent_w");
  if (static_cast<int>(p.encoder.layers.size()) != c.num_encoder_layers)
    fail(ErrorKind::kInvalidConfig, "encoder layer count does not match the config");
  for (const auto& l : p.encoder.layers) {
    expect(l.wq, d, d, "wq");
    expect(l.ff_w1, d, c.feedforward_dim, "ff_w1");
  }
  expect(p.context.ce_w1, 4 * d, d, "ce_w1");
  expect(p.decoder.pointer_k, d, d, "pointer_k");
}

// ---------------------------------------------------------------------------
// Forward pass on a tape

// M x D sinusoidal table; row m encodes position m.
inline Matrix positional_encoding(int num_agents, int dim) {
  Matrix pe(num_agents, dim);
  for (int m = 0; m < num_agents; ++m) {
    for (int i = 0; i < dim; ++i) {
      const int k2 = i - (i % 2);
      const double angle = m / std::pow(10000.0, static_cast<double>(k2) / dim);
      pe(m, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// Gradient destinations; a null group is frozen.
struct GradSinks {
  EncoderParams* encoder = nullptr;
  ContextParams* context = nullptr;
  DecoderParams* decoder = nullptr;

  static GradSinks all(ModelParams& g) { return {&g.encoder, &g.context, &g.decoder}; }
  static GradSinks context_only(ModelParams& g) { return {nullptr, &g.context, nullptr}; }
};

namespace detail {

struct BoundLayer {
  ad::Var wq, wk, wv, wo, n1g, n1b, w1, b1, w2, b2, n2g, n2b;
};

// Tape leaves for every parameter, bound once per rollout.
struct BoundParams {
  ad::Var city_w, city_b, agent_w, agent_b, role;
  std::vector<BoundLayer> layers;
  ad::Var ctx_agent_w, scale_w, distance_w, ce_w1, ce_b1, ce_w2, ce_b2, plain_w;
  ad::Var glimpse_q, glimpse_k, glimpse_v, glimpse_out, pointer_k;

  BoundParams(ad::Tape& t, const ModelParams& p, const GradSinks& s) {
    auto bind = [&t](const Matrix& m, auto* group, auto member) {
      return t.param(m, group ? &(group->*member) : nullptr);
    };
    const auto* e = &p.encoder;
    city_w = bind(e->city_w, s.encoder, &EncoderParams::city_w);
    city_b = bind(e->city_b, s.encoder, &EncoderParams::city_b);
    agent_w = bind(e->agent_w, s.encoder, &EncoderParams::agent_w);
    agent_b = bind(e->agent_b, s.encoder, &EncoderParams::agent_b);
    role = bind(e->role, s.encoder, &EncoderParams::role);
    for (std::size_t i = 0; i < e->layers.size(); ++i) {
      const auto& l = e->layers[i];
      EncoderLayerParams* g = s.encoder ? &s.encoder->layers[i] : nullptr;
      BoundLayer b;
      b.wq = bind(l.wq, g, &EncoderLayerParams::wq);
      b.wk = bind(l.wk, g, &EncoderLayerParams::wk);
      b.wv = bind(l.wv, g, &EncoderLayerParams::wv);
      b.wo = bind(l.wo, g, &EncoderLayerParams::wo);
      b.n1g = bind(l.norm1_gain, g, &EncoderLayerParams::norm1_gain);
      b.n1b = bind(l.norm1_bias, g, &EncoderLayerParams::norm1_bias);
      b.w1 = bind(l.ff_w1, g, &EncoderLayerParams::ff_w1);
      b.b1 = bind(l.ff_b1, g, &EncoderLayerParams::ff_b1);
      b.w2 = bind(l.ff_w2, g, &EncoderLayerParams::ff_w2);
      b.b2 = bind(l.ff_b2, g, &EncoderLayerParams::ff_b2);
      b.n2g = bind(l.norm2_gain, g, &EncoderLayerParams::norm2_gain);
      b.n2b = bind(l.norm2_bias, g, &EncoderLayerParams::norm2_bias);
      layers.push_back(b);
    }
    const auto* c = &p.context;
    ctx_agent_w = bind(c->agent_w, s.context, &ContextParams::agent_w);
    scale_w = bind(c->scale_w, s.context, &ContextParams::scale_w);
    distance_w = bind(c->distance_w, s.context, &ContextParams::distance_w);
    ce_w1 = bind(c->ce_w1, s.context, &ContextParams::ce_w1);
    ce_b1 = bind(c->ce_b1, s.context, &ContextParams::ce_b1);
    ce_w2 = bind(c->ce_w2, s.context, &ContextParams::ce_w2);
    ce_b2 = bind(c->ce_b2, s.context, &ContextParams::ce_b2);
    plain_w = bind(c->plain_w, s.context, &ContextParams::plain_w);
    const auto* d = &p.decoder;
    glimpse_q = bind(d->glimpse_q, s.decoder, &DecoderParams::glimpse_q);
    glimpse_k = bind(d->glimpse_k, s.decoder, &DecoderParams::glimpse_k);
    glimpse_v = bind(d->glimpse_v, s.decoder, &DecoderParams::glimpse_v);
    glimpse_out = bind(d->glimpse_out, s.decoder, &DecoderParams::glimpse_out);
    pointer_k = bind(d->pointer_k, s.decoder, &DecoderParams::pointer_k);
  }
};

inline ad::Var encode_on(ad::Tape& t, const BoundParams& bp, const Instance& inst, const ModelConfig& cfg) {
  const int n = inst.num_cities();
  const int m = inst.num_agents();
  Matrix city_xy(n, 2), agent_xy(m, 2);
  for (int i = 0; i < n; ++i) city_xy.row(i) << inst.cities[static_cast<std::size_t>(i)].x, inst.cities[static_cast<std::size_t>(i)].y;
  for (int i = 0; i < m; ++i) agent_xy.row(i) << inst.depots[static_cast<std::size_t>(i)].x, inst.depots[static_cast<std::size_t>(i)].y;

  ad::Var cities = t.linear(t.constant(std::move(city_xy)), bp.city_w, bp.city_b);
  if (inst.task == TaskKind::kMpdp) {
    Matrix onehot = Matrix::Zero(n, 2);
    for (int i = 0; i < n; ++i) onehot(i, inst.role(i + 1) == NodeRole::kPickup ? 0 : 1) = 1.0;
    cities = t.add(cities, t.matmul(t.constant(std::move(onehot)), bp.role));
  }
  ad::Var agents = t.linear(t.constant(std::move(agent_xy)), bp.agent_w, bp.agent_b);
  if (cfg.use_mpe) agents = t.add(agents, t.constant(positional_encoding(m, cfg.embed_dim)));

  const std::array<ad::Var, 2> rows{cities, agents};
  ad::Var h = t.vcat(rows);
  for (const auto& l : bp.layers) {
    ad::Var att = t.attention(t.matmul(h, l.wq), t.matmul(h, l.wk), t.matmul(h, l.wv), cfg.num_heads);
    h = t.token_norm(t.add(h, t.matmul(att, l.wo)), l.n1g, l.n1b);
    ad::Var ff = t.linear(t.relu(t.linear(h, l.w1, l.b1)), l.w2, l.b2);
    h = t.token_norm(t.add(h, ff), l.n2g, l.n2b);
  }
  return h;
}

// Largest depot-to-city distance among unvisited cities.
inline double farthest_remaining(const SequenceState& s, const Instance& inst) {
  const Point& depot = inst.depots[static_cast<std::size_t>(s.active_agent - 1)];
  double best = 0.0;
  for (int c = 1; c <= inst.num_cities(); ++c)
    if (!s.is_visited(c)) best = std::max(best, distance(depot, inst.point(c)));
  return best;
}

struct ContextVars {
  ad::Var context, problem, agent, scale, distance;
  bool has_encoder_parts = false;
};

inline ContextVars context_on(ad::Tape& t, const BoundParams& bp, ad::Var h, ad::Var problem,
                              const SequenceState& s, const Instance& inst, const ModelConfig& cfg) {
  if (s.terminal()) fail(ErrorKind::kIllegalState, "context requested for a terminal state");
  ContextVars out;
  out.problem = problem;
  const std::array<ad::Var, 2> agent_parts{t.row(h, inst.depot_token(s.active_agent) - 1), t.row(h, s.last_node - 1)};
  out.agent = t.matmul(t.hcat(agent_parts), bp.ctx_agent_w);
  if (!cfg.use_context_encoder) {
    const std::array<ad::Var, 2> parts{problem, out.agent};
    out.context = t.matmul(t.hcat(parts), bp.plain_w);
    return out;
  }
  out.has_encoder_parts = true;
  const double ratio = static_cast<double>(s.remaining_cities) / static_cast<double>(s.idle_agents);
  out.scale = t.scale(bp.scale_w, ratio);
  Matrix dist(1, 2);
  dist << s.active_length(), farthest_remaining(s, inst);
  out.distance = t.matmul(t.constant(std::move(dist)), bp.distance_w);
  const std::array<ad::Var, 4> parts{problem, out.agent, out.scale, out.distance};
  out.context = t.linear(t.relu(t.linear(t.hcat(parts), bp.ce_w1, bp.ce_b1)), bp.ce_w2, bp.ce_b2);
  return out;
}

// Projections of the node embeddings reused by every decoding step.
struct DecoderCache {
  ad::Var keys, values, pointer_keys;
};

inline DecoderCache decoder_cache(ad::Tape& t, const BoundParams& bp, ad::Var h) {
  return {t.matmul(h, bp.glimpse_k), t.matmul(h, bp.glimpse_v), t.matmul(h, bp.pointer_k)};
}

inline ad::Var decode_on(ad::Tape& t, const BoundParams& bp, const DecoderCache& cache, ad::Var context,
                         const ActionMask& mask, const ModelConfig& cfg) {
  ad::Var query = t.matmul(context, bp.glimpse_q);
  ad::Var glimpse = t.attention(query, cache.keys, cache.values, cfg.num_heads, &mask);
  ad::Var g = t.matmul(glimpse, bp.glimpse_out);
  return t.pointer_log_probs(g, cache.pointer_keys, mask, cfg.logit_clip);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public inference surface

struct EncoderOutput {
  Matrix H;  // (N+M) x D, rows in token order
};

inline EncoderOutput encode(const Instance& inst, const ModelParams& params, const ModelConfig& config) {
  check_shapes(params, config);
  validate_instance(inst, false);
  ad::Tape t(false);
  detail::BoundParams bp(t, params, {});
  return {t.value(detail::encode_on(t, bp, inst, config))};
}

struct Context {
  RowVector context;
  RowVector problem, agent, scale, distance;  // scale/distance empty without the context encoder
};

inline Context build_context(const SequenceState& state, const EncoderOutput& enc, const Instance& inst,
                             const ModelParams& params, const ModelConfig& config) {
  ad::Tape t(false);
  detail::BoundParams bp(t, params, {});
  ad::Var h = t.constant(enc.H);
  auto vars = detail::context_on(t, bp, h, t.mean_rows(h), state, inst, config);
  Context out;
  out.context = t.value(vars.context).row(0);
  out.problem = t.value(vars.problem).row(0);
  out.agent = t.value(vars.agent).row(0);
  if (vars.has_encoder_parts) {
    out.scale = t.value(vars.scale).row(0);
    out.distance = t.value(vars.distance).row(0);
  }
  return out;
}

// Probability of each token 1..N+M (index token - 1); masked entries are 0.
inline RowVector decode_step(const RowVector& context, const EncoderOutput& enc, const ActionMask& mask,
                             const ModelParams& params, const ModelConfig& config) {
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }))
    fail(ErrorKind::kIllegalState, "every action is masked");
  ad::Tape t(false);
  detail::BoundParams bp(t, params, {});
  ad::Var h = t.constant(enc.H);
  auto cache = detail::decoder_cache(t, bp, h);
  ad::Var logp = detail::decode_on(t, bp, cache, t.constant(Matrix(context)), mask, config);
  return t.value(logp).row(0).array().exp().matrix();
}

enum class DecodeMode { kGreedy, kSample };

struct RolloutResult {
  Solution solution;
  double log_prob = 0.0;
  double cost = 0.0;
};

// A rollout recorded on a tape; `log_prob` is the tape scalar holding the
// sum of chosen-action log probabilities.
struct TapedRollout {
  Solution solution;
  ad::Var log_prob;
  double cost = 0.0;
};

// Runs the policy on `t`. With `forced` set, the given sequence is scored
// instead of choosing actions.
inline TapedRollout rollout_on(ad::Tape& t, const Instance& inst, const ModelParams& params,
                               const ModelConfig& config, const GradSinks& sinks, DecodeMode mode, Rng* rng,
                               const std::vector<int>* forced = nullptr) {
  detail::BoundParams bp(t, params, sinks);
  ad::Var h = detail::encode_on(t, bp, inst, config);
  ad::Var problem = t.mean_rows(h);
  const auto cache = detail::decoder_cache(t, bp, h);

  SequenceState state = initial_state(inst);
  std::vector<ad::Var> step_log_probs;
  step_log_probs.reserve(static_cast<std::size_t>(inst.num_tokens()));
  while (!state.terminal()) {
    const ActionMask mask = feasible_actions(state, inst);
    auto ctx = detail::context_on(t, bp, h, problem, state, inst, config);
    ad::Var logp = detail::decode_on(t, bp, cache, ctx.context, mask, config);
    const auto& row = t.value(logp);

    int choice = 0;
    if (forced) {
      choice = (*forced)[static_cast<std::size_t>(state.t)];
      if (choice < 1 || choice > inst.num_tokens() || !mask[static_cast<std::size_t>(choice - 1)])
        fail(ErrorKind::kConstraintViolation, "forced token " + std::to_string(choice) + " is infeasible");
    } else if (mode == DecodeMode::kGreedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < row.cols(); ++j)
        if (mask[static_cast<std::size_t>(j)] && row(0, j) > best) {
          best = row(0, j);
          choice = static_cast<int>(j) + 1;
        }
    } else {
      const double u = uniform01(*rng);
      double acc = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        choice = static_cast<int>(j) + 1;  // last feasible entry absorbs rounding
        acc += std::exp(row(0, j));
        if (u < acc) break;
      }
    }
    step_log_probs.push_back(t.pick(logp, choice - 1));
    state = apply_action(state, choice, inst);
  }
  TapedRollout out;
  out.solution = {state.partial_sequence, inst.id};
  out.log_prob = t.sum(step_log_probs);
  out.cost = minmax_cost(out.solution, inst);
  return out;
}

inline RolloutResult rollout(const Instance& inst, const ModelParams& params, const ModelConfig& config,
                             DecodeMode mode, Rng& rng) {
  check_shapes(params, config);
  ad::Tape t(false);
  auto r = rollout_on(t, inst, params, config, {}, mode, &rng);
  return {std::move(r.solution), t.scalar(r.log_prob), r.cost};
}

inline RolloutResult greedy_rollout(const Instance& inst, const ModelParams& params, const ModelConfig& config) {
  Rng unused(0);
  return rollout(inst, params, config, DecodeMode::kGreedy, unused);
}

// Log probability of a given feasible sequence under the policy.
inline double sequence_log_prob(const Instance& inst, const std::vector<int>& sequence, const ModelParams& params,
                                const ModelConfig& config) {
  if (static_cast<int>(sequence.size()) != inst.num_tokens())
    fail(ErrorKind::kInvalidArgument, "sequence length does not match the instance");
  ad::Tape t(false);
  auto r = rollout_on(t, inst, params, config, {}, DecodeMode::kGreedy, nullptr, &sequence);
  return t.scalar(r.log_prob);
}

// ---------------------------------------------------------------------------
// Checkpoints: "EQTC", format version, config, then each parameter group as
// (name, tensor count, [name, rows, cols, raw doubles]...). Native byte order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::kParseError, "truncated checkpoint");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto len = read_pod<std::uint32_t>(in);
  if (len > (1u << 20)) fail(ErrorKind::kParseError, "corrupt checkpoint string");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) fail(ErrorKind::kParseError, "truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params) {
  using detail::write_pod;
  out.write("EQTC", 4);
  write_pod(out, kCheckpointVersion);
  write_pod<std::int32_t>(out, config.embed_dim);
  write_pod<std::int32_t>(out, config.num_heads);
  write_pod<std::int32_t>(out, config.num_encoder_layers);
  write_pod<std::int32_t>(out, config.feedforward_dim);
  write_pod(out, config.logit_clip);
  write_pod<std::uint8_t>(out, config.use_mpe);
  write_pod<std::uint8_t>(out, config.use_context_encoder);
  for (ParamGroup group : kAllGroups) {
    std::vector<std::pair<std::string, const Matrix*>> tensors;
    visit_params(params, [&](ParamGroup g, const std::string& name, const Matrix& m) {
      if (g == group) tensors.emplace_back(name, &m);
    });
    detail::write_string(out, std::string(to_string(group)));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
      detail::write_string(out, name);
      write_pod<std::int64_t>(out, m->rows());
      write_pod<std::int64_t>(out, m->cols());
      out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
    }
  }
  if (!out) fail(ErrorKind::kIoError, "checkpoint write failed");
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  using detail::read_pod;
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "EQTC", 4) != 0) fail(ErrorKind::kParseError, "not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(ErrorKind::kUnsupportedFormat, "checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config.embed_dim = read_pod<std::int32_t>(in);
  ck.config.num_heads = read_pod<std::int32_t>(in);
  ck.config.num_encoder_layers = read_pod<std::int32_t>(in);
  ck.config.feedforward_dim = read_pod<std::int32_t>(in);
  ck.config.logit_clip = read_pod<double>(in);
  ck.config.use_mpe = read_pod<std::uint8_t>(in) != 0;
  ck.config.use_context_encoder = read_pod<std::uint8_t>(in) != 0;
  validate_config(ck.config);

  // Shapes come from a freshly initialized model; the stored tensors must match it.
  ck.params = init_params(ck.config, 0);
  for (ParamGroup group : kAllGroups) {
    if (detail::read_string(in) != to_string(group)) fail(ErrorKind::kParseError, "unexpected parameter group");
    std::vector<std::pair<std::string, Matrix*>> tensors;
    visit_params(ck.params, [&](ParamGroup g, const std::string& name, Matrix& m) {
      if (g == group) tensors.emplace_back(name, &m);
    });
    if (read_pod<std::uint32_t>(in) != tensors.size()) fail(ErrorKind::kParseError, "tensor count mismatch");
    for (auto& [name, m] : tensors) {
      if (detail::read_string(in) != name) fail(ErrorKind::kParseError, "unexpected tensor, wanted " + name);
      const auto rows = read_pod<std::int64_t>(in);
      const auto cols = read_pod<std::int64_t>(in);
      if (rows != m->rows() || cols != m->cols()) fail(ErrorKind::kParseError, "shape mismatch for " + name);
      in.read(reinterpret_cast<char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
      if (!in) fail(ErrorKind::kParseError, "truncated checkpoint");
    }
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIoError, "cannot write " + path);
  write_checkpoint(out, config, params);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIoError, "cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace equity
