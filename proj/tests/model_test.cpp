#include "equity/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

namespace equity {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.embed_dim = 16;
  c.num_heads = 4;
  c.num_encoder_layers = 2;
  c.feedforward_dim = 32;
  return c;
}

TEST(Config, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(validate_config(c));
  c.num_heads = 3;
  EXPECT_THROW(validate_config(c), Error);
  c = small_config();
  c.logit_clip = 0.0;
  EXPECT_THROW(validate_config(c), Error);
}

TEST(Params, ShapeMismatchIsInvalidConfig) {
  const ModelParams p = init_params(small_config(), 1);
  ModelConfig other = small_config();
  other.embed_dim = 8;
  other.num_heads = 2;
  try {
    encode(generate_uniform(TaskKind::kMtsp, 5, 2, 1), p, other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidConfig);
  }
}

TEST(PositionalEncoding, Rows) {
  const Matrix pe = positional_encoding(3, 8);
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(pe(0, i), i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe(1, 0), std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe(1, 3), std::cos(1.0 / std::pow(10000.0, 2.0 / 8.0)), 1e-15);
  EXPECT_GT((pe.row(0) - pe.row(1)).norm(), 0.0);
  EXPECT_EQ(pe, positional_encoding(3, 8));
}

TEST(Encode, ShapeAndAgentRows) {
  ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 3);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 7, 3, 2);
  const EncoderOutput with = encode(inst, p, cfg);
  EXPECT_EQ(with.H.rows(), 10);
  EXPECT_EQ(with.H.cols(), 16);
  EXPECT_GT((with.H.row(7) - with.H.row(8)).norm(), 1e-6);

  cfg.use_mpe = false;
  const EncoderOutput without = encode(inst, p, cfg);
  // equal up to rounding; GEMM blocking may differ per row
  EXPECT_LT((without.H.row(7) - without.H.row(8)).norm(), 1e-12);
  EXPECT_LT((without.H.row(8) - without.H.row(9)).norm(), 1e-12);
}

TEST(Context, ScaleRatio) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 4);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 100, 10, 1);
  const SequenceState s = initial_state(inst);
  const Context ctx = build_context(s, encode(inst, p, cfg), inst, p, cfg);
  const RowVector expected = 10.0 * p.context.scale_w.row(0);
  EXPECT_LT((ctx.scale - expected).norm(), 1e-12);
}

TEST(Context, FreshStateDistances) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 4);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 12, 2, 8);
  double farthest = 0.0;
  for (const auto& c : inst.cities) farthest = std::max(farthest, distance(inst.depots[0], c));
  const Context ctx = build_context(initial_state(inst), encode(inst, p, cfg), inst, p, cfg);
  const RowVector expected = farthest * p.context.distance_w.row(1);  // d_source = 0
  EXPECT_LT((ctx.distance - expected).norm(), 1e-12);
}

TEST(Context, ProblemIsMeanOfRows) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 4);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 6, 2, 8);
  EncoderOutput enc;
  enc.H = Matrix::Constant(8, 16, 0.25);
  const Context ctx = build_context(initial_state(inst), enc, inst, p, cfg);
  EXPECT_LT((ctx.problem - RowVector::Constant(16, 0.25)).norm(), 1e-15);
}

TEST(Context, PlainVariantAndTerminalState) {
  ModelConfig cfg = small_config();
  cfg.use_context_encoder = false;
  const ModelParams p = init_params(cfg, 4);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 2, 1, 8);
  const EncoderOutput enc = encode(inst, p, cfg);
  const Context ctx = build_context(initial_state(inst), enc, inst, p, cfg);
  EXPECT_EQ(ctx.scale.size(), 0);
  EXPECT_EQ(ctx.context.size(), 16);
  try {
    build_context(replay({1, 2, 3}, inst), enc, inst, p, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIllegalState);
  }
}

TEST(DecodeStep, DistributionProperties) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 5);
  const Instance inst = generate_uniform(TaskKind::kMpdp, 8, 2, 3);
  const EncoderOutput enc = encode(inst, p, cfg);
  Rng rng(9);
  SequenceState s = initial_state(inst);
  while (!s.terminal()) {
    const ActionMask mask = feasible_actions(s, inst);
    const RowVector probs = decode_step(build_context(s, enc, inst, p, cfg).context, enc, mask, p, cfg);
    EXPECT_NEAR(probs.sum(), 1.0, 1e-6);
    double lo = 1.0, hi = 0.0;
    int choice = 0;
    for (int j = 0; j < inst.num_tokens(); ++j) {
      if (!mask[static_cast<std::size_t>(j)]) {
        EXPECT_EQ(probs(j), 0.0);
        continue;
      }
      EXPECT_GE(probs(j), 0.0);
      lo = std::min(lo, probs(j));
      hi = std::max(hi, probs(j));
      choice = j + 1;
    }
    EXPECT_LE(hi / lo, std::exp(2.0 * cfg.logit_clip) * (1.0 + 1e-9));
    (void)rng;
    s = apply_action(s, choice, inst);
  }
}

TEST(DecodeStep, AllMaskedIsIllegal) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 5);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 4, 2, 3);
  const EncoderOutput enc = encode(inst, p, cfg);
  const RowVector c = RowVector::Zero(16);
  EXPECT_THROW(decode_step(c, enc, ActionMask(6, 0), p, cfg), Error);
}

TEST(DecodeStep, ZeroPointerKeysGiveUniform) {
  const ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 5);
  p.decoder.pointer_k.setZero();
  const Instance inst = generate_uniform(TaskKind::kMtsp, 5, 2, 3);
  const EncoderOutput enc = encode(inst, p, cfg);
  const ActionMask mask{1, 0, 1, 1, 0, 0, 0};
  const RowVector probs = decode_step(RowVector::Ones(16), enc, mask, p, cfg);
  for (int j : {0, 2, 3}) EXPECT_NEAR(probs(j), 1.0 / 3.0, 1e-15);
}

TEST(Rollout, GreedyIsDeterministicAndValid) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 6);
  for (TaskKind task : {TaskKind::kMtsp, TaskKind::kMpdp}) {
    const Instance inst = generate_uniform(task, 10, 3, 4);
    const RolloutResult a = greedy_rollout(inst, p, cfg);
    const RolloutResult b = greedy_rollout(inst, p, cfg);
    EXPECT_EQ(a.solution.sequence, b.solution.sequence);
    EXPECT_TRUE(validate(a.solution, inst).empty());
    EXPECT_DOUBLE_EQ(a.cost, minmax_cost(a.solution, inst));
  }
}

TEST(Rollout, SeededSamplingReproduces) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 6);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 12, 2, 4);
  Rng r1(77), r2(77);
  const auto a = rollout(inst, p, cfg, DecodeMode::kSample, r1);
  const auto b = rollout(inst, p, cfg, DecodeMode::kSample, r2);
  EXPECT_EQ(a.solution.sequence, b.solution.sequence);
  EXPECT_EQ(a.log_prob, b.log_prob);
}

TEST(Rollout, LogProbIsProductOfStepProbabilities) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 7);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 9, 3, 5);
  const RolloutResult r = greedy_rollout(inst, p, cfg);
  const EncoderOutput enc = encode(inst, p, cfg);
  double product = 1.0;
  SequenceState s = initial_state(inst);
  for (int token : r.solution.sequence) {
    const RowVector probs =
        decode_step(build_context(s, enc, inst, p, cfg).context, enc, feasible_actions(s, inst), p, cfg);
    product *= probs(token - 1);
    s = apply_action(s, token, inst);
  }
  EXPECT_NEAR(std::exp(r.log_prob), product, 1e-6 * product);
  EXPECT_NEAR(sequence_log_prob(inst, r.solution.sequence, p, cfg), r.log_prob, 1e-12);
}

TEST(Rollout, CityPermutationEquivariance) {
  const ModelConfig cfg = small_config();
  const ModelParams p = init_params(cfg, 8);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Instance inst = generate_uniform(TaskKind::kMtsp, 15, 3, 100 + static_cast<std::uint64_t>(trial));
    std::vector<int> order(15);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Instance shuffled = inst;
    for (std::size_t i = 0; i < order.size(); ++i) shuffled.cities[i] = inst.cities[static_cast<std::size_t>(order[i])];
    EXPECT_NEAR(greedy_rollout(shuffled, p, cfg).cost, greedy_rollout(inst, p, cfg).cost, 1e-6);
  }
}

TEST(Params, GroupsAndChecksums) {
  const ModelConfig cfg = small_config();
  ModelParams p = init_params(cfg, 9);
  const auto before = checksum(p, ParamGroup::kEncoder);
  EXPECT_EQ(before, checksum(init_params(cfg, 9), ParamGroup::kEncoder));
  p.context.scale_w(0, 0) += 1.0;
  EXPECT_EQ(before, checksum(p, ParamGroup::kEncoder));
  p.encoder.city_w(0, 0) = std::nextafter(p.encoder.city_w(0, 0), 1e9);
  EXPECT_NE(before, checksum(p, ParamGroup::kEncoder));
  EXPECT_GT(parameter_count(p), 0u);
}

TEST(Checkpoint, BitExactRoundTrip) {
  ModelConfig cfg = small_config();
  cfg.use_mpe = false;
  const ModelParams p = init_params(cfg, 10);
  std::stringstream buffer;
  write_checkpoint(buffer, cfg, p);
  const Checkpoint back = read_checkpoint(buffer);
  EXPECT_EQ(back.config, cfg);
  for (ParamGroup g : kAllGroups) EXPECT_EQ(checksum(back.params, g), checksum(p, g));
  EXPECT_EQ(back.params.decoder.pointer_k, p.decoder.pointer_k);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream junk("not a checkpoint");
  EXPECT_THROW(read_checkpoint(junk), Error);

  std::stringstream buffer;
  write_checkpoint(buffer, small_config(), init_params(small_config(), 1));
  std::string bytes = buffer.str();
  bytes[4] = 9;  // version
  std::stringstream wrong_version(bytes);
  try {
    read_checkpoint(wrong_version);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUnsupportedFormat);
  }
  std::stringstream truncated(buffer.str().substr(0, buffer.str().size() / 2));
  EXPECT_THROW(read_checkpoint(truncated), Error);
}

}  // namespace
}  // namespace equity
