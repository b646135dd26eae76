#include "equity/training.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"

namespace equity {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.num_encoder_layers = 2;
  c.feedforward_dim = 16;
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("equity_training_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

TEST(SymmetricBatch, IdentityFirstAndIsometries) {
  const Instance inst = generate_uniform(TaskKind::kMtsp, 10, 2, 3);
  Rng rng(1);
  const SymmetricBatch b = symmetric_batch(inst, 8, rng);
  ASSERT_EQ(b.instances.size(), 8u);
  EXPECT_EQ(b.instances[0].cities, inst.cities);
  const Solution sol{{1, 2, 3, 4, 5, 11, 6, 7, 8, 9, 10, 12}, ""};
  const double base = minmax_cost(sol, inst);
  for (const auto& v : b.instances) EXPECT_NEAR(minmax_cost(sol, v), base, 1e-12);
  EXPECT_THROW(symmetric_batch(inst, 1, rng), Error);
}

TEST(SharedBaseline, MeanOfCosts) {
  const std::vector<double> costs{2.0, 4.0};
  EXPECT_DOUBLE_EQ(shared_baseline(costs), 3.0);
  EXPECT_THROW(shared_baseline(std::span<const double>{}), Error);
}

TEST(SharedBaseline, AdvantagesSumToZero) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = init_params(cfg, 2);
  const Instance inst = generate_uniform(TaskKind::kMtsp, 8, 2, 5);
  Rng rng(4);
  const auto batch = symmetric_batch(inst, 8, rng);
  std::vector<double> costs;
  for (const auto& v : batch.instances) costs.push_back(rollout(v, p, cfg, DecodeMode::kSample, rng).cost);
  const double b = shared_baseline(costs);
  double total = 0.0;
  for (double c : costs) total += c - b;
  EXPECT_NEAR(total, 0.0, 1e-12);
}

TEST(TrainConfigCheck, RejectsDegenerateValues) {
  TrainConfig c = toy_train_profile();
  EXPECT_NO_THROW(validate_train_config(c));
  c.num_symmetric = 1;
  EXPECT_THROW(validate_train_config(c), Error);
  c = toy_train_profile();
  c.learning_rate = 0.0;
  EXPECT_THROW(validate_train_config(c), Error);
  EXPECT_EQ(full_train_profile().total_steps(), 100L * 2500);
}

TEST(Gradient, MatchesFiniteDifferences) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = init_params(cfg, 11);
  const std::vector<Instance> instances{generate_uniform(TaskKind::kMtsp, 4, 2, 21)};
  const auto errors = testing::surrogate_gradient_check(p, cfg, instances, 4, 99);
  for (ParamGroup g : kAllGroups) {
    const auto& e = errors.at(g);
    EXPECT_GT(e.analytic_norm, 0.0) << to_string(g);
    EXPECT_LE(e.relative, 1e-3) << to_string(g);
  }
}

TEST(Gradient, PickupDeliveryAndPlainContext) {
  ModelConfig cfg = tiny_config();
  cfg.use_context_encoder = false;
  cfg.use_mpe = false;
  const ModelParams p = init_params(cfg, 12);
  // N=4, M=2 pickup-delivery has a single cost class, so every advantage vanishes
  const std::vector<Instance> instances{generate_uniform(TaskKind::kMpdp, 6, 2, 22)};
  const auto errors = testing::surrogate_gradient_check(p, cfg, instances, 3, 7);
  for (ParamGroup g : kAllGroups) {
    EXPECT_GT(errors.at(g).analytic_norm, 1e-8) << to_string(g);
    EXPECT_LE(errors.at(g).relative, 1e-3) << to_string(g);
  }
}

TEST(Gradient, SmallStepAcrossSeeds) {
  // small step keeps relu pre-activations on one side of the kink
  const ModelConfig cfg = tiny_config();
  const std::vector<Instance> instances{generate_uniform(TaskKind::kMtsp, 4, 2, 41)};
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto errors = testing::surrogate_gradient_check(init_params(cfg, seed), cfg, instances, 4, seed, 1e-6);
    for (ParamGroup g : kAllGroups) EXPECT_LE(errors.at(g).relative, 1e-5) << to_string(g) << " seed " << seed;
  }
}

TEST(Gradient, ContextOnlyLeavesOtherSinksEmpty) {
  const ModelConfig cfg = tiny_config();
  const ModelParams p = init_params(cfg, 13);
  const std::vector<Instance> instances{generate_uniform(TaskKind::kMtsp, 6, 2, 1)};
  ModelParams grads = zeros_like(p);
  Rng rng(5);
  reinforce_gradient(p, cfg, instances, 4, true, rng, grads);
  double other = 0.0, context = 0.0;
  visit_params(grads, [&](ParamGroup g, const std::string&, const Matrix& m) {
    (g == ParamGroup::kContext ? context : other) += m.squaredNorm();
  });
  EXPECT_EQ(other, 0.0);
  EXPECT_GT(context, 0.0);
}

TEST(Adam, UpdatesSelectedGroupsOnly) {
  const ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 3);
  ModelParams g = zeros_like(p);
  visit_params(g, [](ParamGroup, const std::string&, Matrix& m) { m.setOnes(); });
  const auto enc = checksum(p, ParamGroup::kEncoder);
  const auto ctx = checksum(p, ParamGroup::kContext);
  Adam opt(p, 0.1);
  constexpr std::array<ParamGroup, 1> only{ParamGroup::kContext};
  opt.step(p, g, only);
  EXPECT_EQ(checksum(p, ParamGroup::kEncoder), enc);
  EXPECT_NE(checksum(p, ParamGroup::kContext), ctx);
  // First Adam step moves every entry by lr against the gradient sign.
  const ModelParams fresh = init_params(cfg, 3);
  EXPECT_NEAR(p.context.scale_w(0, 0), fresh.context.scale_w(0, 0) - 0.1, 1e-9);
}

TEST(Finetune, FreezesEncoderAndDecoder) {
  const ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 14);
  const auto enc = checksum(p, ParamGroup::kEncoder);
  const auto dec = checksum(p, ParamGroup::kDecoder);
  const auto ctx = checksum(p, ParamGroup::kContext);
  FinetuneConfig ft;
  ft.target_n = 8;
  ft.target_m = 2;
  ft.batch_size = 2;
  ft.num_symmetric = 4;
  ft.steps = 5;
  ft.learning_rate = 1e-3;
  finetune(p, cfg, ft);
  EXPECT_EQ(checksum(p, ParamGroup::kEncoder), enc);
  EXPECT_EQ(checksum(p, ParamGroup::kDecoder), dec);
  EXPECT_NE(checksum(p, ParamGroup::kContext), ctx);
}

TEST(Finetune, ZeroStepsIsIdentity) {
  const ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 15);
  FinetuneConfig ft;
  ft.steps = 0;
  finetune(p, cfg, ft);
  for (ParamGroup g : kAllGroups) EXPECT_EQ(checksum(p, g), checksum(init_params(cfg, 15), g));
}

TEST(Train, SeededRunsAreIdentical) {
  const ModelConfig cfg = tiny_config();
  TrainConfig tc = toy_train_profile();
  tc.train_n = 6;
  tc.batch_size = 2;
  tc.num_symmetric = 4;
  tc.steps = 3;
  ModelParams a = init_params(cfg, 16), b = init_params(cfg, 16);
  train(a, cfg, tc);
  train(b, cfg, tc);
  for (ParamGroup g : kAllGroups) EXPECT_EQ(checksum(a, g), checksum(b, g));
  EXPECT_NE(checksum(a, ParamGroup::kDecoder), checksum(init_params(cfg, 16), ParamGroup::kDecoder));
}

TEST(Train, RunDirectoryLayout) {
  const ModelConfig cfg = tiny_config();
  TrainConfig tc = toy_train_profile();
  tc.train_n = 5;
  tc.batch_size = 1;
  tc.num_symmetric = 2;
  tc.steps = 4;
  ModelParams p = init_params(cfg, 17);
  const auto dir = scratch_dir("layout");
  TrainOptions opts;
  opts.run_dir = dir.string();
  opts.checkpoint_every = 2;
  int logged = 0;
  opts.log_every = 1;
  opts.on_log = [&](long, const StepMetrics& m) {
    ++logged;
    EXPECT_TRUE(std::isfinite(m.loss));
  };
  train(p, cfg, tc, opts);
  EXPECT_EQ(logged, 4);
  EXPECT_TRUE(std::filesystem::exists(dir / "config.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_2.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint_4.bin"));
  std::ifstream csv(dir / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,mean_cost,loss,grad_norm");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 4);
  const Checkpoint ck = load_checkpoint((dir / "final.bin").string());
  EXPECT_EQ(ck.config, cfg);
  for (ParamGroup g : kAllGroups) EXPECT_EQ(checksum(ck.params, g), checksum(p, g));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace equity
