#pragma once

// REINFORCE with a symmetric shared baseline: every training instance is
// rolled out once on each of L isometric copies, and the mean cost of those L
// rollouts is the baseline for all of them. Contextual finetuning reuses the
// same step with gradients routed to the context parameters only.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "equity/error.hpp"
#include "equity/instance.hpp"
#include "equity/model.hpp"
#include "equity/random.hpp"

namespace equity {

struct TrainConfig {
  TaskKind task = TaskKind::kMtsp;
  int batch_size = 512;    // instances per step
  int num_symmetric = 8;   // L
  double learning_rate = 1e-4;
  int epochs = 100;
  int epoch_size = 1'280'000;
  int steps = 0;  // overrides epochs * epoch_size / batch_size when > 0
  int train_n = 50;
  int train_m = 5;
  std::optional<double> gradient_clip_norm = 1.0;
  std::uint64_t seed = 1234;

  long total_steps() const {
    if (steps > 0) return steps;
    return static_cast<long>(epochs) * (epoch_size / std::max(batch_size, 1));
  }
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.batch_size < 1) fail(ErrorKind::kInvalidConfig, "batch_size must be positive");
  if (c.num_symmetric < 2)
    fail(ErrorKind::kInvalidConfig, "num_symmetric must be >= 2 (a shared baseline over one sample is degenerate)");
  if (!(c.learning_rate > 0.0)) fail(ErrorKind::kInvalidConfig, "learning_rate must be positive");
  if (c.train_n < 1 || c.train_m < 1) fail(ErrorKind::kInvalidConfig, "train_n and train_m must be positive");
  if (c.gradient_clip_norm && !(*c.gradient_clip_norm > 0.0))
    fail(ErrorKind::kInvalidConfig, "gradient_clip_norm must be positive");
}

struct FinetuneConfig {
  TaskKind task = TaskKind::kMtsp;
  double learning_rate = 1e-5;
  int batch_size = 128;
  int num_symmetric = 8;
  int target_n = 200;
  int target_m = 10;
  int steps = 100;             // step budget
  double time_budget_s = 0.0;  // wall-clock budget; 0 disables
  std::optional<double> gradient_clip_norm = 1.0;
  std::uint64_t seed = 4321;
};

// Full-scale defaults, kept for runs with a large compute budget.
inline TrainConfig full_train_profile() { return TrainConfig{}; }

inline ModelConfig full_model_profile() { return ModelConfig{}; }

// Desk-scale profile: N=10, M=2, D=64.
inline ModelConfig toy_model_profile() {
  ModelConfig c;
  c.embed_dim = 64;
  c.num_heads = 8;
  c.num_encoder_layers = 3;
  c.feedforward_dim = 128;
  return c;
}

inline TrainConfig toy_train_profile() {
  TrainConfig c;
  c.train_n = 10;
  c.train_m = 2;
  c.batch_size = 16;
  c.num_symmetric = 8;
  c.learning_rate = 1e-3;
  c.steps = 2000;
  return c;
}

// ---------------------------------------------------------------------------
// Adam

class Adam {
 public:
  Adam(const ModelParams& shape, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

  // Updates the tensors of the selected groups only; others are not touched.
  void step(ModelParams& params, const ModelParams& grads, std::span<const ParamGroup> groups) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Matrix*> p, m, v;
    std::vector<const Matrix*> g;
    auto selected = [&](ParamGroup grp) { return std::find(groups.begin(), groups.end(), grp) != groups.end(); };
    visit_params(params, [&](ParamGroup grp, const std::string&, Matrix& x) { if (selected(grp)) p.push_back(&x); });
    visit_params(grads, [&](ParamGroup grp, const std::string&, const Matrix& x) { if (selected(grp)) g.push_back(&x); });
    visit_params(m_, [&](ParamGroup grp, const std::string&, Matrix& x) { if (selected(grp)) m.push_back(&x); });
    visit_params(v_, [&](ParamGroup grp, const std::string&, Matrix& x) { if (selected(grp)) v.push_back(&x); });
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i]->array() = beta1_ * m[i]->array() + (1.0 - beta1_) * g[i]->array();
      v[i]->array() = beta2_ * v[i]->array() + (1.0 - beta2_) * g[i]->array().square();
      p[i]->array() -= lr_ * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  ModelParams m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Symmetric baseline

struct SymmetricBatch {
  std::vector<GeometricTransform> transforms;
  std::vector<Instance> instances;
};

// L variants: the identity first, then random rotations with a coin-flip reflection.
inline SymmetricBatch symmetric_batch(const Instance& inst, int num_symmetric, Rng& rng) {
  if (num_symmetric < 2) fail(ErrorKind::kInvalidArgument, "symmetric batch needs L >= 2");
  SymmetricBatch out;
  out.transforms.push_back(GeometricTransform::dihedral(0));
  for (int j = 1; j < num_symmetric; ++j) out.transforms.push_back(random_symmetry(rng));
  for (const auto& t : out.transforms) out.instances.push_back(transform_unchecked(inst, t));
  return out;
}

inline double shared_baseline(std::span<const double> costs) {
  if (costs.empty()) fail(ErrorKind::kInvalidArgument, "shared baseline of no costs");
  double sum = 0.0;
  for (double c : costs) sum += c;
  return sum / static_cast<double>(costs.size());
}

inline double gradient_norm(const ModelParams& grads) {
  double sq = 0.0;
  visit_params(grads, [&](ParamGroup, const std::string&, const Matrix& m) { sq += m.squaredNorm(); });
  return std::sqrt(sq);
}

struct StepMetrics {
  double mean_cost = 0.0;
  double mean_abs_advantage = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

// Surrogate loss mean_{i,j} (cost_ij - baseline_i) * log pi(e_ij), i.e. the
// reward-convention advantage (baseline - cost) times -log pi, and its
// gradient, accumulated into `grads` (which must be zero on entry). Sampling
// draws from `rng`.
inline StepMetrics reinforce_gradient(const ModelParams& params, const ModelConfig& model_cfg,
                                      std::span<const Instance> instances, int num_symmetric, bool context_only,
                                      Rng& rng, ModelParams& grads) {
  const GradSinks sinks = context_only ? GradSinks::context_only(grads) : GradSinks::all(grads);
  const double norm = 1.0 / (static_cast<double>(instances.size()) * num_symmetric);
  StepMetrics metrics;
  for (const auto& inst : instances) {
    const auto batch = symmetric_batch(inst, num_symmetric, rng);
    std::vector<std::unique_ptr<ad::Tape>> tapes;
    std::vector<TapedRollout> rollouts;
    std::vector<double> costs;
    for (const auto& variant : batch.instances) {
      tapes.push_back(std::make_unique<ad::Tape>(true));
      rollouts.push_back(rollout_on(*tapes.back(), variant, params, model_cfg, sinks, DecodeMode::kSample, &rng));
      costs.push_back(rollouts.back().cost);
    }
    const double baseline = shared_baseline(costs);
    for (std::size_t j = 0; j < rollouts.size(); ++j) {
      const double advantage = costs[j] - baseline;
      const double logp = tapes[j]->scalar(rollouts[j].log_prob);
      const double term = advantage * logp * norm;
      if (!std::isfinite(term)) {
        std::ostringstream diag;
        diag << "non-finite loss on instance '" << inst.id << "' variant " << j << ": cost=" << costs[j]
             << " baseline=" << baseline << " log_prob=" << logp;
        fail(ErrorKind::kTrainingFault, diag.str());
      }
      metrics.loss += term;
      metrics.mean_cost += costs[j] * norm;
      metrics.mean_abs_advantage += std::abs(advantage) * norm;
      if (advantage != 0.0) tapes[j]->backward(rollouts[j].log_prob, advantage * norm);
    }
  }
  metrics.grad_norm = gradient_norm(grads);
  return metrics;
}

inline void clip_gradients(ModelParams& grads, double grad_norm, std::optional<double> max_norm) {
  if (!max_norm || grad_norm <= *max_norm || grad_norm == 0.0) return;
  const double s = *max_norm / grad_norm;
  visit_params(grads, [&](ParamGroup, const std::string&, Matrix& m) { m *= s; });
}

// One optimizer step on all parameter groups.
inline StepMetrics reinforce_step(ModelParams& params, Adam& optimizer, const ModelConfig& model_cfg,
                                  std::span<const Instance> instances, const TrainConfig& cfg, Rng& rng) {
  ModelParams grads = zeros_like(params);
  StepMetrics metrics = reinforce_gradient(params, model_cfg, instances, cfg.num_symmetric, false, rng, grads);
  if (!std::isfinite(metrics.grad_norm))
    fail(ErrorKind::kTrainingFault, "non-finite gradient norm (mean cost " + std::to_string(metrics.mean_cost) + ")");
  clip_gradients(grads, metrics.grad_norm, cfg.gradient_clip_norm);
  optimizer.step(params, grads, kAllGroups);
  return metrics;
}

inline std::vector<Instance> sample_instances(TaskKind task, int n, int m, int count, Rng& rng) {
  std::vector<Instance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_uniform(task, n, m, rng()));
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainOptions {
  std::string run_dir;        // empty: no files written
  int checkpoint_every = 0;   // steps; 0 writes only the final checkpoint
  int log_every = 0;          // callback cadence; 0 disables
  std::function<void(long step, const StepMetrics&)> on_log;
};

namespace detail {

inline void write_config_snapshot(const std::filesystem::path& dir, const ModelConfig& m, const TrainConfig& t) {
  std::ofstream out(dir / "config.txt");
  out.precision(17);
  out << "task = " << to_string(t.task) << "\n"
      << "embed_dim = " << m.embed_dim << "\n"
      << "num_heads = " << m.num_heads << "\n"
      << "num_encoder_layers = " << m.num_encoder_layers << "\n"
      << "feedforward_dim = " << m.feedforward_dim << "\n"
      << "logit_clip = " << m.logit_clip << "\n"
      << "use_mpe = " << (m.use_mpe ? "true" : "false") << "\n"
      << "use_context_encoder = " << (m.use_context_encoder ? "true" : "false") << "\n"
      << "batch_size = " << t.batch_size << "\n"
      << "num_symmetric = " << t.num_symmetric << "\n"
      << "learning_rate = " << t.learning_rate << "\n"
      << "epochs = " << t.epochs << "\n"
      << "epoch_size = " << t.epoch_size << "\n"
      << "steps = " << t.total_steps() << "\n"
      << "train_n = " << t.train_n << "\n"
      << "train_m = " << t.train_m << "\n"
      << "gradient_clip_norm = " << t.gradient_clip_norm.value_or(0.0) << "\n"
      << "seed = " << t.seed << "\n";
}

inline void write_config_snapshot(const std::filesystem::path& dir, const FinetuneConfig& f) {
  std::ofstream out(dir / "config.txt");
  out.precision(17);
  out << "task = " << to_string(f.task) << "\n"
      << "learning_rate = " << f.learning_rate << "\n"
      << "batch_size = " << f.batch_size << "\n"
      << "num_symmetric = " << f.num_symmetric << "\n"
      << "target_n = " << f.target_n << "\n"
      << "target_m = " << f.target_m << "\n"
      << "steps = " << f.steps << "\n"
      << "time_budget_s = " << f.time_budget_s << "\n"
      << "gradient_clip_norm = " << f.gradient_clip_norm.value_or(0.0) << "\n"
      << "seed = " << f.seed << "\n";
}

}  // namespace detail

// Trains `params` in place. With a run directory, writes config.txt,
// metrics.csv (step,mean_cost,loss,grad_norm) and checkpoints.
inline void train(ModelParams& params, const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const TrainOptions& options = {}) {
  validate_train_config(cfg);
  check_shapes(params, model_cfg);
  Rng rng = make_stream(cfg.seed, 1);
  Adam optimizer(params, cfg.learning_rate);

  std::ofstream metrics_csv;
  std::filesystem::path dir;
  if (!options.run_dir.empty()) {
    dir = options.run_dir;
    std::filesystem::create_directories(dir);
    detail::write_config_snapshot(dir, model_cfg, cfg);
    metrics_csv.open(dir / "metrics.csv");
    metrics_csv << "step,mean_cost,loss,grad_norm\n";
  }
  const long total = cfg.total_steps();
  for (long step = 1; step <= total; ++step) {
    const auto batch = sample_instances(cfg.task, cfg.train_n, cfg.train_m, cfg.batch_size, rng);
    const StepMetrics m = reinforce_step(params, optimizer, model_cfg, batch, cfg, rng);
    if (metrics_csv.is_open()) metrics_csv << step << ',' << m.mean_cost << ',' << m.loss << ',' << m.grad_norm << '\n';
    if (options.on_log && options.log_every > 0 && step % options.log_every == 0) options.on_log(step, m);
    if (!dir.empty() && options.checkpoint_every > 0 && step % options.checkpoint_every == 0)
      save_checkpoint((dir / ("checkpoint_" + std::to_string(step) + ".bin")).string(), model_cfg, params);
  }
  if (!dir.empty()) save_checkpoint((dir / "final.bin").string(), model_cfg, params);
}

// Adapts theta_context to a target scale; theta_en and theta_de are left
// bit-identical.
inline void finetune(ModelParams& params, const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                     const TrainOptions& options = {}) {
  if (cfg.num_symmetric < 2) fail(ErrorKind::kInvalidConfig, "num_symmetric must be >= 2");
  if (cfg.batch_size < 1) fail(ErrorKind::kInvalidConfig, "batch_size must be positive");
  check_shapes(params, model_cfg);
  Rng rng = make_stream(cfg.seed, 2);
  Adam optimizer(params, cfg.learning_rate);
  constexpr std::array<ParamGroup, 1> kContext{ParamGroup::kContext};

  std::ofstream metrics_csv;
  if (!options.run_dir.empty()) {
    std::filesystem::create_directories(options.run_dir);
    detail::write_config_snapshot(options.run_dir, cfg);
    metrics_csv.open(std::filesystem::path(options.run_dir) / "metrics.csv");
    metrics_csv << "step,mean_cost,loss,grad_norm\n";
  }
  const auto start = std::chrono::steady_clock::now();
  for (long step = 1; step <= cfg.steps; ++step) {
    if (cfg.time_budget_s > 0.0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() >= cfg.time_budget_s)
      break;
    const auto batch = sample_instances(cfg.task, cfg.target_n, cfg.target_m, cfg.batch_size, rng);
    ModelParams grads = zeros_like(params);
    const StepMetrics m = reinforce_gradient(params, model_cfg, batch, cfg.num_symmetric, true, rng, grads);
    if (!std::isfinite(m.grad_norm)) fail(ErrorKind::kTrainingFault, "non-finite gradient norm during finetuning");
    clip_gradients(grads, m.grad_norm, cfg.gradient_clip_norm);
    optimizer.step(params, grads, kContext);
    if (metrics_csv.is_open()) metrics_csv << step << ',' << m.mean_cost << ',' << m.loss << ',' << m.grad_norm << '\n';
    if (options.on_log && options.log_every > 0 && step % options.log_every == 0) options.on_log(step, m);
  }
  if (!options.run_dir.empty())
    save_checkpoint((std::filesystem::path(options.run_dir) / "final.bin").string(), model_cfg, params);
}

}  // namespace equity
