#pragma once

// Finite-difference check of the REINFORCE surrogate gradient, shared by the
// unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "equity/training.hpp"

namespace equity::testing {

struct GroupError {
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double relative = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
};

// Samples the same rollouts reinforce_gradient draws from `seed`, freezes their
// sequences and costs, and differentiates
//   f(theta) = norm * sum_j (cost_j - baseline) * log pi_theta(e_j)
// by central differences with step `h` on every parameter entry.
inline std::map<ParamGroup, GroupError> surrogate_gradient_check(const ModelParams& params, const ModelConfig& cfg,
                                                                 const std::vector<Instance>& instances,
                                                                 int num_symmetric, std::uint64_t seed,
                                                                 double h = 1e-4) {
  ModelParams analytic = zeros_like(params);
  Rng r1(seed);
  reinforce_gradient(params, cfg, instances, num_symmetric, false, r1, analytic);

  struct Frozen {
    Instance variant;
    std::vector<int> sequence;
    double weight;
  };
  std::vector<Frozen> frozen;
  Rng r2(seed);
  const double norm = 1.0 / (static_cast<double>(instances.size()) * num_symmetric);
  for (const auto& inst : instances) {
    const auto batch = symmetric_batch(inst, num_symmetric, r2);
    std::vector<RolloutResult> rs;
    double mean = 0.0;
    for (const auto& v : batch.instances) {
      rs.push_back(rollout(v, params, cfg, DecodeMode::kSample, r2));
      mean += rs.back().cost / num_symmetric;
    }
    for (std::size_t j = 0; j < rs.size(); ++j)
      frozen.push_back({batch.instances[j], rs[j].solution.sequence, (rs[j].cost - mean) * norm});
  }

  ModelParams work = params;
  auto surrogate = [&] {
    double total = 0.0;
    for (const auto& f : frozen) total += f.weight * sequence_log_prob(f.variant, f.sequence, work, cfg);
    return total;
  };

  std::vector<std::pair<ParamGroup, Matrix*>> tensors;
  visit_params(work, [&](ParamGroup g, const std::string&, Matrix& m) { tensors.emplace_back(g, &m); });
  std::vector<const Matrix*> grads;
  visit_params(analytic, [&](ParamGroup, const std::string&, const Matrix& m) { grads.push_back(&m); });

  std::map<ParamGroup, double> diff_sq, ana_sq, num_sq;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto [group, m] = tensors[i];
    for (Eigen::Index e = 0; e < m->size(); ++e) {
      double& x = m->data()[e];
      const double saved = x;
      x = saved + h;
      const double up = surrogate();
      x = saved - h;
      const double down = surrogate();
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grads[i]->data()[e];
      diff_sq[group] += (a - numeric) * (a - numeric);
      ana_sq[group] += a * a;
      num_sq[group] += numeric * numeric;
    }
  }
  std::map<ParamGroup, GroupError> out;
  for (ParamGroup g : kAllGroups) {
    GroupError err;
    err.analytic_norm = std::sqrt(ana_sq[g]);
    err.numeric_norm = std::sqrt(num_sq[g]);
    const double scale = std::max(err.analytic_norm, err.numeric_norm);
    err.relative = scale > 0.0 ? std::sqrt(diff_sq[g]) / scale : 0.0;
    out[g] = err;
  }
  return out;
}

}  // namespace equity::testing
