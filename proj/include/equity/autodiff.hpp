#pragma once

// A small reverse-mode tape over dense matrices. Each op records its output
// value and a closure that propagates the output gradient to its inputs.
// Parameters are leaves that alias external storage and flush their gradient
// into a caller-owned sink.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "equity/error.hpp"

namespace equity::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Var {
  int id = -1;
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  // Aliases `value`; with a null sink the leaf behaves as a constant.
  Var param(const Matrix& value, Matrix* sink) {
    Node n;
    n.ext = &value;
    n.needs_grad = record_ && sink != nullptr;
    n.sink = n.needs_grad ? sink : nullptr;
    return push(std::move(n));
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ext ? *n.ext : n.own;
  }

  double scalar(Var v) const { return value(v)(0, 0); }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Propagates d(root) = seed back to every parameter sink.
  void backward(Var root, double seed = 1.0) {
    if (!record_) fail(ErrorKind::kIllegalState, "backward on a non-recording tape");
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (!r.needs_grad) return;
    grad(root).array() += seed;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.sink) *n.sink += n.grad;
      if (n.back) n.back(*this, Var{i});
      n.grad.resize(0, 0);
    }
  }

  // ---- ops -------------------------------------------------------------

  Var matmul(Var a, Var b) {
    Matrix out = value(a) * value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
      if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
    });
  }

  // x * w + b, with b a row vector broadcast over rows.
  Var linear(Var x, Var w, Var b) {
    Matrix out = value(x) * value(w);
    out.rowwise() += value(b).row(0);
    return record(std::move(out), {x, w, b}, [x, w, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      if (t.needs_grad(x)) t.grad(x).noalias() += g * t.value(w).transpose();
      if (t.needs_grad(w)) t.grad(w).noalias() += t.value(x).transpose() * g;
      if (t.needs_grad(b)) t.grad(b) += g.colwise().sum();
    });
  }

  Var add(Var a, Var b) {
    Matrix out = value(a) + value(b);
    return record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      if (t.needs_grad(a)) t.grad(a) += g;
      if (t.needs_grad(b)) t.grad(b) += g;
    });
  }

  Var relu(Var a) {
    Matrix out = value(a).cwiseMax(0.0);
    return record(std::move(out), {a}, [a](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      t.grad(a).array() += (t.value(a).array() > 0.0).select(g.array(), 0.0);
    });
  }

  Var scale(Var a, double s) {
    Matrix out = value(a) * s;
    return record(std::move(out), {a}, [a, s](Tape& t, Var self) { t.grad(a) += s * t.grad(self); });
  }

  // Column-wise concatenation; all parts share the row count.
  Var hcat(std::span<const Var> parts) {
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (Var p : parts) cols += value(p).cols();
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Matrix& v = value(p);
      out.middleCols(at, v.cols()) = v;
      at += v.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return record(std::move(out), inputs, [inputs](Tape& t, Var self) {
      Eigen::Index at = 0;
      for (Var p : inputs) {
        const Eigen::Index c = t.value(p).cols();
        if (t.needs_grad(p)) t.grad(p) += t.grad(self).middleCols(at, c);
        at += c;
      }
    });
  }

  // Row-wise concatenation; all parts share the column count.
  Var vcat(std::span<const Var> parts) {
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    for (Var p : parts) rows += value(p).rows();
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Matrix& v = value(p);
      out.middleRows(at, v.rows()) = v;
      at += v.rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return record(std::move(out), inputs, [inputs](Tape& t, Var self) {
      Eigen::Index at = 0;
      for (Var p : inputs) {
        const Eigen::Index r = t.value(p).rows();
        if (t.needs_grad(p)) t.grad(p) += t.grad(self).middleRows(at, r);
        at += r;
      }
    });
  }

  Var mean_rows(Var a) {
    const double n = static_cast<double>(value(a).rows());
    Matrix out = value(a).colwise().mean();
    return record(std::move(out), {a}, [a, n](Tape& t, Var self) {
      t.grad(a).rowwise() += (t.grad(self).row(0) / n);
    });
  }

  Var row(Var a, Eigen::Index i) {
    Matrix out = value(a).row(i);
    return record(std::move(out), {a}, [a, i](Tape& t, Var self) { t.grad(a).row(i) += t.grad(self).row(0); });
  }

  // Feature normalization with statistics taken over the rows (tokens).
  Var token_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& xv = value(x);
    const double n = static_cast<double>(xv.rows());
    RowVector mean = xv.colwise().mean();
    Matrix centered = xv.rowwise() - mean;
    RowVector inv_std = ((centered.array().square().colwise().sum() / n) + eps).rsqrt().matrix();
    Matrix xhat = centered.array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
    return record(std::move(out), {x, gain, bias},
                  [x, gain, bias, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, Var self) {
                    const Matrix& g = t.grad(self);
                    if (t.needs_grad(gain)) t.grad(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                    if (t.needs_grad(bias)) t.grad(bias) += g.colwise().sum();
                    if (!t.needs_grad(x)) return;
                    Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
                    RowVector sum_d = dxhat.colwise().sum();
                    RowVector sum_dx = (dxhat.array() * xhat.array()).colwise().sum().matrix();
                    Matrix dx = (n * dxhat.array()).matrix();
                    dx.rowwise() -= sum_d;
                    dx.array() -= xhat.array().rowwise() * sum_dx.array();
                    t.grad(x).array() += dx.array().rowwise() * (inv_std.array() / n);
                  });
  }

  // Multi-head scaled dot-product attention. `key_mask` (optional, one entry
  // per key row) excludes keys whose entry is zero.
  Var attention(Var q, Var k, Var v, int heads, const std::vector<std::uint8_t>* key_mask = nullptr) {
    const Matrix& qv = value(q);
    const Matrix& kv = value(k);
    const Matrix& vv = value(v);
    const Eigen::Index dim = qv.cols();
    const Eigen::Index dk = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    Matrix out(qv.rows(), dim);
    std::vector<Matrix> weights(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Matrix scores = qv.middleCols(h * dk, dk) * kv.middleCols(h * dk, dk).transpose() * inv_sqrt;
      if (key_mask) {
        for (Eigen::Index j = 0; j < scores.cols(); ++j)
          if (!(*key_mask)[static_cast<std::size_t>(j)]) scores.col(j).setConstant(-std::numeric_limits<double>::infinity());
      }
      Eigen::VectorXd row_max = scores.rowwise().maxCoeff();
      Matrix w = (scores.colwise() - row_max).array().exp().matrix();
      w.array().colwise() /= w.rowwise().sum().array();
      out.middleCols(h * dk, dk).noalias() = w * vv.middleCols(h * dk, dk);
      weights[static_cast<std::size_t>(h)] = std::move(w);
    }
    return record(std::move(out), {q, k, v},
                  [q, k, v, heads, dk, inv_sqrt, weights = std::move(weights)](Tape& t, Var self) {
                    const Matrix& g = t.grad(self);
                    const Matrix& qv = t.value(q);
                    const Matrix& kv = t.value(k);
                    const Matrix& vv = t.value(v);
                    const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
                    for (int h = 0; h < heads; ++h) {
                      const Matrix& w = weights[static_cast<std::size_t>(h)];
                      const auto go = g.middleCols(h * dk, dk);
                      if (gv) t.grad(v).middleCols(h * dk, dk).noalias() += w.transpose() * go;
                      if (!gq && !gk) continue;
                      Matrix dw = go * vv.middleCols(h * dk, dk).transpose();
                      Eigen::VectorXd inner = (dw.array() * w.array()).rowwise().sum();
                      Matrix ds = (w.array() * (dw.colwise() - inner).array()).matrix() * inv_sqrt;
                      if (gq) t.grad(q).middleCols(h * dk, dk).noalias() += ds * kv.middleCols(h * dk, dk);
                      if (gk) t.grad(k).middleCols(h * dk, dk).noalias() += ds.transpose() * qv.middleCols(h * dk, dk);
                    }
                  });
  }

  // Pointer head: logits = clip * tanh(keys * query^T / sqrt(D)), infeasible
  // entries masked, then log-softmax. Output is a 1 x T row of log
  // probabilities with -inf at masked entries.
  Var pointer_log_probs(Var query, Var keys, const std::vector<std::uint8_t>& mask, double clip) {
    const Matrix& qv = value(query);
    const Matrix& kv = value(keys);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qv.cols()));
    const Eigen::Index count = kv.rows();
    RowVector squashed = ((kv * qv.row(0).transpose()).transpose() * inv_sqrt).array().tanh().matrix();
    double top = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < count; ++j)
      if (mask[static_cast<std::size_t>(j)]) top = std::max(top, clip * squashed(j));
    if (!std::isfinite(top)) fail(ErrorKind::kIllegalState, "pointer distribution with every action masked");
    double total = 0.0;
    for (Eigen::Index j = 0; j < count; ++j)
      if (mask[static_cast<std::size_t>(j)]) total += std::exp(clip * squashed(j) - top);
    const double log_z = top + std::log(total);
    Matrix out(1, count);
    RowVector probs = RowVector::Zero(count);
    for (Eigen::Index j = 0; j < count; ++j) {
      if (mask[static_cast<std::size_t>(j)]) {
        out(0, j) = clip * squashed(j) - log_z;
        probs(j) = std::exp(out(0, j));
      } else {
        out(0, j) = -std::numeric_limits<double>::infinity();
      }
    }
    return record(std::move(out), {query, keys},
                  [query, keys, mask, clip, inv_sqrt, probs = std::move(probs), squashed = std::move(squashed)](
                      Tape& t, Var self) {
                    const Matrix& g = t.grad(self);
                    const Eigen::Index count = squashed.cols();
                    double g_total = 0.0;
                    for (Eigen::Index j = 0; j < count; ++j)
                      if (mask[static_cast<std::size_t>(j)]) g_total += g(0, j);
                    RowVector du = RowVector::Zero(count);
                    for (Eigen::Index j = 0; j < count; ++j) {
                      if (!mask[static_cast<std::size_t>(j)]) continue;
                      const double dlogit = g(0, j) - probs(j) * g_total;
                      du(j) = dlogit * clip * (1.0 - squashed(j) * squashed(j)) * inv_sqrt;
                    }
                    if (t.needs_grad(query)) t.grad(query).row(0).noalias() += du * t.value(keys);
                    if (t.needs_grad(keys)) t.grad(keys).noalias() += du.transpose() * t.value(query).row(0);
                  });
  }

  Var pick(Var a, Eigen::Index j) {
    Matrix out(1, 1);
    out(0, 0) = value(a)(0, j);
    return record(std::move(out), {a}, [a, j](Tape& t, Var self) { t.grad(a)(0, j) += t.grad(self)(0, 0); });
  }

  Var sum(std::span<const Var> scalars) {
    Matrix out = Matrix::Zero(1, 1);
    for (Var s : scalars) out(0, 0) += value(s)(0, 0);
    std::vector<Var> inputs(scalars.begin(), scalars.end());
    return record(std::move(out), inputs, [inputs](Tape& t, Var self) {
      const double g = t.grad(self)(0, 0);
      for (Var s : inputs)
        if (t.needs_grad(s)) t.grad(s)(0, 0) += g;
    });
  }

 private:
  using Backward = std::function<void(Tape&, Var)>;

  struct Node {
    Matrix own;
    const Matrix* ext = nullptr;
    Matrix grad;
    Matrix* sink = nullptr;
    bool needs_grad = false;
    Backward back;
  };

  Matrix& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      const Matrix& val = n.ext ? *n.ext : n.own;
      n.grad = Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward back) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(back));
  }

  Var record(Matrix value, std::span<const Var> inputs, Backward back) {
    Node n;
    n.own = std::move(value);
    if (record_) {
      for (Var in : inputs) n.needs_grad = n.needs_grad || needs_grad(in);
      if (n.needs_grad) n.back = std::move(back);
    }
    return push(std::move(n));
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace equity::ad
