#ifndef CAASR_AUTOGRAD_HPP
#define CAASR_AUTOGRAD_HPP

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "caasr/common.hpp"
#include "caasr/rng.hpp"

namespace caasr::ag {

/// Reverse-mode tape over dense Eigen matrices, templated on scalar so the
/// same graph code runs in float for training and double for finite
/// difference checks. One tape per sample; construction order is the
/// topological order, so backward is a single reverse sweep.
///
/// Parameter leaves reference external storage and deposit their gradients
/// into a caller-supplied arena indexed by parameter id, which keeps tapes
/// free of shared mutable state and makes batched accumulation a plain
/// ordered sum.
template <typename S>
class Tape {
 public:
  using Mat = MatX<S>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  const Mat& val(int id) const {
    const Node& n = nodes_[id];
    return n.ext != nullptr ? *n.ext : n.value;
  }

  Mat& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Mat& v = val(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  int add_input(Mat value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  int add_param(const Mat* value, int param_id) {
    Node n;
    n.ext = value;
    n.param_id = param_id;
    n.needs_grad = grad_enabled_;
    return push(std::move(n));
  }

  /// Generic op node. `back` pulls this node's grad into its parents.
  int add_op(Mat value, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_ && needs_grad) {
      n.needs_grad = true;
      n.back = std::move(back);
    }
    return push(std::move(n));
  }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Parameter
  /// gradients are accumulated into param_grads (indexed by param id),
  /// which must already hold zero- or previously-accumulated matrices of
  /// the right shapes.
  void backward(int loss_id, std::vector<Mat>* param_grads) {
    if (!grad_enabled_) {
      throw std::logic_error("Tape::backward called on a no-grad tape");
    }
    grad(loss_id).setOnes();
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back(*this, i);
    }
    if (param_grads != nullptr) {
      for (const Node& n : nodes_) {
        if (n.param_id >= 0 && n.grad.size() != 0) {
          (*param_grads)[n.param_id] += n.grad;
        }
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* ext = nullptr;
    Mat grad;
    bool needs_grad = false;
    int param_id = -1;
    std::function<void(Tape&, int)> back;
  };

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// ---- op library ----------------------------------------------------------

template <typename S>
int matmul(Tape<S>& t, int a, int b) {
  MatX<S> y = t.val(a) * t.val(b);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.add_op(std::move(y), ng, [a, b](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.val(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.val(a).transpose() * g;
  });
}

template <typename S>
int add(Tape<S>& t, int a, int b) {
  MatX<S> y = t.val(a) + t.val(b);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.add_op(std::move(y), ng, [a, b](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

/// a (T x C) plus a broadcast row vector (1 x C).
template <typename S>
int add_rowvec(Tape<S>& t, int a, int row) {
  MatX<S> y = t.val(a).rowwise() + t.val(row).row(0);
  const bool ng = t.needs_grad(a) || t.needs_grad(row);
  return t.add_op(std::move(y), ng, [a, row](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(row)) t.grad(row) += g.colwise().sum();
  });
}

template <typename S>
int scale(Tape<S>& t, int a, S factor) {
  MatX<S> y = t.val(a) * factor;
  return t.add_op(std::move(y), t.needs_grad(a), [a, factor](Tape<S>& t, int self) {
    if (t.needs_grad(a)) t.grad(a) += factor * t.grad(self);
  });
}

template <typename S>
int add_const(Tape<S>& t, int a, const MatX<S>& c) {
  MatX<S> y = t.val(a) + c;
  return t.add_op(std::move(y), t.needs_grad(a), [a](Tape<S>& t, int self) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(self);
  });
}

template <typename S>
int relu(Tape<S>& t, int a) {
  MatX<S> y = t.val(a).cwiseMax(S(0));
  return t.add_op(std::move(y), t.needs_grad(a), [a](Tape<S>& t, int self) {
    if (!t.needs_grad(a)) return;
    t.grad(a).array() +=
        t.grad(self).array() * (t.val(a).array() > S(0)).template cast<S>();
  });
}

template <typename S>
int transpose(Tape<S>& t, int a) {
  MatX<S> y = t.val(a).transpose();
  return t.add_op(std::move(y), t.needs_grad(a), [a](Tape<S>& t, int self) {
    if (t.needs_grad(a)) t.grad(a) += t.grad(self).transpose();
  });
}

namespace detail {

template <typename S>
void softmax_backward_rows(Tape<S>& t, int a, int self) {
  if (!t.needs_grad(a)) return;
  const MatX<S>& y = t.val(self);
  const MatX<S>& g = t.grad(self);
  MatX<S>& ga = t.grad(a);
  for (int r = 0; r < y.rows(); ++r) {
    const S dot = y.row(r).dot(g.row(r));
    ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
  }
}

}  // namespace detail

template <typename S>
int softmax_rows(Tape<S>& t, int a) {
  const MatX<S>& x = t.val(a);
  MatX<S> y(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  return t.add_op(std::move(y), t.needs_grad(a), [a](Tape<S>& t, int self) {
    detail::softmax_backward_rows(t, a, self);
  });
}

/// Row softmax where position (i, j) may attend only to j <= i. Disallowed
/// entries come out exactly zero, so the usual softmax backward applies.
template <typename S>
int causal_softmax_rows(Tape<S>& t, int a) {
  const MatX<S>& x = t.val(a);
  MatX<S> y = MatX<S>::Zero(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const int n = std::min<int>(r + 1, static_cast<int>(x.cols()));
    const S mx = x.row(r).head(n).maxCoeff();
    y.row(r).head(n) = (x.row(r).head(n).array() - mx).exp();
    y.row(r).head(n) /= y.row(r).head(n).sum();
  }
  return t.add_op(std::move(y), t.needs_grad(a), [a](Tape<S>& t, int self) {
    detail::softmax_backward_rows(t, a, self);
  });
}

/// Per-row layer normalization with learned gain and bias (each 1 x C).
template <typename S>
int layer_norm_rows(Tape<S>& t, int a, int gain, int bias, S eps = S(1e-5)) {
  const MatX<S>& x = t.val(a);
  const int rows = static_cast<int>(x.rows());
  const int cols = static_cast<int>(x.cols());
  MatX<S> xhat(rows, cols);
  VecX<S> inv_std(rows);
  for (int r = 0; r < rows; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().sum() / S(cols);
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  MatX<S> y = (xhat.array().rowwise() * t.val(gain).row(0).array()).rowwise() +
              t.val(bias).row(0).array();
  const bool ng = t.needs_grad(a) || t.needs_grad(gain) || t.needs_grad(bias);
  return t.add_op(
      std::move(y), ng,
      [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<S>& t, int self) {
        const MatX<S>& g = t.grad(self);
        if (t.needs_grad(gain)) {
          t.grad(gain).row(0).array() += (g.array() * xhat.array()).colwise().sum();
        }
        if (t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
        if (!t.needs_grad(a)) return;
        const auto& gamma = t.val(gain).row(0);
        MatX<S>& ga = t.grad(a);
        const int cols = static_cast<int>(g.cols());
        for (int r = 0; r < g.rows(); ++r) {
          Eigen::Matrix<S, 1, Eigen::Dynamic> gy =
              g.row(r).array() * gamma.array();
          const S mean_gy = gy.mean();
          const S mean_gyx = (gy.array() * xhat.row(r).array()).sum() / S(cols);
          ga.row(r).array() += (gy.array() - mean_gy - xhat.row(r).array() * mean_gyx) *
                               inv_std(r);
        }
      });
}

/// Gather rows of an embedding table (V x C) by token id.
template <typename S>
int embedding(Tape<S>& t, int table, const std::vector<int>& ids) {
  const MatX<S>& w = t.val(table);
  MatX<S> y(static_cast<int>(ids.size()), w.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w.rows()) {
      throw std::out_of_range("embedding: token id out of range");
    }
    y.row(static_cast<int>(i)) = w.row(ids[i]);
  }
  return t.add_op(std::move(y), t.needs_grad(table), [table, ids](Tape<S>& t, int self) {
    if (!t.needs_grad(table)) return;
    const MatX<S>& g = t.grad(self);
    MatX<S>& gt = t.grad(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      gt.row(ids[i]) += g.row(static_cast<int>(i));
    }
  });
}

/// Concatenate along the sequence (row) axis.
template <typename S>
int vstack(Tape<S>& t, const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no parts");
  int rows = 0;
  const int cols = static_cast<int>(t.val(parts[0]).cols());
  bool ng = false;
  for (int p : parts) {
    if (t.val(p).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
    rows += static_cast<int>(t.val(p).rows());
    ng = ng || t.needs_grad(p);
  }
  MatX<S> y(rows, cols);
  int at = 0;
  for (int p : parts) {
    const int r = static_cast<int>(t.val(p).rows());
    y.middleRows(at, r) = t.val(p);
    at += r;
  }
  return t.add_op(std::move(y), ng, [parts](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    int at = 0;
    for (int p : parts) {
      const int r = static_cast<int>(t.val(p).rows());
      if (t.needs_grad(p)) t.grad(p) += g.middleRows(at, r);
      at += r;
    }
  });
}

/// Concatenate along the feature (column) axis; joins per-head outputs.
template <typename S>
int hstack(Tape<S>& t, const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: no parts");
  const int rows = static_cast<int>(t.val(parts[0]).rows());
  int cols = 0;
  bool ng = false;
  for (int p : parts) {
    if (t.val(p).rows() != rows) throw std::invalid_argument("hstack: row mismatch");
    cols += static_cast<int>(t.val(p).cols());
    ng = ng || t.needs_grad(p);
  }
  MatX<S> y(rows, cols);
  int at = 0;
  for (int p : parts) {
    const int c = static_cast<int>(t.val(p).cols());
    y.middleCols(at, c) = t.val(p);
    at += c;
  }
  return t.add_op(std::move(y), ng, [parts](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    int at = 0;
    for (int p : parts) {
      const int c = static_cast<int>(t.val(p).cols());
      if (t.needs_grad(p)) t.grad(p) += g.middleCols(at, c);
      at += c;
    }
  });
}

template <typename S>
int slice_rows(Tape<S>& t, int a, int start, int len) {
  MatX<S> y = t.val(a).middleRows(start, len);
  return t.add_op(std::move(y), t.needs_grad(a), [a, start, len](Tape<S>& t, int self) {
    if (t.needs_grad(a)) t.grad(a).middleRows(start, len) += t.grad(self);
  });
}

/// Stride-2 front end: consecutive frame pairs concatenated feature-wise,
/// F x d -> ceil(F/2) x 2d, zero-padding an odd tail frame.
template <typename S>
int pair_downsample(Tape<S>& t, int a) {
  const MatX<S>& x = t.val(a);
  const int f = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  const int out_rows = (f + 1) / 2;
  MatX<S> y = MatX<S>::Zero(out_rows, 2 * d);
  for (int i = 0; i < out_rows; ++i) {
    y.block(i, 0, 1, d) = x.row(2 * i);
    if (2 * i + 1 < f) y.block(i, d, 1, d) = x.row(2 * i + 1);
  }
  return t.add_op(std::move(y), t.needs_grad(a), [a, f, d](Tape<S>& t, int self) {
    if (!t.needs_grad(a)) return;
    const MatX<S>& g = t.grad(self);
    MatX<S>& ga = t.grad(a);
    for (int i = 0; i < g.rows(); ++i) {
      ga.row(2 * i) += g.block(i, 0, 1, d);
      if (2 * i + 1 < f) ga.row(2 * i + 1) += g.block(i, d, 1, d);
    }
  });
}

/// Inverted dropout; identity when p == 0. The mask is a pure function of
/// the supplied rng, so training is reproducible given the derived seed.
template <typename S>
int dropout(Tape<S>& t, int a, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const MatX<S>& x = t.val(a);
  MatX<S> mask(x.rows(), x.cols());
  const S keep_scale = S(1.0 / (1.0 - p));
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < x.cols(); ++c) {
      mask(r, c) = rng->bernoulli(p) ? S(0) : keep_scale;
    }
  }
  MatX<S> y = x.cwiseProduct(mask);
  return t.add_op(std::move(y), t.needs_grad(a),
                  [a, mask = std::move(mask)](Tape<S>& t, int self) {
                    if (t.needs_grad(a)) t.grad(a) += t.grad(self).cwiseProduct(mask);
                  });
}

/// Column-wise mean over the sequence axis: T x C -> 1 x C.
template <typename S>
int mean_rows(Tape<S>& t, int a) {
  const MatX<S>& x = t.val(a);
  MatX<S> y = x.colwise().mean();
  const S inv = S(1) / S(x.rows());
  return t.add_op(std::move(y), t.needs_grad(a), [a, inv](Tape<S>& t, int self) {
    if (!t.needs_grad(a)) return;
    const MatX<S>& g = t.grad(self);
    t.grad(a).rowwise() += (g.row(0) * inv).eval();
  });
}

/// Mean token-level cross entropy of logits (T x V) against targets.
template <typename S>
int cross_entropy(Tape<S>& t, int logits, const std::vector<int>& targets) {
  const MatX<S>& x = t.val(logits);
  if (targets.empty()) throw std::invalid_argument("cross_entropy: empty target");
  if (static_cast<int>(targets.size()) != x.rows()) {
    throw std::invalid_argument("cross_entropy: target length mismatch");
  }
  MatX<S> probs(x.rows(), x.cols());
  S loss = S(0);
  for (int r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    probs.row(r) = (x.row(r).array() - mx).exp();
    const S z = probs.row(r).sum();
    probs.row(r) /= z;
    loss -= (x(r, targets[r]) - mx - std::log(z));
  }
  loss /= S(x.rows());
  MatX<S> y(1, 1);
  y(0, 0) = loss;
  return t.add_op(std::move(y), t.needs_grad(logits),
                  [logits, targets, probs = std::move(probs)](Tape<S>& t, int self) {
                    if (!t.needs_grad(logits)) return;
                    const S g = t.grad(self)(0, 0);
                    const S inv = S(1) / S(probs.rows());
                    MatX<S>& gl = t.grad(logits);
                    gl += probs * (g * inv);
                    for (int r = 0; r < probs.rows(); ++r) {
                      gl(r, targets[r]) -= g * inv;
                    }
                  });
}

/// Cosine similarity of two row vectors (1 x C). Throws on zero input.
template <typename S>
int cosine_similarity(Tape<S>& t, int a, int b) {
  const MatX<S>& x1 = t.val(a);
  const MatX<S>& x2 = t.val(b);
  if (x1.rows() != 1 || x2.rows() != 1 || x1.cols() != x2.cols()) {
    throw std::invalid_argument("cosine_similarity: expects matching row vectors");
  }
  const S n1 = x1.row(0).norm();
  const S n2 = x2.row(0).norm();
  if (n1 <= S(0) || n2 <= S(0)) {
    throw std::invalid_argument("cosine_similarity: zero vector");
  }
  // Identical vectors have cosine exactly 1 and exactly zero gradient; the
  // closed form would cancel catastrophically there and leak rounding noise
  // into the optimizer.
  const bool identical = (x1.array() == x2.array()).all();
  const S dot = x1.row(0).dot(x2.row(0));
  const S c = identical ? S(1) : dot / (n1 * n2);
  MatX<S> y(1, 1);
  y(0, 0) = c;
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.add_op(std::move(y), ng, [a, b, n1, n2, c, identical](Tape<S>& t, int self) {
    if (identical) return;
    const S g = t.grad(self)(0, 0);
    const auto& x1 = t.val(a).row(0);
    const auto& x2 = t.val(b).row(0);
    if (t.needs_grad(a)) {
      t.grad(a).row(0).array() +=
          g * (x2.array() / (n1 * n2) - c * x1.array() / (n1 * n1));
    }
    if (t.needs_grad(b)) {
      t.grad(b).row(0).array() +=
          g * (x1.array() / (n1 * n2) - c * x2.array() / (n2 * n2));
    }
  });
}

}  // namespace caasr::ag

#endif  // CAASR_AUTOGRAD_HPP
