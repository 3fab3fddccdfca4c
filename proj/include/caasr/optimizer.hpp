#ifndef CAASR_OPTIMIZER_HPP
#define CAASR_OPTIMIZER_HPP

#include <cmath>
#include <string>
#include <vector>

#include "caasr/model.hpp"

namespace caasr {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled_weight_decay = false;  // true selects the AdamW update
  double grad_clip = 0.0;               // global norm; 0 disables
};

/// Adam / AdamW over a ParamStore. Updates only parameters flagged in the
/// trainable mask, leaving every other array untouched.
template <typename S>
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamStore<S>& params, OptimizerConfig cfg)
      : cfg_(cfg) {
    m_.reserve(params.values.size());
    v_.reserve(params.values.size());
    for (const auto& w : params.values) {
      m_.emplace_back(MatX<S>::Zero(w.rows(), w.cols()));
      v_.emplace_back(MatX<S>::Zero(w.rows(), w.cols()));
    }
  }

  void step(ParamStore<S>& params, std::vector<MatX<S>>& grads,
            const std::vector<char>& trainable) {
    ++t_;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (trainable[i]) sq += grads[i].template cast<double>().squaredNorm();
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) {
        const S scale = static_cast<S>(cfg_.grad_clip / norm);
        for (std::size_t i = 0; i < grads.size(); ++i) {
          if (trainable[i]) grads[i] *= scale;
        }
      }
    }

    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!trainable[i]) continue;
      MatX<S>& w = params.values[i];
      MatX<S>& g = grads[i];
      if (cfg_.weight_decay > 0.0 && !cfg_.decoupled_weight_decay) {
        g += static_cast<S>(cfg_.weight_decay) * w;
      }
      m_[i] = static_cast<S>(cfg_.beta1) * m_[i] + static_cast<S>(1.0 - cfg_.beta1) * g;
      v_[i] = static_cast<S>(cfg_.beta2) * v_[i].eval() +
              static_cast<S>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const MatX<S> mhat = m_[i] / static_cast<S>(bc1);
      const MatX<S> vhat = v_[i] / static_cast<S>(bc2);
      if (cfg_.decoupled_weight_decay && cfg_.weight_decay > 0.0) {
        w -= static_cast<S>(cfg_.lr * cfg_.weight_decay) * w;
      }
      w.array() -= static_cast<S>(cfg_.lr) * mhat.array() /
                   (vhat.array().sqrt() + static_cast<S>(cfg_.eps));
    }
  }

  long step_count() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<MatX<S>> m_, v_;
  long t_ = 0;
};

}  // namespace caasr

#endif  // CAASR_OPTIMIZER_HPP
