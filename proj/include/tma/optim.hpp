#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tma/nn.hpp"
#include "tma/tensor.hpp"

namespace tma {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// AdamW with decoupled weight decay. The learning rate is supplied per step
// so any schedule can drive it.
template <typename T>
class AdamW {
 public:
  AdamW() = default;

  AdamW(const ParamStore<T>& ps, AdamWConfig cfg) : cfg_(cfg) {
    m_.reserve(ps.count());
    v_.reserve(ps.count());
    for (size_t i = 0; i < ps.count(); ++i) {
      m_.emplace_back(ps.value(static_cast<int>(i)).shape());
      v_.emplace_back(ps.value(static_cast<int>(i)).shape());
    }
  }

  void step(ParamStore<T>& ps, double lr) {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < ps.count(); ++i) {
      Tensor<T>& p = ps.value(static_cast<int>(i));
      const Tensor<T>& g = ps.grad(static_cast<int>(i));
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (long long j = 0; j < p.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
        double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double mhat = mj / bc1;
        double vhat = vj / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                     cfg_.weight_decay * static_cast<double>(p[j]);
        p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * upd);
      }
    }
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  const AdamWConfig& config() const { return cfg_; }

  size_t slots() const { return m_.size(); }
  Tensor<T>& moment1(size_t i) { return m_[i]; }
  Tensor<T>& moment2(size_t i) { return v_[i]; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  int64_t step_ = 0;
};

// One-cycle schedule: linear warmup over the first 5% of steps to the peak
// rate, then cosine decay down to peak/25.
struct OneCycle {
  double peak_lr = 2e-4;
  int64_t total_steps = 1;
  double warmup_frac = 0.05;
  double final_div = 25.0;

  double lr_at(int64_t step) const {  // step is 0-based
    int64_t warm = std::max<int64_t>(1, static_cast<int64_t>(
        std::llround(warmup_frac * static_cast<double>(total_steps))));
    if (step < warm)
      return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    double end_lr = peak_lr / final_div;
    int64_t span = std::max<int64_t>(1, total_steps - warm);
    double t = static_cast<double>(step + 1 - warm) / static_cast<double>(span);
    if (t > 1.0) t = 1.0;
    return end_lr + 0.5 * (peak_lr - end_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
  }
};

// Clips the global L2 norm of all parameter gradients to max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
  double sq = 0.0;
  for (size_t i = 0; i < ps.count(); ++i) {
    const Tensor<T>& g = ps.grad(static_cast<int>(i));
    for (long long j = 0; j < g.size(); ++j) {
      double v = static_cast<double>(g[j]);
      sq += v * v;
    }
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    T scale = static_cast<T>(max_norm / norm);
    for (size_t i = 0; i < ps.count(); ++i) {
      Tensor<T>& g = ps.grad(static_cast<int>(i));
      for (long long j = 0; j < g.size(); ++j) g[j] *= scale;
    }
  }
  return norm;
}

}  // namespace tma
