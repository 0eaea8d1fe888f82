#pragma once

#include <map>
#include <string>
#include <vector>

#include "tma/rng.hpp"
#include "tma/tape.hpp"
#include "tma/tensor.hpp"

namespace tma {

// Named, ordered parameter set. Registration order is deterministic, so two
// stores built by the same code with the same config line up index by index.
template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, Tensor<T> value) {
    check(index_.find(name) == index_.end(), "ParamStore: duplicate name " + name);
    int id = static_cast<int>(values_.size());
    index_[name] = id;
    names_.push_back(name);
    grads_.emplace_back(value.shape());
    values_.push_back(std::move(value));
    return id;
  }

  size_t count() const { return values_.size(); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor<T>& value(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor<T>& value(int i) const { return values_[static_cast<size_t>(i)]; }
  Tensor<T>& grad(int i) { return grads_[static_cast<size_t>(i)]; }
  const Tensor<T>& grad(int i) const { return grads_[static_cast<size_t>(i)]; }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  void zero_grads() {
    for (auto& g : grads_) std::fill(g.vec().begin(), g.vec().end(), T(0));
  }

  // Create one leaf per parameter on the tape.
  void bind(Tape<T>& tape) {
    bound_ = &tape;
    leaves_.resize(values_.size());
    for (size_t i = 0; i < values_.size(); ++i)
      leaves_[i] = tape.leaf(values_[i], true);
  }

  Var<T> var(int i) const {
    return {bound_, leaves_[static_cast<size_t>(i)]};
  }

  int leaf_id(int i) const { return leaves_[static_cast<size_t>(i)]; }

  // Accumulate tape gradients into the persistent buffers.
  void accumulate_grads(Tape<T>& tape) {
    for (size_t i = 0; i < values_.size(); ++i) {
      int lid = leaves_[i];
      if (!tape.has_grad(static_cast<int>(lid))) continue;
      const Tensor<T>& g = tape.grad(static_cast<int>(lid));
      T* dst = grads_[i].data();
      const T* src = g.data();
      for (long long j = 0; j < g.size(); ++j) dst[j] += src[j];
    }
  }

  // Copy values from a store with identical layout (possibly other scalar type).
  template <typename U>
  void assign_cast(const ParamStore<U>& other) {
    check(other.count() == count(), "assign_cast: parameter count mismatch");
    for (size_t i = 0; i < values_.size(); ++i) {
      check(other.name(static_cast<int>(i)) == names_[i], "assign_cast: name mismatch");
      const auto& src = other.value(static_cast<int>(i));
      check(src.shape() == values_[i].shape(), "assign_cast: shape mismatch");
      for (long long j = 0; j < src.size(); ++j)
        values_[i][j] = static_cast<T>(src[j]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
  std::map<std::string, int> index_;
  std::vector<int> leaves_;
  Tape<T>* bound_ = nullptr;
};

namespace init {

template <typename T>
Tensor<T> normal(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (long long i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

// He initialization for relu-followed convolutions / linears.
template <typename T>
Tensor<T> he_conv(Rng& rng, int cout, int cin, int k) {
  double fan_in = static_cast<double>(cin) * k * k;
  return normal<T>(rng, {cout, cin, k, k}, std::sqrt(2.0 / fan_in));
}

template <typename T>
Tensor<T> xavier_conv(Rng& rng, int cout, int cin, int k) {
  double fan_in = static_cast<double>(cin) * k * k;
  return normal<T>(rng, {cout, cin, k, k}, std::sqrt(1.0 / fan_in));
}

template <typename T>
Tensor<T> xavier_linear(Rng& rng, int in, int out) {
  return normal<T>(rng, {in, out}, std::sqrt(1.0 / in));
}

}  // namespace init

template <typename T>
struct Conv2dLayer {
  int w = -1, b = -1;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;

  enum class Init { He, Xavier, Zero };

  Conv2dLayer(ParamStore<T>& ps, Rng& rng, const std::string& name, int cin,
              int cout, int k, int stride_, int pad_, Init how = Init::He)
      : stride(stride_), pad(pad_) {
    Tensor<T> wt;
    switch (how) {
      case Init::He: wt = init::he_conv<T>(rng, cout, cin, k); break;
      case Init::Xavier: wt = init::xavier_conv<T>(rng, cout, cin, k); break;
      case Init::Zero: wt = Tensor<T>({cout, cin, k, k}); break;
    }
    w = ps.add(name + ".w", std::move(wt));
    b = ps.add(name + ".b", Tensor<T>({cout}));
  }

  Var<T> operator()(const ParamStore<T>& ps, Var<T> x) const {
    return bias_add(conv2d(x, ps.var(w), stride, pad), ps.var(b));
  }
};

template <typename T>
struct LinearLayer {
  int w = -1, b = -1;

  LinearLayer() = default;

  LinearLayer(ParamStore<T>& ps, Rng& rng, const std::string& name, int in,
              int out, bool zero_init = false) {
    Tensor<T> wt = zero_init ? Tensor<T>({in, out})
                             : init::xavier_linear<T>(rng, in, out);
    w = ps.add(name + ".w", std::move(wt));
    b = ps.add(name + ".b", Tensor<T>({out}));
  }

  // x [P,in] -> [P,out]
  Var<T> operator()(const ParamStore<T>& ps, Var<T> x) const {
    return bias_add_row(matmul(x, ps.var(w)), ps.var(b));
  }
};

template <typename T>
struct FeatureNormLayer {
  int gamma = -1, beta = -1;

  FeatureNormLayer() = default;

  FeatureNormLayer(ParamStore<T>& ps, const std::string& name, int d) {
    gamma = ps.add(name + ".gamma", Tensor<T>::full({d}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({d}));
  }

  Var<T> operator()(const ParamStore<T>& ps, Var<T> x) const {
    return feature_norm(x, ps.var(gamma), ps.var(beta));
  }
};

}  // namespace tma
