#pragma once

// Helpers shared by the test binaries.

#include <cmath>
#include <vector>

#include "advlab/data.hpp"
#include "advlab/tensor.hpp"

namespace advlab::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, RngState& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

/// Full-batch logistic regression on fixed feature vectors; the
/// independent learner used to certify that synthetic tasks are separable.
class LogisticOracle {
 public:
  LogisticOracle(std::size_t features) : w_(features + 1, 0.0) {}

  void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y, int iters,
           double lr) {
    const std::size_t n = x.size();
    std::vector<double> grad(w_.size());
    for (int it = 0; it < iters; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = predict_prob(x[i]);
        const double err = p - y[i];
        for (std::size_t j = 0; j < x[i].size(); ++j) grad[j] += err * x[i][j];
        grad.back() += err;
      }
      for (std::size_t j = 0; j < w_.size(); ++j) w_[j] -= lr * grad[j] / static_cast<double>(n);
    }
  }

  double predict_prob(const std::vector<double>& xi) const {
    double z = w_.back();
    for (std::size_t j = 0; j < xi.size(); ++j) z += w_[j] * xi[j];
    return 1.0 / (1.0 + std::exp(-z));
  }

  double accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < x.size(); ++i) ok += (predict_prob(x[i]) > 0.5) == (y[i] == 1);
    return static_cast<double>(ok) / static_cast<double>(x.size());
  }

 private:
  std::vector<double> w_;
};

/// Bag-of-bigrams indicator features over token id pairs.
inline std::vector<double> bigram_features(const std::vector<std::string>& tokens,
                                           std::size_t vocab, const Vocab& v) {
  std::vector<double> f(vocab * vocab, 0.0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const auto a = static_cast<std::size_t>(v.id(tokens[i]));
    const auto b = static_cast<std::size_t>(v.id(tokens[i + 1]));
    if (a < vocab && b < vocab) f[a * vocab + b] = 1.0;
  }
  return f;
}

}  // namespace advlab::testing
