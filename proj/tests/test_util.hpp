#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/gradcheck.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat::testing {

using TensorD = Tensor<double>;
using VarD = ad::Var<double>;
using TapeD = ad::Tape<double>;

inline TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (double& x : t.data()) x = scale * rng.normal();
  return t;
}

inline TensorD random_binary(std::size_t rows, std::size_t cols, Rng& rng, double p_one = 0.5) {
  TensorD t = TensorD::matrix(rows, cols);
  for (double& x : t.data()) x = rng.uniform() < p_one ? 1.0 : 0.0;
  return t;
}

/// Max relative error between analytic and numeric gradients of
/// sum(op(inputs) * probe), where probe is a fixed random tensor.
using OpBuilder = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

inline double op_gradient_error(const OpBuilder& op, std::vector<TensorD> inputs, std::uint64_t seed = 7,
                                double eps = 1e-5) {
  TensorD probe;
  auto f = [&](const std::vector<TensorD>& values) {
    TapeD tape;
    std::vector<VarD> vars;
    for (const auto& v : values) vars.push_back(tape.leaf(v, true));
    VarD out = op(tape, vars);
    if (probe.size() != out.value().size()) {
      Rng rng(seed);
      probe = random_tensor(out.shape(), rng);
    }
    VarD loss = ad::sum(ad::mul(out, tape.constant(probe)));
    tape.backward(loss);
    std::vector<TensorD> grads;
    for (const auto& v : vars) grads.push_back(tape.grad(v));
    return std::make_pair(loss.value().item(), std::move(grads));
  };
  return gradient_check(f, inputs, eps, Stencil::FourPoint).max_rel_err;
}

/// Standard normal CDF by Simpson integration of the density, independent of erf.
inline double normal_cdf_oracle(double x) {
  const int steps = 20000;
  const double a = 0.0, b = std::abs(x), h = (b - a) / steps;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  double s = pdf(a) + pdf(b);
  for (int i = 1; i < steps; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
  const double half = s * h / 3.0;
  return x >= 0 ? 0.5 + half : 0.5 - half;
}

// Brute-force metric oracles: written directly from the definitions.

/// AP via an explicit O(c^2) rank count; rank ties broken by label index.
inline double ap_oracle(const TensorD& scores, const TensorD& labels, std::size_t* evaluated = nullptr) {
  double total = 0.0;
  std::size_t count = 0;
  const std::size_t c = scores.cols();
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto above = [&](std::size_t a, std::size_t b) {  // a ranked at or above b
      return scores(i, a) > scores(i, b) || (scores(i, a) == scores(i, b) && a <= b);
    };
    double sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (labels(i, k) != 1.0) continue;
      ++positives;
      double rank = 0.0, pos_above = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        if (!above(j, k)) continue;
        rank += 1.0;
        if (labels(i, j) == 1.0) pos_above += 1.0;
      }
      sum += pos_above / rank;
    }
    if (positives == 0) continue;
    total += sum / double(positives);
    ++count;
  }
  if (evaluated) *evaluated = count;
  return total / double(count);
}

inline double rl_oracle(const TensorD& scores, const TensorD& labels) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double bad = 0.0, pairs = 0.0;
    for (std::size_t a = 0; a < scores.cols(); ++a)
      for (std::size_t b = 0; b < scores.cols(); ++b) {
        if (labels(i, a) != 1.0 || labels(i, b) != 0.0) continue;
        pairs += 1.0;
        if (scores(i, a) < scores(i, b)) bad += 1.0;
        else if (scores(i, a) == scores(i, b)) bad += 0.5;
      }
    if (pairs == 0.0) continue;
    total += bad / pairs;
    ++count;
  }
  return 1.0 - total / double(count);
}

inline double auc_oracle(const TensorD& scores, const TensorD& labels) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < scores.cols(); ++k) {
    double good = 0.0, pairs = 0.0;
    for (std::size_t a = 0; a < scores.rows(); ++a)
      for (std::size_t b = 0; b < scores.rows(); ++b) {
        if (labels(a, k) != 1.0 || labels(b, k) != 0.0) continue;
        pairs += 1.0;
        if (scores(a, k) > scores(b, k)) good += 1.0;
        else if (scores(a, k) == scores(b, k)) good += 0.5;
      }
    if (pairs == 0.0) continue;
    total += good / pairs;
    ++count;
  }
  return total / double(count);
}

}  // namespace lmvcat::testing
