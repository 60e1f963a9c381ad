#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/data.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kNormFloor = 1e-12;

/// Label similarity T and pair validity U.
///
/// T_ij = <y_i * g_i, y_j * g_j> / <g_i, g_j> where the denominator is
/// positive; pairs with no commonly known category get T_ij = 0, U_ij = 0.
struct LabelSimilarity {
  Tensor<double> similarity;  // T, n x n
  Tensor<double> valid;       // U, n x n
};

inline LabelSimilarity label_similarity(const Tensor<double>& labels, const Tensor<double>& label_mask) {
  require(labels.same_shape(label_mask), ErrorKind::DimensionMismatch, "labels and label mask shapes differ");
  const std::size_t n = labels.rows();
  Tensor<double> known = labels;
  for (std::size_t i = 0; i < known.size(); ++i) known[i] *= label_mask[i];
  Tensor<double> num = Tensor<double>::matrix(n, n);
  Tensor<double> den = Tensor<double>::matrix(n, n);
  num.mat().noalias() = known.mat() * known.mat().transpose();
  den.mat().noalias() = label_mask.mat() * label_mask.mat().transpose();
  LabelSimilarity out{Tensor<double>::matrix(n, n), Tensor<double>::matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (den(i, j) > 0.0) {
        out.similarity(i, j) = num(i, j) / den(i, j);
        out.valid(i, j) = 1.0;
      }
    }
  return out;
}

/// S_ij = (cos(z_i, z_j) + 1) / 2 with norms floored at 1e-12, clipped to [0, 1].
inline Tensor<double> embedding_similarity(const Tensor<double>& z) {
  const std::size_t n = z.rows();
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (double x : z.row(i)) ss += x * x;
    norm[i] = std::max(std::sqrt(ss), kNormFloor);
  }
  Tensor<double> s = Tensor<double>::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c) dot += z(i, c) * z(j, c);
      s(i, j) = std::clamp((dot / (norm[i] * norm[j]) + 1.0) / 2.0, 0.0, 1.0);
    }
  return s;
}

/// Ordered pairs i != j with both samples observing view v and U_ij = 1.
inline std::vector<std::size_t> available_pair_counts(const Tensor<double>& view_mask, const Tensor<double>& valid) {
  const std::size_t n = view_mask.rows(), m = view_mask.cols();
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t v = 0; v < m; ++v)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && view_mask(i, v) == 1.0 && view_mask(j, v) == 1.0 && valid(i, j) == 1.0) ++counts[v];
  return counts;
}

/// Label-guided graph loss on view states laid out (n*m) x d_e.
///
/// L = -(1 / 2m) sum_v (1 / N_v) sum_{i != j} W_iv W_jv U_ij
///       [T_ij log S^v_ij + (1 - T_ij) log(1 - S^v_ij)]
/// Views with N_v = 0 contribute nothing; if every view has N_v = 0 the loss
/// is a zero constant and a warning is issued.
template <class T>
ad::Var<T> graph_constraint_loss(ad::Tape<T>& tape, ad::Var<T> view_states, const Tensor<double>& similarity,
                                 const Tensor<double>& valid, const Tensor<double>& view_mask) {
  const std::size_t n = view_mask.rows(), m = view_mask.cols();
  require(view_states.rows() == n * m, ErrorKind::DimensionMismatch, "graph loss: view state rows != n * m");
  require(similarity.rows() == n && similarity.cols() == n && valid.same_shape(similarity), ErrorKind::DimensionMismatch,
          "graph loss: similarity must be n x n");
  const std::vector<std::size_t> counts = available_pair_counts(view_mask, valid);
  Tensor<T> target = Tensor<T>::matrix(n, n);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = T(similarity[i]);

  ad::Var<T> total;
  bool have_term = false;
  for (std::size_t v = 0; v < m; ++v) {
    if (counts[v] == 0) continue;
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i * m + v;
    ad::Var<T> z = ad::take_rows(view_states, std::move(rows));
    ad::Var<T> unit = ad::row_normalize(z, T(kNormFloor));
    ad::Var<T> s = ad::affine(ad::matmul(unit, ad::transpose(unit)), T(0.5), T(0.5));
    const T norm = T(1) / (T(2) * T(m) * T(counts[v]));
    Tensor<T> weight = Tensor<T>::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && view_mask(i, v) == 1.0 && view_mask(j, v) == 1.0 && valid(i, j) == 1.0) weight(i, j) = norm;
    ad::Var<T> term = ad::weighted_bce(s, target, weight, T(kProbClamp));
    total = have_term ? ad::add(total, term) : term;
    have_term = true;
  }
  if (!have_term) {
    warn("graph constraint loss has no available sample pairs in this batch; using 0");
    return tape.constant(Tensor<T>::scalar(T(0)));
  }
  return total;
}

/// -(1/C) sum_ij G_ij [Y_ij log P_ij + (1 - Y_ij) log(1 - P_ij)], C = sum G.
template <class T>
ad::Var<T> masked_bce(ad::Var<T> probs, const Tensor<T>& labels, const Tensor<T>& label_mask) {
  require(probs.value().same_shape(labels) && labels.same_shape(label_mask), ErrorKind::DimensionMismatch,
          "masked_bce: shapes differ");
  double known = 0.0;
  for (T g : label_mask.data()) known += double(g);
  require(known > 0.0, ErrorKind::DegenerateMask, "masked_bce: no known labels");
  Tensor<T> weight = label_mask;
  for (T& w : weight.data()) w = w / T(known);
  return ad::weighted_bce(probs, labels, weight, T(kProbClamp));
}

/// L = L_mc + alpha L_gc + beta L_ac. Terms with a zero coefficient are not
/// attached to the result, so they cannot influence gradients.
template <class T>
ad::Var<T> total_loss(ad::Var<T> l_mc, ad::Var<T> l_gc, ad::Var<T> l_ac, double alpha, double beta) {
  require(alpha >= 0.0 && beta >= 0.0, ErrorKind::InvalidArgument, "loss coefficients must be non-negative");
  ad::Var<T> total = l_mc;
  if (alpha != 0.0) total = ad::add(total, ad::scale(l_gc, T(alpha)));
  if (beta != 0.0) total = ad::add(total, ad::scale(l_ac, T(beta)));
  return total;
}

}  // namespace lmvcat
