#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvcat/error.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat {

struct MetricsReport {
  double ap = 0.0;
  double one_minus_rl = 0.0;
  double auc = 0.0;
  std::size_t n_eval = 0;
  std::size_t n_labels = 0;
  std::size_t skipped_ap = 0;   // samples without a positive label
  std::size_t skipped_rl = 0;   // samples lacking a positive or a negative
  std::size_t skipped_auc = 0;  // labels lacking a positive or a negative sample

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"ap", r.ap},
          {"one_minus_rl", r.one_minus_rl},
          {"auc", r.auc},
          {"n_eval", r.n_eval},
          {"n_labels", r.n_labels},
          {"skipped", {{"ap", r.skipped_ap}, {"one_minus_rl", r.skipped_rl}, {"auc", r.skipped_auc}}}};
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.ap = j.at("ap").get<double>();
  r.one_minus_rl = j.at("one_minus_rl").get<double>();
  r.auc = j.at("auc").get<double>();
  r.n_eval = j.at("n_eval").get<std::size_t>();
  r.n_labels = j.at("n_labels").get<std::size_t>();
  r.skipped_ap = j.at("skipped").at("ap").get<std::size_t>();
  r.skipped_rl = j.at("skipped").at("one_minus_rl").get<std::size_t>();
  r.skipped_auc = j.at("skipped").at("auc").get<std::size_t>();
  return r;
}

namespace detail {

inline void check_metric_inputs(const Tensor<double>& scores, const Tensor<double>& labels) {
  require(scores.rows() == labels.rows() && scores.cols() == labels.cols(), ErrorKind::DimensionMismatch,
          "scores " + shape_str(scores.shape()) + " vs labels " + shape_str(labels.shape()));
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half; computed from mid-ranks. Returns -1 when either class
/// is empty.
inline double pairwise_auc(std::span<const double> score, std::span<const double> label) {
  const std::size_t n = score.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && score[order[j]] == score[order[i]]) ++j;
    const double mid = 0.5 * double(i + 1 + j);  // mean of 1-based ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (label[order[k]] == 1.0) {
        rank_sum += mid;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return -1.0;
  return (rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

}  // namespace detail

struct MetricValue {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

/// Mean over samples of mean over positive labels k of
/// |{positives ranked at or above k}| / rank(k); ranks by descending score,
/// ties broken by ascending label index. Samples without positives are skipped.
inline MetricValue average_precision(const Tensor<double>& scores, const Tensor<double>& labels) {
  detail::check_metric_inputs(scores, labels);
  const std::size_t n = scores.rows(), c = scores.cols();
  MetricValue out;
  double total = 0.0;
  std::vector<std::size_t> order(c);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = scores.row(i);
    auto y = labels.row(i);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < c; ++r)
      if (y[order[r]] == 1.0) {
        ++hits;
        sum += double(hits) / double(r + 1);
      }
    if (hits == 0) {
      ++out.skipped;
      continue;
    }
    total += sum / double(hits);
    ++out.evaluated;
  }
  require(out.evaluated > 0, ErrorKind::NoEvaluableSamples, "average precision: no sample has a positive label");
  out.value = total / double(out.evaluated);
  return out;
}

/// 1 - mean over samples of the fraction of (positive, negative) label pairs
/// ordered wrongly, a tie counting as half a violation.
inline MetricValue one_minus_ranking_loss(const Tensor<double>& scores, const Tensor<double>& labels) {
  detail::check_metric_inputs(scores, labels);
  MetricValue out;
  double total = 0.0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const double auc = detail::pairwise_auc(scores.row(i), labels.row(i));
    if (auc < 0.0) {
      ++out.skipped;
      continue;
    }
    total += 1.0 - auc;
    ++out.evaluated;
  }
  require(out.evaluated > 0, ErrorKind::NoEvaluableSamples, "ranking loss: no sample has both classes");
  out.value = 1.0 - total / double(out.evaluated);
  return out;
}

/// Macro mean over labels of the Mann-Whitney AUC across samples (ties = 1/2).
inline MetricValue macro_auc(const Tensor<double>& scores, const Tensor<double>& labels) {
  detail::check_metric_inputs(scores, labels);
  const std::size_t n = scores.rows(), c = scores.cols();
  MetricValue out;
  double total = 0.0;
  std::vector<double> s(n), y(n);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores(i, k);
      y[i] = labels(i, k);
    }
    const double auc = detail::pairwise_auc(s, y);
    if (auc < 0.0) {
      ++out.skipped;
      continue;
    }
    total += auc;
    ++out.evaluated;
  }
  require(out.evaluated > 0, ErrorKind::NoEvaluableLabels, "AUC: no label has both classes");
  out.value = total / double(out.evaluated);
  return out;
}

inline MetricsReport evaluate_metrics(const Tensor<double>& scores, const Tensor<double>& labels) {
  const MetricValue ap = average_precision(scores, labels);
  const MetricValue rl = one_minus_ranking_loss(scores, labels);
  const MetricValue auc = macro_auc(scores, labels);
  MetricsReport r;
  r.ap = ap.value;
  r.one_minus_rl = rl.value;
  r.auc = auc.value;
  r.n_eval = scores.rows();
  r.n_labels = scores.cols();
  r.skipped_ap = ap.skipped;
  r.skipped_rl = rl.skipped;
  r.skipped_auc = auc.skipped;
  return r;
}

}  // namespace lmvcat
