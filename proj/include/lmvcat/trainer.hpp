#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/checkpoint.hpp"
#include "lmvcat/data.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/losses.hpp"
#include "lmvcat/metrics.hpp"
#include "lmvcat/model.hpp"
#include "lmvcat/random.hpp"

namespace lmvcat {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::size_t step = 0;
};

/// Bias-corrected Adam. Moments are created lazily on the first call.
template <class T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch, "adam: parameter/gradient count differs");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.shape());
      state.second.emplace_back(p.shape());
    }
  }
  require(state.first.size() == params.size(), ErrorKind::ShapeMismatch, "adam: state count differs");
  for (std::size_t i = 0; i < params.size(); ++i)
    require(params[i].same_shape(grads[i]) && params[i].same_shape(state.first[i]), ErrorKind::ShapeMismatch,
            "adam: shape mismatch at tensor " + std::to_string(i));
  ++state.step;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T c1 = T(1) / (T(1) - T(std::pow(cfg.beta1, double(state.step))));
  const T c2 = T(1) / (T(1) - T(std::pow(cfg.beta2, double(state.step))));
  const T lr = T(cfg.learning_rate), eps = T(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.first[i].data();
    auto v = state.second[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      p[k] -= lr * (m[k] * c1) / (std::sqrt(v[k] * c2) + eps);
    }
  }
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  AdamConfig adam;
  double alpha = 10.0;
  double beta = 0.1;
  std::uint64_t seed = 0;
  /// Evaluate on the held-out set every k epochs (0: final epoch only).
  std::size_t eval_every = 0;
  std::filesystem::path checkpoint_path;
  /// Compute loss terms whose coefficient is zero so they appear in the
  /// history. They never touch the gradients either way.
  bool record_unused_terms = true;
  bool verbose = false;

  void validate() const {
    require(epochs >= 1, ErrorKind::InvalidArgument, "epochs must be >= 1");
    require(batch_size >= 2, ErrorKind::InvalidArgument, "batch size must be >= 2");
    require(adam.learning_rate > 0.0, ErrorKind::InvalidArgument, "learning rate must be positive");
    require(alpha >= 0.0 && beta >= 0.0, ErrorKind::InvalidArgument, "alpha and beta must be non-negative");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l_mc = 0.0;
  double l_gc = 0.0;
  double l_ac = 0.0;
  std::vector<double> view_weight;     // raw a_v
  std::vector<double> fusion_weights;  // normalized over all views
  std::optional<MetricsReport> eval;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  friend bool operator==(const RunHistory&, const RunHistory&) = default;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},       {"loss", r.loss},
                      {"l_mc", r.l_mc},         {"l_gc", r.l_gc},
                      {"l_ac", r.l_ac},         {"view_weight", r.view_weight},
                      {"fusion_weights", r.fusion_weights}};
  if (r.eval) j["eval"] = to_json(*r.eval);
  return j;
}

/// One JSON object per line, one line per epoch.
inline void write_history(const std::filesystem::path& path, const RunHistory& h) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(out.good(), ErrorKind::MissingFile, "cannot write " + path.string());
  for (const auto& r : h.epochs) out << to_json(r).dump() << '\n';
}

/// Per-batch loss pieces as tape nodes.
template <class T>
struct Objective {
  ad::Var<T> total;
  ad::Var<T> l_mc;
  ad::Var<T> l_gc;
  ad::Var<T> l_ac;
  bool has_gc = false;
};

/// Builds L = L_mc + alpha L_gc + beta L_ac for one batch. `similarity` and
/// `valid` are the batch's T and U blocks.
template <class T>
Objective<T> build_objective(ad::Tape<T>& tape, const ForwardResult<T>& fwd, const Batch<T>& batch,
                             const Tensor<double>& view_mask, const Tensor<double>& similarity,
                             const Tensor<double>& valid, double alpha, double beta, bool record_unused = true) {
  Objective<T> o;
  o.l_mc = masked_bce(fwd.p_z, batch.labels, batch.label_mask);
  o.l_ac = masked_bce(fwd.p_c, batch.labels, batch.label_mask);
  if (alpha != 0.0 || record_unused) {
    o.l_gc = graph_constraint_loss(tape, fwd.view_states, similarity, valid, view_mask);
    o.has_gc = true;
  } else {
    o.l_gc = tape.constant(Tensor<T>::scalar(T(0)));
  }
  o.total = total_loss(o.l_mc, o.l_gc, o.l_ac, alpha, beta);
  return o;
}

inline Tensor<double> sub_block(const Tensor<double>& full, const std::vector<std::size_t>& rows) {
  Tensor<double> out = Tensor<double>::matrix(rows.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) out(i, j) = full(rows[i], rows[j]);
  return out;
}

inline Tensor<double> gather_rows(const Tensor<double>& t, const std::vector<std::size_t>& rows) {
  Tensor<double> out = Tensor<double>::matrix(rows.size(), t.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) std::ranges::copy(t.row(rows[r]), out.row(r).begin());
  return out;
}

/// Eval-mode P_z over a dataset, batched.
template <class T>
Tensor<double> predict_dataset(const LmvcatModel<T>& model, const MultiViewDataset& ds, std::size_t batch_size = 256) {
  const std::size_t n = ds.num_samples(), c = ds.num_labels();
  Tensor<double> scores = Tensor<double>::matrix(n, c);
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) rows.push_back(i);
    const Tensor<T> p = model.predict_scores(make_batch<T>(ds, rows));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < c; ++k) scores(rows[r], k) = double(p(r, k));
  }
  return scores;
}

/// Scores P_z (never P_c) against the dataset labels, which are taken as
/// fully known.
template <class T>
MetricsReport evaluate(const LmvcatModel<T>& model, const MultiViewDataset& ds, std::size_t batch_size = 256) {
  require(ds.num_views() == model.num_views() && ds.num_labels() == model.num_labels(), ErrorKind::DimensionMismatch,
          "dataset does not match the model's views/labels");
  return evaluate_metrics(predict_dataset(model, ds, batch_size), ds.labels);
}

template <class T>
struct TrainResult {
  LmvcatModel<T> model;
  RunHistory history;
};

namespace detail {

/// Consecutive chunks of `order`; a trailing chunk of one sample is merged
/// into its predecessor so every batch has at least one pair.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size)
    batches.emplace_back(order.begin() + std::ptrdiff_t(start),
                         order.begin() + std::ptrdiff_t(std::min(order.size(), start + batch_size)));
  if (batches.size() > 1 && batches.back().size() < 2) {
    auto tail = batches.back();
    batches.pop_back();
    batches.back().insert(batches.back().end(), tail.begin(), tail.end());
  }
  return batches;
}

inline double known_count(const Tensor<double>& label_mask, const std::vector<std::size_t>& rows) {
  double c = 0.0;
  for (std::size_t r : rows)
    for (double g : label_mask.row(r)) c += g;
  return c;
}

}  // namespace detail

/// Mini-batch Adam on L = L_mc + alpha L_gc + beta L_ac. Label similarity is
/// computed once over the training set and sliced per batch.
template <class T>
TrainResult<T> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const MultiViewDataset& data,
                     const MultiViewDataset* held_out = nullptr) {
  model_cfg.validate();
  cfg.validate();
  validate(data);
  const std::size_t n = data.num_samples();
  require(n >= 2, ErrorKind::InvalidArgument, "training needs at least two samples");

  Rng master(cfg.seed);
  TrainResult<T> result{LmvcatModel<T>(model_cfg, data.view_dims(), data.num_labels()), {}};
  LmvcatModel<T>& model = result.model;
  model.initialize(master.next_u64());
  Rng order_rng(master.next_u64());
  Rng dropout_rng(master.next_u64());

  const LabelSimilarity sim = label_similarity(data.labels, data.label_mask);
  AdamState<T> adam;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t steps = 0;
    for (auto rows : detail::make_batches(order, cfg.batch_size)) {
      if (detail::known_count(data.label_mask, rows) == 0.0) {
        rows = order_rng.sample_without_replacement(n, rows.size());
        require(detail::known_count(data.label_mask, rows) > 0.0, ErrorKind::DegenerateMask,
                "batch has no known labels after resampling");
      }
      const Batch<T> batch = make_batch<T>(data, rows);
      const Tensor<double> w = gather_rows(data.view_mask, rows);
      ad::Tape<T> tape;
      const auto p = model.params().bind(tape);
      const ForwardResult<T> fwd = model.forward(tape, p, batch, true, &dropout_rng);
      const Objective<T> obj = build_objective(tape, fwd, batch, w, sub_block(sim.similarity, rows),
                                               sub_block(sim.valid, rows), cfg.alpha, cfg.beta,
                                               cfg.record_unused_terms);
      const double loss = double(obj.total.value().item());
      require(std::isfinite(loss), ErrorKind::NonFiniteLoss,
              "epoch " + std::to_string(epoch) + ": loss is " + std::to_string(loss) +
                  " (L_mc=" + std::to_string(double(obj.l_mc.value().item())) +
                  ", L_gc=" + std::to_string(double(obj.l_gc.value().item())) +
                  ", L_ac=" + std::to_string(double(obj.l_ac.value().item())) + ")");
      tape.backward(obj.total);
      std::vector<Tensor<T>> grads;
      grads.reserve(p.size());
      for (const auto& v : p) grads.push_back(tape.grad(v));
      adam_step(model.params().values(), grads, adam, cfg.adam);
      require(model.params().all_finite(), ErrorKind::NonFiniteLoss,
              "epoch " + std::to_string(epoch) + ": non-finite parameter after optimizer step");
      rec.loss += loss;
      rec.l_mc += double(obj.l_mc.value().item());
      rec.l_gc += double(obj.l_gc.value().item());
      rec.l_ac += double(obj.l_ac.value().item());
      ++steps;
    }
    rec.loss /= double(steps);
    rec.l_mc /= double(steps);
    rec.l_gc /= double(steps);
    rec.l_ac /= double(steps);
    for (T a : model.params().value(model.view_weight_slot()).data()) rec.view_weight.push_back(double(a));
    rec.fusion_weights =
        fusion_weights(rec.view_weight, std::vector<double>(rec.view_weight.size(), 1.0), model_cfg.gamma);
    const bool eval_now = held_out && (epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0));
    if (eval_now) rec.eval = evaluate(model, *held_out);
    if (cfg.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "epoch " << epoch << " loss " << rec.loss << " l_mc " << rec.l_mc << " l_gc " << rec.l_gc
                << " l_ac " << rec.l_ac;
      if (rec.eval) std::cerr << " eval_ap " << rec.eval->ap;
      std::cerr << " (" << secs << "s)\n";
    }
    result.history.epochs.push_back(std::move(rec));
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
  return result;
}

}  // namespace lmvcat
