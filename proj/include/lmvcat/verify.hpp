#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/data.hpp"
#include "lmvcat/gradcheck.hpp"
#include "lmvcat/losses.hpp"
#include "lmvcat/model.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/trainer.hpp"

namespace lmvcat {

/// Parameter group used when reporting gradient-check results.
inline std::string param_group(const std::string& name) {
  if (name.rfind("embed.", 0) == 0) return "embed";
  if (name == "view_weight") return "view_weight";
  if (name == "class_tokens") return "class_tokens";
  if (name.rfind("head_", 0) == 0) return "heads";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find("norm") != std::string::npos) return "layer_norm";
  return "mlp";
}

struct ModelGradCheckReport {
  double max_rel_err = 0.0;
  std::map<std::string, double> per_group;
  std::string worst_param;
  std::size_t parameters = 0;
};

struct GradCheckSetup {
  std::size_t n = 4;
  std::size_t m = 3;
  std::size_t c = 5;
  std::size_t d_e = 16;
  std::size_t heads = 2;
  double dropout = 0.1;
  double alpha = 10.0;
  double beta = 0.1;
  double eps = 1e-3;
  Stencil stencil = Stencil::FourPoint;
  /// Multiplier applied to the default-initialized weight matrices.
  double weight_scale = 15.0;
};

/// Full objective vs central differences in 64-bit on a tiny model with
/// missing views and labels. Dropout masks are redrawn from the same seed at
/// every evaluation so the loss is a deterministic function of the weights.
inline ModelGradCheckReport model_gradient_check(std::uint64_t seed, const GradCheckSetup& setup = {}) {
  Rng rng(seed);
  std::vector<std::size_t> dims;
  for (std::size_t v = 0; v < setup.m; ++v) dims.push_back(3 + v);
  MultiViewDataset ds = make_synthetic(setup.n, setup.m, setup.c, 3, dims, 0.1, rng.next_u64());
  // Knock out roughly a third of the views (keeping one per sample) and a
  // third of the labels.
  Tensor<double> w = Tensor<double>::matrix(setup.n, setup.m, 1.0);
  for (std::size_t i = 0; i < setup.n; ++i) {
    const std::size_t keep = rng.below(setup.m);
    for (std::size_t v = 0; v < setup.m; ++v)
      if (v != keep && rng.uniform() < 0.35) w(i, v) = 0.0;
  }
  Tensor<double> g = Tensor<double>::matrix(setup.n, setup.c, 1.0);
  for (double& x : g.data())
    if (rng.uniform() < 0.3) x = 0.0;
  g[0] = 1.0;
  ds = apply_masks(std::move(ds), w, g);

  ModelConfig cfg;
  cfg.d_e = setup.d_e;
  cfg.heads = setup.heads;
  cfg.dropout = setup.dropout;
  cfg.precision = Precision::Float64;
  LmvcatModel<double> model(cfg, ds.view_dims(), ds.num_labels());
  model.initialize(rng.next_u64());
  // Move to a generic point: at the default init the attention logits are
  // ~1e-4 and their gradients sit below the finite-difference noise floor.
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string& name = model.params().name(i);
    for (double& x : model.params().value(i).data()) {
      if (name.ends_with(".gain")) x = 1.0 + 0.2 * rng.normal();
      else if (name.ends_with(".bias")) x = 0.1 * rng.normal();
      else if (name == "view_weight") x = 0.5 + rng.uniform();
      else x *= setup.weight_scale;
    }
  }
  const std::uint64_t dropout_seed = rng.next_u64();

  const Batch<double> batch = make_batch<double>(ds);
  const LabelSimilarity sim = label_similarity(ds.labels, ds.label_mask);

  auto f = [&](const std::vector<Tensor<double>>& values) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> p;
    for (const auto& v : values) p.push_back(tape.leaf(v, true));
    Rng drop(dropout_seed);
    const auto fwd = model.forward(tape, p, batch, true, &drop);
    const auto obj = build_objective(tape, fwd, batch, ds.view_mask, sim.similarity, sim.valid, setup.alpha, setup.beta);
    tape.backward(obj.total);
    std::vector<Tensor<double>> grads;
    for (const auto& v : p) grads.push_back(tape.grad(v));
    return std::make_pair(obj.total.value().item(), std::move(grads));
  };

  std::vector<Tensor<double>> values = model.params().values();
  const GradCheckResult r = gradient_check(f, values, setup.eps, setup.stencil);
  ModelGradCheckReport report;
  report.max_rel_err = r.max_rel_err;
  report.parameters = model.params().scalar_count();
  report.worst_param = model.params().name(r.worst_param);
  for (std::size_t i = 0; i < r.per_param.size(); ++i) {
    double& slot = report.per_group[param_group(model.params().name(i))];
    slot = std::max(slot, r.per_param[i]);
  }
  return report;
}

}  // namespace lmvcat
