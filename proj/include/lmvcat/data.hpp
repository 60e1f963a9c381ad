#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvcat/csv.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat {

/// Destination for non-fatal diagnostics. Defaults to stderr.
inline std::function<void(std::string_view)>& warning_sink() {
  static std::function<void(std::string_view)> sink = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return sink;
}

inline void warn(std::string_view msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// n samples observed through m views, with c binary labels and the two
/// availability indicators (view_mask W: n x m, label_mask G: n x c).
struct MultiViewDataset {
  std::vector<Tensor<double>> views;
  Tensor<double> labels;
  Tensor<double> view_mask;
  Tensor<double> label_mask;

  std::size_t num_samples() const { return labels.rows(); }
  std::size_t num_views() const { return views.size(); }
  std::size_t num_labels() const { return labels.cols(); }
  std::vector<std::size_t> view_dims() const {
    std::vector<std::size_t> dims;
    for (const auto& v : views) dims.push_back(v.cols());
    return dims;
  }
};

namespace detail {

inline void require_binary(const Tensor<double>& t, std::string_view what) {
  for (double x : t.data())
    require(x == 0.0 || x == 1.0, ErrorKind::NonBinary, std::string(what) + " contains a value outside {0,1}");
}

}  // namespace detail

/// Throws on any violated dataset invariant. Zero-filling is checked, not
/// repaired; see enforce_zero_fill.
inline void validate(const MultiViewDataset& ds) {
  require(!ds.views.empty(), ErrorKind::DimensionMismatch, "dataset has no views");
  const std::size_t n = ds.views.front().rows();
  for (std::size_t v = 0; v < ds.views.size(); ++v)
    require(ds.views[v].rows() == n, ErrorKind::DimensionMismatch,
            "view " + std::to_string(v) + " has " + std::to_string(ds.views[v].rows()) + " rows, expected " +
                std::to_string(n));
  require(ds.labels.rows() == n, ErrorKind::DimensionMismatch,
          "labels have " + std::to_string(ds.labels.rows()) + " rows, views have " + std::to_string(n));
  require(ds.view_mask.rows() == n && ds.view_mask.cols() == ds.views.size(), ErrorKind::DimensionMismatch,
          "view mask shape " + shape_str(ds.view_mask.shape()));
  require(ds.label_mask.rows() == n && ds.label_mask.cols() == ds.labels.cols(), ErrorKind::DimensionMismatch,
          "label mask shape " + shape_str(ds.label_mask.shape()));
  detail::require_binary(ds.labels, "labels");
  detail::require_binary(ds.view_mask, "view mask");
  detail::require_binary(ds.label_mask, "label mask");
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t v = 0; v < ds.num_views(); ++v) any = any || ds.view_mask(i, v) == 1.0;
    require(any, ErrorKind::EmptyRowMask, "sample " + std::to_string(i) + " has no available view");
  }
  for (std::size_t v = 0; v < ds.num_views(); ++v)
    for (std::size_t i = 0; i < n; ++i)
      if (ds.view_mask(i, v) == 0.0)
        for (double x : ds.views[v].row(i))
          require(x == 0.0, ErrorKind::InvalidArgument, "missing view entry is not zero-filled");
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    require(ds.label_mask[i] == 1.0 || ds.labels[i] == 0.0, ErrorKind::InvalidArgument,
            "unknown label entry is not zero-filled");
}

/// Zeroes features of missing views and labels of unknown entries. Returns
/// the number of nonzero values that were overwritten.
inline std::size_t enforce_zero_fill(MultiViewDataset& ds) {
  std::size_t cleared = 0;
  for (std::size_t v = 0; v < ds.num_views(); ++v)
    for (std::size_t i = 0; i < ds.num_samples(); ++i)
      if (ds.view_mask(i, v) == 0.0)
        for (double& x : ds.views[v].row(i)) {
          cleared += x != 0.0;
          x = 0.0;
        }
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (ds.label_mask[i] == 0.0) {
      cleared += ds.labels[i] != 0.0;
      ds.labels[i] = 0.0;
    }
  return cleared;
}

// ---------------------------------------------------------------------------
// Files

/// Loads a dataset from a JSON manifest:
///   {"views": ["a.csv", ...], "labels": "y.csv", "view_mask": "w.csv", "label_mask": "g.csv"}
/// Relative paths resolve against the manifest's directory. Absent masks
/// default to all-ones.
inline MultiViewDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(in.good(), ErrorKind::MissingFile, "cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::ParseError, "manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto base = manifest_path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  require(manifest.contains("views") && manifest["views"].is_array() && !manifest["views"].empty(),
          ErrorKind::ParseError, "manifest needs a non-empty 'views' list");
  require(manifest.contains("labels") && manifest["labels"].is_string(), ErrorKind::ParseError,
          "manifest needs a 'labels' path");

  MultiViewDataset ds;
  for (const auto& v : manifest["views"]) ds.views.push_back(csv::read_matrix(resolve(v.get<std::string>())));
  ds.labels = csv::read_matrix(resolve(manifest["labels"].get<std::string>()));

  const std::size_t n = ds.views.front().rows();
  for (std::size_t v = 0; v < ds.views.size(); ++v)
    require(ds.views[v].rows() == n, ErrorKind::DimensionMismatch,
            "view " + std::to_string(v) + " has " + std::to_string(ds.views[v].rows()) + " rows, expected " +
                std::to_string(n));
  require(ds.labels.rows() == n, ErrorKind::DimensionMismatch,
          "labels have " + std::to_string(ds.labels.rows()) + " rows, views have " + std::to_string(n));

  if (manifest.contains("view_mask") && !manifest["view_mask"].is_null())
    ds.view_mask = csv::read_matrix(resolve(manifest["view_mask"].get<std::string>()));
  else
    ds.view_mask = Tensor<double>::matrix(n, ds.views.size(), 1.0);
  if (manifest.contains("label_mask") && !manifest["label_mask"].is_null())
    ds.label_mask = csv::read_matrix(resolve(manifest["label_mask"].get<std::string>()));
  else
    ds.label_mask = Tensor<double>::matrix(n, ds.labels.cols(), 1.0);

  require(ds.view_mask.rows() == n && ds.view_mask.cols() == ds.views.size(), ErrorKind::DimensionMismatch,
          "view mask shape " + shape_str(ds.view_mask.shape()));
  require(ds.label_mask.rows() == n && ds.label_mask.cols() == ds.labels.cols(), ErrorKind::DimensionMismatch,
          "label mask shape " + shape_str(ds.label_mask.shape()));
  detail::require_binary(ds.labels, "labels");
  detail::require_binary(ds.view_mask, "view mask");
  detail::require_binary(ds.label_mask, "label mask");

  if (const std::size_t cleared = enforce_zero_fill(ds); cleared > 0)
    warn(std::to_string(cleared) + " nonzero values under a zero mask were reset to 0");
  validate(ds);
  return ds;
}

/// Writes view_<v>.csv, labels.csv, view_mask.csv, label_mask.csv and
/// manifest.json into `dir`. Returns the manifest path.
inline std::filesystem::path save_dataset(const std::filesystem::path& dir, const MultiViewDataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["views"] = nlohmann::json::array();
  for (std::size_t v = 0; v < ds.num_views(); ++v) {
    const std::string name = "view_" + std::to_string(v) + ".csv";
    csv::write_matrix(dir / name, ds.views[v]);
    manifest["views"].push_back(name);
  }
  csv::write_matrix(dir / "labels.csv", ds.labels);
  csv::write_matrix(dir / "view_mask.csv", ds.view_mask);
  csv::write_matrix(dir / "label_mask.csv", ds.label_mask);
  manifest["labels"] = "labels.csv";
  manifest["view_mask"] = "view_mask.csv";
  manifest["label_mask"] = "label_mask.csv";
  const auto path = dir / "manifest.json";
  std::ofstream out(path);
  require(out.good(), ErrorKind::MissingFile, "cannot write " + path.string());
  out << manifest.dump(2) << '\n';
  return path;
}

// ---------------------------------------------------------------------------
// Missingness simulation

/// Removes exactly round(ratio * n) samples from every view while keeping at
/// least one view per sample.
///
/// Removals are drawn uniformly per column. A sample left with no view gets
/// one view back, chosen uniformly among views where some other sample with
/// two or more views can give up that view instead (ties among donors of
/// maximal availability broken uniformly), so per-column counts are exact
/// whenever the ratio is feasible.
inline Tensor<double> simulate_missing_views(std::size_t n, std::size_t m, double ratio, std::uint64_t seed) {
  require(ratio >= 0.0 && ratio < 1.0, ErrorKind::InvalidArgument, "view missing ratio must be in [0, 1)");
  require(n >= 1 && m >= 1, ErrorKind::InvalidArgument, "need n >= 1 and m >= 1");
  const auto k = static_cast<std::size_t>(std::llround(ratio * double(n)));
  require(k * m <= n * (m - 1), ErrorKind::InfeasibleRatio,
          "removing " + std::to_string(k) + " of " + std::to_string(n) + " samples from each of " +
              std::to_string(m) + " views leaves some sample with no view");

  Tensor<double> W = Tensor<double>::matrix(n, m, 1.0);
  Rng rng(seed);
  for (std::size_t v = 0; v < m; ++v)
    for (std::size_t i : rng.sample_without_replacement(n, k)) W(i, v) = 0.0;

  std::vector<std::size_t> row_sum(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < m; ++v) row_sum[i] += W(i, v) == 1.0;

  for (std::size_t i = 0; i < n; ++i) {
    if (row_sum[i] > 0) continue;
    // Donor candidates per view: rows holding that view with >= 2 views, at
    // maximal availability.
    std::vector<std::vector<std::size_t>> donors(m);
    std::vector<std::size_t> donor_views;
    for (std::size_t v = 0; v < m; ++v) {
      std::size_t best = 1;
      for (std::size_t r = 0; r < n; ++r)
        if (W(r, v) == 1.0 && row_sum[r] > best) {
          best = row_sum[r];
          donors[v].clear();
        }
      if (best < 2) continue;
      for (std::size_t r = 0; r < n; ++r)
        if (W(r, v) == 1.0 && row_sum[r] == best) donors[v].push_back(r);
      donor_views.push_back(v);
    }
    if (donor_views.empty()) {
      const std::size_t v = rng.below(m);
      W(i, v) = 1.0;
      row_sum[i] = 1;
      continue;
    }
    const std::size_t v = donor_views[rng.below(donor_views.size())];
    const std::size_t donor = donors[v][rng.below(donors[v].size())];
    W(i, v) = 1.0;
    row_sum[i] = 1;
    W(donor, v) = 0.0;
    --row_sum[donor];
  }
  return W;
}

/// For each label column, hides floor(ratio * #positives) positive entries
/// and floor(ratio * #negatives) negative entries, chosen uniformly.
inline Tensor<double> simulate_missing_labels(const Tensor<double>& labels, double ratio, std::uint64_t seed) {
  require(ratio >= 0.0 && ratio < 1.0, ErrorKind::InvalidArgument, "label missing ratio must be in [0, 1)");
  detail::require_binary(labels, "labels");
  const std::size_t n = labels.rows(), c = labels.cols();
  Tensor<double> G = Tensor<double>::matrix(n, c, 1.0);
  Rng rng(seed);
  for (std::size_t j = 0; j < c; ++j) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (labels(i, j) == 1.0 ? pos : neg).push_back(i);
    for (const auto* group : {&pos, &neg}) {
      const auto k = static_cast<std::size_t>(std::floor(ratio * double(group->size())));
      for (std::size_t idx : rng.sample_without_replacement(group->size(), k)) G((*group)[idx], j) = 0.0;
    }
  }
  return G;
}

/// Applies W and G to a dataset and zero-fills the hidden entries.
inline MultiViewDataset apply_masks(MultiViewDataset ds, const Tensor<double>& view_mask, const Tensor<double>& label_mask) {
  ds.view_mask = view_mask;
  ds.label_mask = label_mask;
  enforce_zero_fill(ds);
  validate(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Latent-factor generator: U ~ N(0, I) of width d_latent; view v is
/// U R_v + noise * eps; label k is 1[U q_k + b_k > 0] where label directions
/// q_k share a small set of latent bases, so labels co-occur.
inline MultiViewDataset make_synthetic(std::size_t n, std::size_t m, std::size_t c, std::size_t d_latent,
                                       const std::vector<std::size_t>& view_dims, double noise, std::uint64_t seed) {
  require(n >= 1 && m >= 1 && c >= 1 && d_latent >= 1, ErrorKind::InvalidArgument, "all counts must be >= 1");
  require(view_dims.size() == m, ErrorKind::DimensionMismatch, "view_dims must have m entries");
  for (std::size_t d : view_dims) require(d >= 1, ErrorKind::InvalidArgument, "view dims must be >= 1");
  Rng rng(seed);

  Tensor<double> U = Tensor<double>::matrix(n, d_latent);
  for (double& x : U.data()) x = rng.normal();

  MultiViewDataset ds;
  const double map_scale = 1.0 / std::sqrt(double(d_latent));
  for (std::size_t v = 0; v < m; ++v) {
    Tensor<double> R = Tensor<double>::matrix(d_latent, view_dims[v]);
    for (double& x : R.data()) x = map_scale * rng.normal();
    Tensor<double> X = Tensor<double>::matrix(n, view_dims[v]);
    X.mat().noalias() = U.mat() * R.mat();
    if (noise != 0.0)
      for (double& x : X.data()) x += noise * rng.normal();
    ds.views.push_back(std::move(X));
  }

  const std::size_t num_bases = std::max<std::size_t>(1, std::min(d_latent, (c + 2) / 3));
  Tensor<double> bases = Tensor<double>::matrix(num_bases, d_latent);
  for (double& x : bases.data()) x = rng.normal();
  Tensor<double> Q = Tensor<double>::matrix(d_latent, c);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t l = 0; l < d_latent; ++l) Q(l, k) = bases(k % num_bases, l) + 0.6 * rng.normal();
  std::vector<double> bias(c);
  for (std::size_t k = 0; k < c; ++k) {
    double norm = 0.0;
    for (std::size_t l = 0; l < d_latent; ++l) norm += Q(l, k) * Q(l, k);
    bias[k] = -(0.2 + 0.8 * rng.uniform()) * std::sqrt(norm);
  }
  Tensor<double> logits = Tensor<double>::matrix(n, c);
  logits.mat().noalias() = U.mat() * Q.mat();
  ds.labels = Tensor<double>::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) ds.labels(i, k) = logits(i, k) + bias[k] > 0.0 ? 1.0 : 0.0;

  ds.view_mask = Tensor<double>::matrix(n, m, 1.0);
  ds.label_mask = Tensor<double>::matrix(n, c, 1.0);
  return ds;
}

// ---------------------------------------------------------------------------
// Row selection

inline MultiViewDataset take_rows(const MultiViewDataset& ds, const std::vector<std::size_t>& rows) {
  auto gather = [&](const Tensor<double>& t) {
    Tensor<double> out = Tensor<double>::matrix(rows.size(), t.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) std::ranges::copy(t.row(rows[r]), out.row(r).begin());
    return out;
  };
  MultiViewDataset out;
  for (const auto& v : ds.views) out.views.push_back(gather(v));
  out.labels = gather(ds.labels);
  out.view_mask = gather(ds.view_mask);
  out.label_mask = gather(ds.label_mask);
  return out;
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded random partition with floor(train_ratio * n) training rows; both
/// index lists are returned in ascending order.
inline SplitIndices split_indices(std::size_t n, double train_ratio, std::uint64_t seed) {
  require(train_ratio > 0.0 && train_ratio < 1.0, ErrorKind::InvalidArgument, "train ratio must be in (0, 1)");
  const auto n_train = static_cast<std::size_t>(std::floor(train_ratio * double(n)));
  require(n_train >= 1 && n_train < n, ErrorKind::DegenerateSplit,
          "split of " + std::to_string(n) + " rows at ratio " + std::to_string(train_ratio) + " leaves a side empty");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + std::ptrdiff_t(n_train));
  s.test.assign(perm.begin() + std::ptrdiff_t(n_train), perm.end());
  std::ranges::sort(s.train);
  std::ranges::sort(s.test);
  return s;
}

inline std::pair<MultiViewDataset, MultiViewDataset> split(const MultiViewDataset& ds, double train_ratio,
                                                           std::uint64_t seed) {
  const SplitIndices s = split_indices(ds.num_samples(), train_ratio, seed);
  return {take_rows(ds, s.train), take_rows(ds, s.test)};
}

// ---------------------------------------------------------------------------
// Optional per-view standardization

/// Feature means and standard deviations per view, estimated from rows where
/// the view is available.
struct ViewStandardizer {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> stddev;

  static ViewStandardizer fit(const MultiViewDataset& train) {
    ViewStandardizer s;
    for (std::size_t v = 0; v < train.num_views(); ++v) {
      const auto& X = train.views[v];
      const std::size_t d = X.cols();
      std::vector<double> mu(d, 0.0), sd(d, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < X.rows(); ++i) {
        if (train.view_mask(i, v) == 0.0) continue;
        ++count;
        for (std::size_t c = 0; c < d; ++c) mu[c] += X(i, c);
      }
      for (double& x : mu) x = count ? x / double(count) : 0.0;
      for (std::size_t i = 0; i < X.rows(); ++i) {
        if (train.view_mask(i, v) == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) sd[c] += (X(i, c) - mu[c]) * (X(i, c) - mu[c]);
      }
      for (double& x : sd) {
        x = count ? std::sqrt(x / double(count)) : 1.0;
        if (x < 1e-12) x = 1.0;
      }
      s.mean.push_back(std::move(mu));
      s.stddev.push_back(std::move(sd));
    }
    return s;
  }

  /// Missing-view rows stay zero.
  void apply(MultiViewDataset& ds) const {
    require(ds.num_views() == mean.size(), ErrorKind::DimensionMismatch, "standardizer view count");
    for (std::size_t v = 0; v < ds.num_views(); ++v) {
      auto& X = ds.views[v];
      require(X.cols() == mean[v].size(), ErrorKind::DimensionMismatch, "standardizer view width");
      for (std::size_t i = 0; i < X.rows(); ++i) {
        if (ds.view_mask(i, v) == 0.0) continue;
        for (std::size_t c = 0; c < X.cols(); ++c) X(i, c) = (X(i, c) - mean[v][c]) / stddev[v][c];
      }
    }
  }
};

}  // namespace lmvcat
