#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/data.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/params.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat {

enum class Precision { Float32, Float64 };

inline std::string to_string(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float32" || s == "f32" || s == "32") return Precision::Float32;
  if (s == "float64" || s == "f64" || s == "64") return Precision::Float64;
  fail(ErrorKind::InvalidArgument, "unknown precision '" + s + "'");
}

struct ModelConfig {
  std::size_t d_e = 512;
  std::size_t heads = 4;
  std::size_t layers_v = 1;
  std::size_t layers_c = 1;
  double dropout = 0.1;
  /// Exponent on the view weights in the fusion softmax; an exact real power.
  double gamma = 2.0;
  Precision precision = Precision::Float32;

  std::size_t head_dim() const { return d_e / heads; }

  void validate() const {
    require(d_e >= 1 && heads >= 1 && d_e % heads == 0, ErrorKind::InvalidArgument,
            "d_e (" + std::to_string(d_e) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    require(layers_v >= 1 && layers_c >= 1, ErrorKind::InvalidArgument, "encoder depths must be >= 1");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::InvalidArgument, "dropout must be in [0, 1)");
    require(gamma > 0.0, ErrorKind::InvalidArgument, "gamma must be positive");
  }
};

/// Model inputs for one batch, already cast to the training precision.
template <class T>
struct Batch {
  std::vector<Tensor<T>> views;  // n x d_v each
  Tensor<T> view_mask;           // n x m
  Tensor<T> labels;              // n x c
  Tensor<T> label_mask;          // n x c
  std::vector<std::size_t> rows;  // source row ids

  std::size_t size() const { return view_mask.rows(); }
};

template <class T>
Batch<T> make_batch(const MultiViewDataset& ds, const std::vector<std::size_t>& rows) {
  auto gather = [&](const Tensor<double>& t) {
    Tensor<T> out = Tensor<T>::matrix(rows.size(), t.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = t.row(rows[r]);
      auto dst = out.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] = T(src[c]);
    }
    return out;
  };
  Batch<T> b;
  for (const auto& v : ds.views) b.views.push_back(gather(v));
  b.view_mask = gather(ds.view_mask);
  b.labels = gather(ds.labels);
  b.label_mask = gather(ds.label_mask);
  b.rows = rows;
  return b;
}

template <class T>
Batch<T> make_batch(const MultiViewDataset& ds) {
  std::vector<std::size_t> rows(ds.num_samples());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return make_batch<T>(ds, rows);
}

struct LinearSlot {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

struct MlpSlot {
  LinearSlot fc1, fc2;
};

struct EncoderLayerSlot {
  std::size_t norm1_gain = 0, norm1_bias = 0;
  std::size_t query = 0, key = 0, value = 0;
  LinearSlot out;
  std::size_t norm2_gain = 0, norm2_bias = 0;
  MlpSlot mlp;
};

struct EncoderSlot {
  std::vector<EncoderLayerSlot> layers;
  std::size_t final_gain = 0, final_bias = 0;
};

/// Normalized fusion weights exp(a_v^gamma) w_v / sum_u exp(a_u^gamma) w_u for
/// one availability row. Used for reporting; the differentiable path lives in
/// LmvcatModel::fusion_weights.
inline std::vector<double> fusion_weights(std::span<const double> a, std::span<const double> available, double gamma) {
  require(a.size() == available.size(), ErrorKind::DimensionMismatch, "fusion_weights: length mismatch");
  std::vector<double> w(a.size(), 0.0);
  double total = 0.0;
  for (std::size_t v = 0; v < a.size(); ++v)
    if (available[v] != 0.0) total += std::exp(std::pow(a[v], gamma));
  require(total > 0.0, ErrorKind::EmptyRowMask, "fusion_weights: no available view");
  for (std::size_t v = 0; v < a.size(); ++v)
    if (available[v] != 0.0) w[v] = std::exp(std::pow(a[v], gamma)) / total;
  return w;
}

/// Everything the forward pass produces, as tape nodes.
template <class T>
struct ForwardResult {
  ad::Var<T> embedded;        // (n*m) x d_e, row i*m+v
  ad::Var<T> view_states;     // (n*m) x d_e, VFormer output
  ad::Var<T> fusion_weights;  // n x m
  ad::Var<T> fused;           // n x d_e
  ad::Var<T> consensus;       // n x d_e
  ad::Var<T> class_states;    // (n*c) x d_e, row i*c+k
  ad::Var<T> p_z;             // n x c
  ad::Var<T> p_c;             // n x c
};

template <class T>
struct AttentionResult {
  ad::Var<T> weights;  // (groups*heads*group) x group
  ad::Var<T> heads;    // (groups*group) x d_e, concatenated head outputs
};

/// Per-view MLP embedders, a masked view-aware encoder, weighted view fusion,
/// a class-token encoder and c + 1 linear heads.
template <class T>
class LmvcatModel {
 public:
  static constexpr T kNormEps = T(1e-5);

  LmvcatModel() = default;

  LmvcatModel(ModelConfig config, std::vector<std::size_t> view_dims, std::size_t num_labels)
      : config_(config), view_dims_(std::move(view_dims)), num_labels_(num_labels) {
    config_.validate();
    require(!view_dims_.empty(), ErrorKind::InvalidArgument, "model needs at least one view");
    require(num_labels_ >= 1, ErrorKind::InvalidArgument, "model needs at least one label");
    build_layout();
  }

  /// Weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1, class tokens
  /// ~ N(0, 0.02^2), view weights a_v = 1.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::string& name = params_.name(i);
      Tensor<T>& p = params_.value(i);
      if (ends_with(name, ".gain")) {
        p.fill(T(1));
      } else if (name == "view_weight") {
        p.fill(T(1));
      } else if (ends_with(name, ".bias")) {
        p.fill(T(0));
      } else {
        for (T& x : p.data()) x = T(0.02 * rng.normal());
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<std::size_t>& view_dims() const { return view_dims_; }
  std::size_t num_views() const { return view_dims_.size(); }
  std::size_t num_labels() const { return num_labels_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  std::size_t view_weight_slot() const { return view_weight_; }
  std::size_t class_token_slot() const { return class_tokens_; }

  // -------------------------------------------------------------------------
  // Stages

  /// Phi_v applied to each view, stacked so that row i*m+v holds sample i, view v.
  ad::Var<T> embed_views(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& p, const std::vector<Tensor<T>>& views,
                         bool train, Rng* rng) const {
    require(views.size() == num_views(), ErrorKind::DimensionMismatch,
            "expected " + std::to_string(num_views()) + " views, got " + std::to_string(views.size()));
    const std::size_t n = views.front().rows(), m = num_views();
    ad::Var<T> stacked;
    for (std::size_t v = 0; v < m; ++v) {
      require(views[v].cols() == view_dims_[v] && views[v].rows() == n, ErrorKind::DimensionMismatch,
              "view " + std::to_string(v) + " has shape " + shape_str(views[v].shape()));
      ad::Var<T> x = tape.constant(views[v]);
      ad::Var<T> e = mlp(p, embed_[v], x, train, rng);
      stacked = v == 0 ? e : ad::concat_rows(stacked, e);
    }
    // concat_rows leaves view-major order (v*n + i); regroup per sample.
    std::vector<std::size_t> order(n * m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t v = 0; v < m; ++v) order[i * m + v] = v * n + i;
    return ad::take_rows(stacked, std::move(order));
  }

  /// Multi-head scaled dot-product attention over groups of `group` tokens.
  /// `mask` (optional) has the shape of the stacked score blocks.
  AttentionResult<T> attention(const std::vector<ad::Var<T>>& p, const EncoderLayerSlot& slot, ad::Var<T> x,
                               std::size_t group, const Tensor<T>* mask) const {
    const std::size_t h = config_.heads;
    const T scale = T(1) / std::sqrt(T(config_.head_dim()));
    ad::Var<T> q = ad::matmul(x, p[slot.query]);
    ad::Var<T> k = ad::matmul(x, p[slot.key]);
    ad::Var<T> v = ad::matmul(x, p[slot.value]);
    ad::Var<T> scores = ad::grouped_scores(q, k, group, h, scale);
    ad::Var<T> weights = ad::masked_softmax(scores, mask);
    return {weights, ad::grouped_mix(weights, v, group, h)};
  }

  /// One pre-norm encoder block: x + Drop(Attn(LN(x))), then + MLP(LN(.)).
  ad::Var<T> encoder_layer(const std::vector<ad::Var<T>>& p, const EncoderLayerSlot& slot, ad::Var<T> x,
                           std::size_t group, const Tensor<T>* mask, bool train, Rng* rng) const {
    ad::Var<T> y = ad::layer_norm(x, p[slot.norm1_gain], p[slot.norm1_bias], kNormEps);
    ad::Var<T> attn = attention(p, slot, y, group, mask).heads;
    ad::Var<T> o = ad::dropout(linear(p, slot.out, attn), config_.dropout, rng, train);
    x = ad::add(x, o);
    ad::Var<T> y2 = ad::layer_norm(x, p[slot.norm2_gain], p[slot.norm2_bias], kNormEps);
    return ad::add(x, mlp(p, slot.mlp, y2, train, rng));
  }

  /// Attention mask for the view encoder: every query of sample i may attend
  /// to exactly the views available for sample i.
  Tensor<T> view_attention_mask(const Tensor<T>& view_mask) const {
    const std::size_t n = view_mask.rows(), m = view_mask.cols(), h = config_.heads;
    Tensor<T> mask = Tensor<T>::matrix(n * h * m, m);
    for (std::size_t i = 0; i < n; ++i) {
      bool any = false;
      for (std::size_t v = 0; v < m; ++v) any = any || view_mask(i, v) != T(0);
      require(any, ErrorKind::EmptyRowMask, "sample " + std::to_string(i) + " has no available view");
      for (std::size_t t = 0; t < h; ++t)
        for (std::size_t q = 0; q < m; ++q)
          for (std::size_t v = 0; v < m; ++v) mask((i * h + t) * m + q, v) = view_mask(i, v);
    }
    return mask;
  }

  ad::Var<T> vformer(const std::vector<ad::Var<T>>& p, ad::Var<T> embedded, const Tensor<T>& view_mask, bool train,
                     Rng* rng) const {
    const std::size_t m = num_views();
    require(view_mask.cols() == m && embedded.rows() == view_mask.rows() * m, ErrorKind::DimensionMismatch,
            "vformer: embedding rows do not match the view mask");
    const Tensor<T> mask = view_attention_mask(view_mask);
    ad::Var<T> x = embedded;
    for (const auto& layer : vformer_.layers) x = encoder_layer(p, layer, x, m, &mask, train, rng);
    return ad::layer_norm(x, p[vformer_.final_gain], p[vformer_.final_bias], kNormEps);
  }

  ad::Var<T> fusion_weights(const std::vector<ad::Var<T>>& p, const Tensor<T>& view_mask) const {
    ad::Var<T> powered = ad::pow_scalar(p[view_weight_], T(config_.gamma));
    return ad::masked_row_normalize(ad::exp(powered), view_mask);
  }

  ad::Var<T> fuse(ad::Var<T> weights, ad::Var<T> view_states) const {
    return ad::group_weighted_sum(weights, view_states);
  }

  /// Runs the class-token encoder over [z_i, cls_1..cls_c] for every sample.
  /// Returns (consensus n x d_e, class states (n*c) x d_e).
  std::pair<ad::Var<T>, ad::Var<T>> cformer(const std::vector<ad::Var<T>>& p, ad::Var<T> fused, bool train,
                                            Rng* rng) const {
    const std::size_t n = fused.rows(), c = num_labels_, g = c + 1;
    require(fused.cols() == config_.d_e, ErrorKind::DimensionMismatch, "cformer: fused width != d_e");
    ad::Var<T> pool = ad::concat_rows(fused, p[class_tokens_]);
    std::vector<std::size_t> order(n * g);
    for (std::size_t i = 0; i < n; ++i) {
      order[i * g] = i;
      for (std::size_t k = 0; k < c; ++k) order[i * g + 1 + k] = n + k;
    }
    ad::Var<T> x = ad::take_rows(pool, std::move(order));
    for (const auto& layer : cformer_.layers) x = encoder_layer(p, layer, x, g, nullptr, train, rng);
    x = ad::layer_norm(x, p[cformer_.final_gain], p[cformer_.final_bias], kNormEps);
    std::vector<std::size_t> head_rows(n), class_rows(n * c);
    for (std::size_t i = 0; i < n; ++i) {
      head_rows[i] = i * g;
      for (std::size_t k = 0; k < c; ++k) class_rows[i * c + k] = i * g + 1 + k;
    }
    return {ad::take_rows(x, std::move(head_rows)), ad::take_rows(x, std::move(class_rows))};
  }

  /// (P_z, P_c): the consensus head over all labels and one scalar head per class token.
  std::pair<ad::Var<T>, ad::Var<T>> predict(const std::vector<ad::Var<T>>& p, ad::Var<T> consensus,
                                            ad::Var<T> class_states) const {
    const std::size_t c = num_labels_, n = consensus.rows();
    ad::Var<T> p_z = ad::sigmoid(linear(p, head_z_, consensus));
    std::vector<std::size_t> tile(n * c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) tile[i * c + k] = k;
    ad::Var<T> w = ad::take_rows(p[head_c_.weight], std::move(tile));
    ad::Var<T> logits = ad::reshape(ad::row_sum(ad::mul(class_states, w)), Shape{n, c});
    ad::Var<T> p_c = ad::sigmoid(ad::add_rowvec(logits, p[head_c_.bias]));
    return {p_z, p_c};
  }

  ForwardResult<T> forward(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& p, const Batch<T>& batch, bool train,
                           Rng* rng) const {
    ForwardResult<T> r;
    r.embedded = embed_views(tape, p, batch.views, train, rng);
    r.view_states = vformer(p, r.embedded, batch.view_mask, train, rng);
    r.fusion_weights = fusion_weights(p, batch.view_mask);
    r.fused = fuse(r.fusion_weights, r.view_states);
    std::tie(r.consensus, r.class_states) = cformer(p, r.fused, train, rng);
    std::tie(r.p_z, r.p_c) = predict(p, r.consensus, r.class_states);
    return r;
  }

  /// Eval-mode P_z for a batch.
  Tensor<T> predict_scores(const Batch<T>& batch) const {
    ad::Tape<T> tape;
    auto p = bind_constants(tape);
    return forward(tape, p, batch, false, nullptr).p_z.value();
  }

  /// Registers parameters without gradient tracking.
  std::vector<ad::Var<T>> bind_constants(ad::Tape<T>& tape) const {
    std::vector<ad::Var<T>> vars;
    for (const auto& v : params_.values()) vars.push_back(tape.constant(v));
    return vars;
  }

  const EncoderSlot& vformer_slots() const { return vformer_; }
  const EncoderSlot& cformer_slots() const { return cformer_; }

 private:
  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  LinearSlot add_linear(const std::string& prefix, std::size_t in, std::size_t out) {
    return {params_.add(prefix + ".weight", Tensor<T>::matrix(in, out)),
            params_.add(prefix + ".bias", Tensor<T>(Shape{out}))};
  }

  MlpSlot add_mlp(const std::string& prefix, std::size_t in, std::size_t width) {
    return {add_linear(prefix + ".fc1", in, width), add_linear(prefix + ".fc2", width, width)};
  }

  EncoderSlot add_encoder(const std::string& prefix, std::size_t depth) {
    const std::size_t d = config_.d_e;
    EncoderSlot enc;
    for (std::size_t l = 0; l < depth; ++l) {
      const std::string lp = prefix + "." + std::to_string(l);
      EncoderLayerSlot s;
      s.norm1_gain = params_.add(lp + ".norm1.gain", Tensor<T>(Shape{d}));
      s.norm1_bias = params_.add(lp + ".norm1.bias", Tensor<T>(Shape{d}));
      s.query = params_.add(lp + ".attn.query", Tensor<T>::matrix(d, d));
      s.key = params_.add(lp + ".attn.key", Tensor<T>::matrix(d, d));
      s.value = params_.add(lp + ".attn.value", Tensor<T>::matrix(d, d));
      s.out = add_linear(lp + ".attn.out", d, d);
      s.norm2_gain = params_.add(lp + ".norm2.gain", Tensor<T>(Shape{d}));
      s.norm2_bias = params_.add(lp + ".norm2.bias", Tensor<T>(Shape{d}));
      s.mlp = add_mlp(lp + ".mlp", d, d);
      enc.layers.push_back(s);
    }
    enc.final_gain = params_.add(prefix + ".final_norm.gain", Tensor<T>(Shape{d}));
    enc.final_bias = params_.add(prefix + ".final_norm.bias", Tensor<T>(Shape{d}));
    return enc;
  }

  void build_layout() {
    const std::size_t d = config_.d_e, c = num_labels_, m = num_views();
    for (std::size_t v = 0; v < m; ++v) embed_.push_back(add_mlp("embed." + std::to_string(v), view_dims_[v], d));
    vformer_ = add_encoder("vformer", config_.layers_v);
    view_weight_ = params_.add("view_weight", Tensor<T>(Shape{1, m}));
    class_tokens_ = params_.add("class_tokens", Tensor<T>::matrix(c, d));
    cformer_ = add_encoder("cformer", config_.layers_c);
    head_z_ = add_linear("head_z", d, c);
    head_c_ = {params_.add("head_c.weight", Tensor<T>::matrix(c, d)), params_.add("head_c.bias", Tensor<T>(Shape{c}))};
  }

  ad::Var<T> linear(const std::vector<ad::Var<T>>& p, const LinearSlot& s, ad::Var<T> x) const {
    return ad::add_rowvec(ad::matmul(x, p[s.weight]), p[s.bias]);
  }

  /// linear -> GELU -> dropout -> linear -> dropout
  ad::Var<T> mlp(const std::vector<ad::Var<T>>& p, const MlpSlot& s, ad::Var<T> x, bool train, Rng* rng) const {
    ad::Var<T> h = ad::dropout(ad::gelu(linear(p, s.fc1, x)), config_.dropout, rng, train);
    return ad::dropout(linear(p, s.fc2, h), config_.dropout, rng, train);
  }

  ModelConfig config_;
  std::vector<std::size_t> view_dims_;
  std::size_t num_labels_ = 0;
  ParamStore<T> params_;
  std::vector<MlpSlot> embed_;
  EncoderSlot vformer_, cformer_;
  std::size_t view_weight_ = 0, class_tokens_ = 0;
  LinearSlot head_z_, head_c_;
};

}  // namespace lmvcat
