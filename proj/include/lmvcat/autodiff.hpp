#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lmvcat/error.hpp"
#include "lmvcat/random.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat::ad {

template <class T>
class Tape;

/// Handle to one node on a tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Append-only record of primitive applications. Node ids are assigned in
/// creation order, so inputs always precede outputs and a single reverse
/// sweep is a valid topological backward pass.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Record {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Tape() { records_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    Record r;
    r.op = requires_grad ? "param" : "const";
    r.value = std::move(value);
    r.requires_grad = requires_grad;
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends the output of a primitive. The backward closure is dropped when
  /// no input needs a gradient.
  Var<T> record(std::string_view op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
    Record r;
    r.op = op;
    for (std::size_t in : inputs) r.requires_grad = r.requires_grad || records_[in].requires_grad;
    r.inputs = std::move(inputs);
    r.value = std::move(value);
    if (r.requires_grad) r.backward = std::move(backward);
    records_.push_back(std::move(r));
    return {this, records_.size() - 1};
  }

  std::size_t size() const noexcept { return records_.size(); }
  const Record& at(std::size_t id) const { return records_[id]; }
  const Tensor<T>& value(std::size_t id) const { return records_[id].value; }
  bool needs_grad(std::size_t id) const { return records_[id].requires_grad; }

  /// Gradient of the current backward target w.r.t. a node; zero tensor if
  /// nothing flowed into it.
  Tensor<T> grad(std::size_t id) const {
    const Record& r = records_[id];
    if (r.has_grad) return r.grad;
    return Tensor<T>(r.value.shape());
  }
  Tensor<T> grad(Var<T> v) const { return grad(v.id); }

  /// Mutable gradient accumulator, allocated at zero on first touch.
  Tensor<T>& grad_slot(std::size_t id) {
    Record& r = records_[id];
    if (!r.has_grad) {
      r.grad = Tensor<T>(r.value.shape());
      r.has_grad = true;
    }
    return r.grad;
  }

  const Tensor<T>& upstream(std::size_t id) const { return records_[id].grad; }

  void backward(Var<T> loss) {
    require(loss.tape == this, ErrorKind::InvalidArgument, "loss belongs to another tape");
    require(!backward_done_, ErrorKind::DoubleBackward, "backward already ran on this tape; call zero_grad() first");
    require(records_[loss.id].value.size() == 1, ErrorKind::NonScalarLoss,
            "loss has shape " + shape_str(records_[loss.id].value.shape()));
    backward_done_ = true;
    grad_slot(loss.id)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Record& r = records_[i];
      if (!r.has_grad || !r.backward) continue;
      r.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Record& r : records_) {
      r.grad = Tensor<T>();
      r.has_grad = false;
    }
    backward_done_ = false;
  }

 private:
  std::vector<Record> records_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
Tape<T>& tape_of(Var<T> a) {
  return *a.tape;
}

inline void check_same_size(std::size_t a, std::size_t b, std::string_view op) {
  require(a == b, ErrorKind::DimensionMismatch,
          std::string(op) + ": operand sizes differ (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product over the matrix views of both operands. A leading batch
/// shape on `a` is preserved: (n, m, q) x (q, r) -> (n, m, r).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  require(A.cols() == B.rows(), ErrorKind::DimensionMismatch,
          "matmul: inner dimensions " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Shape out_shape = A.rank() >= 2 ? A.shape() : Shape{A.rows(), A.cols()};
  out_shape.back() = B.cols();
  Tensor<T> C(out_shape);
  C.mat().noalias() = A.mat() * B.mat();
  return tp.record("matmul", {a.id, b.id}, std::move(C), [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dC = t.upstream(self);
    if (t.needs_grad(ia)) t.grad_slot(ia).mat().noalias() += dC.mat() * t.value(ib).mat().transpose();
    if (t.needs_grad(ib)) t.grad_slot(ib).mat().noalias() += t.value(ia).mat().transpose() * dC.mat();
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  Tensor<T> out = Tensor<T>::matrix(A.cols(), A.rows());
  out.mat() = A.mat().transpose();
  return tp.record("transpose", {a.id}, std::move(out), [ia = a.id](Tape<T>& t, std::size_t self) {
    t.grad_slot(ia).mat() += t.upstream(self).mat().transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tp = detail::tape_of(a);
  detail::check_same_size(a.value().size(), b.value().size(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return tp.record("add", {a.id, b.id}, std::move(out), [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    if (t.needs_grad(ia)) detail::add_into(t.grad_slot(ia), g);
    if (t.needs_grad(ib)) detail::add_into(t.grad_slot(ib), g);
  });
}

/// a + b where b (size = a.cols()) is broadcast over every row of a.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  detail::check_same_size(A.cols(), B.size(), "add_rowvec");
  Tensor<T> out = A;
  const std::size_t rows = A.rows(), cols = A.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  return tp.record("add_rowvec", {a.id, b.id}, std::move(out),
                   [ia = a.id, ib = b.id, rows, cols](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     if (t.needs_grad(ia)) detail::add_into(t.grad_slot(ia), g);
                     if (t.needs_grad(ib)) {
                       Tensor<T>& gb = t.grad_slot(ib);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                     }
                   });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tp = detail::tape_of(a);
  detail::check_same_size(a.value().size(), b.value().size(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return tp.record("mul", {a.id, b.id}, std::move(out), [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    if (t.needs_grad(ia)) {
      Tensor<T>& ga = t.grad_slot(ia);
      const Tensor<T>& B = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(ib)) {
      Tensor<T>& gb = t.grad_slot(ib);
      const Tensor<T>& A = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// scale * a + shift
template <class T>
Var<T> affine(Var<T> a, T scale, T shift = T(0)) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = scale * x + shift;
  return tp.record("affine", {a.id}, std::move(out), [ia = a.id, scale](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return affine(a, s, T(0));
}

template <class T>
Var<T> exp(Var<T> a) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = std::exp(x);
  return tp.record("exp", {a.id}, std::move(out), [ia = a.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

/// Elementwise x^p for a fixed real exponent p > 0.
template <class T>
Var<T> pow_scalar(Var<T> a, T p) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = std::pow(x, p);
  return tp.record("pow", {a.id}, std::move(out), [ia = a.id, p](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p * std::pow(x[i], p - T(1));
  });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

/// Exact-erf GELU, x * Phi(x).
template <class T>
Var<T> gelu(Var<T> a) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = gelu_value(x);
  return tp.record("gelu", {a.id}, std::move(out), [ia = a.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad_slot(ia);
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& x : out.data()) x = sigmoid_value(x);
  return tp.record("sigmoid", {a.id}, std::move(out), [ia = a.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

/// Inverted dropout: in training mode each entry is kept with probability
/// 1 - rate and rescaled by 1 / (1 - rate). Identity in eval mode.
template <class T>
Var<T> dropout(Var<T> a, double rate, Rng* rng, bool train) {
  if (!train || rate <= 0.0) return a;
  require(rate < 1.0, ErrorKind::InvalidArgument, "dropout rate must be < 1");
  require(rng != nullptr, ErrorKind::InvalidArgument, "dropout in training mode needs a generator");
  auto& tp = detail::tape_of(a);
  const T keep_scale = T(1) / T(1.0 - rate);
  Tensor<T> mask(a.shape());
  for (auto& m : mask.data()) m = rng->uniform() >= rate ? keep_scale : T(0);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return tp.record("dropout", {a.id}, std::move(out), [ia = a.id, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <class T>
Var<T> sum(Var<T> a) {
  auto& tp = detail::tape_of(a);
  T s = T(0);
  for (T x : a.value().data()) s += x;
  return tp.record("sum", {a.id}, Tensor<T>::scalar(s), [ia = a.id](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self)[0];
    for (auto& x : t.grad_slot(ia).data()) x += g;
  });
}

/// Per-row sum: (rows x cols) -> (rows x 1).
template <class T>
Var<T> row_sum(Var<T> a) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor<T> out = Tensor<T>::matrix(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) s += A[r * cols + c];
    out[r] = s;
  }
  return tp.record("row_sum", {a.id}, std::move(out), [ia = a.id, rows, cols](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& ga = t.grad_slot(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[r];
  });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  auto& tp = detail::tape_of(a);
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return tp.record("reshape", {a.id}, std::move(out), [ia = a.id](Tape<T>& t, std::size_t self) {
    detail::add_into(t.grad_slot(ia), t.upstream(self));
  });
}

/// Stacks the rows of a on top of the rows of b.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  detail::check_same_size(A.cols(), B.cols(), "concat_rows");
  std::vector<T> data(A.data().begin(), A.data().end());
  data.insert(data.end(), B.data().begin(), B.data().end());
  const std::size_t split = A.size();
  Tensor<T> out(Shape{A.rows() + B.rows(), A.cols()}, std::move(data));
  return tp.record("concat_rows", {a.id, b.id}, std::move(out),
                   [ia = a.id, ib = b.id, split](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     if (t.needs_grad(ia)) {
                       Tensor<T>& ga = t.grad_slot(ia);
                       for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
                     }
                     if (t.needs_grad(ib)) {
                       Tensor<T>& gb = t.grad_slot(ib);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
                     }
                   });
}

/// Gathers rows by index (repeats allowed); backward scatter-adds.
template <class T>
Var<T> take_rows(Var<T> a, std::vector<std::size_t> index) {
  auto& tp = detail::tape_of(a);
  const Tensor<T>& A = a.value();
  const std::size_t cols = A.cols(), rows = A.rows();
  Tensor<T> out = Tensor<T>::matrix(index.size(), cols);
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < rows, ErrorKind::DimensionMismatch, "take_rows: row index out of range");
    std::copy_n(A.data().begin() + std::ptrdiff_t(index[r] * cols), cols, out.data().begin() + std::ptrdiff_t(r * cols));
  }
  return tp.record("take_rows", {a.id}, std::move(out),
                   [ia = a.id, cols, index = std::move(index)](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     Tensor<T>& ga = t.grad_slot(ia);
                     for (std::size_t r = 0; r < index.size(); ++r)
                       for (std::size_t c = 0; c < cols; ++c) ga[index[r] * cols + c] += g[r * cols + c];
                   });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise layer normalization with population variance.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  auto& tp = detail::tape_of(x);
  require(eps > T(0), ErrorKind::InvalidArgument, "layer_norm eps must be positive");
  const Tensor<T>& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  detail::check_same_size(gain.value().size(), d, "layer_norm gain");
  detail::check_same_size(bias.value().size(), d, "layer_norm bias");
  const Tensor<T>& G = gain.value();
  const Tensor<T>& B = bias.value();
  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = T(0);
    for (std::size_t c = 0; c < d; ++c) mean += X[r * d + c];
    mean /= T(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) {
      const T dx = X[r * d + c] - mean;
      var += dx * dx;
    }
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (X[r * d + c] - mean) * inv_std[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * G[c] + B[c];
    }
  }
  return tp.record(
      "layer_norm", {x.id, gain.id, bias.id}, std::move(out),
      [ix = x.id, ig = gain.id, ib = bias.id, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.upstream(self);
        const Tensor<T>& G = t.value(ig);
        if (t.needs_grad(ig)) {
          Tensor<T>& gg = t.grad_slot(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
        }
        if (t.needs_grad(ib)) {
          Tensor<T>& gb = t.grad_slot(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        if (t.needs_grad(ix)) {
          Tensor<T>& gx = t.grad_slot(ix);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_gh = T(0), mean_gh_h = T(0);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g[r * d + c] * G[c];
              mean_gh += gh;
              mean_gh_h += gh * xhat[r * d + c];
            }
            mean_gh /= T(d);
            mean_gh_h /= T(d);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g[r * d + c] * G[c];
              gx[r * d + c] += inv_std[r] * (gh - mean_gh - xhat[r * d + c] * mean_gh_h);
            }
          }
        }
      });
}

/// Divides each row by its L2 norm, floored at eps.
template <class T>
Var<T> row_normalize(Var<T> x, T eps) {
  auto& tp = detail::tape_of(x);
  const Tensor<T>& X = x.value();
  const std::size_t rows = X.rows(), d = X.cols();
  std::vector<T> norms(rows);
  Tensor<T> out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t c = 0; c < d; ++c) ss += X[r * d + c] * X[r * d + c];
    norms[r] = std::sqrt(ss);
    const T denom = std::max(norms[r], eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = X[r * d + c] / denom;
  }
  return tp.record("row_normalize", {x.id}, std::move(out),
                   [ix = x.id, rows, d, eps, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& y = t.value(self);
                     Tensor<T>& gx = t.grad_slot(ix);
                     for (std::size_t r = 0; r < rows; ++r) {
                       if (norms[r] <= eps) {
                         for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] / eps;
                         continue;
                       }
                       T gy = T(0);
                       for (std::size_t c = 0; c < d; ++c) gy += g[r * d + c] * y[r * d + c];
                       for (std::size_t c = 0; c < d; ++c)
                         gx[r * d + c] += (g[r * d + c] - y[r * d + c] * gy) / norms[r];
                     }
                   });
}

// ---------------------------------------------------------------------------
// Attention

/// Fill value for masked attention logits.
inline constexpr double kMaskFill = -1e9;

/// Row-wise softmax where entries with mask == 0 are replaced by -1e9 before
/// normalization. The mask (same shape as scores) is treated as constant;
/// a null mask means no masking.
template <class T>
Var<T> masked_softmax(Var<T> scores, const Tensor<T>* mask) {
  auto& tp = detail::tape_of(scores);
  const Tensor<T>& S = scores.value();
  const std::size_t rows = S.rows(), cols = S.cols();
  if (mask) detail::check_same_size(mask->size(), S.size(), "masked_softmax mask");
  Tensor<T> out(S.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const bool keep = !mask || (*mask)[i] != T(0);
      if (mask) require((*mask)[i] == T(0) || (*mask)[i] == T(1), ErrorKind::NonBinary, "attention mask must be 0/1");
      any = any || keep;
      const T v = keep ? S[i] : T(kMaskFill);
      out[i] = v;
      mx = std::max(mx, v);
    }
    require(any, ErrorKind::AllMaskedRow, "attention row " + std::to_string(r) + " has no unmasked entry");
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      T& v = out[r * cols + c];
      v = std::exp(v - mx);
      z += v;
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  std::vector<unsigned char> keep;
  if (mask) {
    keep.resize(mask->size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (*mask)[i] != T(0);
  }
  return tp.record("masked_softmax", {scores.id}, std::move(out),
                   [is = scores.id, rows, cols, keep = std::move(keep)](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& y = t.value(self);
                     Tensor<T>& gs = t.grad_slot(is);
                     for (std::size_t r = 0; r < rows; ++r) {
                       T dot = T(0);
                       for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                       for (std::size_t c = 0; c < cols; ++c) {
                         const std::size_t i = r * cols + c;
                         if (!keep.empty() && !keep[i]) continue;
                         gs[i] += y[i] * (g[i] - dot);
                       }
                     }
                   });
}

template <class T>
Var<T> softmax(Var<T> scores) {
  return masked_softmax<T>(scores, nullptr);
}

/// Per-group, per-head scaled dot products. q and k hold `groups * group`
/// token rows of width heads * d_h. The result has one (group x group) score
/// block per (group, head), stacked as rows ((g * heads + t) * group + i).
template <class T>
Var<T> grouped_scores(Var<T> q, Var<T> k, std::size_t group, std::size_t heads, T scale) {
  auto& tp = detail::tape_of(q);
  const Tensor<T>& Q = q.value();
  const Tensor<T>& K = k.value();
  detail::check_same_size(Q.size(), K.size(), "grouped_scores");
  const std::size_t d = Q.cols();
  require(group > 0 && Q.rows() % group == 0, ErrorKind::DimensionMismatch, "grouped_scores: rows not divisible by group");
  require(heads > 0 && d % heads == 0, ErrorKind::DimensionMismatch, "grouped_scores: width not divisible by heads");
  const std::size_t groups = Q.rows() / group, dh = d / heads;
  Tensor<T> out = Tensor<T>::matrix(groups * heads * group, group);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t t = 0; t < heads; ++t)
      for (std::size_t i = 0; i < group; ++i) {
        const T* qi = &Q[(gi * group + i) * d + t * dh];
        for (std::size_t j = 0; j < group; ++j) {
          const T* kj = &K[(gi * group + j) * d + t * dh];
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          out[((gi * heads + t) * group + i) * group + j] = s * scale;
        }
      }
  return tp.record("grouped_scores", {q.id, k.id}, std::move(out),
                   [iq = q.id, ik = k.id, group, heads, groups, d, dh, scale](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& Q = t.value(iq);
                     const Tensor<T>& K = t.value(ik);
                     Tensor<T>* gq = t.needs_grad(iq) ? &t.grad_slot(iq) : nullptr;
                     Tensor<T>* gk = t.needs_grad(ik) ? &t.grad_slot(ik) : nullptr;
                     for (std::size_t gi = 0; gi < groups; ++gi)
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t i = 0; i < group; ++i)
                           for (std::size_t j = 0; j < group; ++j) {
                             const T gs = g[((gi * heads + h) * group + i) * group + j] * scale;
                             if (gs == T(0)) continue;
                             const std::size_t qi = (gi * group + i) * d + h * dh;
                             const std::size_t kj = (gi * group + j) * d + h * dh;
                             for (std::size_t c = 0; c < dh; ++c) {
                               if (gq) (*gq)[qi + c] += gs * K[kj + c];
                               if (gk) (*gk)[kj + c] += gs * Q[qi + c];
                             }
                           }
                   });
}

/// Applies per-(group, head) attention weights to values: the inverse layout
/// of grouped_scores. Zero weights are skipped so masked tokens never enter
/// the sums.
template <class T>
Var<T> grouped_mix(Var<T> attn, Var<T> v, std::size_t group, std::size_t heads) {
  auto& tp = detail::tape_of(attn);
  const Tensor<T>& A = attn.value();
  const Tensor<T>& V = v.value();
  const std::size_t d = V.cols();
  require(group > 0 && V.rows() % group == 0, ErrorKind::DimensionMismatch, "grouped_mix: rows not divisible by group");
  require(heads > 0 && d % heads == 0, ErrorKind::DimensionMismatch, "grouped_mix: width not divisible by heads");
  const std::size_t groups = V.rows() / group, dh = d / heads;
  require(A.rows() == groups * heads * group && A.cols() == group, ErrorKind::DimensionMismatch,
          "grouped_mix: attention shape " + shape_str(A.shape()));
  Tensor<T> out(V.shape());
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < group; ++i) {
        T* oi = &out[(gi * group + i) * d + h * dh];
        for (std::size_t j = 0; j < group; ++j) {
          const T w = A[((gi * heads + h) * group + i) * group + j];
          if (w == T(0)) continue;
          const T* vj = &V[(gi * group + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
  return tp.record("grouped_mix", {attn.id, v.id}, std::move(out),
                   [ia = attn.id, iv = v.id, group, heads, groups, d, dh](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& A = t.value(ia);
                     const Tensor<T>& V = t.value(iv);
                     Tensor<T>* ga = t.needs_grad(ia) ? &t.grad_slot(ia) : nullptr;
                     Tensor<T>* gv = t.needs_grad(iv) ? &t.grad_slot(iv) : nullptr;
                     for (std::size_t gi = 0; gi < groups; ++gi)
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t i = 0; i < group; ++i) {
                           const T* gi_row = &g[(gi * group + i) * d + h * dh];
                           for (std::size_t j = 0; j < group; ++j) {
                             const std::size_t ai = ((gi * heads + h) * group + i) * group + j;
                             const std::size_t vj = (gi * group + j) * d + h * dh;
                             if (ga) {
                               T s = T(0);
                               for (std::size_t c = 0; c < dh; ++c) s += gi_row[c] * V[vj + c];
                               (*ga)[ai] += s;
                             }
                             if (gv && A[ai] != T(0))
                               for (std::size_t c = 0; c < dh; ++c) (*gv)[vj + c] += A[ai] * gi_row[c];
                           }
                         }
                   });
}

// ---------------------------------------------------------------------------
// Fusion

/// Broadcasts a positive row vector e (length m) against a constant n x m
/// availability mask and normalizes each row: out_iv = e_v M_iv / sum_u e_u M_iu.
template <class T>
Var<T> masked_row_normalize(Var<T> e, const Tensor<T>& mask) {
  auto& tp = detail::tape_of(e);
  const Tensor<T>& E = e.value();
  const std::size_t n = mask.rows(), m = mask.cols();
  detail::check_same_size(E.size(), m, "masked_row_normalize");
  Tensor<T> out = Tensor<T>::matrix(n, m);
  std::vector<T> denom(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    bool any = false;
    for (std::size_t v = 0; v < m; ++v) {
      if (mask(i, v) == T(0)) continue;
      any = true;
      s += E[v];
    }
    require(any, ErrorKind::EmptyRowMask, "sample " + std::to_string(i) + " has no available view");
    denom[i] = s;
    for (std::size_t v = 0; v < m; ++v) out(i, v) = mask(i, v) == T(0) ? T(0) : E[v] / s;
  }
  return tp.record("masked_row_normalize", {e.id}, std::move(out),
                   [ie = e.id, n, m, mask, denom = std::move(denom)](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& w = t.value(self);
                     Tensor<T>& ge = t.grad_slot(ie);
                     for (std::size_t i = 0; i < n; ++i) {
                       T gw = T(0);
                       for (std::size_t u = 0; u < m; ++u)
                         if (mask(i, u) != T(0)) gw += g(i, u) * w(i, u);
                       for (std::size_t v = 0; v < m; ++v)
                         if (mask(i, v) != T(0)) ge[v] += (g(i, v) - gw) / denom[i];
                     }
                   });
}

/// out_i = sum_v w_iv z_(i*m+v) over tokens grouped m per sample; zero weights skipped.
template <class T>
Var<T> group_weighted_sum(Var<T> weights, Var<T> z) {
  auto& tp = detail::tape_of(weights);
  const Tensor<T>& Wt = weights.value();
  const Tensor<T>& Z = z.value();
  const std::size_t n = Wt.rows(), m = Wt.cols(), d = Z.cols();
  require(Z.rows() == n * m, ErrorKind::DimensionMismatch, "group_weighted_sum: token rows != n * m");
  Tensor<T> out = Tensor<T>::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < m; ++v) {
      const T w = Wt(i, v);
      if (w == T(0)) continue;
      for (std::size_t c = 0; c < d; ++c) out(i, c) += w * Z[(i * m + v) * d + c];
    }
  return tp.record("group_weighted_sum", {weights.id, z.id}, std::move(out),
                   [iw = weights.id, iz = z.id, n, m, d](Tape<T>& t, std::size_t self) {
                     const Tensor<T>& g = t.upstream(self);
                     const Tensor<T>& Wt = t.value(iw);
                     const Tensor<T>& Z = t.value(iz);
                     Tensor<T>* gw = t.needs_grad(iw) ? &t.grad_slot(iw) : nullptr;
                     Tensor<T>* gz = t.needs_grad(iz) ? &t.grad_slot(iz) : nullptr;
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t v = 0; v < m; ++v) {
                         const T w = Wt(i, v);
                         if (w == T(0)) continue;
                         const T* zr = &Z[(i * m + v) * d];
                         const T* gr = &g[i * d];
                         if (gw) {
                           T s = T(0);
                           for (std::size_t c = 0; c < d; ++c) s += gr[c] * zr[c];
                           (*gw)(i, v) += s;
                         }
                         if (gz)
                           for (std::size_t c = 0; c < d; ++c) (*gz)[(i * m + v) * d + c] += w * gr[c];
                       }
                   });
}

// ---------------------------------------------------------------------------
// Losses

/// -sum_ij w_ij [t_ij log p_ij + (1 - t_ij) log(1 - p_ij)] with p clamped to
/// [clamp, 1 - clamp]. Targets and weights are constants; entries with zero
/// weight are skipped entirely. Clamped entries pass no gradient.
template <class T>
Var<T> weighted_bce(Var<T> p, const Tensor<T>& target, const Tensor<T>& weight, T clamp) {
  auto& tp = detail::tape_of(p);
  const Tensor<T>& P = p.value();
  detail::check_same_size(P.size(), target.size(), "weighted_bce target");
  detail::check_same_size(P.size(), weight.size(), "weighted_bce weight");
  const T lo = clamp, hi = T(1) - clamp;
  T loss = T(0);
  for (std::size_t i = 0; i < P.size(); ++i) {
    const T w = weight[i];
    if (w == T(0)) continue;
    const T q = std::clamp(P[i], lo, hi);
    loss -= w * (target[i] * std::log(q) + (T(1) - target[i]) * std::log(T(1) - q));
  }
  return tp.record("weighted_bce", {p.id}, Tensor<T>::scalar(loss),
                   [ip = p.id, target, weight, lo, hi](Tape<T>& t, std::size_t self) {
                     const T g = t.upstream(self)[0];
                     const Tensor<T>& P = t.value(ip);
                     Tensor<T>& gp = t.grad_slot(ip);
                     for (std::size_t i = 0; i < P.size(); ++i) {
                       const T w = weight[i];
                       if (w == T(0) || P[i] < lo || P[i] > hi) continue;
                       gp[i] += g * w * (-target[i] / P[i] + (T(1) - target[i]) / (T(1) - P[i]));
                     }
                   });
}

}  // namespace lmvcat::ad
