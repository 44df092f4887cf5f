#include "voicemoe/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "voicemoe/kernels.hpp"

namespace voicemoe::ad {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (const auto d : shape) {
    if (d < 1) throw ShapeError("invalid dimension in shape " + shape_str(shape));
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void check_finite(const char* op, const Tensor& t) {
  for (const double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// rows x cols view of the last axis.
std::pair<std::int64_t, std::int64_t> rows_cols(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.empty()) throw ShapeError("expected tensor with at least 1 axis");
  const std::int64_t cols = s.back();
  return {t.numel() / cols, cols};
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = value;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("from_data: " + std::to_string(data.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor::Impl& Tensor::ref() const {
  if (!impl_) throw TapeError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return ref().shape; }

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(ref().data.size()); }

std::int64_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for " + shape_str(s));
  return s[axis];
}

std::span<const double> Tensor::data() const { return ref().data; }

std::span<double> Tensor::mutable_data() { return ref().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return ref().data[0];
}

bool Tensor::requires_grad() const { return ref().requires_grad; }

void Tensor::set_requires_grad(bool value) { ref().requires_grad = value; }

std::span<const double> Tensor::grad() const {
  Impl& impl = ref();
  if (!impl.requires_grad) throw TapeError("grad() on a tensor without requires_grad");
  impl.grad_buf();
  return impl.grad;
}

void Tensor::zero_grad() {
  Impl& impl = ref();
  if (!impl.grad.empty()) std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const Impl& impl = ref();
  return from_data(impl.shape, impl.data, false);
}

// ---------------------------------------------------------------------------
// Tape plumbing

bool Tape::track(std::initializer_list<const Tensor*> inputs) const {
  if (!grad_enabled_) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(std::function<void()> fn) {
  if (backward_done_) throw TapeError("recording on a tape after backward");
  nodes_.push_back(std::move(fn));
}

Tensor Tape::make_output(Shape shape, bool needs_grad) const {
  return Tensor::zeros(std::move(shape), needs_grad);
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw TapeError("backward root must be scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;  // graph has no differentiable leaves
  if (backward_done_) throw TapeError("backward called twice on one tape");
  backward_done_ = true;
  root.impl()->grad_buf()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

namespace {

using ImplPtr = std::shared_ptr<Tensor::Impl>;

// A node propagates nothing when its output never received gradient
// (branch not connected to the backward root).
bool no_out_grad(const ImplPtr& out) { return out->grad.empty(); }

}  // namespace

// ---------------------------------------------------------------------------
// Matrix products

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool ng = track({&a, &b});
  Tensor out = make_output({m, n}, ng);
  kernels::matmul_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (ng) {
    record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
      if (no_out_grad(oi)) return;
      if (ai->requires_grad)
        kernels::matmul_nt_acc(oi->grad.data(), bi->data.data(), ai->grad_buf(), m, n, k);
      if (bi->requires_grad)
        kernels::matmul_tn_acc(ai->data.data(), oi->grad.data(), bi->grad_buf(), m, k, n);
    });
  }
  return out;
}

Tensor Tape::bmm_nn(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm_nn: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const bool ng = track({&a, &b});
  Tensor out = make_output({batch, m, n}, ng);
  kernels::bmm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), batch, m, k, n);
  if (ng) {
    record([ai = a.impl(), bi = b.impl(), oi = out.impl(), batch, m, k, n] {
      if (no_out_grad(oi)) return;
      // dA[b] += dC[b]·B[b]ᵀ; dB[b] += A[b]ᵀ·dC[b]
      if (ai->requires_grad)
        kernels::bmm_nt_acc(oi->grad.data(), bi->data.data(), ai->grad_buf(), batch, m, n, k);
      if (bi->requires_grad)
        kernels::bmm_tn_acc(ai->data.data(), oi->grad.data(), bi->grad_buf(), batch, m, k, n);
    });
  }
  return out;
}

Tensor Tape::bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2)) {
    throw ShapeError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  const bool ng = track({&a, &b});
  Tensor out = make_output({batch, m, n}, ng);
  kernels::bmm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), batch, m, k, n);
  if (ng) {
    record([ai = a.impl(), bi = b.impl(), oi = out.impl(), batch, m, k, n] {
      if (no_out_grad(oi)) return;
      // C[b] = A[b]·B[b]ᵀ: dA[b] += dC[b]·B[b]; dB[b] += dC[b]ᵀ·A[b]
      if (ai->requires_grad)
        kernels::bmm_nn_acc(oi->grad.data(), bi->data.data(), ai->grad_buf(), batch, m, n, k);
      if (bi->requires_grad)
        kernels::bmm_tn_acc(oi->grad.data(), ai->data.data(), bi->grad_buf(), batch, m, n, k);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(Tape& tape, const char* name, const Tensor& a, const Tensor& b,
                 bool needs_grad, Fwd&& fwd, Bwd&& make_backward) {
  check_same_shape(name, a, b);
  (void)tape;
  Tensor out = Tensor::zeros(a.shape(), needs_grad);
  const std::size_t n = static_cast<std::size_t>(a.numel());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (needs_grad) make_backward(out);
  return out;
}

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const bool ng = track({&a, &b});
  return binary_op(*this, "add", a, b, ng,
                   [](double x, double y) { return x + y; },
                   [&](Tensor& out) {
                     record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                       if (no_out_grad(oi)) return;
                       const std::size_t n = oi->grad.size();
                       if (ai->requires_grad) {
                         double* g = ai->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i];
                       }
                       if (bi->requires_grad) {
                         double* g = bi->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i];
                       }
                     });
                   });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  const bool ng = track({&a, &b});
  return binary_op(*this, "sub", a, b, ng,
                   [](double x, double y) { return x - y; },
                   [&](Tensor& out) {
                     record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                       if (no_out_grad(oi)) return;
                       const std::size_t n = oi->grad.size();
                       if (ai->requires_grad) {
                         double* g = ai->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i];
                       }
                       if (bi->requires_grad) {
                         double* g = bi->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] -= oi->grad[i];
                       }
                     });
                   });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const bool ng = track({&a, &b});
  return binary_op(*this, "mul", a, b, ng,
                   [](double x, double y) { return x * y; },
                   [&](Tensor& out) {
                     record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                       if (no_out_grad(oi)) return;
                       const std::size_t n = oi->grad.size();
                       if (ai->requires_grad) {
                         double* g = ai->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i] * bi->data[i];
                       }
                       if (bi->requires_grad) {
                         double* g = bi->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i] * ai->data[i];
                       }
                     });
                   });
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  for (const double v : b.data()) {
    if (v == 0.0) throw NumericError("div: zero divisor");
  }
  const bool ng = track({&a, &b});
  return binary_op(*this, "div", a, b, ng,
                   [](double x, double y) { return x / y; },
                   [&](Tensor& out) {
                     record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                       if (no_out_grad(oi)) return;
                       const std::size_t n = oi->grad.size();
                       if (ai->requires_grad) {
                         double* g = ai->grad_buf();
                         for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i] / bi->data[i];
                       }
                       if (bi->requires_grad) {
                         double* g = bi->grad_buf();
                         for (std::size_t i = 0; i < n; ++i)
                           g[i] -= oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
                       }
                     });
                   });
}

namespace {

template <typename Fwd>
Tensor unary_op(const Tensor& a, bool needs_grad, Fwd&& fwd) {
  Tensor out = Tensor::zeros(a.shape(), needs_grad);
  const std::size_t n = static_cast<std::size_t>(a.numel());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  return out;
}

}  // namespace

Tensor Tape::add_scalar(const Tensor& a, double s) {
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [s](double x) { return x + s; });
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::mul_scalar(const Tensor& a, double s) {
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [s](double x) { return x * s; });
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), s] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += s * oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [](double x) { return x > 0.0 ? x : 0.0; });
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        g[i] += ai->data[i] > 0.0 ? oi->grad[i] : 0.0;
    });
  }
  return out;
}

Tensor Tape::exp(const Tensor& a) {
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [](double x) { return std::exp(x); });
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i] * oi->data[i];
    });
  }
  return out;
}

Tensor Tape::log(const Tensor& a) {
  for (const double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input");
  }
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [](double x) { return std::log(x); });
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i] / ai->data[i];
    });
  }
  return out;
}

Tensor Tape::clip(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clip: lo > hi");
  const bool ng = track({&a});
  Tensor out = unary_op(a, ng, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); });
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), lo, hi] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        const double x = ai->data[i];
        if (x > lo && x < hi) g[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::minimum(const Tensor& a, const Tensor& b) {
  const bool ng = track({&a, &b});
  return binary_op(*this, "minimum", a, b, ng,
                   [](double x, double y) { return x <= y ? x : y; },
                   [&](Tensor& out) {
                     record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                       if (no_out_grad(oi)) return;
                       const std::size_t n = oi->grad.size();
                       for (std::size_t i = 0; i < n; ++i) {
                         if (ai->data[i] <= bi->data[i]) {
                           if (ai->requires_grad) ai->grad_buf()[i] += oi->grad[i];
                         } else if (bi->requires_grad) {
                           bi->grad_buf()[i] += oi->grad[i];
                         }
                       }
                     });
                   });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Tape::sum(const Tensor& a) {
  const bool ng = track({&a});
  double s = 0.0;
  for (const double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s, ng);
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      const double d = oi->grad[0];
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += d;
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& a) {
  const bool ng = track({&a});
  double s = 0.0;
  for (const double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(s * inv, ng);
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), inv] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      const double d = oi->grad[0] * inv;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += d;
    });
  }
  return out;
}

Tensor Tape::mean_axis1(const Tensor& a) {
  if (a.shape().size() != 3) {
    throw ShapeError("mean_axis1 expects a rank-3 tensor, got " + shape_str(a.shape()));
  }
  const std::int64_t b = a.dim(0), t = a.dim(1), d = a.dim(2);
  const bool ng = track({&a});
  Tensor out = make_output({b, d}, ng);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const double inv = 1.0 / static_cast<double>(t);
  for (std::int64_t i = 0; i < b; ++i) {
    double* oi = po + i * d;
    for (std::int64_t r = 0; r < t; ++r) {
      const double* row = pa + (i * t + r) * d;
      for (std::int64_t j = 0; j < d; ++j) oi[j] += row[j];
    }
    for (std::int64_t j = 0; j < d; ++j) oi[j] *= inv;
  }
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), b, t, d, inv] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::int64_t i = 0; i < b; ++i) {
        const double* go = oi->grad.data() + i * d;
        for (std::int64_t r = 0; r < t; ++r) {
          double* gr = g + (i * t + r) * d;
          for (std::int64_t j = 0; j < d; ++j) gr[j] += go[j] * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise transforms

Tensor Tape::softmax(const Tensor& a) {
  check_finite("softmax", a);
  const auto [rows, cols] = rows_cols(a);
  const bool ng = track({&a});
  Tensor out = Tensor::zeros(a.shape(), ng);
  kernels::softmax_rows(a.data().data(), out.mutable_data().data(), rows, cols);
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), rows = rows, cols = cols] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      kernels::softmax_rows_backward_acc(oi->data.data(), oi->grad.data(), ai->grad_buf(),
                                         rows, cols);
    });
  }
  return out;
}

Tensor Tape::log_softmax(const Tensor& a) {
  check_finite("log_softmax", a);
  const auto [rows, cols] = rows_cols(a);
  const bool ng = track({&a});
  Tensor out = Tensor::zeros(a.shape(), ng);
  kernels::log_softmax_rows(a.data().data(), out.mutable_data().data(), rows, cols);
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), rows = rows, cols = cols] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      kernels::log_softmax_rows_backward_acc(oi->data.data(), oi->grad.data(), ai->grad_buf(),
                                             rows, cols);
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto [rows, cols] = rows_cols(x);
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(cols) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const bool ng = track({&x, &gain, &bias});
  Tensor out = Tensor::zeros(x.shape(), ng);
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  kernels::layer_norm_rows(x.data().data(), gain.data().data(), bias.data().data(), eps,
                           out.mutable_data().data(), mean->data(), rstd->data(), rows, cols);
  if (ng) {
    record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), mean, rstd,
            rows = rows, cols = cols] {
      if (no_out_grad(oi)) return;
      kernels::layer_norm_rows_backward_acc(
          xi->data.data(), gi->data.data(), mean->data(), rstd->data(), oi->grad.data(),
          xi->requires_grad ? xi->grad_buf() : nullptr,
          gi->requires_grad ? gi->grad_buf() : nullptr,
          bi->requires_grad ? bi->grad_buf() : nullptr, rows, cols);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  const bool ng = track({&a});
  Tensor out = Tensor::from_data(std::move(shape),
                                 std::vector<double>(a.data().begin(), a.data().end()), ng);
  if (ng) {
    record([ai = a.impl(), oi = out.impl()] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::split_heads(const Tensor& a, std::int64_t batch, std::int64_t tokens,
                         std::int64_t heads) {
  if (a.shape().size() != 2 || a.dim(0) != batch * tokens || a.dim(1) % heads != 0) {
    throw ShapeError("split_heads: bad input " + shape_str(a.shape()));
  }
  const std::int64_t d = a.dim(1), hd = d / heads;
  const bool ng = track({&a});
  Tensor out = make_output({batch * heads, tokens, hd}, ng);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < tokens; ++t) {
        const double* src = pa + (b * tokens + t) * d + h * hd;
        double* dst = po + ((b * heads + h) * tokens + t) * hd;
        for (std::int64_t c = 0; c < hd; ++c) dst[c] = src[c];
      }
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), batch, tokens, heads, d, hd] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t t = 0; t < tokens; ++t) {
            double* dst = g + (b * tokens + t) * d + h * hd;
            const double* src = oi->grad.data() + ((b * heads + h) * tokens + t) * hd;
            for (std::int64_t c = 0; c < hd; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

Tensor Tape::merge_heads(const Tensor& a, std::int64_t batch, std::int64_t tokens,
                         std::int64_t heads) {
  if (a.shape().size() != 3 || a.dim(0) != batch * heads || a.dim(1) != tokens) {
    throw ShapeError("merge_heads: bad input " + shape_str(a.shape()));
  }
  const std::int64_t hd = a.dim(2), d = hd * heads;
  const bool ng = track({&a});
  Tensor out = make_output({batch * tokens, d}, ng);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < tokens; ++t) {
        const double* src = pa + ((b * heads + h) * tokens + t) * hd;
        double* dst = po + (b * tokens + t) * d + h * hd;
        for (std::int64_t c = 0; c < hd; ++c) dst[c] = src[c];
      }
  if (ng) {
    record([ai = a.impl(), oi = out.impl(), batch, tokens, heads, d, hd] {
      if (no_out_grad(oi) || !ai->requires_grad) return;
      double* g = ai->grad_buf();
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t t = 0; t < tokens; ++t) {
            double* dst = g + ((b * heads + h) * tokens + t) * hd;
            const double* src = oi->grad.data() + (b * tokens + t) * d + h * hd;
            for (std::int64_t c = 0; c < hd; ++c) dst[c] += src[c];
          }
    });
  }
  return out;
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& v) {
  const auto [rows, cols] = rows_cols(x);
  if (v.shape() != Shape{cols}) {
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  }
  const bool ng = track({&x, &v});
  Tensor out = Tensor::zeros(x.shape(), ng);
  kernels::add_bias_rows(x.data().data(), v.data().data(), out.mutable_data().data(), rows, cols);
  if (ng) {
    record([xi = x.impl(), vi = v.impl(), oi = out.impl(), rows = rows, cols = cols] {
      if (no_out_grad(oi)) return;
      if (xi->requires_grad) {
        double* g = xi->grad_buf();
        for (std::size_t i = 0; i < oi->grad.size(); ++i) g[i] += oi->grad[i];
      }
      if (vi->requires_grad)
        kernels::bias_backward_acc(oi->grad.data(), vi->grad_buf(), rows, cols);
    });
  }
  return out;
}

Tensor Tape::select_column(const Tensor& x, std::int64_t col) {
  if (x.shape().size() != 2) throw ShapeError("select_column expects a matrix");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (col < 0 || col >= c) throw IndexError("select_column: column out of range");
  const bool ng = track({&x});
  Tensor out = make_output({n}, ng);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i * c + col];
  if (ng) {
    record([xi = x.impl(), oi = out.impl(), n, c, col] {
      if (no_out_grad(oi) || !xi->requires_grad) return;
      double* g = xi->grad_buf();
      for (std::int64_t i = 0; i < n; ++i) g[i * c + col] += oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::scale_rows(const Tensor& x, const Tensor& s) {
  const auto [rows, cols] = rows_cols(x);
  if (s.shape() != Shape{rows}) {
    throw ShapeError("scale_rows: scale " + shape_str(s.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const bool ng = track({&x, &s});
  Tensor out = Tensor::zeros(x.shape(), ng);
  const double* px = x.data().data();
  const double* ps = s.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) po[i * cols + j] = px[i * cols + j] * ps[i];
  if (ng) {
    record([xi = x.impl(), si = s.impl(), oi = out.impl(), rows = rows, cols = cols] {
      if (no_out_grad(oi)) return;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* go = oi->grad.data() + i * cols;
        if (xi->requires_grad) {
          double* g = xi->grad_buf() + i * cols;
          for (std::int64_t j = 0; j < cols; ++j) g[j] += go[j] * si->data[i];
        }
        if (si->requires_grad) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < cols; ++j) acc += go[j] * xi->data[i * cols + j];
          si->grad_buf()[i] += acc;
        }
      }
    });
  }
  return out;
}

Tensor Tape::embed_tokens(const Tensor& x, const Tensor& scale, const Tensor& shift,
                          const Tensor& pos) {
  if (x.shape().size() != 2) throw ShapeError("embed_tokens expects x as [batch, features]");
  const std::int64_t b = x.dim(0), f = x.dim(1);
  if (scale.shape().size() != 2 || scale.dim(0) != f) {
    throw ShapeError("embed_tokens: scale " + shape_str(scale.shape()) + " does not match " +
                     std::to_string(f) + " features");
  }
  const std::int64_t d = scale.dim(1);
  check_same_shape("embed_tokens shift", scale, shift);
  check_same_shape("embed_tokens pos", scale, pos);
  const bool ng = track({&x, &scale, &shift, &pos});
  Tensor out = make_output({b, f, d}, ng);
  const double* px = x.data().data();
  const double* pscale = scale.data().data();
  const double* pshift = shift.data().data();
  const double* ppos = pos.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t t = 0; t < f; ++t) {
      const double xv = px[i * f + t];
      double* row = po + (i * f + t) * d;
      const double* sc = pscale + t * d;
      const double* sh = pshift + t * d;
      const double* pp = ppos + t * d;
      for (std::int64_t j = 0; j < d; ++j) row[j] = xv * sc[j] + sh[j] + pp[j];
    }
  if (ng) {
    record([xi = x.impl(), sci = scale.impl(), shi = shift.impl(), poi = pos.impl(),
            oi = out.impl(), b, f, d] {
      if (no_out_grad(oi)) return;
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t t = 0; t < f; ++t) {
          const double* go = oi->grad.data() + (i * f + t) * d;
          const double xv = xi->data[i * f + t];
          if (sci->requires_grad) {
            double* g = sci->grad_buf() + t * d;
            for (std::int64_t j = 0; j < d; ++j) g[j] += go[j] * xv;
          }
          if (shi->requires_grad) {
            double* g = shi->grad_buf() + t * d;
            for (std::int64_t j = 0; j < d; ++j) g[j] += go[j];
          }
          if (poi->requires_grad) {
            double* g = poi->grad_buf() + t * d;
            for (std::int64_t j = 0; j < d; ++j) g[j] += go[j];
          }
          if (xi->requires_grad) {
            const double* sc = sci->data.data() + t * d;
            double acc = 0.0;
            for (std::int64_t j = 0; j < d; ++j) acc += go[j] * sc[j];
            xi->grad_buf()[i * f + t] += acc;
          }
        }
    });
  }
  return out;
}

Tensor Tape::gather_log_prob(const Tensor& rows, const std::vector<std::int64_t>& actions,
                             const Shape& actions_shape) {
  if (rows.shape().size() != 2) throw ShapeError("gather_log_prob expects [batch, classes]");
  const std::int64_t n = rows.dim(0), classes = rows.dim(1);
  if (actions_shape.empty() || actions_shape[0] != n ||
      shape_numel(actions_shape) != static_cast<std::int64_t>(actions.size())) {
    throw ShapeError("gather_log_prob: actions shape " + shape_str(actions_shape) +
                     " does not match batch " + std::to_string(n));
  }
  const std::int64_t per_row = shape_numel(actions_shape) / n;
  for (const auto a : actions) {
    if (a < 0 || a >= classes) {
      throw IndexError("gather_log_prob: action " + std::to_string(a) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  const bool ng = track({&rows});
  Tensor out = make_output(actions_shape, ng);
  const double* pr = rows.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < per_row; ++j)
      po[i * per_row + j] = pr[i * classes + actions[i * per_row + j]];
  if (ng) {
    record([ri = rows.impl(), oi = out.impl(), actions, n, per_row, classes] {
      if (no_out_grad(oi) || !ri->requires_grad) return;
      double* g = ri->grad_buf();
      // Duplicate selections within a row accumulate into the same entry.
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < per_row; ++j)
          g[i * classes + actions[i * per_row + j]] += oi->grad[i * per_row + j];
    });
  }
  return out;
}

}  // namespace voicemoe::ad
