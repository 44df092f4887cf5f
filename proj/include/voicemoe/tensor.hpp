#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "voicemoe/errors.hpp"

namespace voicemoe::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major 64-bit float tensor participating in reverse-mode
// differentiation. Copies of a Tensor share their storage (shallow handle);
// `detach` makes an independent, gradient-free copy of the values.
class Tensor {
 public:
  // Internal storage, exposed for the Tape ops in tensor.cpp. Grad buffers
  // are allocated on first accumulation and always match the data shape.
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    double* grad_buf() {
      if (grad.empty()) grad.assign(data.size(), 0.0);
      return grad.data();
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  std::int64_t dim(std::size_t axis) const;

  std::span<const double> data() const;
  std::span<double> mutable_data();

  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const;
  // Leaf-only switch (used for frozen snapshot copies of a model).
  void set_requires_grad(bool value);
  // Accumulated gradient; allocates a zero buffer on first access.
  // Throws TapeError for tensors that do not require gradient.
  std::span<const double> grad() const;
  void zero_grad();

  // Value copy with requires_grad = false; never accumulates gradient.
  Tensor detach() const;

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& ref() const;

  std::shared_ptr<Impl> impl_;
};

// Records every executed differentiable operation in order. backward()
// replays the records exactly once in reverse; a second backward without a
// fresh forward pass is an error. A tape constructed with grad_enabled =
// false records nothing and all ops run value-only (used for the old-policy
// snapshot forward and for evaluation).
//
// A tape and the live tensors it connects stay confined to one thread
// between forward and backward; finished (detached or leaf) tensors can move
// across threads freely.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // -- matrix products ------------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k]x[k,n]
  Tensor bmm_nn(const Tensor& a, const Tensor& b);             // [B,m,k]x[B,k,n]
  Tensor bmm_nt(const Tensor& a, const Tensor& b);             // [B,m,k]x[B,n,k]^T

  // -- elementwise (equal shapes; scalars via *_scalar) ----------------
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, double s);
  Tensor mul_scalar(const Tensor& a, double s);
  Tensor relu(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  // Gradient is 1 strictly inside (lo, hi) and 0 elsewhere.
  Tensor clip(const Tensor& a, double lo, double hi);
  // Elementwise min; ties route the gradient to the first argument.
  Tensor minimum(const Tensor& a, const Tensor& b);

  // -- reductions ------------------------------------------------------
  Tensor mean(const Tensor& a);                                // -> scalar
  Tensor sum(const Tensor& a);                                 // -> scalar
  Tensor mean_axis1(const Tensor& a);                          // [B,T,D] -> [B,D]

  // -- row-wise transforms over the last axis --------------------------
  Tensor softmax(const Tensor& a);
  Tensor log_softmax(const Tensor& a);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps);

  // -- structure -------------------------------------------------------
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor split_heads(const Tensor& a, std::int64_t batch, std::int64_t tokens,
                     std::int64_t heads);                      // [B*T,d] -> [B*H,T,d/H]
  Tensor merge_heads(const Tensor& a, std::int64_t batch, std::int64_t tokens,
                     std::int64_t heads);                      // inverse of split_heads
  Tensor add_rowvec(const Tensor& x, const Tensor& v);         // [N,d] + [d]
  Tensor select_column(const Tensor& x, std::int64_t col);     // [N,C] -> [N]
  Tensor scale_rows(const Tensor& x, const Tensor& s);         // [N,d] * [N] per row
  // token i of sample b: x[b,i] * scale[i,:] + shift[i,:] + pos[i,:]
  Tensor embed_tokens(const Tensor& x, const Tensor& scale, const Tensor& shift,
                      const Tensor& pos);                      // [B,F] -> [B,F,d]
  // Per-row entry selection; backward scatters into the picked entries only.
  Tensor gather_log_prob(const Tensor& rows, const std::vector<std::int64_t>& actions,
                         const Shape& actions_shape);

  // Reverse sweep from a scalar root. No-op when the root does not require
  // gradient; TapeError on a second call or a non-scalar root.
  void backward(const Tensor& root);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  bool track(std::initializer_list<const Tensor*> inputs) const;
  void record(std::function<void()> fn);
  Tensor make_output(Shape shape, bool needs_grad) const;

  std::vector<std::function<void()>> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

}  // namespace voicemoe::ad
