#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace reltr {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  // Lazily allocates the gradient buffer.
  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage (like a handle). Operations never mutate their
/// inputs; they return fresh tensors and, when a Tape is recording and some
/// input requires a gradient, register a backward rule on that tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return impl_->has_grad(); }
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad();

  /// Value copy without gradient tracking.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed primitive operations.
///
/// Operations append an entry while a Recording guard for this tape is
/// alive on the current thread. backward() replays the entries in reverse so
/// every use of an input adds its contribution exactly once.
class Tape {
 public:
  using Rule = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  class Recording {
   public:
    explicit Recording(Tape& tape);
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;
    ~Recording();

   private:
    Tape* previous_;
  };

  Recording record() { return Recording(*this); }

  /// Seeds d(root)/d(root) = 1 and propagates to every recorded input.
  void backward(const Tensor& root);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  static Tape* active();
  void push(std::shared_ptr<detail::TensorImpl> output, Rule rule);

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    Rule rule;
  };
  std::vector<Entry> entries_;
};

/// Test hook: deliberately corrupts one backward rule so gradient checks can
/// prove they detect errors.
enum class BackwardFault { none, softmax };
void set_backward_fault(BackwardFault fault);
BackwardFault backward_fault();

// ---- primitive operations ------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
/// x + v broadcast along the last axis; v has length equal to the last extent.
Tensor add_row(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, double factor);
Tensor shift(const Tensor& x, double offset);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Right operand of matmul_sparse, stored by column: taps[j] lists the
/// (row, value) nonzeros of column j.
struct SparseColumns {
  std::size_t rows = 0;
  std::vector<std::vector<std::pair<std::size_t, double>>> taps;

  static SparseColumns from_dense(const Tensor& m);
  std::size_t cols() const { return taps.size(); }
};

/// a * M for a dense [m, k] and a constant sparse [k, n].
Tensor matmul_sparse(const Tensor& a, std::shared_ptr<const SparseColumns> m);

/// x * W + b with W of shape [in, out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]].
/// Empty weights means unit weight.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> weights = {});
/// Single 1-D logit vector against one class index.
Tensor cross_entropy(const Tensor& logits, std::size_t target);

/// 2-D convolution. x: [N, C, H, W], weight: [O, C, k, k], bias: [O].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Elements whose step was shrunk because the stencil straddled a kink.
  std::size_t refined = 0;
  /// (param, element) pairs where f was non-finite under perturbation.
  std::vector<std::pair<std::size_t, std::size_t>> non_finite;
};

/// Compares reverse-mode gradients of f against central differences.
/// Error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Where the one-sided slopes disagree the step is cut by 10, at most twice.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           double eps = 1e-5);

}  // namespace reltr
