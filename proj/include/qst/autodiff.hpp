#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace qst::ad {

using Shape = std::vector<Eigen::Index>;

Eigen::Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool visited = false;  // scratch flag for the single-threaded backward walk
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

/// Shared handle to a node of the reverse-mode tape. Operations allocate a
/// node with parent links only when some input requires a gradient (or grad
/// mode is off), so frozen-model inference builds no graph. Gradients
/// accumulate additively; callers zero them between steps. backward() frees
/// the graph it walked.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Eigen::Index dim(std::size_t i) const { return impl_->shape[i]; }
  Eigen::Index ndim() const { return Eigen::Index(impl_->shape.size()); }
  Eigen::Index numel() const { return Eigen::Index(impl_->data.size()); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad();
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }

  /// Value of a single-element tensor.
  double value() const;

  void zero_grad();

  /// Reverse-mode sweep from a single-element root. Populates grad on every
  /// reachable tensor with requires_grad, then drops parent links and
  /// closures so the graph memory is reclaimed.
  void backward();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// While a guard is alive on a thread, operations record no tape even for
/// tracked inputs. Used by evaluation paths.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Shape rules. "Batched" means a leading dimension before the two matrix
// dims; 2D operands broadcast against a 3D partner.
//   matmul: (m,k)x(k,n); (B,m,k)x(k,n); (m,k)x(B,k,n); (B,m,k)x(B,k,n)
//   add: equal shapes, or second operand's shape a suffix of the first's
//        (bias-style broadcast; gradient of the small side sums the rest)
//   sub / mul / div: equal shapes only
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);

Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& a, Eigen::Index start, Eigen::Index len);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over the last dimension; shape (..., n) -> (...).
Tensor sum_last(const Tensor& a);

/// Per-last-dim softmax, max-stabilized. Rows sum to 1 within 1e-12.
Tensor softmax_last(const Tensor& a);

/// Normalizes the last dimension to mean 0 / variance 1 (variance with the
/// 1/n convention, epsilon inside the square root), then applies gain and
/// bias, both shaped (last_dim).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt_elem(const Tensor& a);
/// Elementwise max(a, c); gradient passes only where a > c.
Tensor max_const(const Tensor& a, double c);

/// A tracked tensor with a hierarchical name, unique within a model.
struct Parameter {
  Tensor tensor;
  std::string name;
};

}  // namespace qst::ad
