#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace transip {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct Node;

// Gradient functions receive the gradient of the node output and a flag per
// input telling whether that input's gradient is wanted. Returned vector has
// one entry per input; entries for unneeded inputs may be left undefined.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needed)>;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

struct Node {
  std::string_view name;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  std::weak_ptr<TensorImpl> output;
};

/// Dense row-major float64 tensor with an optional link into the compute graph.
///
/// Tensors are cheap handles: copies share storage and graph position. Results
/// of operations on inputs that require gradients carry a `grad_fn` node which
/// records how to propagate gradients back to those inputs. Backward rules are
/// themselves written with tensor operations, so a gradient computed with
/// `create_graph` can be differentiated again.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Size along `axis`; negative values count from the back.
  std::size_t dim(int axis) const;

  std::span<const double> values() const;
  /// Write access to the buffer. Only valid on tensors without a grad_fn.
  std::span<double> mutable_values();
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool on = true);
  bool is_leaf() const;
  const std::shared_ptr<Node>& grad_fn() const;

  /// Same storage, no graph history.
  Tensor detach() const;
  /// Deep copy without graph history.
  Tensor clone() const;

  TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::string_view, std::vector<Tensor>,
                            BackwardFn);
  friend Tensor make_view(const Tensor&, Shape, std::string_view, BackwardFn);
  std::shared_ptr<TensorImpl> impl_;
};

/// Builds an op result; a graph node is attached only when gradient recording
/// is on and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::string_view name,
                   std::vector<Tensor> inputs, BackwardFn backward);
/// Like make_result but shares the storage of `source` (reshape).
Tensor make_view(const Tensor& source, Shape shape, std::string_view name, BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
///
/// Inputs that do not influence `output` receive zero tensors. With
/// `create_graph`, the backward pass is recorded so the returned gradients are
/// differentiable. Throws std::invalid_argument for non-scalar output and
/// std::runtime_error when a gradient contains NaN or Inf.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

/// Throws std::runtime_error naming `where` if any entry is NaN or Inf.
void check_finite(const Tensor& t, std::string_view where);

}  // namespace transip
