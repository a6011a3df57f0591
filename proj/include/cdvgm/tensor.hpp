#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cdvgm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` receives d(loss)/d(output) and
// accumulates into the grad buffers of `inputs` that require grad.
struct TapeNode {
  std::string op_id;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
  std::shared_ptr<TapeNode> node;  // null for leaves
};

}  // namespace detail

// Dense row-major float64 array with optional reverse-mode gradient tracking.
//
// Tensor is a cheap handle: copies share storage. Values produced by an
// operation are never modified afterwards; only parameters (leaves) are
// updated in place by optimizers through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  // Zero-filled view when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  // Same values, no history, independent storage.
  Tensor detach() const;
  Tensor clone() const;

  const std::string& op_id() const;
  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables tape recording on the current thread for its lifetime.
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

namespace detail {

// Builds an op result; records a tape node when recording is on and any input
// requires grad.
Tensor make_result(Shape shape, std::vector<double> values, const char* op_id,
                   std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward);

// Grad buffer of `t` (allocated on first use) or nullptr when t needs no grad.
double* grad_target(const Tensor& t);

}  // namespace detail

namespace testing {

// Scales the gradient flowing into every tape node whose op_id matches,
// simulating a broken backward rule. Thread-local; restored on destruction.
class BackwardCorruption {
 public:
  BackwardCorruption(std::string op_id, double factor);
  ~BackwardCorruption();
  BackwardCorruption(const BackwardCorruption&) = delete;
  BackwardCorruption& operator=(const BackwardCorruption&) = delete;

 private:
  std::string previous_op_;
  double previous_factor_;
};

}  // namespace testing

}  // namespace cdvgm
