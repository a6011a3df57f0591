#include "cdvgm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "cdvgm/errors.hpp"

namespace cdvgm {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::string g_corrupt_op;
thread_local double g_corrupt_factor = 1.0;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }
std::vector<double> Tensor::to_vector() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) {
    throw ShapeError("at(): index rank " + std::to_string(index.size()) + " vs shape " + shape_str(s));
  }
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("at(): index out of bounds for shape " + shape_str(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return impl_->data[offset];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return from(shape(), impl_->data, impl_->requires_grad); }

const std::string& Tensor::op_id() const {
  static const std::string leaf = "leaf";
  return impl_->node ? impl_->node->op_id : leaf;
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) throw std::logic_error("backward: loss does not require grad");

  // Iterative post-order DFS; parents are visited in input order so the
  // resulting order (and therefore accumulation order) is deterministic.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node_impl, next] = stack.back();
    const auto* node = node_impl->node.get();
    if (node && next < node->inputs.size()) {
      auto* parent = node->inputs[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      continue;
    }
    order.push_back(node_impl);
    stack.pop_back();
  }

  for (auto* t : order) {
    if (t->node) t->grad.assign(t->data.size(), 0.0);
  }
  if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
  impl_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* t = *it;
    if (!t->node) continue;
    if (!g_corrupt_op.empty() && t->node->op_id == g_corrupt_op) {
      std::vector<double> scaled = t->grad;
      for (auto& g : scaled) g *= g_corrupt_factor;
      t->node->backward(scaled);
    } else {
      t->node->backward(t->grad);
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

Tensor make_result(Shape shape, std::vector<double> values, const char* op_id, std::vector<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<TapeNode>();
  node->op_id = op_id;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl_ptr());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

double* grad_target(const Tensor& t) {
  auto* impl = t.impl();
  if (!impl->requires_grad) return nullptr;
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad.data();
}

}  // namespace detail

namespace testing {

BackwardCorruption::BackwardCorruption(std::string op_id, double factor)
    : previous_op_(g_corrupt_op), previous_factor_(g_corrupt_factor) {
  g_corrupt_op = std::move(op_id);
  g_corrupt_factor = factor;
}

BackwardCorruption::~BackwardCorruption() {
  g_corrupt_op = previous_op_;
  g_corrupt_factor = previous_factor_;
}

}  // namespace testing

}  // namespace cdvgm
