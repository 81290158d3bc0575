#include "transip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "transip/ops.hpp"

namespace transip {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->storage->size() : 0; }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::out_of_range("axis out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return {impl_->storage->data(), impl_->storage->size()};
}

std::span<double> Tensor::mutable_values() {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  if (impl_->grad_fn) throw std::logic_error("in-place write to a non-leaf tensor");
  return {impl_->storage->data(), impl_->storage->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

std::vector<double> Tensor::to_vector() const {
  auto v = values();
  return {v.begin(), v.end()};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool on) {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  if (impl_->grad_fn && !on) throw std::logic_error("cannot clear requires_grad on a non-leaf");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

const std::shared_ptr<Node>& Tensor::grad_fn() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return impl_->grad_fn;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = shape();
  t.impl_->storage = impl_->storage;
  return t;
}

Tensor Tensor::clone() const { return Tensor(shape(), to_vector()); }

namespace {

bool needs_node(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void attach(const std::shared_ptr<TensorImpl>& impl, std::string_view name,
            std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->name = name;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->output = impl;
  impl->requires_grad = true;
  impl->grad_fn = std::move(node);
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> values, std::string_view name,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  if (needs_node(inputs)) attach(out.impl_, name, std::move(inputs), std::move(backward));
  return out;
}

Tensor make_view(const Tensor& source, Shape shape, std::string_view name, BackwardFn backward) {
  if (shape_numel(shape) != source.numel()) {
    throw std::invalid_argument("cannot view " + shape_str(source.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out;
  out.impl_ = std::make_shared<TensorImpl>();
  out.impl_->shape = std::move(shape);
  out.impl_->storage = source.impl()->storage;
  if (needs_node({source})) attach(out.impl_, name, {source}, std::move(backward));
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) {
  g_grad_enabled = enabled;
}
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

void check_finite(const Tensor& t, std::string_view where) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("non-finite value detected in " + std::string(where));
    }
  }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
  if (output.numel() != 1) {
    throw std::invalid_argument("grad() needs a scalar output, got shape " +
                                shape_str(output.shape()));
  }
  std::unordered_set<const TensorImpl*> targets;
  for (const auto& w : wrt) targets.insert(w.id());

  // Post-order DFS over nodes; `reaches` marks nodes with a path to a target.
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> reaches;
  if (output.grad_fn()) {
    struct Frame {
      Node* node;
      std::size_t next;
    };
    std::vector<Frame> stack{{output.grad_fn().get(), 0}};
    reaches.emplace(output.grad_fn().get(), false);
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.next < top.node->inputs.size()) {
        const Tensor& in = top.node->inputs[top.next++];
        if (!in.requires_grad()) continue;
        if (targets.count(in.id())) reaches[top.node] = true;
        Node* child = in.grad_fn().get();
        if (!child) continue;
        auto [it, inserted] = reaches.emplace(child, false);
        if (inserted) {
          stack.push_back({child, 0});
        } else if (it->second) {
          reaches[top.node] = true;
        }
      } else {
        Node* done = top.node;
        order.push_back(done);
        stack.pop_back();
        if (!stack.empty() && reaches[done]) reaches[stack.back().node] = true;
      }
    }
  }

  std::unordered_map<const TensorImpl*, Tensor> grads;
  std::vector<Tensor> result(wrt.size());
  {
    GradModeGuard mode(create_graph);
    grads[output.id()] = Tensor::full(output.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (!reaches[node]) continue;
      auto out = node->output.lock();
      if (!out) continue;
      auto found = grads.find(out.get());
      if (found == grads.end()) continue;
      Tensor g = found->second;
      if (!targets.count(out.get())) grads.erase(found);

      std::vector<bool> needed(node->inputs.size(), false);
      bool any = false;
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Tensor& in = node->inputs[i];
        if (!in.requires_grad()) continue;
        const bool want = targets.count(in.id()) || (in.grad_fn() && reaches[in.grad_fn().get()]);
        needed[i] = want;
        any = any || want;
      }
      if (!any) continue;
      auto input_grads = node->backward(g, needed);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        if (!needed[i] || !input_grads[i].defined()) continue;
        const TensorImpl* key = node->inputs[i].id();
        auto slot = grads.find(key);
        if (slot == grads.end()) {
          grads.emplace(key, std::move(input_grads[i]));
        } else {
          slot->second = ops::add(slot->second, input_grads[i]);
        }
      }
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto it = grads.find(wrt[i].id());
    result[i] = it != grads.end() ? it->second : Tensor::zeros(wrt[i].shape());
    check_finite(result[i], "gradient");
  }
  return result;
}

}  // namespace transip
