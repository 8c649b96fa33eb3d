#include "tg/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace tg {

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void TensorImpl::accumulate_grad(std::span<const double> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void TensorImpl::accumulate_grad(std::vector<double>&& g) {
  if (grad.empty()) {
    grad = std::move(g);
    return;
  }
  accumulate_grad(std::span<const double>(g));
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  const Index n = numel_of(shape);
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), fill);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  const Index n = numel_of(shape);
  if (static_cast<Index>(data.size()) != n) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->storage = std::make_shared<std::vector<double>>(std::move(data));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

Index Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

Index Tensor::numel() const { return static_cast<Index>(impl_->storage->size()); }

std::span<const double> Tensor::data() const { return *impl_->storage; }
std::span<double> Tensor::mutable_data() { return *impl_->storage; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->storage)[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  if (idx.size() != shape().size()) throw ShapeError("index rank mismatch");
  Index flat = 0;
  std::size_t a = 0;
  for (Index i : idx) {
    if (i < 0 || i >= shape()[a]) throw ShapeError("index out of range");
    flat = flat * shape()[a] + i;
    ++a;
  }
  return (*impl_->storage)[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->storage->size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->storage = impl_->storage;
  return t;
}

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, std::vector<double>(impl_->storage->begin(), impl_->storage->end()),
                impl_->requires_grad);
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (numel_of(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(new_shape);
  out->storage = impl_->storage;
  if (grad_enabled() && impl_->requires_grad) {
    out->requires_grad = true;
    auto node = std::make_shared<GradNode>();
    node->inputs = {impl_};
    TensorImpl* src = impl_.get();
    node->backward = [src](std::span<const double> g) { src->accumulate_grad(g); };
    out->grad_fn = std::move(node);
  }
  return from_impl(std::move(out));
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() without seed needs a one-element tensor");
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (static_cast<Index>(seed.size()) != numel()) throw ShapeError("backward seed length mismatch");
  if (!impl_->requires_grad) throw ShapeError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  // Owning pointers: releasing a node's grad_fn must not free inputs that
  // are still waiting in the order.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack{{impl_, 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      std::shared_ptr<TensorImpl> child = fn->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      continue;
    }
    order.push_back(std::move(node));
    stack.pop_back();
  }

  impl_->accumulate_grad(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = it->get();
    if (!node->grad_fn) continue;
    if (!node->grad.empty()) node->grad_fn->backward(node->grad);
    // Interior gradients are not retained; the graph is released as we go.
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->grad_fn.reset();
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

namespace {
template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<double> data, const Range& inputs,
                        BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || wants_grad(t);
  if (!any) return out;
  auto node = std::make_shared<GradNode>();
  for (const Tensor& t : inputs) {
    if (wants_grad(t)) node->inputs.push_back(t.impl());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  return make_result_impl(std::move(shape), std::move(data), inputs, std::move(backward));
}

}  // namespace detail
}  // namespace tg
