#include "schanger/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "schanger/errors.hpp"

namespace schanger {

std::string Shape::str() const {
  std::ostringstream out;
  out << "(" << n << "," << c << "," << h << "," << w << ")";
  return out.str();
}

namespace {

NodePtr make_node(const Shape& s) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
    throw ShapeError("tensor dimensions must be positive, got " + s.str());
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = s;
  return node;
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(const Shape& s) {
  auto node = make_node(s);
  node->data.assign(static_cast<size_t>(s.numel()), 0.0f);
  return Tensor(node);
}

Tensor Tensor::full(const Shape& s, float value) {
  auto node = make_node(s);
  node->data.assign(static_cast<size_t>(s.numel()), value);
  return Tensor(node);
}

Tensor Tensor::from_data(const Shape& s, FloatVec values) {
  if (static_cast<int64_t>(values.size()) != s.numel()) {
    throw ShapeError("from_data: " + std::to_string(values.size()) +
                     " values for shape " + s.str());
  }
  auto node = make_node(s);
  node->data = std::move(values);
  return Tensor(node);
}

Tensor Tensor::from_data(const Shape& s, const std::vector<float>& values) {
  return from_data(s, FloatVec(values.begin(), values.end()));
}

float& Tensor::at(int n, int c, int h, int w) {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

float Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = node_->shape;
  return node_->data[((static_cast<size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

float Tensor::scalar() const {
  if (numel() != 1) {
    throw ShapeError("scalar() on tensor of shape " + shape().str());
  }
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
    node_->grad_live = true;
  }
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar root, got " +
                     shape().str());
  }
  if (!node_->requires_grad) return;

  // Children-first DFS post-order; reversed, every node runs before the
  // parents it feeds gradient into.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [cur, idx] = stack.back();
    if (idx < cur->parents.size()) {
      TensorNode* parent = cur->parents[idx++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool value) { g_grad_enabled = value; }

bool all_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace schanger
