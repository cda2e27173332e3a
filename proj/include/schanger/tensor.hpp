#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace schanger {

// Allocator that leaves value-initialized elements default-initialized.
// Every op writes its whole output buffer, so the zero pass std::vector
// performs on construction would be pure overhead at tensor sizes.
// Explicit fills (assign with a value, fill constructors) still zero.
template <class T>
struct NoInitAllocator : std::allocator<T> {
  using std::allocator<T>::allocator;
  template <class U>
  struct rebind {
    using other = NoInitAllocator<U>;
  };
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using FloatVec = std::vector<float, NoInitAllocator<float>>;

// Dense 4D layout (batch, channels, height, width), row-major, float32.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  int64_t numel() const {
    return static_cast<int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const = default;
  std::string str() const;
};

class TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Graph node for the define-by-run tape. Children hold shared_ptrs to
// parents only, so releasing the loss root frees the whole step graph.
class TensorNode {
 public:
  Shape shape;
  FloatVec data;
  FloatVec grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (!grad_live || grad.size() != data.size()) {
      grad.assign(data.size(), 0.0f);
      grad_live = true;
    }
  }

  // For closures whose contribution covers every element. Returns true when
  // the buffer is freshly allocated and still uninitialized; the caller must
  // then write all elements instead of accumulating into them. Returns false
  // when a live buffer already holds earlier contributions.
  bool grad_begin_dense() {
    if (grad_live && grad.size() == data.size()) return false;
    grad.resize(data.size());
    grad_live = true;
    return true;
  }

  // True while grad holds valid accumulation state for the current sweep.
  bool grad_live = false;
};

// Value-semantics handle to a shared node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, float value);
  static Tensor from_data(const Shape& s, FloatVec values);
  static Tensor from_data(const Shape& s, const std::vector<float>& values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->shape.numel(); }

  FloatVec& data() { return node_->data; }
  const FloatVec& data() const { return node_->data; }
  FloatVec& grad() { return node_->grad; }
  const FloatVec& grad() const { return node_->grad; }

  float& at(int n, int c, int h, int w);
  float at(int n, int c, int h, int w) const;
  float scalar() const;  // value of a (1,1,1,1) tensor

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  // Reverse-mode sweep from a scalar root.
  void backward();
  void zero_grad();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Thread-local autograd switch; forward passes under NoGradGuard build
// no graph.
struct GradMode {
  static bool enabled();
  static void set(bool value);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }

 private:
  bool prev_;
};

bool all_finite(std::span<const float> values);

}  // namespace schanger
