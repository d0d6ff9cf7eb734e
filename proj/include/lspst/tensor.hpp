#ifndef LSPST_TENSOR_HPP
#define LSPST_TENSOR_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lspst/rng.hpp"

namespace lspst {

// Dense rank-4 layout: (batch n, channels c, height h, width w), row-major.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const { return int64_t(n) * c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

namespace detail {

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t id;

  static uint64_t next_id() {
    static std::atomic<uint64_t> ctr{1};
    return ctr.fetch_add(1, std::memory_order_relaxed);
  }
};

}  // namespace detail

// Cheap handle with shared storage; copies alias the same buffer.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape s, T fill = T(0), bool requires_grad = false) {
    st_ = std::make_shared<detail::Storage<T>>();
    st_->shape = s;
    st_->data.assign(size_t(s.numel()), fill);
    st_->requires_grad = requires_grad;
    st_->id = detail::Storage<T>::next_id();
  }

  static BasicTensor from_data(Shape s, std::vector<T> values,
                               bool requires_grad = false) {
    if (int64_t(values.size()) != s.numel())
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + s.str());
    BasicTensor t;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->shape = s;
    t.st_->data = std::move(values);
    t.st_->requires_grad = requires_grad;
    t.st_->id = detail::Storage<T>::next_id();
    return t;
  }

  static BasicTensor randn(Shape s, Rng& rng, double stddev = 1.0,
                           bool requires_grad = false) {
    BasicTensor t(s, T(0), requires_grad);
    for (auto& v : t.st_->data) v = T(stddev * rng.gaussian());
    return t;
  }

  bool valid() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int64_t numel() const { return st_->shape.numel(); }
  uint64_t id() const { return st_->id; }

  std::span<const T> data() const { return st_->data; }
  std::span<T> data() { return st_->data; }

  T at(int n, int c, int y, int x) const { return st_->data[index(n, c, y, x)]; }
  T& at(int n, int c, int y, int x) { return st_->data[index(n, c, y, x)]; }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool b) { st_->requires_grad = b; }

  bool has_grad() const { return !st_->grad.empty(); }

  std::span<const T> grad() const {
    if (st_->grad.empty())
      throw std::logic_error("tensor has no gradient");
    return st_->grad;
  }

  // Gradient buffer, allocated zero-filled on first touch.
  std::span<T> grad_buffer() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
    return st_->grad;
  }

  void zero_grad() { st_->grad.clear(); }

  void accumulate_grad(std::span<const T> g) {
    auto dst = grad_buffer();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  // Deep copy of values; new storage, no grad.
  BasicTensor clone_detached() const {
    return from_data(st_->shape, st_->data, false);
  }

  bool same_storage(const BasicTensor& o) const { return st_ == o.st_; }

 private:
  size_t index(int n, int c, int y, int x) const {
    const Shape& s = st_->shape;
    return ((size_t(n) * s.c + c) * s.h + y) * s.w + x;
  }

  std::shared_ptr<detail::Storage<T>> st_;
};

// Records one node per executed op, in execution order. Execution order is a
// topological order of the data flow, so a single reverse sweep visits every
// node exactly once with all downstream gradients already accumulated.
template <class T>
class BasicTape {
 public:
  struct Node {
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    std::string region;
    std::function<void()> backward;  // pulls output grad, pushes input grads
  };

  explicit BasicTape(bool recording = true) : recording_(recording) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return recording_; }

  void set_region(std::string name) { region_ = std::move(name); }
  const std::string& region() const { return region_; }

  void record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
              std::function<void()> backward) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), region_,
                          std::move(backward)});
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Seeds d(loss)/d(loss) = 1 and sweeps recorded nodes in reverse.
  // Op outputs (intermediates) get fresh gradients per sweep; leaf tensors
  // (parameters, inputs) accumulate across sweeps.
  void backward(BasicTensor<T>& loss) {
    if (loss.shape().numel() != 1)
      throw std::invalid_argument("backward requires a scalar loss, got " +
                                  loss.shape().str());
    if (!loss.requires_grad())
      throw std::invalid_argument(
          "backward on a tensor that does not require grad");
    for (auto& n : nodes_) n.output.zero_grad();
    loss.grad_buffer()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->backward) it->backward();
  }

 private:
  std::vector<Node> nodes_;
  bool recording_;
  std::string region_;
};

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

template <class T>
bool all_finite(const BasicTensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(double(v))) return false;
  return true;
}

}  // namespace lspst

#endif
