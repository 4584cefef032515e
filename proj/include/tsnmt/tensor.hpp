#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsnmt/errors.hpp"
#include "tsnmt/random.hpp"

namespace tsnmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array with an optional gradient accumulator.
//
// Tensor is a handle: copies share storage. Parameters are long-lived
// handles owned by the model; intermediate tensors are kept alive by the
// backward closures recorded on a Tape.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  Tensor(Shape shape, std::vector<S> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape.empty()) shape = {1};
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    if (shape_size(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    impl_->shape = std::move(shape);
    impl_->value = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape.empty() ? Shape{1} : shape);
    return Tensor(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
  }

  static Tensor scalar(S v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->value.size(); }
  std::size_t cols() const { return impl_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }

  // Handle semantics: constness of the handle does not extend to the storage.
  std::span<S> data() const { return impl_->value; }
  std::span<S> grad() const { return impl_->grad; }
  S* ptr() const { return impl_->value.data(); }
  S* grad_ptr() const { return impl_->grad.data(); }

  S item() const { return impl_->value.at(0); }
  S& operator[](std::size_t i) const { return impl_->value[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) impl_->grad.assign(impl_->value.size(), S(0));
    else impl_->grad.clear();
  }
  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), S(0)); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Deep copy, no gradient.
  Tensor clone() const { return Tensor(impl_->shape, impl_->value, false); }

 private:
  struct Impl {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of backward rules for one forward pass.
//
// Entries are appended as ops execute, which is a topological order of the
// graph; backward() runs them once each in reverse. The tape seed drives all
// dropout masks so that replaying a forward pass with the same seed
// reproduces identical values.
template <typename S>
class Tape {
 public:
  explicit Tape(std::uint64_t seed = 0, bool recording = true, bool training = false)
      : seed_(seed), recording_(recording), training_(training) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool training() const { return training_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return entries_.size(); }

  // True when an op over these inputs should produce a differentiable output.
  template <typename... T>
  bool wants_grad(const T&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(std::function<void()> backward) { entries_.push_back(std::move(backward)); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  // The tape is consumed.
  void backward(Tensor<S>& loss) {
    if (loss.size() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any differentiable tensor");
    loss.grad()[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

  void clear() { entries_.clear(); }

  // Independent random stream for a dropout site. Keyed by the site rather
  // than a running counter so skipping an unused branch does not shift the
  // masks of other sites.
  Rng stream(std::uint64_t site) const { return Rng(mix_seed(seed_, site)); }

 private:
  std::uint64_t seed_;
  bool recording_;
  bool training_;
  std::vector<std::function<void()>> entries_;
};

}  // namespace tsnmt
