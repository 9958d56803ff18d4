#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddl/errors.hpp"

namespace ddl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

// 64-byte aligned storage so vectorized kernels see the same alignment on
// every allocation and results are reproducible bit for bit.
template <typename S>
struct AlignedAllocator {
  using value_type = S;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  S* allocate(std::size_t n) { return static_cast<S*>(::operator new(n * sizeof(S), kAlign)); }
  void deallocate(S* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename S>
using AlignedVector = std::vector<S, AlignedAllocator<S>>;

// Dense row-major tensor with value semantics.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, const std::vector<S>& values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    expects(data_.size() == numel(shape_), "tensor data size does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }
  AlignedVector<S>& storage() noexcept { return data_; }
  const AlignedVector<S>& storage() const noexcept { return data_; }
  std::vector<S> to_vector() const { return {data_.begin(), data_.end()}; }

  S& operator[](std::size_t i) noexcept { return data_[i]; }
  const S& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <typename... I>
  S& operator()(I... idx) noexcept {
    return data_[offset(idx...)];
  }
  template <typename... I>
  const S& operator()(I... idx) const noexcept {
    return data_[offset(idx...)];
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape shape) {
    expects(numel(shape) == data_.size(),
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    shape_ = std::move(shape);
  }
  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](S v) { return static_cast<T>(v); });
    return Tensor<T>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(static_cast<double>(v)); });
  }

  Tensor& operator+=(const Tensor& o) {
    expects(o.shape_ == shape_, "tensor += shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  template <typename... I>
  std::size_t offset(I... idx) const noexcept {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizeof...(I); ++k) off = off * shape_[k] + ids[k];
    return off;
  }

  Shape shape_;
  AlignedVector<S> data_;
};

template <typename S>
inline void expect_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

}  // namespace ddl
