#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "persona/error.hpp"

namespace persona::diff {

using Shape = std::vector<std::size_t>;

// Cache-line aligned storage. Vectorized kernels peel differently on
// differently aligned inputs, so fixed alignment keeps float results
// bit-reproducible from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  // Over-allocates through malloc (much faster than aligned operator new
  // for many small blocks) and keeps the raw pointer just below the block.
  T* allocate(std::size_t n) {
    void* raw = std::malloc(n * sizeof(T) + kAlign + sizeof(void*));
    if (raw == nullptr) {
      throw std::bad_alloc();
    }
    const auto base = reinterpret_cast<std::uintptr_t>(raw) + sizeof(void*);
    auto* p = reinterpret_cast<void**>((base + kAlign - 1) & ~(kAlign - 1));
    p[-1] = raw;
    return reinterpret_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(reinterpret_cast<void**>(p)[-1]); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out += "x";
    }
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major array of doubles. A scalar is shape [1]. Every op treats
// a tensor as (rows x cols) with cols = last dimension.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_count(shape_), fill) {}

  Tensor(Shape shape, const std::vector<double>& data)
      : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

  Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_count(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + to_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

  // Row vector with the given values.
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  Buffer& buffer() noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) {
      throw ContractError("item() called on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) {
        return false;
      }
    }
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

 private:
  static std::size_t checked_count(const Shape& shape) {
    if (shape.empty()) {
      throw DimensionError("tensor shape must have at least one dimension");
    }
    for (auto d : shape) {
      if (d == 0) {
        throw DimensionError("tensor dimension of size 0 in " + to_string(shape));
      }
    }
    return element_count(shape);
  }

  Shape shape_;
  Buffer data_;
};

}  // namespace persona::diff
