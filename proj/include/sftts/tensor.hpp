#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <vector>

#include "sftts/common.hpp"

namespace sftts {

// Allocator that default-initializes (i.e. leaves doubles uninitialized) so
// fully-overwritten buffers skip the zero fill.
template <class T>
struct DefaultInitAlloc {
  using value_type = T;
  DefaultInitAlloc() = default;
  template <class U>
  DefaultInitAlloc(const DefaultInitAlloc<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T))); }
  void deallocate(T* p, std::size_t) { ::operator delete(p); }
  template <class U, class... A>
  void construct(U* p, A&&... a) {
    ::new (static_cast<void*>(p)) U(std::forward<A>(a)...);
  }
  void construct(T* p) { ::new (static_cast<void*>(p)) T; }
  template <class U>
  bool operator==(const DefaultInitAlloc<U>&) const {
    return true;
  }
};

using RawVec = std::vector<double, DefaultInitAlloc<double>>;

// Dense row-major tensor of doubles, rank 1..4. Small and value-semantic;
// all model math in this project runs on these.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.resize(checked_numel());
    std::fill(data_.begin(), data_.end(), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (checked_numel() != static_cast<std::int64_t>(data.size()))
      throw ShapeError("Tensor: data size does not match shape");
    data_.assign(data.begin(), data.end());
  }

  // Skips the zero fill; every entry must be written before being read.
  static Tensor uninit(std::vector<int> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(t.checked_numel());
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t = uninit(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 2-D accessors (rows x cols).
  int rows() const { return shape_[0]; }
  int cols() const { return ndim() < 2 ? 1 : shape_[1]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  // 3-D accessor (c, h, w).
  double& at3(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  double at3(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Tensor reshaped(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    std::int64_t n = 1;
    for (int d : t.shape_) n *= d;
    if (n != numel()) throw ShapeError("reshape: element count mismatch");
    t.data_ = data_;
    return t;
  }

  RawVec& vec() { return data_; }
  const RawVec& vec() const { return data_; }

 private:
  std::int64_t checked_numel() const {
    std::int64_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw ShapeError("Tensor: nonpositive dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  RawVec data_;
};

// y = a * b for 2-D tensors, optionally transposing either side. Backed by
// BLAS dgemm (see tensor.cpp).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// c += alpha * op(a) * op(b), c preallocated.
void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b,
                double alpha);

Tensor transpose(const Tensor& a);

std::string shape_str(const Tensor& t);

}  // namespace sftts
