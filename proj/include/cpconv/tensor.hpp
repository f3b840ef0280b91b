#pragma once

// Dense row-major tensors and the multilinear primitives used by the CP
// solvers and the convolution rewrite.
//
// Conventions shared by every module:
//  * elements are stored row-major (last index fastest);
//  * unfold(t, m) puts axis m on the rows and enumerates the remaining axes
//    in row-major order (lowest remaining axis slowest) along the columns;
//  * khatri_rao(a, b) enumerates rows as i_a * b.rows() + i_b.
// With these, unfold(reconstruct(A_0..A_{D-1}), m) ==
//   A_m * khatri_rao(A_0, .., A_{m-1}, A_{m+1}, .., A_{D-1})^T.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace cpconv {

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

template <typename T>
class DenseTensor {
  static_assert(std::is_floating_point_v<T>, "DenseTensor holds real values");

 public:
  using value_type = T;

  DenseTensor() = default;

  explicit DenseTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  DenseTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw std::invalid_argument("DenseTensor: " + std::to_string(data_.size()) +
                                  " elements do not fill shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  template <typename... Index>
  T& operator()(Index... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Index>
  const T& operator()(Index... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) flat = flat * shape_[axis++] + i;
    return flat;
  }

  // Same elements, new shape with equal element count.
  DenseTensor reshaped(Shape shape) const { return DenseTensor(std::move(shape), data_); }

  template <typename U>
  DenseTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return DenseTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  DenseTensor& operator+=(const DenseTensor& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }
  DenseTensor& operator-=(const DenseTensor& other) {
    require_same_shape(other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }
  DenseTensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(DenseTensor a, T s) { return a *= s; }
  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("DenseTensor: shape must have at least one axis");
    for (std::size_t d : shape)
      if (d == 0) throw std::invalid_argument("DenseTensor: zero-sized axis in " + shape_string(shape));
  }

  void require_same_shape(const DenseTensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(shape_) +
                                  " vs " + shape_string(other.shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// Row-major rows x rank matrix; column r of factor m holds the mode-m vectors
// of CP component r.
template <typename T>
class FactorMatrix {
 public:
  FactorMatrix() = default;
  FactorMatrix(std::size_t rows, std::size_t rank, T fill = T{0})
      : rows_(rows), rank_(rank), data_(rows * rank, fill) {
    if (rows == 0 || rank == 0) throw std::invalid_argument("FactorMatrix: rows and rank must be positive");
  }
  FactorMatrix(std::size_t rows, std::size_t rank, std::vector<T> data)
      : rows_(rows), rank_(rank), data_(std::move(data)) {
    if (rows == 0 || rank == 0) throw std::invalid_argument("FactorMatrix: rows and rank must be positive");
    if (data_.size() != rows * rank) throw std::invalid_argument("FactorMatrix: element count != rows * rank");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t rank() const noexcept { return rank_; }

  T& operator()(std::size_t i, std::size_t r) { return data_[i * rank_ + r]; }
  const T& operator()(std::size_t i, std::size_t r) const { return data_[i * rank_ + r]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  std::vector<T> column(std::size_t r) const {
    std::vector<T> col(rows_);
    for (std::size_t i = 0; i < rows_; ++i) col[i] = (*this)(i, r);
    return col;
  }

  T column_norm(std::size_t r) const {
    T acc = 0;
    for (std::size_t i = 0; i < rows_; ++i) acc += (*this)(i, r) * (*this)(i, r);
    return std::sqrt(acc);
  }

  void scale_column(std::size_t r, T s) {
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, r) *= s;
  }

  // Copy with extra columns appended (zero-filled) or trailing columns dropped.
  FactorMatrix resized_rank(std::size_t rank) const {
    FactorMatrix out(rows_, rank);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t r = 0; r < std::min(rank, rank_); ++r) out(i, r) = (*this)(i, r);
    return out;
  }

  DenseTensor<T> as_tensor() const { return DenseTensor<T>({rows_, rank_}, data_); }

  template <typename U>
  FactorMatrix<U> cast() const {
    return FactorMatrix<U>(rows_, rank_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const FactorMatrix&, const FactorMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t rank_ = 0;
  std::vector<T> data_;
};

template <typename T>
DenseTensor<T> outer_rank1(const std::vector<std::vector<T>>& vectors) {
  if (vectors.empty()) throw std::invalid_argument("outer_rank1: empty vector list");
  Shape shape;
  for (const auto& v : vectors) {
    if (v.empty()) throw std::invalid_argument("outer_rank1: empty input vector");
    shape.push_back(v.size());
  }
  DenseTensor<T> out(shape, T{1});
  // Multiply in one axis at a time; `stride` is the block length of the
  // trailing axes still to come.
  std::size_t stride = out.size();
  for (const auto& v : vectors) {
    const std::size_t block = stride / v.size();
    for (std::size_t flat = 0; flat < out.size(); ++flat) out[flat] *= v[(flat / block) % v.size()];
    stride = block;
  }
  return out;
}

template <typename T>
DenseTensor<T> unfold(const DenseTensor<T>& t, std::size_t mode) {
  if (mode >= t.ndim()) {
    throw std::invalid_argument("unfold: mode " + std::to_string(mode) + " out of range for " +
                                shape_string(t.shape()));
  }
  const std::size_t rows = t.dim(mode);
  const std::size_t cols = t.size() / rows;
  std::size_t inner = 1;
  for (std::size_t a = mode + 1; a < t.ndim(); ++a) inner *= t.dim(a);
  const std::size_t outer = t.size() / (rows * inner);

  DenseTensor<T> out({rows, cols});
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t in = 0; in < inner; ++in) dst[i * cols + o * inner + in] = src[(o * rows + i) * inner + in];
  return out;
}

template <typename T>
FactorMatrix<T> khatri_rao(const FactorMatrix<T>& a, const FactorMatrix<T>& b) {
  if (a.rank() != b.rank()) {
    throw std::invalid_argument("khatri_rao: rank mismatch " + std::to_string(a.rank()) + " vs " +
                                std::to_string(b.rank()));
  }
  FactorMatrix<T> out(a.rows() * b.rows(), a.rank());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j)
      for (std::size_t r = 0; r < a.rank(); ++r) out(i * b.rows() + j, r) = a(i, r) * b(j, r);
  return out;
}

// Khatri-Rao product of all factors except `skip`, in increasing mode order.
template <typename T>
FactorMatrix<T> khatri_rao_except(const std::vector<FactorMatrix<T>>& factors, std::size_t skip) {
  const FactorMatrix<T>* first = nullptr;
  FactorMatrix<T> acc;
  for (std::size_t m = 0; m < factors.size(); ++m) {
    if (m == skip) continue;
    if (first == nullptr) {
      first = &factors[m];
      acc = factors[m];
    } else {
      acc = khatri_rao(acc, factors[m]);
    }
  }
  if (first == nullptr) throw std::invalid_argument("khatri_rao_except: need at least two factors");
  return acc;
}

template <typename T>
T frobenius_norm(const DenseTensor<T>& t) {
  // Scaled accumulation keeps large kernels from overflowing in float.
  T scale = 0;
  for (T v : t.data()) scale = std::max(scale, std::abs(v));
  if (scale == T{0}) return T{0};
  T acc = 0;
  for (T v : t.data()) {
    const T s = v / scale;
    acc += s * s;
  }
  return scale * std::sqrt(acc);
}

template <typename T>
T relative_error(const DenseTensor<T>& approx, const DenseTensor<T>& ref) {
  if (approx.shape() != ref.shape()) {
    throw std::invalid_argument("relative_error: shape mismatch " + shape_string(approx.shape()) + " vs " +
                                shape_string(ref.shape()));
  }
  const T ref_norm = frobenius_norm(ref);
  if (ref_norm == T{0}) throw std::domain_error("relative_error: reference tensor has zero norm");
  return frobenius_norm(approx - ref) / ref_norm;
}

}  // namespace cpconv
