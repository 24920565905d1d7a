#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace satlab {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation's domain is violated (log of non-positive, division by zero, bad ids).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Trailing-dimension broadcast of two shapes; missing leading extents count as 1.
/// Throws ShapeError naming both shapes when an extent pair is neither equal nor 1.
Shape broadcast_shapes(const Shape& a, const Shape& b);

/// Dense row-major array. Value type; copying copies the storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Value of a single-element tensor.
  T item() const;

  void fill(T value);
  /// Same storage, new extents; element count must match.
  void reshape(Shape shape);

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Integer token ids laid out as [batch, length].
struct TokenGrid {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;

  TokenGrid() = default;
  TokenGrid(std::size_t b, std::size_t t, std::vector<std::int32_t> values);

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
  std::size_t size() const noexcept { return ids.size(); }
};

/// Largest absolute elementwise difference; shapes must agree.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// FNV-1a over the raw bytes of every value; used to prove read-only access.
template <typename T>
std::uint64_t content_hash(const Tensor<T>& t, std::uint64_t seed = 1469598103934665603ULL);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace satlab
