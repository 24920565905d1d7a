#include "satlab/tensor.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace satlab {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ",")); }

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(
          fmt::format("shapes {} and {} are not broadcastable", to_string(a), to_string(b)));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto e : shape_) {
    if (e == 0) throw ShapeError(fmt::format("zero extent in shape {}", to_string(shape_)));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", to_string(shape_),
                                 numel(shape_), data_.size()));
  }
  for (auto e : shape_) {
    if (e == 0) throw ShapeError(fmt::format("zero extent in shape {}", to_string(shape_)));
  }
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw ShapeError(fmt::format("item() on tensor of shape {}", to_string(shape_)));
  }
  return data_[0];
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Tensor<T>::reshape(Shape shape) {
  if (numel(shape) != data_.size()) {
    throw ShapeError(fmt::format("cannot reshape {} to {}", to_string(shape_), to_string(shape)));
  }
  shape_ = std::move(shape);
}

TokenGrid::TokenGrid(std::size_t b, std::size_t t, std::vector<std::int32_t> values)
    : batch(b), length(t), ids(std::move(values)) {
  if (ids.size() != b * t) {
    throw ShapeError(fmt::format("token grid [{},{}] needs {} ids, got {}", b, t, b * t,
                                 ids.size()));
  }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(
        fmt::format("max_abs_diff: {} vs {}", to_string(a.shape()), to_string(b.shape())));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
std::uint64_t content_hash(const Tensor<T>& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  for (auto e : t.shape()) {
    h ^= e;
    h *= 1099511628211ULL;
  }
  return h;
}

template class Tensor<float>;
template class Tensor<double>;
template double max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);
template std::uint64_t content_hash(const Tensor<float>&, std::uint64_t);
template std::uint64_t content_hash(const Tensor<double>&, std::uint64_t);

}  // namespace satlab
