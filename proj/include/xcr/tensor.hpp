#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xcr {

using Shape = std::vector<std::size_t>;

/// Raised when an operation's preconditions (shapes, ranges, sizes) do not hold.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for mathematically undefined inputs, e.g. log of a non-positive value.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised for invalid configuration values (indivisible image dims, k > d, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw ContractError("Tensor: shape " + shape_str(shape_) + " does not match " +
                          std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape{v.size()}, std::vector<double>(v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ContractError("Tensor::matrix: ragged rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ContractError("Tensor::item on shape " + shape_str(shape_));
    return data_[0];
  }

  /// Same data, new shape. Element count must be preserved.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size())
      throw ContractError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0])
      throw ContractError("slice_rows out of range on " + shape_str(shape_));
    Shape s = shape_;
    s[0] = end - begin;
    std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                    data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Gathers the given leading-axis rows into a new tensor.
inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  if (t.rank() == 0) throw ContractError("gather_rows on scalar");
  std::size_t stride = t.dim(0) ? t.size() / t.dim(0) : 0;
  Shape s = t.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.dim(0)) throw ContractError("gather_rows: index out of range");
    std::copy_n(t.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

/// Concatenates along the leading axis; trailing dims must agree.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw ContractError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(s), std::move(data));
}

}  // namespace xcr
