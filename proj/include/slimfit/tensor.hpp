#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace slimfit {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};
struct InternalError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMat<Scalar>>;

using Index = Eigen::Index;

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<Index> dims) : dims_(std::move(dims)) { validate(); }

  [[nodiscard]] std::size_t rank() const { return dims_.size(); }
  [[nodiscard]] Index operator[](std::size_t i) const { return dims_.at(i); }
  [[nodiscard]] Index back() const { return dims_.empty() ? 1 : dims_.back(); }
  [[nodiscard]] const std::vector<Index>& dims() const { return dims_; }
  [[nodiscard]] Index numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), Index{1}, std::multiplies<>());
  }
  // Product of all dimensions except the last.
  [[nodiscard]] Index rows() const { return dims_.empty() ? 1 : numel() / dims_.back(); }

  bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    for (Index d : dims_)
      if (d < 1) throw ShapeError("shape dimensions must be positive, got " + str());
  }
  std::vector<Index> dims_;
};

/// Dense row-major n-d array. The last dimension is contiguous, so any tensor
/// can be viewed as a (rows x last-dim) matrix.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vec<Scalar>::Zero(shape_.numel())) {}
  Tensor(Shape shape, Vec<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
  }
  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    data_.resize(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
    if (data_.size() != shape_.numel())
      throw ShapeError("initializer length does not match shape " + shape_.str());
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data_.setConstant(v);
    return t;
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] Index numel() const { return data_.size(); }
  [[nodiscard]] Vec<Scalar>& data() { return data_; }
  [[nodiscard]] const Vec<Scalar>& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  [[nodiscard]] MatMap<Scalar> mat() { return {data_.data(), shape_.rows(), shape_.back()}; }
  [[nodiscard]] ConstMatMap<Scalar> mat() const { return {data_.data(), shape_.rows(), shape_.back()}; }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.numel() != numel())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(std::move(s), data_);
  }

  template <typename Other>
  [[nodiscard]] Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape shape_{1};
  Vec<Scalar> data_ = Vec<Scalar>::Zero(1);
};

/// A trainable tensor tied to one freezable layer of the model registry.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  std::optional<Tensor<Scalar>> grad;
  int layer_id = -1;
  bool update_enabled = true;

  void zero_grad() { grad.reset(); }
  void accumulate_grad(const Vec<Scalar>& g) {
    if (!grad) grad = Tensor<Scalar>::zeros(value.shape());
    grad->data() += g;
  }
};

}  // namespace slimfit
