#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nlcnn/error.hpp"

namespace nlcnn {

// Scalar element type of a Tensor. The numeric codes are also the on-disk
// dtype codes of the checkpoint container.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Calls f with a value of the scalar type selected by dt.
template <typename F>
decltype(auto) dispatch_dtype(DType dt, F&& f) {
  if (dt == DType::F32) return f(float{});
  return f(double{});
}

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  bool grad_enabled = false;

  std::vector<float> data_f32;
  std::vector<double> data_f64;
  std::vector<float> grad_f32;  // empty until first accumulation
  std::vector<double> grad_f64;

  std::int64_t numel() const { return shape_numel(shape); }

  template <typename T>
  std::vector<T>& data_vec();
  template <typename T>
  const std::vector<T>& data_vec() const;
  template <typename T>
  std::vector<T>& grad_vec();
  template <typename T>
  const std::vector<T>& grad_vec() const;

  bool has_grad() const { return !grad_f32.empty() || !grad_f64.empty(); }
  void ensure_grad();  // allocates a zero grad buffer of the data's size
  void clear_grad();
};

template <>
inline std::vector<float>& TensorImpl::data_vec<float>() { return data_f32; }
template <>
inline std::vector<double>& TensorImpl::data_vec<double>() { return data_f64; }
template <>
inline const std::vector<float>& TensorImpl::data_vec<float>() const { return data_f32; }
template <>
inline const std::vector<double>& TensorImpl::data_vec<double>() const { return data_f64; }
template <>
inline std::vector<float>& TensorImpl::grad_vec<float>() { return grad_f32; }
template <>
inline std::vector<double>& TensorImpl::grad_vec<double>() { return grad_f64; }
template <>
inline const std::vector<float>& TensorImpl::grad_vec<float>() const { return grad_f32; }
template <>
inline const std::vector<double>& TensorImpl::grad_vec<double>() const { return grad_f64; }

}  // namespace detail

// Dense row-major n-dimensional array. A Tensor is a cheap handle to shared
// storage; storage is immutable after construction except through the two
// sanctioned channels: recorded operations writing gradients, and the
// optimizer updating leaf parameters via mut_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt);
  static Tensor full(Shape shape, double value, DType dt);
  static Tensor scalar(double value, DType dt);
  static Tensor from_f64(std::vector<double> values, Shape shape);
  static Tensor from_f32(std::vector<float> values, Shape shape);
  // Normal(mean, stddev) draws in generator order; dtype applied at store.
  static Tensor randn(Shape shape, DType dt, std::mt19937_64& rng,
                      double stddev = 1.0, double mean = 0.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return impl_->numel(); }
  std::int64_t dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  DType dtype() const { return impl_->dtype; }

  bool grad_enabled() const { return impl_->grad_enabled; }
  Tensor& set_grad_enabled(bool enabled) {
    impl_->grad_enabled = enabled;
    return *this;
  }

  template <typename T>
  std::span<const T> data() const {
    return {impl_->data_vec<T>().data(), impl_->data_vec<T>().size()};
  }
  // In-place mutation is reserved for leaf parameters (init, optimizer step)
  // and gradient buffers owned by the tape.
  template <typename T>
  std::span<T> mut_data() {
    return {impl_->data_vec<T>().data(), impl_->data_vec<T>().size()};
  }
  template <typename T>
  std::span<const T> grad() const {
    return {impl_->grad_vec<T>().data(), impl_->grad_vec<T>().size()};
  }
  template <typename T>
  std::span<T> mut_grad() {
    impl_->ensure_grad();
    return {impl_->grad_vec<T>().data(), impl_->grad_vec<T>().size()};
  }
  bool has_grad() const { return impl_->has_grad(); }
  void zero_grad() { impl_->clear_grad(); }

  // Element read as double regardless of dtype; row-major index.
  double at(std::initializer_list<std::int64_t> idx) const;
  double at_flat(std::int64_t flat) const;
  double grad_at_flat(std::int64_t flat) const;
  // Value of a one-element tensor.
  double item() const;

  Tensor clone() const;             // deep copy of data (not grad)
  Tensor astype(DType dt) const;    // deep copy with cast
  Tensor grad_as_tensor() const;    // deep copy of grad (zeros if absent)

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_tensor(Shape, DType);
};

// Allocates a zero-filled tensor; the building block for op outputs.
Tensor make_tensor(Shape shape, DType dt);

// Throws NumericError if any element of t is NaN or Inf.
void check_finite(const Tensor& t, const char* op_name);

// Reverse-mode tape. Operations executed while a Tape is alive on the
// current thread are recorded in execution order (which is topological);
// backward() walks the record once, in reverse. A tape and its tensors
// belong to one thread; distinct tapes may run on distinct threads.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Innermost live tape on this thread, or nullptr.
  static Tape* active();

  // Called by ops. Marks the output grad-enabled so downstream ops keep
  // recording.
  void record(const char* name, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients for every
  // grad-enabled tensor reachable from loss. loss must be a one-element
  // tensor produced under this tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* name;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace nlcnn
