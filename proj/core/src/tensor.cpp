#include "nlcnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace nlcnn {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void TensorImpl::ensure_grad() {
  if (has_grad()) return;
  if (dtype == DType::F32) {
    grad_f32.assign(data_f32.size(), 0.0f);
  } else {
    grad_f64.assign(data_f64.size(), 0.0);
  }
}

void TensorImpl::clear_grad() {
  grad_f32.clear();
  grad_f64.clear();
}

}  // namespace detail

Tensor make_tensor(Shape shape, DType dt) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dt;
  const auto n = static_cast<std::size_t>(impl->numel());
  if (dt == DType::F32) {
    impl->data_f32.assign(n, 0.0f);
  } else {
    impl->data_f64.assign(n, 0.0);
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dt) { return make_tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = make_tensor(std::move(shape), dt);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto span = t.mut_data<T>();
    std::fill(span.begin(), span.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_f64(std::vector<double> values, Shape shape) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("from_f64: " + std::to_string(values.size()) + " values vs shape " +
                     shape_str(shape));
  }
  Tensor t = make_tensor(std::move(shape), DType::F64);
  std::copy(values.begin(), values.end(), t.mut_data<double>().begin());
  return t;
}

Tensor Tensor::from_f32(std::vector<float> values, Shape shape) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("from_f32: " + std::to_string(values.size()) + " values vs shape " +
                     shape_str(shape));
  }
  Tensor t = make_tensor(std::move(shape), DType::F32);
  std::copy(values.begin(), values.end(), t.mut_data<float>().begin());
  return t;
}

Tensor Tensor::randn(Shape shape, DType dt, std::mt19937_64& rng, double stddev, double mean) {
  Tensor t = make_tensor(std::move(shape), dt);
  std::normal_distribution<double> dist(mean, stddev);
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mut_data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  const Shape& s = impl_->shape;
  if (idx.size() != s.size()) {
    throw ShapeError("at(): " + std::to_string(idx.size()) + " indices for rank " +
                     std::to_string(s.size()));
  }
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : idx) {
    if (i < 0 || i >= s[k]) throw ShapeError("at(): index out of bounds");
    flat = flat * s[k] + i;
    ++k;
  }
  return at_flat(flat);
}

double Tensor::at_flat(std::int64_t flat) const {
  return dispatch_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(flat)]);
  });
}

double Tensor::grad_at_flat(std::int64_t flat) const {
  if (!has_grad()) return 0.0;
  return dispatch_dtype(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(grad<T>()[static_cast<std::size_t>(flat)]);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
  return at_flat(0);
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(impl_->shape, impl_->dtype);
  dispatch_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = data<T>();
    std::copy(src.begin(), src.end(), t.mut_data<T>().begin());
  });
  return t;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype()) return clone();
  Tensor t = make_tensor(impl_->shape, dt);
  const auto n = static_cast<std::size_t>(numel());
  if (dt == DType::F64) {
    auto src = data<float>();
    auto dst = t.mut_data<double>();
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
  } else {
    auto src = data<double>();
    auto dst = t.mut_data<float>();
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  }
  return t;
}

Tensor Tensor::grad_as_tensor() const {
  Tensor t = make_tensor(impl_->shape, impl_->dtype);
  if (!has_grad()) return t;
  dispatch_dtype(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = grad<T>();
    std::copy(src.begin(), src.end(), t.mut_data<T>().begin());
  });
  return t;
}

void check_finite(const Tensor& t, const char* op_name) {
  const bool ok = dispatch_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.data<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
  if (!ok) {
    throw NumericError(std::string(op_name) + ": non-finite value in forward result, shape " +
                       shape_str(t.shape()));
  }
}

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}  // namespace

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  // Destruction order is enforced by scoping; pop whichever slot is ours.
  auto it = std::find(g_tape_stack.rbegin(), g_tape_stack.rend(), this);
  if (it != g_tape_stack.rend()) g_tape_stack.erase(std::next(it).base());
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(const char* name, std::vector<Tensor> inputs, const Tensor& output,
                  std::function<void()> backward) {
  Tensor out = output;
  out.set_grad_enabled(true);
  nodes_.push_back(Node{name, std::move(inputs), out, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (nodes_.empty()) throw ContractError("backward: tape is empty");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  dispatch_dtype(loss.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor l = loss;
    l.mut_grad<T>()[0] = static_cast<T>(1);
  });
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    // Nodes whose output never received a gradient are off the path to loss.
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

}  // namespace nlcnn
