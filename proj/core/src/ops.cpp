#include "nlcnn/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace nlcnn {

namespace {

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

void require_same_dtype(Tensor a, Tensor b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                        dtype_name(b.dtype()) + ")");
  }
}

void require_same_shape(Tensor a, Tensor b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename Fn>
void maybe_record(const char* name, std::vector<Tensor> inputs, Tensor out, Fn&& fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.grad_enabled();
  if (!any) return;
  tape->record(name, std::move(inputs), out, std::forward<Fn>(fn));
}

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
                 float beta, float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}
inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                 double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

// dst += src, elementwise over n entries.
template <typename T>
void vadd(T* dst, const T* src, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------- elementwise

namespace {

template <typename FwdT, typename BwdT>
Tensor binary_elementwise(const char* name, Tensor a, Tensor b, FwdT fwd, BwdT bwd) {
  require_same_dtype(a, b, name);
  require_same_shape(a, b, name);
  Tensor out = make_tensor(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.mut_data<T>();
    const auto n = pa.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = static_cast<T>(fwd(pa[i], pb[i]));
  });
  check_finite(out, name);
  maybe_record(name, {a, b}, out, [=]() mutable { bwd(a, b, out); });
  return out;
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
  return binary_elementwise(
      "add", a, b, [](auto x, auto y) { return x + y; },
      [](Tensor a_, Tensor b_, Tensor out_) {
        dispatch_dtype(out_.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = out_.grad<T>();
          if (a_.grad_enabled()) vadd(a_.mut_grad<T>().data(), g.data(), a_.numel());
          if (b_.grad_enabled()) vadd(b_.mut_grad<T>().data(), g.data(), b_.numel());
        });
      });
}

Tensor sub(Tensor a, Tensor b) {
  return binary_elementwise(
      "sub", a, b, [](auto x, auto y) { return x - y; },
      [](Tensor a_, Tensor b_, Tensor out_) {
        dispatch_dtype(out_.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = out_.grad<T>();
          if (a_.grad_enabled()) vadd(a_.mut_grad<T>().data(), g.data(), a_.numel());
          if (b_.grad_enabled()) {
            auto gb = b_.mut_grad<T>();
            for (std::int64_t i = 0; i < b_.numel(); ++i) gb[i] -= g[i];
          }
        });
      });
}

Tensor mul(Tensor a, Tensor b) {
  return binary_elementwise(
      "mul", a, b, [](auto x, auto y) { return x * y; },
      [](Tensor a_, Tensor b_, Tensor out_) {
        dispatch_dtype(out_.dtype(), [&](auto tag) {
          using T = decltype(tag);
          auto g = out_.grad<T>();
          auto pa = a_.data<T>();
          auto pb = b_.data<T>();
          if (a_.grad_enabled()) {
            auto ga = a_.mut_grad<T>();
            for (std::int64_t i = 0; i < a_.numel(); ++i) ga[i] += g[i] * pb[i];
          }
          if (b_.grad_enabled()) {
            auto gb = b_.mut_grad<T>();
            for (std::int64_t i = 0; i < b_.numel(); ++i) gb[i] += g[i] * pa[i];
          }
        });
      });
}

Tensor scale(Tensor x, double c) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] * static_cast<T>(c);
  });
  check_finite(out, "scale");
  maybe_record("scale", {x}, out, [x, out, c]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      if (!x.grad_enabled()) return;
      auto g = out.grad<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * static_cast<T>(c);
    });
  });
  return out;
}

Tensor relu(Tensor x) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  });
  check_finite(out, "relu");
  maybe_record("relu", {x}, out, [x, out]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto px = x.data<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        if (px[i] > T(0)) gx[i] += g[i];
      }
    });
  });
  return out;
}

Tensor tanh_op(Tensor x) {
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = std::tanh(px[i]);
  });
  check_finite(out, "tanh");
  maybe_record("tanh", {x}, out, [x, out]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto py = out.data<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * (T(1) - py[i] * py[i]);
    });
  });
  return out;
}

// ------------------------------------------------------------- linear algebra

Tensor matmul(Tensor a, Tensor b) {
  require_same_dtype(a, b, "matmul");
  require(a.rank() == 2 && b.rank() == 2, "matmul", "expects rank-2 inputs");
  require(a.dim(1) == b.dim(0), "matmul",
          "inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_tensor({m, n}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    gemm(false, false, m, n, k, T(1), a.data<T>().data(), k, b.data<T>().data(), n, T(0),
         out.mut_data<T>().data(), n);
  });
  check_finite(out, "matmul");
  maybe_record("matmul", {a, b}, out, [a, b, out, m, n, k]() mutable {
    dispatch_dtype(a.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      if (a.grad_enabled()) {
        // dA += dY * B^T
        gemm(false, true, m, k, n, T(1), g.data(), n, b.data<T>().data(), n, T(1),
             a.mut_grad<T>().data(), k);
      }
      if (b.grad_enabled()) {
        // dB += A^T * dY
        gemm(true, false, k, n, m, T(1), a.data<T>().data(), k, g.data(), n, T(1),
             b.mut_grad<T>().data(), n);
      }
    });
  });
  return out;
}

Tensor bmm(Tensor a, Tensor b) {
  require_same_dtype(a, b, "bmm");
  require(a.rank() == 3 && b.rank() == 3, "bmm", "expects rank-3 inputs");
  require(a.dim(0) == b.dim(0), "bmm", "batch dimensions disagree");
  require(a.dim(2) == b.dim(1), "bmm",
          "inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = make_tensor({batch, m, n}, a.dtype());
  dispatch_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.mut_data<T>().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm(false, false, m, n, k, T(1), pa + i * m * k, k, pb + i * k * n, n, T(0), po + i * m * n,
           n);
    }
  });
  check_finite(out, "bmm");
  maybe_record("bmm", {a, b}, out, [a, b, out, batch, m, n, k]() mutable {
    dispatch_dtype(a.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      for (std::int64_t i = 0; i < batch; ++i) {
        const T* gi = g.data() + i * m * n;
        if (a.grad_enabled()) {
          gemm(false, true, m, k, n, T(1), gi, n, b.data<T>().data() + i * k * n, n, T(1),
               a.mut_grad<T>().data() + i * m * k, k);
        }
        if (b.grad_enabled()) {
          gemm(true, false, k, n, m, T(1), a.data<T>().data() + i * m * k, k, gi, n, T(1),
               b.mut_grad<T>().data() + i * k * n, n);
        }
      }
    });
  });
  return out;
}

Tensor transpose(Tensor x) { return permute(x, {1, 0}); }

// ---------------------------------------------------------------- convolution

namespace {

struct ConvDims {
  std::int64_t batch, cin, h, w, cout, kh, kw, sh, sw, ph, pw, oh, ow, ck;
};

ConvDims conv_dims(Tensor x, Tensor w, std::pair<int, int> stride,
                   std::pair<int, int> padding) {
  require(x.rank() == 4, "conv2d", "input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(w.rank() == 4, "conv2d", "weight must be [O,C,kh,kw], got " + shape_str(w.shape()));
  require(x.dim(1) == w.dim(1), "conv2d",
          "channel mismatch: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  ConvDims d;
  d.batch = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.sh = stride.first;
  d.sw = stride.second;
  d.ph = padding.first;
  d.pw = padding.second;
  require(d.sh >= 1 && d.sw >= 1, "conv2d", "stride must be >= 1");
  require(d.ph >= 0 && d.pw >= 0, "conv2d", "padding must be >= 0");
  require(d.kh <= d.h + 2 * d.ph && d.kw <= d.w + 2 * d.pw, "conv2d",
          "kernel larger than padded input");
  d.oh = (d.h + 2 * d.ph - d.kh) / d.sh + 1;
  d.ow = (d.w + 2 * d.pw - d.kw) / d.sw + 1;
  d.ck = d.cin * d.kh * d.kw;
  return d;
}

// Writes the [ck x oh*ow] patch matrix of sample `x_n` (layout [C,H,W]).
template <typename T>
void im2col(const T* x_n, const ConvDims& d, T* col) {
  const std::int64_t ohw = d.oh * d.ow;
  for (std::int64_t c = 0; c < d.cin; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        T* row = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (std::int64_t oi = 0; oi < d.oh; ++oi) {
          const std::int64_t ih = oi * d.sh - d.ph + ki;
          if (ih < 0 || ih >= d.h) {
            std::fill(row + oi * d.ow, row + (oi + 1) * d.ow, T(0));
            continue;
          }
          const T* src = x_n + (c * d.h + ih) * d.w;
          for (std::int64_t oj = 0; oj < d.ow; ++oj) {
            const std::int64_t iw = oj * d.sw - d.pw + kj;
            row[oi * d.ow + oj] = (iw >= 0 && iw < d.w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a [ck x oh*ow] gradient back onto sample dx_n.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* dx_n) {
  const std::int64_t ohw = d.oh * d.ow;
  for (std::int64_t c = 0; c < d.cin; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const T* row = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (std::int64_t oi = 0; oi < d.oh; ++oi) {
          const std::int64_t ih = oi * d.sh - d.ph + ki;
          if (ih < 0 || ih >= d.h) continue;
          T* dst = dx_n + (c * d.h + ih) * d.w;
          for (std::int64_t oj = 0; oj < d.ow; ++oj) {
            const std::int64_t iw = oj * d.sw - d.pw + kj;
            if (iw >= 0 && iw < d.w) dst[iw] += row[oi * d.ow + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tensor x, Tensor w, std::pair<int, int> stride,
              std::pair<int, int> padding) {
  require_same_dtype(x, w, "conv2d");
  const ConvDims d = conv_dims(x, w, stride, padding);
  Tensor out = make_tensor({d.batch, d.cout, d.oh, d.ow}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const std::int64_t ohw = d.oh * d.ow;
    std::vector<T> col(static_cast<std::size_t>(d.ck * ohw));
    const T* px = x.data<T>().data();
    const T* pw = w.data<T>().data();
    T* po = out.mut_data<T>().data();
    for (std::int64_t n = 0; n < d.batch; ++n) {
      im2col(px + n * d.cin * d.h * d.w, d, col.data());
      gemm(false, false, d.cout, ohw, d.ck, T(1), pw, d.ck, col.data(), ohw, T(0),
           po + n * d.cout * ohw, ohw);
    }
  });
  check_finite(out, "conv2d");
  maybe_record("conv2d", {x, w}, out, [x, w, out, d]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const std::int64_t ohw = d.oh * d.ow;
      // The patch matrix is recomputed rather than saved; it is the largest
      // intermediate by far.
      std::vector<T> col(static_cast<std::size_t>(d.ck * ohw));
      auto g = out.grad<T>();
      const T* px = x.data<T>().data();
      for (std::int64_t n = 0; n < d.batch; ++n) {
        const T* gn = g.data() + n * d.cout * ohw;
        if (w.grad_enabled()) {
          im2col(px + n * d.cin * d.h * d.w, d, col.data());
          gemm(false, true, d.cout, d.ck, ohw, T(1), gn, ohw, col.data(), ohw, T(1),
               w.mut_grad<T>().data(), d.ck);
        }
        if (x.grad_enabled()) {
          gemm(true, false, d.ck, ohw, d.cout, T(1), w.data<T>().data(), d.ck, gn, ohw, T(0),
               col.data(), ohw);
          col2im_add(col.data(), d, x.mut_grad<T>().data() + n * d.cin * d.h * d.w);
        }
      }
    });
  });
  return out;
}

// -------------------------------------------------------------- normalization

namespace {

// Iteration frame for per-slice ops along one axis: the tensor is viewed as
// [outer, axis_len, inner] with the slice elements strided by `inner`.
struct AxisView {
  std::int64_t outer, len, inner;
};

AxisView axis_view(Tensor x, int axis, const char* op) {
  require(axis >= 0 && axis < x.rank(), op,
          "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(x.rank()));
  AxisView v{1, x.dim(axis), 1};
  for (int i = 0; i < axis; ++i) v.outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) v.inner *= x.dim(i);
  return v;
}

}  // namespace

Tensor softmax(Tensor x, int axis) {
  const AxisView v = axis_view(x, axis, "softmax");
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        const std::int64_t base = o * v.len * v.inner + in;
        T mx = px[base];
        for (std::int64_t i = 1; i < v.len; ++i) mx = std::max(mx, px[base + i * v.inner]);
        T sum = T(0);
        for (std::int64_t i = 0; i < v.len; ++i) {
          const T e = std::exp(px[base + i * v.inner] - mx);
          po[base + i * v.inner] = e;
          sum += e;
        }
        for (std::int64_t i = 0; i < v.len; ++i) po[base + i * v.inner] /= sum;
      }
    }
  });
  check_finite(out, "softmax");
  maybe_record("softmax", {x}, out, [x, out, v]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto py = out.data<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
          const std::int64_t base = o * v.len * v.inner + in;
          T dot = T(0);
          for (std::int64_t i = 0; i < v.len; ++i) {
            const std::int64_t idx = base + i * v.inner;
            dot += g[idx] * py[idx];
          }
          for (std::int64_t i = 0; i < v.len; ++i) {
            const std::int64_t idx = base + i * v.inner;
            gx[idx] += py[idx] * (g[idx] - dot);
          }
        }
      }
    });
  });
  return out;
}

BnState BnState::make(std::int64_t channels, DType dt) {
  BnState s;
  s.running_mean = Tensor::zeros({channels}, dt);
  s.running_var = Tensor::full({channels}, 1.0, dt);
  return s;
}

Tensor batchnorm2d(Tensor x, Tensor gamma, Tensor beta, BnState& state,
                   BnMode mode, double momentum, double eps) {
  require(x.rank() == 4, "batchnorm2d", "input must be [N,C,H,W]");
  const std::int64_t c = x.dim(1);
  require(gamma.rank() == 1 && gamma.dim(0) == c, "batchnorm2d", "gamma must be [C]");
  require(beta.rank() == 1 && beta.dim(0) == c, "batchnorm2d", "beta must be [C]");
  require_same_dtype(x, gamma, "batchnorm2d");
  require_same_dtype(x, beta, "batchnorm2d");
  const std::int64_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t hw = h * w, m = batch * hw;

  Tensor out = make_tensor(x.shape(), x.dtype());
  // Per-channel mean and inverse stddev actually used, saved for backward.
  Tensor mu = make_tensor({c}, x.dtype());
  Tensor invstd = make_tensor({c}, x.dtype());

  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    auto pg = gamma.data<T>();
    auto pb = beta.data<T>();
    auto pmu = mu.mut_data<T>();
    auto pis = invstd.mut_data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mean = 0.0, var = 0.0;
      if (mode == BnMode::Train) {
        for (std::int64_t n = 0; n < batch; ++n) {
          const T* src = px.data() + (n * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) mean += src[i];
        }
        mean /= static_cast<double>(m);
        for (std::int64_t n = 0; n < batch; ++n) {
          const T* src = px.data() + (n * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double d = src[i] - mean;
            var += d * d;
          }
        }
        var /= static_cast<double>(m);
        // Fold into the running estimates (unbiased variance when possible).
        auto rm = state.running_mean.mut_data<T>();
        auto rv = state.running_var.mut_data<T>();
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        rm[ch] = static_cast<T>((1.0 - momentum) * rm[ch] + momentum * mean);
        rv[ch] = static_cast<T>((1.0 - momentum) * rv[ch] + momentum * unbiased);
      } else {
        mean = state.running_mean.data<T>()[ch];
        var = state.running_var.data<T>()[ch];
      }
      const double is = 1.0 / std::sqrt(var + eps);
      pmu[ch] = static_cast<T>(mean);
      pis[ch] = static_cast<T>(is);
      const T a = static_cast<T>(pg[ch] * is);
      const T b = static_cast<T>(pb[ch] - pg[ch] * is * mean);
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* src = px.data() + (n * c + ch) * hw;
        T* dst = po.data() + (n * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] = a * src[i] + b;
      }
    }
  });
  check_finite(out, "batchnorm2d");

  maybe_record("batchnorm2d", {x, gamma, beta}, out,
               [x, gamma, beta, out, mu, invstd, mode, batch, c, hw, m]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto px = x.data<T>();
      auto pg = gamma.data<T>();
      auto pmu = mu.data<T>();
      auto pis = invstd.data<T>();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::int64_t n = 0; n < batch; ++n) {
          const T* dy = g.data() + (n * c + ch) * hw;
          const T* src = px.data() + (n * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double xhat = (src[i] - pmu[ch]) * pis[ch];
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xhat;
          }
        }
        if (gamma.grad_enabled()) gamma.mut_grad<T>()[ch] += static_cast<T>(sum_dy_xhat);
        if (beta.grad_enabled()) beta.mut_grad<T>()[ch] += static_cast<T>(sum_dy);
        if (x.grad_enabled()) {
          auto gx = x.mut_grad<T>();
          const double gs = pg[ch] * pis[ch];
          if (mode == BnMode::Train) {
            const double mean_dy = sum_dy / static_cast<double>(m);
            const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* dy = g.data() + (n * c + ch) * hw;
              const T* src = px.data() + (n * c + ch) * hw;
              T* dst = gx.data() + (n * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                const double xhat = (src[i] - pmu[ch]) * pis[ch];
                dst[i] += static_cast<T>(gs * (dy[i] - mean_dy - xhat * mean_dy_xhat));
              }
            }
          } else {
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* dy = g.data() + (n * c + ch) * hw;
              T* dst = gx.data() + (n * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) dst[i] += static_cast<T>(gs * dy[i]);
            }
          }
        }
      }
    });
  });
  return out;
}

// ------------------------------------------------------------------ reductions

Tensor mean_axis(Tensor x, int axis) {
  const AxisView v = axis_view(x, axis, "mean_axis");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = make_tensor(out_shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    const T inv = T(1) / static_cast<T>(v.len);
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        T s = T(0);
        const std::int64_t base = o * v.len * v.inner + in;
        for (std::int64_t i = 0; i < v.len; ++i) s += px[base + i * v.inner];
        po[o * v.inner + in] = s * inv;
      }
    }
  });
  check_finite(out, "mean_axis");
  maybe_record("mean_axis", {x}, out, [x, out, v]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto gx = x.mut_grad<T>();
      const T inv = T(1) / static_cast<T>(v.len);
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
          const T gv = g[o * v.inner + in] * inv;
          const std::int64_t base = o * v.len * v.inner + in;
          for (std::int64_t i = 0; i < v.len; ++i) gx[base + i * v.inner] += gv;
        }
      }
    });
  });
  return out;
}

namespace {

Tensor reduce_all(Tensor x, bool mean) {
  Tensor out = make_tensor({1}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double s = 0.0;
    for (T v : x.data<T>()) s += v;
    if (mean) s /= static_cast<double>(x.numel());
    out.mut_data<T>()[0] = static_cast<T>(s);
  });
  const char* name = mean ? "mean_all" : "sum_all";
  check_finite(out, name);
  maybe_record(name, {x}, out, [x, out, mean]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T g = out.grad<T>()[0];
      const T gv = mean ? g / static_cast<T>(x.numel()) : g;
      auto gx = x.mut_grad<T>();
      for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += gv;
    });
  });
  return out;
}

}  // namespace

Tensor sum_all(Tensor x) { return reduce_all(x, false); }
Tensor mean_all(Tensor x) { return reduce_all(x, true); }

Tensor l2_normalize(Tensor x, int axis) {
  const AxisView v = axis_view(x, axis, "l2_normalize");
  Tensor out = make_tensor(x.shape(), x.dtype());
  Tensor norms = make_tensor({v.outer * v.inner}, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    auto pn = norms.mut_data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t in = 0; in < v.inner; ++in) {
        const std::int64_t base = o * v.len * v.inner + in;
        double ss = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i) {
          const double val = px[base + i * v.inner];
          ss += val * val;
        }
        if (ss == 0.0) throw NumericError("l2_normalize: zero-norm slice");
        const double n = std::sqrt(ss);
        pn[o * v.inner + in] = static_cast<T>(n);
        for (std::int64_t i = 0; i < v.len; ++i) {
          po[base + i * v.inner] = static_cast<T>(px[base + i * v.inner] / n);
        }
      }
    }
  });
  check_finite(out, "l2_normalize");
  maybe_record("l2_normalize", {x}, out, [x, out, norms, v]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto py = out.data<T>();
      auto pn = norms.data<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
          const std::int64_t base = o * v.len * v.inner + in;
          T dot = T(0);
          for (std::int64_t i = 0; i < v.len; ++i) {
            const std::int64_t idx = base + i * v.inner;
            dot += g[idx] * py[idx];
          }
          const T n = pn[o * v.inner + in];
          for (std::int64_t i = 0; i < v.len; ++i) {
            const std::int64_t idx = base + i * v.inner;
            gx[idx] += (g[idx] - py[idx] * dot) / n;
          }
        }
      }
    });
  });
  return out;
}

// ----------------------------------------------------------------------- shape

namespace {

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] =
        s[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  }
  return s;
}

// Copies src into dst where dst index d maps to src index perm(d).
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& perm) {
  const int rank = static_cast<int>(in_shape.size());
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  const auto in_strides = contiguous_strides(in_shape);
  std::vector<std::int64_t> src_stride_for_out(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    src_stride_for_out[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const std::int64_t total = shape_numel(in_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t src_off = 0;
  for (std::int64_t flat = 0; flat < total; ++flat) {
    dst[flat] = src[src_off];
    for (int ax = rank - 1; ax >= 0; --ax) {
      auto uax = static_cast<std::size_t>(ax);
      if (++idx[uax] < out_shape[uax]) {
        src_off += src_stride_for_out[uax];
        break;
      }
      src_off -= src_stride_for_out[uax] * (out_shape[uax] - 1);
      idx[uax] = 0;
    }
  }
}

}  // namespace

Tensor permute(Tensor x, const std::vector<int>& perm) {
  require(static_cast<int>(perm.size()) == x.rank(), "permute", "perm length must equal rank");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    require(p >= 0 && p < x.rank() && !seen[static_cast<std::size_t>(p)], "permute",
            "perm must be a permutation of axes");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape;
  out_shape.reserve(perm.size());
  for (int p : perm) out_shape.push_back(x.dim(p));
  Tensor out = make_tensor(out_shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    permute_copy(x.data<T>().data(), out.mut_data<T>().data(), x.shape(), perm);
  });
  maybe_record("permute", {x}, out, [x, out, perm]() mutable {
    if (!x.grad_enabled()) return;
    // Inverse permutation maps output-grad back onto input layout.
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      std::vector<T> tmp(static_cast<std::size_t>(x.numel()));
      permute_copy(out.grad<T>().data(), tmp.data(), out.shape(), inv);
      vadd(x.mut_grad<T>().data(), tmp.data(), x.numel());
    });
  });
  return out;
}

Tensor reshape(Tensor x, Shape new_shape) {
  require(shape_numel(new_shape) == x.numel(), "reshape",
          "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
  Tensor out = make_tensor(std::move(new_shape), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    std::copy(src.begin(), src.end(), out.mut_data<T>().begin());
  });
  maybe_record("reshape", {x}, out, [x, out]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      vadd(x.mut_grad<T>().data(), out.grad<T>().data(), x.numel());
    });
  });
  return out;
}

Tensor slice(Tensor x, int axis, std::int64_t start, std::int64_t len) {
  const AxisView v = axis_view(x, axis, "slice");
  require(start >= 0 && len > 0 && start + len <= v.len, "slice",
          "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
              ") out of bounds for axis length " + std::to_string(v.len));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor out = make_tensor(out_shape, x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      const T* src = px.data() + (o * v.len + start) * v.inner;
      T* dst = po.data() + o * len * v.inner;
      std::copy(src, src + len * v.inner, dst);
    }
  });
  maybe_record("slice", {x}, out, [x, out, v, start, len]() mutable {
    if (!x.grad_enabled()) return;
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      auto gx = x.mut_grad<T>();
      for (std::int64_t o = 0; o < v.outer; ++o) {
        const T* src = g.data() + o * len * v.inner;
        T* dst = gx.data() + (o * v.len + start) * v.inner;
        vadd(dst, src, len * v.inner);
      }
    });
  });
  return out;
}

// ---------------------------------------------------- parameterized broadcasts

Tensor add_rowvec(Tensor x, Tensor v) {
  require_same_dtype(x, v, "add_rowvec");
  require(x.rank() == 2 && v.rank() == 1 && v.dim(0) == x.dim(1), "add_rowvec",
          "expects [m,k] and [k], got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
  const std::int64_t m = x.dim(0), k = x.dim(1);
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto pv = v.data<T>();
    auto po = out.mut_data<T>();
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < k; ++j) po[i * k + j] = px[i * k + j] + pv[j];
    }
  });
  check_finite(out, "add_rowvec");
  maybe_record("add_rowvec", {x, v}, out, [x, v, out, m, k]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      if (x.grad_enabled()) vadd(x.mut_grad<T>().data(), g.data(), m * k);
      if (v.grad_enabled()) {
        auto gv = v.mut_grad<T>();
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t j = 0; j < k; ++j) gv[j] += g[i * k + j];
        }
      }
    });
  });
  return out;
}

Tensor mul_scalar_t(Tensor x, Tensor s) {
  require_same_dtype(x, s, "mul_scalar_t");
  require(s.numel() == 1, "mul_scalar_t", "s must be a one-element tensor");
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T sv = s.data<T>()[0];
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] * sv;
  });
  check_finite(out, "mul_scalar_t");
  maybe_record("mul_scalar_t", {x, s}, out, [x, s, out]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      if (x.grad_enabled()) {
        const T sv = s.data<T>()[0];
        auto gx = x.mut_grad<T>();
        for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * sv;
      }
      if (s.grad_enabled()) {
        auto px = x.data<T>();
        double acc = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(g[i]) * px[i];
        s.mut_grad<T>()[0] += static_cast<T>(acc);
      }
    });
  });
  return out;
}

Tensor add_scalar_t(Tensor x, Tensor s) {
  require_same_dtype(x, s, "add_scalar_t");
  require(s.numel() == 1, "add_scalar_t", "s must be a one-element tensor");
  Tensor out = make_tensor(x.shape(), x.dtype());
  dispatch_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T sv = s.data<T>()[0];
    auto px = x.data<T>();
    auto po = out.mut_data<T>();
    for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] + sv;
  });
  check_finite(out, "add_scalar_t");
  maybe_record("add_scalar_t", {x, s}, out, [x, s, out]() mutable {
    dispatch_dtype(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = out.grad<T>();
      if (x.grad_enabled()) vadd(x.mut_grad<T>().data(), g.data(), x.numel());
      if (s.grad_enabled()) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) acc += g[i];
        s.mut_grad<T>()[0] += static_cast<T>(acc);
      }
    });
  });
  return out;
}

// --------------------------------------------------------------- cross entropy

Tensor cross_entropy(Tensor logits, const std::vector<std::int64_t>& labels) {
  require(logits.rank() == 2, "cross_entropy", "logits must be [N,K]");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  require(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy",
          "labels length must equal batch size");
  for (auto l : labels) {
    if (l < 0 || l >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range [0, " +
                          std::to_string(k) + ")");
    }
  }
  Tensor out = make_tensor({1}, logits.dtype());
  dispatch_dtype(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pl = logits.data<T>();
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = pl.data() + i * k;
      T mx = row[0];
      for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
      total += std::log(sum) + mx - row[labels[static_cast<std::size_t>(i)]];
    }
    out.mut_data<T>()[0] = static_cast<T>(total / static_cast<double>(n));
  });
  check_finite(out, "cross_entropy");
  maybe_record("cross_entropy", {logits}, out, [logits, out, labels, n, k]() mutable {
    if (!logits.grad_enabled()) return;
    dispatch_dtype(logits.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T g = out.grad<T>()[0];
      auto pl = logits.data<T>();
      auto gl = logits.mut_grad<T>();
      for (std::int64_t i = 0; i < n; ++i) {
        const T* row = pl.data() + i * k;
        T* grow = gl.data() + i * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        for (std::int64_t j = 0; j < k; ++j) {
          double p = std::exp(static_cast<double>(row[j] - mx)) / sum;
          if (j == labels[static_cast<std::size_t>(i)]) p -= 1.0;
          grow[j] += static_cast<T>(static_cast<double>(g) * p / static_cast<double>(n));
        }
      }
    });
  });
  return out;
}

}  // namespace nlcnn
