#include "nlcnn/nonlocal.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "nlcnn/error.hpp"
#include "nlcnn/ops.hpp"

namespace nlcnn::nonlocal {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::TimeFrequency: return "time-frequency";
    case Variant::Time: return "time";
    case Variant::Frequency: return "frequency";
    case Variant::Frame: return "frame";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "time-frequency" || name == "tf") return Variant::TimeFrequency;
  if (name == "time") return Variant::Time;
  if (name == "frequency" || name == "freq") return Variant::Frequency;
  if (name == "frame") return Variant::Frame;
  throw ConfigError("unknown non-local variant '" + name +
                    "' (expected time-frequency|time|frequency|frame)");
}

BlockParams BlockParams::init(std::int64_t c_in, std::int64_t c_int, Variant variant,
                              std::mt19937_64& theta_rng, std::mt19937_64& phi_rng,
                              std::mt19937_64& g_rng, DType dt) {
  BlockParams p;
  p.variant = variant;
  p.c_in = c_in;
  p.c_int = c_int;
  const double std = std::sqrt(2.0 / static_cast<double>(c_in));  // fan-in of a 1x1 conv
  p.theta_w = Tensor::randn({c_int, c_in, 1, 1}, dt, theta_rng, std).set_grad_enabled(true);
  p.phi_w = Tensor::randn({c_int, c_in, 1, 1}, dt, phi_rng, std).set_grad_enabled(true);
  p.g_w = Tensor::randn({c_int, c_in, 1, 1}, dt, g_rng, std).set_grad_enabled(true);
  p.z_w = Tensor::zeros({c_in, c_int, 1, 1}, dt).set_grad_enabled(true);
  return p;
}

Tensor affinity(Tensor theta_x, Tensor phi_x, Variant variant) {
  if (theta_x.rank() != 4 || phi_x.rank() != 4 || theta_x.shape() != phi_x.shape()) {
    throw ShapeError("affinity: embeddings must be matching [N,C,H,W] tensors, got " +
                     shape_str(theta_x.shape()) + " and " + shape_str(phi_x.shape()));
  }
  const std::int64_t n = theta_x.dim(0), c = theta_x.dim(1), h = theta_x.dim(2),
                     w = theta_x.dim(3);
  switch (variant) {
    case Variant::TimeFrequency: {
      Tensor q = permute(reshape(theta_x, {n, c, h * w}), {0, 2, 1});  // [N, HW, C]
      Tensor k = reshape(phi_x, {n, c, h * w});                       // [N, C, HW]
      return softmax(bmm(q, k), 2);                                   // [N, HW, HW]
    }
    case Variant::Time: {
      Tensor q = reshape(permute(theta_x, {0, 2, 3, 1}), {n * h, w, c});  // [NH, W, C]
      Tensor k = reshape(permute(phi_x, {0, 2, 1, 3}), {n * h, c, w});    // [NH, C, W]
      return reshape(softmax(bmm(q, k), 2), {n, h, w, w});
    }
    case Variant::Frequency: {
      Tensor q = reshape(permute(theta_x, {0, 3, 2, 1}), {n * w, h, c});  // [NW, H, C]
      Tensor k = reshape(permute(phi_x, {0, 3, 1, 2}), {n * w, c, h});    // [NW, C, H]
      return reshape(softmax(bmm(q, k), 2), {n, w, h, h});
    }
    case Variant::Frame: {
      // Frames embed as flattened C*H slabs; one weight matrix per sample.
      Tensor q = reshape(permute(theta_x, {0, 3, 1, 2}), {n, w, c * h});  // [N, W, CH]
      Tensor k = reshape(phi_x, {n, c * h, w});                          // [N, CH, W]
      return softmax(bmm(q, k), 2);                                      // [N, W, W]
    }
  }
  throw ContractError("affinity: unreachable");
}

Tensor forward(const BlockParams& params, Tensor x) {
  if (x.rank() != 4) throw ShapeError("nonlocal::forward: input must be [N,C,H,W]");
  if (x.dim(1) != params.c_in) {
    throw ShapeError("nonlocal::forward: input has " + std::to_string(x.dim(1)) +
                     " channels, block expects " + std::to_string(params.c_in));
  }
  const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t c = params.c_int;

  Tensor theta_x = conv2d(x, params.theta_w, {1, 1}, {0, 0});
  Tensor phi_x = conv2d(x, params.phi_w, {1, 1}, {0, 0});
  Tensor g_x = conv2d(x, params.g_w, {1, 1}, {0, 0});
  Tensor attn = affinity(theta_x, phi_x, params.variant);

  Tensor y;
  switch (params.variant) {
    case Variant::TimeFrequency: {
      Tensor g2 = permute(reshape(g_x, {n, c, h * w}), {0, 2, 1});  // [N, HW, C]
      Tensor agg = bmm(attn, g2);                                   // [N, HW, C]
      y = reshape(permute(agg, {0, 2, 1}), {n, c, h, w});
      break;
    }
    case Variant::Time: {
      Tensor g2 = reshape(permute(g_x, {0, 2, 3, 1}), {n * h, w, c});  // [NH, W, C]
      Tensor agg = bmm(reshape(attn, {n * h, w, w}), g2);              // [NH, W, C]
      y = permute(reshape(agg, {n, h, w, c}), {0, 3, 1, 2});
      break;
    }
    case Variant::Frequency: {
      Tensor g2 = reshape(permute(g_x, {0, 3, 2, 1}), {n * w, h, c});  // [NW, H, C]
      Tensor agg = bmm(reshape(attn, {n * w, h, h}), g2);              // [NW, H, C]
      y = permute(reshape(agg, {n, w, h, c}), {0, 3, 2, 1});
      break;
    }
    case Variant::Frame: {
      Tensor g2 = reshape(g_x, {n, c * h, w});       // [N, CH, W]
      Tensor agg = bmm(g2, permute(attn, {0, 2, 1}));  // [N, CH, W]
      y = reshape(agg, {n, c, h, w});
      break;
    }
  }
  return add(conv2d(y, params.z_w, {1, 1}, {0, 0}), x);
}

Tensor attention_matrix(const BlockParams& params, Tensor x) {
  Tensor theta_x = conv2d(x, params.theta_w, {1, 1}, {0, 0});
  Tensor phi_x = conv2d(x, params.phi_w, {1, 1}, {0, 0});
  return affinity(theta_x, phi_x, params.variant);
}

// ------------------------------------------------------------------- oracle

namespace {

// 1x1 convolution as an explicit loop: out[n,o,i,j] = sum_c w[o,c] x[n,c,i,j].
std::vector<double> embed_1x1(const std::vector<double>& x, const std::vector<double>& w,
                              std::int64_t n, std::int64_t c_in, std::int64_t c_out,
                              std::int64_t hw) {
  std::vector<double> out(static_cast<std::size_t>(n * c_out * hw), 0.0);
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t o = 0; o < c_out; ++o) {
      for (std::int64_t c = 0; c < c_in; ++c) {
        const double wv = w[static_cast<std::size_t>(o * c_in + c)];
        const double* src = x.data() + (b * c_in + c) * hw;
        double* dst = out.data() + (b * c_out + o) * hw;
        for (std::int64_t p = 0; p < hw; ++p) dst[p] += wv * src[p];
      }
    }
  }
  return out;
}

}  // namespace

Tensor oracle(const BlockParams& params, Tensor x) {
  if (x.rank() != 4 || x.dim(1) != params.c_in) {
    throw ShapeError("nonlocal::oracle: input/channel mismatch");
  }
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cint = params.c_int, hw = h * w;

  // Work in double regardless of storage dtype.
  Tensor x64 = x.dtype() == DType::F64 ? x : x.astype(DType::F64);
  Tensor tw = params.theta_w.dtype() == DType::F64 ? params.theta_w : params.theta_w.astype(DType::F64);
  Tensor pw = params.phi_w.dtype() == DType::F64 ? params.phi_w : params.phi_w.astype(DType::F64);
  Tensor gw = params.g_w.dtype() == DType::F64 ? params.g_w : params.g_w.astype(DType::F64);
  Tensor zw = params.z_w.dtype() == DType::F64 ? params.z_w : params.z_w.astype(DType::F64);

  std::vector<double> xs(x64.data<double>().begin(), x64.data<double>().end());
  std::vector<double> tws(tw.data<double>().begin(), tw.data<double>().end());
  std::vector<double> pws(pw.data<double>().begin(), pw.data<double>().end());
  std::vector<double> gws(gw.data<double>().begin(), gw.data<double>().end());
  std::vector<double> zws(zw.data<double>().begin(), zw.data<double>().end());

  const std::vector<double> th = embed_1x1(xs, tws, n, cin, cint, hw);
  const std::vector<double> ph = embed_1x1(xs, pws, n, cin, cint, hw);
  const std::vector<double> gg = embed_1x1(xs, gws, n, cin, cint, hw);

  auto emb = [&](const std::vector<double>& e, std::int64_t b, std::int64_t c, std::int64_t i,
                 std::int64_t j) { return e[static_cast<std::size_t>(((b * cint + c) * h + i) * w + j)]; };

  // Pairwise dot of the pixel embeddings at (i,j) and (hh,kk).
  auto pixel_dot = [&](std::int64_t b, std::int64_t i, std::int64_t j, std::int64_t hh,
                       std::int64_t kk) {
    double d = 0.0;
    for (std::int64_t c = 0; c < cint; ++c) d += emb(th, b, c, i, j) * emb(ph, b, c, hh, kk);
    return d;
  };

  std::vector<double> y(static_cast<std::size_t>(n * cint * hw), 0.0);
  auto yref = [&](std::int64_t b, std::int64_t c, std::int64_t i, std::int64_t j) -> double& {
    return y[static_cast<std::size_t>(((b * cint + c) * h + i) * w + j)];
  };

  for (std::int64_t b = 0; b < n; ++b) {
    switch (params.variant) {
      case Variant::TimeFrequency: {
        std::vector<double> f(static_cast<std::size_t>(hw));
        for (std::int64_t i = 0; i < h; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            // f over all positions, max-shifted (the shift cancels in f/C).
            double mx = -1e300;
            for (std::int64_t hh = 0; hh < h; ++hh)
              for (std::int64_t kk = 0; kk < w; ++kk)
                mx = std::max(mx, pixel_dot(b, i, j, hh, kk));
            double csum = 0.0;
            for (std::int64_t hh = 0; hh < h; ++hh) {
              for (std::int64_t kk = 0; kk < w; ++kk) {
                const double e = std::exp(pixel_dot(b, i, j, hh, kk) - mx);
                f[static_cast<std::size_t>(hh * w + kk)] = e;
                csum += e;
              }
            }
            for (std::int64_t c = 0; c < cint; ++c) {
              double acc = 0.0;
              for (std::int64_t hh = 0; hh < h; ++hh)
                for (std::int64_t kk = 0; kk < w; ++kk)
                  acc += f[static_cast<std::size_t>(hh * w + kk)] * emb(gg, b, c, hh, kk);
              yref(b, c, i, j) = acc / csum;
            }
          }
        }
        break;
      }
      case Variant::Time: {
        std::vector<double> f(static_cast<std::size_t>(w));
        for (std::int64_t i = 0; i < h; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            double mx = -1e300;
            for (std::int64_t kk = 0; kk < w; ++kk) mx = std::max(mx, pixel_dot(b, i, j, i, kk));
            double csum = 0.0;
            for (std::int64_t kk = 0; kk < w; ++kk) {
              const double e = std::exp(pixel_dot(b, i, j, i, kk) - mx);
              f[static_cast<std::size_t>(kk)] = e;
              csum += e;
            }
            for (std::int64_t c = 0; c < cint; ++c) {
              double acc = 0.0;
              for (std::int64_t kk = 0; kk < w; ++kk) acc += f[static_cast<std::size_t>(kk)] * emb(gg, b, c, i, kk);
              yref(b, c, i, j) = acc / csum;
            }
          }
        }
        break;
      }
      case Variant::Frequency: {
        std::vector<double> f(static_cast<std::size_t>(h));
        for (std::int64_t i = 0; i < h; ++i) {
          for (std::int64_t j = 0; j < w; ++j) {
            double mx = -1e300;
            for (std::int64_t hh = 0; hh < h; ++hh) mx = std::max(mx, pixel_dot(b, i, j, hh, j));
            double csum = 0.0;
            for (std::int64_t hh = 0; hh < h; ++hh) {
              const double e = std::exp(pixel_dot(b, i, j, hh, j) - mx);
              f[static_cast<std::size_t>(hh)] = e;
              csum += e;
            }
            for (std::int64_t c = 0; c < cint; ++c) {
              double acc = 0.0;
              for (std::int64_t hh = 0; hh < h; ++hh) acc += f[static_cast<std::size_t>(hh)] * emb(gg, b, c, hh, j);
              yref(b, c, i, j) = acc / csum;
            }
          }
        }
        break;
      }
      case Variant::Frame: {
        // Whole-frame embeddings: dot over every (c, i) of frames j and k.
        auto frame_dot = [&](std::int64_t j, std::int64_t kk) {
          double d = 0.0;
          for (std::int64_t c = 0; c < cint; ++c)
            for (std::int64_t i = 0; i < h; ++i) d += emb(th, b, c, i, j) * emb(ph, b, c, i, kk);
          return d;
        };
        std::vector<double> f(static_cast<std::size_t>(w));
        for (std::int64_t j = 0; j < w; ++j) {
          double mx = -1e300;
          for (std::int64_t kk = 0; kk < w; ++kk) mx = std::max(mx, frame_dot(j, kk));
          double csum = 0.0;
          for (std::int64_t kk = 0; kk < w; ++kk) {
            const double e = std::exp(frame_dot(j, kk) - mx);
            f[static_cast<std::size_t>(kk)] = e;
            csum += e;
          }
          // The same weights apply to every frequency row i.
          for (std::int64_t c = 0; c < cint; ++c) {
            for (std::int64_t i = 0; i < h; ++i) {
              double acc = 0.0;
              for (std::int64_t kk = 0; kk < w; ++kk) acc += f[static_cast<std::size_t>(kk)] * emb(gg, b, c, i, kk);
              yref(b, c, i, j) = acc / csum;
            }
          }
        }
        break;
      }
    }
  }

  // z = W_z y + x
  const std::vector<double> zy = embed_1x1(y, zws, n, cint, cin, hw);
  Tensor out = make_tensor(x.shape(), DType::F64);
  auto po = out.mut_data<double>();
  for (std::int64_t i = 0; i < x64.numel(); ++i) {
    po[static_cast<std::size_t>(i)] = zy[static_cast<std::size_t>(i)] + xs[static_cast<std::size_t>(i)];
  }
  return x.dtype() == DType::F64 ? out : out.astype(x.dtype());
}

}  // namespace nlcnn::nonlocal

