#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "nlcnn/tensor.hpp"

namespace nlcnn {

// Differentiable operations over Tensors. Every op allocates a fresh output
// buffer, verifies the result is finite, and records a gradient rule on the
// active Tape when one of its inputs participates in gradients.
//
// There is no silent broadcasting: elementwise ops demand identical shapes,
// and the only "broadcast-like" ops are the explicit per-channel /
// per-row-vector / scalar-parameter forms below.

// ---- elementwise ----
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor x, double c);  // constant factor
Tensor relu(Tensor x);
Tensor tanh_op(Tensor x);

// ---- linear algebra ----
// [m,k] x [k,n] -> [m,n]
Tensor matmul(Tensor a, Tensor b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(Tensor a, Tensor b);
// 2-D convenience: permute({1,0}).
Tensor transpose(Tensor x);

// ---- convolution ----
// x: [N,C,H,W], w: [O,C,kh,kw]; zero padding; cross-correlation semantics.
// H' = floor((H+2ph-kh)/sh)+1, W' analogous.
Tensor conv2d(Tensor x, Tensor w, std::pair<int, int> stride,
              std::pair<int, int> padding);

// ---- normalization ----
// Max-subtracted softmax along `axis`; slices sum to 1.
Tensor softmax(Tensor x, int axis);

enum class BnMode { Train, Eval };

// Running statistics of one batchnorm layer. Not parameters: excluded from
// parameter counts and never grad-enabled, but serialized with the model.
struct BnState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  static BnState make(std::int64_t channels, DType dt);
};

// x: [N,C,H,W]; gamma/beta: [C]. Train mode normalizes by batch statistics
// (biased variance) and folds them into the running estimates with
// `momentum` (running_var gets the unbiased estimate, n/(n-1)).
// Eval mode normalizes by the running statistics.
Tensor batchnorm2d(Tensor x, Tensor gamma, Tensor beta, BnState& state,
                   BnMode mode, double momentum = 0.1, double eps = 1e-5);

// ---- reductions ----
Tensor mean_axis(Tensor x, int axis);  // removes the axis
Tensor sum_all(Tensor x);              // -> [1]
Tensor mean_all(Tensor x);             // -> [1]

// Per-slice x / ||x||_2 along `axis`; a zero-norm slice is an error.
Tensor l2_normalize(Tensor x, int axis);

// ---- shape ----
Tensor permute(Tensor x, const std::vector<int>& perm);
Tensor reshape(Tensor x, Shape new_shape);
Tensor slice(Tensor x, int axis, std::int64_t start, std::int64_t len);

// ---- parameterized broadcasts ----
// x: [m,k] + v: [k] added to every row.
Tensor add_rowvec(Tensor x, Tensor v);
// y = s * x and y = x + s for a learnable one-element tensor s.
Tensor mul_scalar_t(Tensor x, Tensor s);
Tensor add_scalar_t(Tensor x, Tensor s);

// ---- classification loss ----
// logits: [N,K], labels[i] in [0,K). Mean over rows of
// logsumexp(row) - row[label]; numerically stable fused form.
Tensor cross_entropy(Tensor logits, const std::vector<std::int64_t>& labels);

}  // namespace nlcnn
