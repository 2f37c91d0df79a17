#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "nlcnn/tensor.hpp"

namespace nlcnn::nonlocal {

// Aggregation axis of the non-local operation, over a [N,C,H,W] feature map
// (H = frequency bins, W = time frames):
//   TimeFrequency - every output position attends to all (h,k) positions.
//   Time          - position (i,j) attends over time k at its own row i.
//   Frequency     - position (i,j) attends over frequency h at its own column j.
//   Frame         - whole frames attend to whole frames; the weight between
//                   frames j and k comes from the flattened C*H frame
//                   embeddings and is shared across frequency rows.
enum class Variant { TimeFrequency, Time, Frequency, Frame };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Weights of one non-local block. theta/phi/g embed the input into c_int
// channels, z projects the aggregate back to c_in; all four are 1x1
// convolutions without bias. z_w starts at zero so a freshly inserted block
// is exactly the identity.
struct BlockParams {
  Tensor theta_w;  // [c_int, c_in, 1, 1]
  Tensor phi_w;    // [c_int, c_in, 1, 1]
  Tensor g_w;      // [c_int, c_in, 1, 1]
  Tensor z_w;      // [c_in, c_int, 1, 1], zero-initialized
  Variant variant = Variant::Time;
  std::int64_t c_in = 0;
  std::int64_t c_int = 0;

  static BlockParams init(std::int64_t c_in, std::int64_t c_int, Variant variant,
                          std::mt19937_64& theta_rng, std::mt19937_64& phi_rng,
                          std::mt19937_64& g_rng, DType dt);
  std::int64_t parameter_count() const { return 4 * c_in * c_int; }
};

// Softmax-normalized attention from the embedded-Gaussian pairwise function
// f = exp(theta^T phi), normalized over the variant's aggregation axis.
// Input embeddings are [N, c_int, H, W]; the result shape depends on the
// variant:
//   TimeFrequency: [N, H*W, H*W]   Time: [N, H, W, W]
//   Frequency:     [N, W, H, H]    Frame: [N, W, W]
// Every row (last axis) sums to 1.
Tensor affinity(Tensor theta_x, Tensor phi_x, Variant variant);

// Full block: z = conv1x1(y, z_w) + x, where y is the attention-weighted
// aggregate of g(x). Output shape equals input shape. Differentiable.
Tensor forward(const BlockParams& params, Tensor x);

// Same computation with explicit nested loops straight off the defining
// summations, one position at a time. Quadratic in positions; for small
// inputs and equivalence checks only.
Tensor oracle(const BlockParams& params, Tensor x);

// The normalized weights `forward` would use on x (diagnostic; same shapes
// as affinity).
Tensor attention_matrix(const BlockParams& params, Tensor x);

}  // namespace nlcnn::nonlocal
