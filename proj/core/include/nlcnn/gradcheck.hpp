#pragma once

#include <functional>

#include "nlcnn/tensor.hpp"

namespace nlcnn {

// Verifies analytic gradients against central finite differences.
//
// graph_builder must map the input tensor to a scalar loss and be pure in
// value (repeated calls on equal inputs give equal outputs). The analytic
// gradient is taken from one taped backward pass; the numeric one from
// (f(x+h) - f(x-h)) / 2h per coordinate. Returns
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
//
// Use float64 inputs; float32 has too little headroom for the default step.
double check_gradients(const std::function<Tensor(const Tensor&)>& graph_builder, Tensor input,
                       double step = 1e-5);

}  // namespace nlcnn
