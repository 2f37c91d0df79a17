#include "nlcnn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "nlcnn/ops.hpp"

namespace nlcnn {

double check_gradients(const std::function<Tensor(const Tensor&)>& graph_builder, Tensor input,
                       double step) {
  if (input.dtype() != DType::F64) {
    throw ContractError("check_gradients: input must be float64");
  }
  input.set_grad_enabled(true);
  input.zero_grad();

  std::vector<double> analytic(static_cast<std::size_t>(input.numel()));
  {
    Tape tape;
    Tensor loss = graph_builder(input);
    if (loss.numel() != 1) throw ContractError("check_gradients: builder must return a scalar");
    tape.backward(loss);
    auto g = input.grad<double>();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  const auto eval = [&](const Tensor& x) { return graph_builder(x).item(); };

  double max_rel = 0.0;
  Tensor probe = input.clone();
  auto pd = probe.mut_data<double>();
  auto xd = input.data<double>();
  for (std::int64_t i = 0; i < input.numel(); ++i) {
    const double x0 = xd[static_cast<std::size_t>(i)];
    pd[static_cast<std::size_t>(i)] = x0 + step;
    const double fp = eval(probe);
    pd[static_cast<std::size_t>(i)] = x0 - step;
    const double fm = eval(probe);
    pd[static_cast<std::size_t>(i)] = x0;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace nlcnn
