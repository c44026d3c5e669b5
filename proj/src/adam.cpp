#include "hcf/adam.hpp"

#include <cmath>

namespace hcf {

AdamState AdamState::for_parameters(std::span<const NamedTensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.numel(), 0.0);
    s.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamHyper& hyper) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ShapeError("adam_step: optimizer state does not match the parameter list");
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].tensor.numel())
      throw ShapeError("adam_step: moment buffer size mismatch for " + params[i].name);
    grads.push_back(params[i].tensor.grad());
    for (double g : grads.back())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name + "'");
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i].tensor;
    auto w = param.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
      v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      w[k] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

}  // namespace hcf
