#include "hcf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace hcf {

namespace {

struct Evaluation {
  double value;
  std::uint64_t branches;
};

Evaluation evaluate(const std::function<Tensor()>& loss) {
  NoGradGuard guard;
  BranchTrace trace;
  const Tensor out = loss();
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: loss is not finite");
  return {v, trace.digest()};
}

constexpr double kMinEps = 1e-6;

}  // namespace

GradCheckReport finite_difference_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                                        const GradCheckOptions& options) {
  if (!(options.eps >= 1e-6 && options.eps <= 1e-3))
    throw ContractError("finite_difference_check: eps must lie in [1e-6, 1e-3]");
  if (!(options.denominator_floor > 0.0)) throw ContractError("finite_difference_check: floor must be positive");

  std::vector<bool> previous(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    previous[i] = leaves[i].requires_grad();
    leaves[i].set_requires_grad(true);
    leaves[i].zero_grad();
  }
  {
    const Tensor out = loss();
    if (!std::isfinite(out.item())) throw NumericError("finite_difference_check: loss is not finite");
    backward(out);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l].numel(); ++i) coords.emplace_back(l, i);
  if (options.max_coordinates > 0 && options.max_coordinates < coords.size()) {
    std::mt19937_64 rng(options.seed);
    // Partial Fisher-Yates with explicit index arithmetic for portability.
    for (std::size_t k = 0; k < options.max_coordinates; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng() % (coords.size() - k));
      std::swap(coords[k], coords[j]);
    }
    coords.resize(options.max_coordinates);
  }

  const std::uint64_t base_branches = evaluate(loss).branches;
  GradCheckReport report;
  for (auto [l, i] : coords) {
    auto data = leaves[l].mutable_data();
    const double saved = data[i];
    double eps = options.eps;
    double numeric = 0.0;
    bool smooth = false;
    while (true) {
      data[i] = saved + eps;
      const Evaluation plus = evaluate(loss);
      data[i] = saved - eps;
      const Evaluation minus = evaluate(loss);
      data[i] = saved;
      numeric = (plus.value - minus.value) / (2.0 * eps);
      smooth = plus.branches == base_branches && minus.branches == base_branches;
      if (smooth || !options.refine_at_kinks || eps <= kMinEps * 1.0000001) break;
      eps = std::max(eps / 10.0, kMinEps);
    }
    if (!smooth && options.refine_at_kinks) {
      ++report.nonsmooth;
      continue;
    }
    ++report.coordinates;
    const double a = analytic[l][i];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), options.denominator_floor);
    if (rel > report.max_relative_error || report.coordinates == 1) {
      report.max_relative_error = rel;
      report.worst_leaf = l;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }

  for (std::size_t i = 0; i < leaves.size(); ++i) {
    leaves[i].zero_grad();
    leaves[i].set_requires_grad(previous[i]);
  }
  return report;
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  Tensor leaves[] = {leaf};
  return finite_difference_check([&] { return f(leaf); }, leaves, {.eps = eps}).max_relative_error;
}

}  // namespace hcf
