#pragma once

// Central finite-difference verification of backward rules.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "dyntex/error.hpp"
#include "dyntex/nn/autograd.hpp"
#include "dyntex/nn/ops.hpp"
#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

struct GradCheckOptions {
  double epsilon = 1e-6;
  /// Above this many input coordinates a seeded random subset is checked.
  std::size_t max_coordinates = 10000;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, |a - n| / max(|a|, |n|, floor).
  double floor = 1e-2;
};

/// Reduces a tensor to a scalar with fixed pseudo-random weights in [-1, 1],
/// so every output coordinate contributes to the checked gradient.
template <typename T>
Tensor<T> probe_loss(const Tensor<T>& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> w(out.numel());
  for (auto& v : w) v = static_cast<T>(u(rng));
  return sum(mul(out, Tensor<T>::from(out.shape(), std::move(w))));
}

namespace detail {

template <typename T, typename U>
std::vector<Tensor<T>> cast_inputs(const std::vector<Tensor<U>>& in, bool requires_grad) {
  std::vector<Tensor<T>> out;
  out.reserve(in.size());
  for (const auto& t : in) {
    std::vector<T> v(t.values().begin(), t.values().end());
    out.push_back(Tensor<T>::from(t.shape(), std::move(v), requires_grad));
  }
  return out;
}

inline std::vector<std::pair<std::size_t, std::size_t>> pick_coordinates(const std::vector<std::size_t>& sizes,
                                                                        const GradCheckOptions& opt) {
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t t = 0; t < sizes.size(); ++t)
    for (std::size_t i = 0; i < sizes[t]; ++i) all.emplace_back(t, i);
  if (all.size() > opt.max_coordinates) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(opt.max_coordinates);
  }
  return all;
}

}  // namespace detail

/// Max relative error between the analytic gradient of `graph` (computed in
/// precision A) and central differences evaluated in double precision.
/// `graph` maps a vector of input tensors to a scalar tensor and must be
/// callable for both Tensor<A> and Tensor<double> inputs.
template <typename A, typename Graph>
double grad_check_as(Graph&& graph, const std::vector<Tensor<double>>& inputs, const GradCheckOptions& opt = {}) {
  if (!(opt.epsilon > 1e-8 && opt.epsilon < 1e-2))
    throw Error(Errc::InvalidArgument, "grad_check epsilon must lie in (1e-8, 1e-2)");
  auto leaves = detail::cast_inputs<A>(inputs, true);
  Tensor<A> loss = graph(leaves);
  backward(loss);

  std::vector<std::size_t> sizes;
  for (const auto& t : inputs) sizes.push_back(t.numel());
  double worst = 0.0;
  for (const auto& [t, i] : detail::pick_coordinates(sizes, opt)) {
    auto probe = detail::cast_inputs<double>(inputs, false);
    const double x0 = probe[t][i];
    probe[t].mutable_values()[i] = x0 + opt.epsilon;
    const double fp = graph(probe).item();
    probe[t].mutable_values()[i] = x0 - opt.epsilon;
    const double fm = graph(probe).item();
    const double numeric = (fp - fm) / (2.0 * opt.epsilon);
    const double analytic = leaves[t].has_grad() ? static_cast<double>(leaves[t].grad()[i]) : 0.0;
    const double denom = std::max({std::abs(numeric), std::abs(analytic), opt.floor});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

/// 64-bit analytic vs 64-bit numeric.
template <typename Graph>
double grad_check(Graph&& graph, const std::vector<Tensor<double>>& inputs, const GradCheckOptions& opt = {}) {
  return grad_check_as<double>(std::forward<Graph>(graph), inputs, opt);
}

}  // namespace dyntex::nn
