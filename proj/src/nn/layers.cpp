#include "drdm/nn/layers.hpp"

#include <cmath>

#include "drdm/core/error.hpp"

namespace drdm::nn {

Linear::Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng)
    : in(in_features), out(out_features) {
  const Real std = std::sqrt(2.0 / static_cast<Real>(in_features));
  w = Tensor::randn({out_features, in_features}, rng, std, 0.0, true);
  b = Tensor::zeros({out_features}, true);
}

void Linear::collect(const std::string& prefix, ParamList& out_params) const {
  add_param(out_params, prefix + ".w", w);
  add_param(out_params, prefix + ".b", b);
}

Conv2d::Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride,
               int pad, Rng& rng)
    : stride(stride), pad(pad) {
  const Real fan_in = static_cast<Real>(in_ch * kernel * kernel);
  const Real std = std::sqrt(2.0 / fan_in);
  w = Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, std, 0.0, true);
  b = Tensor::zeros({out_ch}, true);
}

void Conv2d::collect(const std::string& prefix, ParamList& out_params) const {
  add_param(out_params, prefix + ".w", w);
  add_param(out_params, prefix + ".b", b);
}

GroupNorm::GroupNorm(std::int64_t channels, int groups) : groups(groups) {
  check(channels % groups == 0, "GroupNorm: channels not divisible by groups");
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
}

Tensor GroupNorm::forward(const Tensor& x) const {
  check(x.ndim() == 4, "GroupNorm: input must be (B,C,H,W)");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t G = groups, M = (C / G) * H * W;
  Tensor g = reshape(x, {B * G, M});
  Tensor mu = mean_axis(g, 1, true);
  Tensor centered = sub(g, mu);
  Tensor var = mean_axis(square(centered), 1, true);
  Tensor normed = divide(centered, sqrt_op(add_scalar(var, eps)));
  Tensor y = reshape(normed, {B, C, H, W});
  return add(mul(y, reshape(gamma, {1, C, 1, 1})),
             reshape(beta, {1, C, 1, 1}));
}

void GroupNorm::collect(const std::string& prefix,
                        ParamList& out_params) const {
  add_param(out_params, prefix + ".gamma", gamma);
  add_param(out_params, prefix + ".beta", beta);
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

void SgdOptimizer::add_group(const ParamList& params, Real lr) {
  for (const auto& p : params) {
    if (!p.trainable) continue;
    entries_.push_back(
        {p.tensor, lr,
         std::vector<Real>(static_cast<std::size_t>(p.tensor.numel()), 0.0)});
  }
}

void SgdOptimizer::step() {
  for (auto& e : entries_) {
    const auto& g = e.t.grad();
    if (g.empty()) continue;  // parameter not reached by any backward pass
    auto& v = e.t.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      e.velocity[i] = momentum_ * e.velocity[i] + g[i];
      v[i] -= e.lr * e.velocity[i];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& e : entries_) e.t.zero_grad();
}

}  // namespace drdm::nn
