#pragma once

#include <string>
#include <vector>

#include "drdm/core/tensor.hpp"

namespace drdm::nn {

/// A named leaf tensor plus its trainability flag. Modules hand these out so
/// optimizers and checkpoints can address parameters uniformly.
struct ParamRef {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParamList = std::vector<ParamRef>;

inline void add_param(ParamList& out, const std::string& name,
                      const Tensor& t, bool trainable = true) {
  out.push_back({name, t, trainable});
}

struct Linear {
  Tensor w;  // (out, in)
  Tensor b;  // (out)
  std::int64_t in = 0, out = 0;

  Linear() = default;
  Linear(std::int64_t in_features, std::int64_t out_features, Rng& rng);

  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamList& out_params) const;
};

struct Conv2d {
  Tensor w;  // (O, C, kh, kw)
  Tensor b;  // (O)
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(std::int64_t in_ch, std::int64_t out_ch, int kernel, int stride,
         int pad, Rng& rng);

  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, ParamList& out_params) const;
};

/// Per-sample group normalization (no running statistics, so train and eval
/// behave identically).
struct GroupNorm {
  Tensor gamma;  // (C)
  Tensor beta;   // (C)
  int groups = 1;
  Real eps = 1e-5;

  GroupNorm() = default;
  GroupNorm(std::int64_t channels, int groups);

  Tensor forward(const Tensor& x) const;  // (B,C,H,W)
  void collect(const std::string& prefix, ParamList& out_params) const;
};

/// Zero out gradients of every parameter in the list.
void zero_grads(const ParamList& params);

/// SGD with momentum and per-parameter-group learning rates
/// (v = mu * v + g; theta -= lr * v). Frozen parameters are never touched.
class SgdOptimizer {
 public:
  SgdOptimizer(Real momentum = 0.9) : momentum_(momentum) {}
  void add_group(const ParamList& params, Real lr);
  void step();
  void zero_grad();

 private:
  struct Entry {
    Tensor t;
    Real lr;
    std::vector<Real> velocity;
  };
  Real momentum_;
  std::vector<Entry> entries_;
};

}  // namespace drdm::nn
