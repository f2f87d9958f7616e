// SPDX-License-Identifier: Apache-2.0
//
// Per-position linear map with optional normalization and activation. A 1x1
// 2D convolution over HxWxC (or a 1D convolution over NxC) is exactly this
// map applied to the trailing feature axis, so Conv2D_BN_ReLU / Linear_LN_ReLU
// style blocks are all expressed through linear_block().

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srm/rng.hpp"
#include "srm/tensor.hpp"

namespace srm {

enum class Norm { none, batch, layer };
enum class Act { none, relu };
enum class Mode { train, eval };

constexpr double kNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  // Present when a normalization is configured.
  Tensor gamma;  // [out] scale
  Tensor beta;   // [out] offset
  // Batch-norm running state (population statistics), updated in train mode.
  Tensor running_mean;  // [out]
  Tensor running_var;   // [out]
  std::int64_t bn_updates = 0;

  std::int64_t in() const { return weight.dim(1); }
  std::int64_t out() const { return weight.dim(0); }
};

// Weights U(-1/sqrt(in), 1/sqrt(in)), biases zero, unit scale / zero offset.
// A bias ahead of batch norm is canceled exactly by the mean subtraction
// (its gradient is identically zero), so BN blocks keep it frozen at zero
// and the offset lives in beta.
inline LinearParams make_linear(std::int64_t in, std::int64_t out, Norm norm, Rng& rng) {
  LinearParams p;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  p.weight = rand_uniform({out, in}, -bound, bound, rng, /*requires_grad=*/true);
  p.bias = Tensor::zeros({out}, /*requires_grad=*/norm != Norm::batch);
  if (norm != Norm::none) {
    p.gamma = Tensor::full({out}, 1.0, /*requires_grad=*/true);
    p.beta = Tensor::zeros({out}, /*requires_grad=*/true);
  }
  if (norm == Norm::batch) {
    p.running_mean = Tensor::zeros({out});
    p.running_var = Tensor::full({out}, 1.0);
    p.bn_updates = 0;
  }
  return p;
}

namespace detail {

// Normalize z [P,out] with per-axis statistics; `axis0` picks batch (stats
// over positions, per channel) vs layer (stats over channels, per position).
inline Tensor normalize(const Tensor& z, bool stats_over_positions, const Tensor& gamma,
                        const Tensor& beta) {
  const std::int64_t p = z.dim(0), c = z.dim(1);
  Tensor mean, var;
  Shape stat_bshape;
  if (stats_over_positions) {
    mean = avg_pool(z, {0});  // [c]
    stat_bshape = {1, c};
  } else {
    mean = avg_pool(z, {1});  // [p]
    stat_bshape = {p, 1};
  }
  const Tensor mean_b = broadcast_to(reshape(mean, stat_bshape), z.shape());
  const Tensor centered = sub(z, mean_b);
  const Tensor var_small = stats_over_positions ? avg_pool(mul(centered, centered), {0})
                                                : avg_pool(mul(centered, centered), {1});
  const Tensor denom = broadcast_to(reshape(srm::sqrt(add_scalar(var_small, kNormEps)), stat_bshape),
                                    z.shape());
  const Tensor normed = div(centered, denom);
  const Tensor g = broadcast_to(reshape(gamma, {1, c}), z.shape());
  const Tensor b = broadcast_to(reshape(beta, {1, c}), z.shape());
  return add(mul(normed, g), b);
}

}  // namespace detail

// y = act(norm(x . W^T + b)) applied to the trailing feature axis of x.
// Batch norm in train mode uses this call's own population statistics over
// all non-channel positions and folds them into the running state with
// momentum 0.1; eval mode reads the running state.
inline Tensor linear_block(const Tensor& x, LinearParams& params, Norm norm, Act act, Mode mode) {
  if (x.rank() < 2)
    throw ShapeError("linear_block: input must have a leading position axis, got " +
                     shape_str(x.shape()));
  const std::int64_t in = x.dim(x.rank() - 1);
  if (in != params.in())
    throw ShapeError("linear_block: feature axis " + std::to_string(in) +
                     " does not match weight " + shape_str(params.weight.shape()));
  const std::int64_t positions = x.numel() / in;
  const std::int64_t out = params.out();

  const Tensor xf = reshape(x, {positions, in});
  Tensor z = matmul(xf, permute(params.weight, {1, 0}));
  z = add(z, broadcast_to(reshape(params.bias, {1, out}), {positions, out}));

  if (norm == Norm::batch) {
    if (mode == Mode::train) {
      // Population statistics of the pre-normalization activations.
      std::vector<double> mu(static_cast<std::size_t>(out), 0.0),
          var(static_cast<std::size_t>(out), 0.0);
      for (std::int64_t i = 0; i < positions; ++i)
        for (std::int64_t j = 0; j < out; ++j) mu[static_cast<std::size_t>(j)] += z.ptr()[i * out + j];
      for (auto& v : mu) v /= static_cast<double>(positions);
      for (std::int64_t i = 0; i < positions; ++i)
        for (std::int64_t j = 0; j < out; ++j) {
          const double dlt = z.ptr()[i * out + j] - mu[static_cast<std::size_t>(j)];
          var[static_cast<std::size_t>(j)] += dlt * dlt;
        }
      for (auto& v : var) v /= static_cast<double>(positions);
      std::vector<double> rm(static_cast<std::size_t>(out)), rv(static_cast<std::size_t>(out));
      for (std::int64_t j = 0; j < out; ++j) {
        rm[static_cast<std::size_t>(j)] =
            (1.0 - kBatchNormMomentum) * params.running_mean.ptr()[j] +
            kBatchNormMomentum * mu[static_cast<std::size_t>(j)];
        rv[static_cast<std::size_t>(j)] =
            (1.0 - kBatchNormMomentum) * params.running_var.ptr()[j] +
            kBatchNormMomentum * var[static_cast<std::size_t>(j)];
      }
      params.running_mean = Tensor({out}, std::move(rm));
      params.running_var = Tensor({out}, std::move(rv));
      params.bn_updates += 1;
      z = detail::normalize(z, /*stats_over_positions=*/true, params.gamma, params.beta);
    } else {
      if (params.bn_updates == 0)
        throw ValueError("linear_block: eval mode requested before any train-mode call "
                         "initialized batch-norm statistics");
      const Tensor mean_b = broadcast_to(reshape(params.running_mean, {1, out}), z.shape());
      std::vector<double> denom(static_cast<std::size_t>(out));
      for (std::int64_t j = 0; j < out; ++j)
        denom[static_cast<std::size_t>(j)] = std::sqrt(params.running_var.ptr()[j] + kNormEps);
      const Tensor denom_b = broadcast_to(reshape(Tensor({out}, std::move(denom)), {1, out}), z.shape());
      const Tensor normed = div(sub(z, mean_b), denom_b);
      const Tensor g = broadcast_to(reshape(params.gamma, {1, out}), z.shape());
      const Tensor b = broadcast_to(reshape(params.beta, {1, out}), z.shape());
      z = add(mul(normed, g), b);
    }
  } else if (norm == Norm::layer) {
    z = detail::normalize(z, /*stats_over_positions=*/false, params.gamma, params.beta);
  }

  if (act == Act::relu) z = relu(z);

  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(x.rank() - 1)] = out;
  return reshape(z, out_shape);
}

}  // namespace srm
