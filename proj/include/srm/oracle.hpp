// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations and numerical verification tools.
// Everything here is written with scalar loops only -- no batched matmul, no
// permute kernels -- so these paths are independent ground truth for the
// optimized operators. Oracles are deliberately slow; they exist to be
// trusted, not to be fast.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "srm/decoder.hpp"
#include "srm/fusion.hpp"
#include "srm/linear.hpp"
#include "srm/tensor.hpp"

namespace srm::oracle {

// ---------------------------------------------------------------------------
// Finite differences

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). f must be
// pure; non-finite outputs abort.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5) {
  if (eps <= 0.0) throw ValueError("finite_diff_grad: eps must be positive");
  std::vector<double> grad(static_cast<std::size_t>(x.numel()));
  std::vector<double> base(x.data().begin(), x.data().end());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    std::vector<double> hi = base, lo = base;
    hi[static_cast<std::size_t>(i)] += eps;
    lo[static_cast<std::size_t>(i)] -= eps;
    const double fh = f(Tensor(x.shape(), std::move(hi)));
    const double fl = f(Tensor(x.shape(), std::move(lo)));
    if (!std::isfinite(fh) || !std::isfinite(fl))
      throw ValueError("finite_diff_grad: non-finite function value");
    grad[static_cast<std::size_t>(i)] = (fh - fl) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::string op;
  double eps = 1e-5;
  double threshold = 1e-4;
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass = true;

  void note(const std::string& param, double err) {
    entries.push_back({param, err});
    max_rel_err = std::max(max_rel_err, err);
    pass = max_rel_err <= threshold;
  }
};

// How probe coordinates are chosen when an input is too large to sweep:
// `random` draws seeded coordinates; `largest` takes the biggest analytic
// gradient magnitudes. Deep composites need `largest`: a coordinate whose
// true gradient sits below ~|f|*ulp/(2*eps) (about 1e-10 here) carries only
// roundoff in the difference quotient, so comparing it would measure noise,
// not the backward rule.
enum class ProbeMode { random, largest };

// Tape gradients of a fixed random linear functional of f's output vs
// central finite differences, probed on up to `max_coords` coordinates per
// input (all of them when the input is small). f must be pure up to
// batch-norm running statistics, which train-mode outputs do not read.
inline GradCheckReport gradcheck(const std::string& op,
                                 const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 const std::vector<Tensor>& raw_inputs, double eps = 1e-5,
                                 std::uint64_t seed = 0x9c5eed, std::int64_t max_coords = 24,
                                 ProbeMode mode = ProbeMode::random) {
  GradCheckReport report;
  report.op = op;
  report.eps = eps;

  std::vector<Tensor> inputs;
  inputs.reserve(raw_inputs.size());
  for (const auto& in : raw_inputs)
    inputs.emplace_back(in.shape(), std::vector<double>(in.data().begin(), in.data().end()), true);

  Rng rng(Rng::derive(seed, std::hash<std::string>{}(op)));
  const Tensor probe_out = f(inputs);
  const Tensor projection = randn(probe_out.shape(), rng);

  const auto functional = [&](const std::vector<Tensor>& args) {
    const Tensor out = f(args);
    if (out.shape() != projection.shape())
      throw ValueError("gradcheck: output shape changed across evaluations");
    double acc = 0.0;
    for (std::int64_t i = 0; i < out.numel(); ++i) acc += out.ptr()[i] * projection.ptr()[i];
    if (!std::isfinite(acc)) throw ValueError("gradcheck: non-finite functional value");
    return acc;
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    const Tensor out = f(inputs);
    const Tensor loss = sum_all(mul(out, projection));
    Gradients grads = tape.backward(loss);
    for (const auto& in : inputs) analytic.push_back(grads.at(in));
  }

  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    const Tensor& x = inputs[idx];
    std::vector<std::int64_t> coords;
    if (x.numel() <= max_coords) {
      for (std::int64_t i = 0; i < x.numel(); ++i) coords.push_back(i);
    } else if (mode == ProbeMode::random) {
      for (std::int64_t k = 0; k < max_coords; ++k)
        coords.push_back(static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(x.numel())));
    } else {
      std::vector<std::int64_t> order(static_cast<std::size_t>(x.numel()));
      for (std::int64_t i = 0; i < x.numel(); ++i) order[static_cast<std::size_t>(i)] = i;
      const double* g = analytic[idx].ptr();
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(max_coords),
                        order.end(), [g](std::int64_t lhs, std::int64_t rhs) {
                          return std::abs(g[lhs]) > std::abs(g[rhs]);
                        });
      coords.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }
    double worst = 0.0;
    for (const std::int64_t coord : coords) {
      std::vector<double> hi(x.data().begin(), x.data().end());
      std::vector<double> lo = hi;
      hi[static_cast<std::size_t>(coord)] += eps;
      lo[static_cast<std::size_t>(coord)] -= eps;
      std::vector<Tensor> args_hi = inputs, args_lo = inputs;
      args_hi[idx] = Tensor(x.shape(), std::move(hi), true);
      args_lo[idx] = Tensor(x.shape(), std::move(lo), true);
      const double numeric = (functional(args_hi) - functional(args_lo)) / (2.0 * eps);
      worst = std::max(worst, rel_err(analytic[idx].ptr()[coord], numeric));
    }
    report.note("input" + std::to_string(idx), worst);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Loop-only building blocks

inline double o_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Per-position linear + optional norm + activation, scalar loops throughout.
inline Tensor o_linear_block(const Tensor& x, const LinearParams& p, Norm norm, Act act,
                             Mode mode) {
  const std::int64_t in = x.dim(x.rank() - 1);
  const std::int64_t positions = x.numel() / in;
  const std::int64_t out = p.out();
  std::vector<double> z(static_cast<std::size_t>(positions * out));
  for (std::int64_t i = 0; i < positions; ++i)
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = p.bias.ptr()[o];
      for (std::int64_t k = 0; k < in; ++k) acc += x.ptr()[i * in + k] * p.weight.ptr()[o * in + k];
      z[static_cast<std::size_t>(i * out + o)] = acc;
    }

  if (norm == Norm::batch) {
    std::vector<double> mu(static_cast<std::size_t>(out), 0.0), var(static_cast<std::size_t>(out), 0.0);
    if (mode == Mode::train) {
      for (std::int64_t i = 0; i < positions; ++i)
        for (std::int64_t o = 0; o < out; ++o) mu[static_cast<std::size_t>(o)] += z[static_cast<std::size_t>(i * out + o)];
      for (auto& v : mu) v /= static_cast<double>(positions);
      for (std::int64_t i = 0; i < positions; ++i)
        for (std::int64_t o = 0; o < out; ++o) {
          const double d = z[static_cast<std::size_t>(i * out + o)] - mu[static_cast<std::size_t>(o)];
          var[static_cast<std::size_t>(o)] += d * d;
        }
      for (auto& v : var) v /= static_cast<double>(positions);
    } else {
      if (p.bn_updates == 0)
        throw ValueError("o_linear_block: eval before any train-mode statistics");
      for (std::int64_t o = 0; o < out; ++o) {
        mu[static_cast<std::size_t>(o)] = p.running_mean.ptr()[o];
        var[static_cast<std::size_t>(o)] = p.running_var.ptr()[o];
      }
    }
    for (std::int64_t i = 0; i < positions; ++i)
      for (std::int64_t o = 0; o < out; ++o) {
        double v = (z[static_cast<std::size_t>(i * out + o)] - mu[static_cast<std::size_t>(o)]) /
                   std::sqrt(var[static_cast<std::size_t>(o)] + kNormEps);
        z[static_cast<std::size_t>(i * out + o)] = v * p.gamma.ptr()[o] + p.beta.ptr()[o];
      }
  } else if (norm == Norm::layer) {
    for (std::int64_t i = 0; i < positions; ++i) {
      double mu = 0.0, var = 0.0;
      for (std::int64_t o = 0; o < out; ++o) mu += z[static_cast<std::size_t>(i * out + o)];
      mu /= static_cast<double>(out);
      for (std::int64_t o = 0; o < out; ++o) {
        const double d = z[static_cast<std::size_t>(i * out + o)] - mu;
        var += d * d;
      }
      var /= static_cast<double>(out);
      for (std::int64_t o = 0; o < out; ++o) {
        double v = (z[static_cast<std::size_t>(i * out + o)] - mu) / std::sqrt(var + kNormEps);
        z[static_cast<std::size_t>(i * out + o)] = v * p.gamma.ptr()[o] + p.beta.ptr()[o];
      }
    }
  }

  if (act == Act::relu)
    for (auto& v : z)
      if (v < 0.0) v = 0.0;

  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(x.rank() - 1)] = out;
  return Tensor(out_shape, std::move(z));
}

inline Tensor o_bilinear(const Tensor& x, int factor) {
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::int64_t oh = h * factor, ow = w * factor;
  std::vector<double> d(static_cast<std::size_t>(oh * ow * c));
  for (std::int64_t oy = 0; oy < oh; ++oy)
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      const double sy = (static_cast<double>(oy) + 0.5) / factor - 0.5;
      const double sx = (static_cast<double>(ox) + 0.5) / factor - 0.5;
      std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
      std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
      const double wy = sy - static_cast<double>(y0);
      const double wx = sx - static_cast<double>(x0);
      const std::int64_t y0c = std::clamp<std::int64_t>(y0, 0, h - 1);
      const std::int64_t y1c = std::clamp<std::int64_t>(y0 + 1, 0, h - 1);
      const std::int64_t x0c = std::clamp<std::int64_t>(x0, 0, w - 1);
      const std::int64_t x1c = std::clamp<std::int64_t>(x0 + 1, 0, w - 1);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double v00 = x.ptr()[(y0c * w + x0c) * c + ch];
        const double v01 = x.ptr()[(y0c * w + x1c) * c + ch];
        const double v10 = x.ptr()[(y1c * w + x0c) * c + ch];
        const double v11 = x.ptr()[(y1c * w + x1c) * c + ch];
        d[static_cast<std::size_t>((oy * ow + ox) * c + ch)] =
            (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
      }
    }
  return Tensor({oh, ow, c}, std::move(d));
}

inline Tensor o_positional(std::int64_t h, std::int64_t w) {
  std::vector<double> d(static_cast<std::size_t>(h * w * 8));
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      double* cell = d.data() + (i * w + j) * 8;
      cell[2] = 2.0 * static_cast<double>(j) / static_cast<double>(w) - 1.0;
      cell[4] = 2.0 * static_cast<double>(j + 1) / static_cast<double>(w) - 1.0;
      cell[3] = 2.0 * static_cast<double>(i) / static_cast<double>(h) - 1.0;
      cell[5] = 2.0 * static_cast<double>(i + 1) / static_cast<double>(h) - 1.0;
      cell[0] = 0.5 * (cell[2] + cell[4]);
      cell[1] = 0.5 * (cell[3] + cell[5]);
      cell[6] = 1.0 / static_cast<double>(w);
      cell[7] = 1.0 / static_cast<double>(h);
    }
  return Tensor({h, w, 8}, std::move(d));
}

// ---------------------------------------------------------------------------
// Correlation oracles (the index formulas, straight from the shift layout)

// out[i,j,s*W + w'] = sum_c v[i,j,c] * t[(i - s) mod H, w', c]
inline Tensor correlate_row(const Tensor& v, const Tensor& t) {
  if (v.shape() != t.shape())
    throw ShapeError("oracle correlate_row: shapes differ: " + shape_str(v.shape()) + " vs " +
                     shape_str(t.shape()));
  const std::int64_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
  std::vector<double> d(static_cast<std::size_t>(h * w * h * w), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t s = 0; s < h; ++s)
        for (std::int64_t wp = 0; wp < w; ++wp) {
          double acc = 0.0;
          const std::int64_t src_row = (i - s + h) % h;
          for (std::int64_t ch = 0; ch < c; ++ch)
            acc += v.ptr()[(i * w + j) * c + ch] * t.ptr()[(src_row * w + wp) * c + ch];
          d[static_cast<std::size_t>(((i * w + j) * h + s) * w + wp)] = acc;
        }
  return Tensor({h, w, h * w}, std::move(d));
}

// out[i,j,s*H + i'] = sum_c v[i,j,c] * t[i', (j - s) mod W, c]
inline Tensor correlate_col(const Tensor& v, const Tensor& t) {
  if (v.shape() != t.shape())
    throw ShapeError("oracle correlate_col: shapes differ: " + shape_str(v.shape()) + " vs " +
                     shape_str(t.shape()));
  const std::int64_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
  std::vector<double> d(static_cast<std::size_t>(h * w * h * w), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t s = 0; s < w; ++s)
        for (std::int64_t ip = 0; ip < h; ++ip) {
          double acc = 0.0;
          const std::int64_t src_col = (j - s + w) % w;
          for (std::int64_t ch = 0; ch < c; ++ch)
            acc += v.ptr()[(i * w + j) * c + ch] * t.ptr()[(ip * w + src_col) * c + ch];
          d[static_cast<std::size_t>(((i * w + j) * w + s) * h + ip)] = acc;
        }
  return Tensor({h, w, h * w}, std::move(d));
}

// Shift-disabled variants: every block reads the unshifted generator.
inline Tensor correlate_row_noshift(const Tensor& v, const Tensor& t) {
  const std::int64_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
  std::vector<double> d(static_cast<std::size_t>(h * w * h * w), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t s = 0; s < h; ++s)
        for (std::int64_t wp = 0; wp < w; ++wp) {
          double acc = 0.0;
          for (std::int64_t ch = 0; ch < c; ++ch)
            acc += v.ptr()[(i * w + j) * c + ch] * t.ptr()[(i * w + wp) * c + ch];
          d[static_cast<std::size_t>(((i * w + j) * h + s) * w + wp)] = acc;
        }
  return Tensor({h, w, h * w}, std::move(d));
}

inline Tensor correlate_col_noshift(const Tensor& v, const Tensor& t) {
  const std::int64_t h = v.dim(0), w = v.dim(1), c = v.dim(2);
  std::vector<double> d(static_cast<std::size_t>(h * w * h * w), 0.0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t s = 0; s < w; ++s)
        for (std::int64_t ip = 0; ip < h; ++ip) {
          double acc = 0.0;
          for (std::int64_t ch = 0; ch < c; ++ch)
            acc += v.ptr()[(i * w + j) * c + ch] * t.ptr()[(ip * w + j) * c + ch];
          d[static_cast<std::size_t>(((i * w + j) * w + s) * h + ip)] = acc;
        }
  return Tensor({h, w, h * w}, std::move(d));
}

// ---------------------------------------------------------------------------
// Step oracles

struct OracleFusion {
  Tensor attention;  // [h*w, n]
  Tensor t_dist;
  Tensor c_l2v, r_l2v, c_v2l, r_v2l;
  Tensor gates;
  Tensor fused;
};

inline Tensor o_distribute(const Tensor& v4, const Tensor& t, const FusionParams& params,
                           Mode mode, Tensor* attention_out = nullptr) {
  const std::int64_t h = v4.dim(0), w = v4.dim(1), c4 = v4.dim(2);
  const std::int64_t n = t.dim(0), c_lang = t.dim(1);
  // T0: average word embedding tiled over the grid; concat with v4 and P.
  std::vector<double> t_avg(static_cast<std::size_t>(c_lang), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < c_lang; ++c) t_avg[static_cast<std::size_t>(c)] += t.ptr()[i * c_lang + c];
  for (auto& v : t_avg) v /= static_cast<double>(n);
  const Tensor pos = o_positional(h, w);
  const std::int64_t cin = c4 + c_lang + 8;
  std::vector<double> qin(static_cast<std::size_t>(h * w * cin));
  for (std::int64_t p = 0; p < h * w; ++p) {
    double* row = qin.data() + p * cin;
    for (std::int64_t c = 0; c < c4; ++c) row[c] = v4.ptr()[p * c4 + c];
    for (std::int64_t c = 0; c < c_lang; ++c) row[c4 + c] = t_avg[static_cast<std::size_t>(c)];
    for (std::int64_t c = 0; c < 8; ++c) row[c4 + c_lang + c] = pos.ptr()[p * 8 + c];
  }
  const Tensor q =
      o_linear_block(Tensor({h * w, cin}, std::move(qin)), params.query, Norm::batch, Act::relu, mode);
  const Tensor k = o_linear_block(t, params.key, Norm::layer, Act::relu, mode);    // [n, c4]
  const Tensor v = o_linear_block(t, params.value, Norm::layer, Act::relu, mode);  // [n, c4]

  // Attention with the 1/sqrt(c4) scale and max-subtracted softmax rows.
  std::vector<double> att(static_cast<std::size_t>(h * w * n));
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(c4));
  for (std::int64_t p = 0; p < h * w; ++p) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < c4; ++c) acc += q.ptr()[p * c4 + c] * k.ptr()[j * c4 + c];
      att[static_cast<std::size_t>(p * n + j)] = acc * inv_scale;
      mx = std::max(mx, att[static_cast<std::size_t>(p * n + j)]);
    }
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      att[static_cast<std::size_t>(p * n + j)] = std::exp(att[static_cast<std::size_t>(p * n + j)] - mx);
      sum += att[static_cast<std::size_t>(p * n + j)];
    }
    for (std::int64_t j = 0; j < n; ++j) att[static_cast<std::size_t>(p * n + j)] /= sum;
  }
  std::vector<double> dist(static_cast<std::size_t>(h * w * c4), 0.0);
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < c4; ++c)
        dist[static_cast<std::size_t>(p * c4 + c)] +=
            att[static_cast<std::size_t>(p * n + j)] * v.ptr()[j * c4 + c];
  if (attention_out) *attention_out = Tensor({h * w, n}, std::move(att));
  return Tensor({h, w, c4}, std::move(dist));
}

inline void o_coparse(const Tensor& v4, const Tensor& t_dist, const FusionConfig& cfg,
                      OracleFusion& out) {
  const std::int64_t h = v4.dim(0), w = v4.dim(1);
  const Shape map_shape{h, w, h * w};
  if (cfg.use_l2v) {
    out.c_l2v = cfg.shift ? correlate_row(v4, t_dist) : correlate_row_noshift(v4, t_dist);
    out.r_l2v = cfg.shift ? correlate_col(v4, t_dist) : correlate_col_noshift(v4, t_dist);
  } else {
    out.c_l2v = Tensor::zeros(map_shape);
    out.r_l2v = Tensor::zeros(map_shape);
  }
  if (cfg.use_v2l) {
    out.c_v2l = cfg.shift ? correlate_row(t_dist, v4) : correlate_row_noshift(t_dist, v4);
    out.r_v2l = cfg.shift ? correlate_col(t_dist, v4) : correlate_col_noshift(t_dist, v4);
  } else {
    out.c_v2l = Tensor::zeros(map_shape);
    out.r_v2l = Tensor::zeros(map_shape);
  }
}

inline void o_balance(const Tensor& v4, const FusionParams& params, const FusionConfig& cfg,
                      Mode mode, OracleFusion& out) {
  const std::int64_t h = v4.dim(0), w = v4.dim(1), c4 = v4.dim(2);
  const std::int64_t hw = h * w;
  const Tensor* maps[4] = {&out.c_l2v, &out.r_l2v, &out.c_v2l, &out.r_v2l};

  std::vector<double> gates(4, 1.0);
  if (cfg.balance) {
    std::vector<double> gcat(static_cast<std::size_t>(hw * 4 * hw));
    for (std::int64_t p = 0; p < hw; ++p)
      for (int m = 0; m < 4; ++m)
        for (std::int64_t k = 0; k < hw; ++k)
          gcat[static_cast<std::size_t>(p * 4 * hw + m * hw + k)] = maps[m]->ptr()[p * hw + k];
    const Tensor logits = o_linear_block(Tensor({hw, 4 * hw}, std::move(gcat)), params.gate,
                                         Norm::none, Act::none, mode);
    for (int g = 0; g < 4; ++g) {
      double mean = 0.0;
      for (std::int64_t p = 0; p < hw; ++p) mean += logits.ptr()[p * 4 + g];
      gates[static_cast<std::size_t>(g)] = o_sigmoid(mean / static_cast<double>(hw));
    }
  }
  out.gates = Tensor({4}, std::vector<double>(gates));

  std::vector<double> bundled(static_cast<std::size_t>(hw * 4 * hw));
  for (std::int64_t p = 0; p < hw; ++p)
    for (int m = 0; m < 4; ++m)
      for (std::int64_t k = 0; k < hw; ++k)
        bundled[static_cast<std::size_t>(p * 4 * hw + m * hw + k)] =
            maps[m]->ptr()[p * hw + k] * gates[static_cast<std::size_t>(m)];
  const Tensor compressed = o_linear_block(Tensor({hw, 4 * hw}, std::move(bundled)),
                                           params.compress, Norm::batch, Act::relu, mode);
  std::vector<double> fused(static_cast<std::size_t>(hw * c4));
  for (std::int64_t i = 0; i < hw * c4; ++i) fused[static_cast<std::size_t>(i)] = v4.ptr()[i] + compressed.ptr()[i];
  out.fused = Tensor({h, w, c4}, std::move(fused));
}

inline OracleFusion o_s2rm(const Tensor& v4, const Tensor& t, const FusionParams& params,
                           const FusionConfig& cfg, Mode mode) {
  OracleFusion out;
  out.t_dist = o_distribute(v4, t, params, mode, &out.attention);
  o_coparse(v4, out.t_dist, cfg, out);
  o_balance(v4, params, cfg, mode, out);
  return out;
}

// ---------------------------------------------------------------------------
// Decoder oracle

struct OracleStage {
  int stage = 0;
  Tensor i_1, chan_att, spat_att, i_2, f_cross;
};

struct OraclePipeline {
  OracleFusion fusion;
  std::vector<OracleStage> stages;
  Tensor mask;
};

inline OracleStage o_stage(int stage, const std::map<int, Tensor>& fused, const Tensor& v_i,
                           const Tensor& t_avg, const StageParams& sp, const DecoderConfig& cfg,
                           Mode mode) {
  OracleStage out;
  out.stage = stage;
  // Coord: deepest-first concat of the upsampled fused features.
  std::vector<Tensor> ups;
  for (auto it = fused.rbegin(); it != fused.rend(); ++it)
    if (it->first > stage) ups.push_back(o_bilinear(it->second, 1 << (it->first - stage)));
  const std::int64_t h = ups[0].dim(0), w = ups[0].dim(1);
  std::int64_t cin = 0;
  for (const auto& u : ups) cin += u.dim(2);
  std::vector<double> cat(static_cast<std::size_t>(h * w * cin));
  for (std::int64_t p = 0; p < h * w; ++p) {
    std::int64_t off = 0;
    for (const auto& u : ups) {
      const std::int64_t uc = u.dim(2);
      for (std::int64_t c = 0; c < uc; ++c)
        cat[static_cast<std::size_t>(p * cin + off + c)] = u.ptr()[p * uc + c];
      off += uc;
    }
  }
  out.i_1 = o_linear_block(Tensor({h, w, cin}, std::move(cat)), sp.coord, Norm::none, Act::none, mode);
  const std::int64_t ci = out.i_1.dim(2);

  const auto act = [&](double v) { return cfg.sigmoid_attention ? o_sigmoid(v) : std::tanh(v); };

  // Channel attention via the two-layer perceptron.
  std::vector<double> pooled(static_cast<std::size_t>(ci), 0.0);
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t c = 0; c < ci; ++c) pooled[static_cast<std::size_t>(c)] += out.i_1.ptr()[p * ci + c];
  for (auto& v : pooled) v /= static_cast<double>(h * w);
  std::vector<double> mlp_in;
  if (cfg.language) {
    mlp_in.assign(t_avg.data().begin(), t_avg.data().end());
    mlp_in.insert(mlp_in.end(), pooled.begin(), pooled.end());
  } else {
    mlp_in = pooled;
  }
  const std::int64_t mlp_in_width = static_cast<std::int64_t>(mlp_in.size());
  const Tensor hidden = o_linear_block(Tensor({1, mlp_in_width}, std::move(mlp_in)), sp.mlp1,
                                       Norm::none, Act::relu, mode);
  const Tensor catt_raw = o_linear_block(hidden, sp.mlp2, Norm::none, Act::none, mode);
  std::vector<double> catt(static_cast<std::size_t>(ci));
  for (std::int64_t c = 0; c < ci; ++c) catt[static_cast<std::size_t>(c)] = act(catt_raw.ptr()[c]);
  out.chan_att = Tensor({ci}, std::move(catt));

  // Spatial attention: dynamic convolution with the projected kernel.
  std::vector<double> kernel(static_cast<std::size_t>(ci));
  if (cfg.language) {
    for (std::int64_t o = 0; o < ci; ++o) {
      double acc = sp.lang_proj.bias.ptr()[o];
      for (std::int64_t c = 0; c < t_avg.numel(); ++c)
        acc += t_avg.ptr()[c] * sp.lang_proj.weight.ptr()[o * t_avg.numel() + c];
      kernel[static_cast<std::size_t>(o)] = acc;
    }
  } else {
    kernel.assign(sp.free_vec.data().begin(), sp.free_vec.data().end());
  }
  std::vector<double> satt(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < h * w; ++p) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < ci; ++c) acc += out.i_1.ptr()[p * ci + c] * kernel[static_cast<std::size_t>(c)];
    satt[static_cast<std::size_t>(p)] = act(acc);
  }
  out.spat_att = Tensor({h, w, 1}, std::move(satt));

  // I_2 and F_cross with the two concat-conv skips.
  std::vector<double> cat_a(static_cast<std::size_t>(h * w * 2 * ci));
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t c = 0; c < ci; ++c) {
      const double gate = cfg.channel_attention ? out.chan_att.ptr()[c] : 1.0;
      cat_a[static_cast<std::size_t>(p * 2 * ci + c)] = v_i.ptr()[p * ci + c] * gate;
      cat_a[static_cast<std::size_t>(p * 2 * ci + ci + c)] = out.i_1.ptr()[p * ci + c];
    }
  out.i_2 = o_linear_block(Tensor({h, w, 2 * ci}, std::move(cat_a)), sp.fuse_a, Norm::none,
                           Act::none, mode);
  std::vector<double> cat_b(static_cast<std::size_t>(h * w * 2 * ci));
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t c = 0; c < ci; ++c) {
      const double gate = cfg.spatial_attention ? out.spat_att.ptr()[p] : 1.0;
      cat_b[static_cast<std::size_t>(p * 2 * ci + c)] = out.i_2.ptr()[p * ci + c] * gate;
      cat_b[static_cast<std::size_t>(p * 2 * ci + ci + c)] = out.i_1.ptr()[p * ci + c];
    }
  out.f_cross = o_linear_block(Tensor({h, w, 2 * ci}, std::move(cat_b)), sp.fuse_b, Norm::none,
                               Act::none, mode);
  return out;
}

// End-to-end loop-only recomputation; sizes capped so the scalar loops stay
// tractable.
inline OraclePipeline o_pipeline(const std::map<int, Tensor>& vision, const Tensor& v4,
                                 const Tensor& t, const FusionParams& fp, const DecoderParams& dp,
                                 const FusionConfig& fcfg, const DecoderConfig& dcfg, Mode mode) {
  if (fcfg.h > 8 || fcfg.w > 8)
    throw ValueError("o_pipeline: grid larger than 8x8 is not supported by the oracle");
  OraclePipeline out;
  out.fusion = o_s2rm(v4, t, fp, fcfg, mode);

  std::vector<double> t_avg(static_cast<std::size_t>(t.dim(1)), 0.0);
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t c = 0; c < t.dim(1); ++c) t_avg[static_cast<std::size_t>(c)] += t.ptr()[i * t.dim(1) + c];
  for (auto& v : t_avg) v /= static_cast<double>(t.dim(0));
  const Tensor t_avg_t({t.dim(1)}, std::move(t_avg));

  std::map<int, Tensor> fused;
  fused[4] = out.fusion.fused;
  for (int i : dcfg.enabled_stages()) {
    const OracleStage st =
        o_stage(i, fused, vision.at(i), t_avg_t, dp.stages.at(i), dcfg, mode);
    fused[i] = st.f_cross;
    out.stages.push_back(st);
  }

  const Tensor& last = dcfg.stages > 0 ? fused.at(dcfg.enabled_stages().back()) : out.fusion.fused;
  const Tensor logits = o_linear_block(last, dp.mask_head, Norm::none, Act::none, mode);
  Tensor up = dcfg.stages > 0 ? o_bilinear(logits, 4) : o_bilinear(o_bilinear(logits, 8), 4);
  std::vector<double> mask(static_cast<std::size_t>(up.numel()));
  for (std::int64_t i = 0; i < up.numel(); ++i) mask[static_cast<std::size_t>(i)] = o_sigmoid(up.ptr()[i]);
  out.mask = Tensor(up.shape(), std::move(mask));
  return out;
}

}  // namespace srm::oracle
