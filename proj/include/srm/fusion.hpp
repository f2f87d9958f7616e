// SPDX-License-Identifier: Apache-2.0
//
// S2RM cross-modality fusion: distribute the sentence embedding over space,
// coparse vision and language contexts through cyclically shifted row/column
// slice correlations, then balance the four parsed maps with self-distilled
// gates and fold the result back into the vision feature.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srm/linear.hpp"
#include "srm/tensor.hpp"

namespace srm {

constexpr int kMaxTokens = 20;  // language clip length
constexpr int kPositionalChannels = 8;

struct FusionConfig {
  std::int64_t h = 8;       // feature rows  (image H / 32)
  std::int64_t w = 8;       // feature cols  (image W / 32)
  std::int64_t c4 = 16;     // vision channels at the deepest stage
  std::int64_t c_lang = 32; // language embedding width
  bool shift = true;        // cyclic shifts in the slice generators
  bool use_l2v = true;      // language-parses-vision pair
  bool use_v2l = true;      // vision-parses-language pair
  bool balance = true;      // gate balancing (off: gates pinned to 1)
};

struct FusionParams {
  LinearParams query;     // c4 + c_lang + 8 -> c4, conv1x1 + BN + ReLU
  LinearParams key;       // c_lang -> c4, linear + LN + ReLU
  LinearParams value;     // c_lang -> c4, linear + LN + ReLU
  LinearParams gate;      // 4*h*w -> 4, conv1x1 (bias, no activation)
  LinearParams compress;  // 4*h*w -> c4, conv1x1 + BN + ReLU
};

inline FusionParams make_fusion_params(const FusionConfig& cfg, Rng& rng) {
  FusionParams p;
  p.query = make_linear(cfg.c4 + cfg.c_lang + kPositionalChannels, cfg.c4, Norm::batch, rng);
  p.key = make_linear(cfg.c_lang, cfg.c4, Norm::layer, rng);
  p.value = make_linear(cfg.c_lang, cfg.c4, Norm::layer, rng);
  p.gate = make_linear(4 * cfg.h * cfg.w, 4, Norm::none, rng);
  p.compress = make_linear(4 * cfg.h * cfg.w, cfg.c4, Norm::batch, rng);
  return p;
}

struct FusionBundle {
  Tensor t_dist;                        // [h, w, c4]
  Tensor c_l2v, r_l2v, c_v2l, r_v2l;    // [h, w, h*w]
  Tensor gates;                         // [4]
  Tensor fused;                         // [h, w, c4]
  Tensor attention;                     // [h*w, n], retained for inspection
};

// ---------------------------------------------------------------------------
// Positional tensor: per cell (i, j) the 8 channels are
// [x_c, y_c, x_min, y_min, x_max, y_max, 1/w, 1/h], centers and extents
// normalized to [-1, 1].
inline Tensor make_positional(std::int64_t h, std::int64_t w) {
  if (h < 1 || w < 1) throw ShapeError("make_positional: h and w must be >= 1");
  std::vector<double> d(static_cast<std::size_t>(h * w * kPositionalChannels));
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      double* cell = d.data() + (i * w + j) * kPositionalChannels;
      const double x_min = 2.0 * static_cast<double>(j) / static_cast<double>(w) - 1.0;
      const double x_max = 2.0 * static_cast<double>(j + 1) / static_cast<double>(w) - 1.0;
      const double y_min = 2.0 * static_cast<double>(i) / static_cast<double>(h) - 1.0;
      const double y_max = 2.0 * static_cast<double>(i + 1) / static_cast<double>(h) - 1.0;
      cell[0] = 0.5 * (x_min + x_max);
      cell[1] = 0.5 * (y_min + y_max);
      cell[2] = x_min;
      cell[3] = y_min;
      cell[4] = x_max;
      cell[5] = y_max;
      cell[6] = 1.0 / static_cast<double>(w);
      cell[7] = 1.0 / static_cast<double>(h);
    }
  return Tensor({h, w, kPositionalChannels}, std::move(d));
}

// ---------------------------------------------------------------------------
// Cyclic shifts: out[r] = x[(r - s) mod H], so slice r of the output is the
// slice that sat s steps above it before the rotation.

inline Tensor shift_rows(const Tensor& x, std::int64_t s) {
  if (x.rank() != 3) throw ShapeError("shift_rows: expected HxWxC, got " + shape_str(x.shape()));
  if (s < 0) throw ValueError("shift_rows: negative shift");
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::int64_t sh = s % h;
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t r = 0; r < h; ++r) {
    const std::int64_t src = (r - sh + h) % h;
    std::copy_n(x.ptr() + src * w * c, w * c, d.data() + r * w * c);
  }
  return make_op("shift_rows", x.shape(), std::move(d), {x}, [h, sh](const Tensor& g) {
    return std::vector<Tensor>{shift_rows(g, (h - sh) % h)};
  });
}

inline Tensor shift_cols(const Tensor& x, std::int64_t s) {
  if (x.rank() != 3) throw ShapeError("shift_cols: expected HxWxC, got " + shape_str(x.shape()));
  if (s < 0) throw ValueError("shift_cols: negative shift");
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::int64_t sw = s % w;
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t col = 0; col < w; ++col) {
      const std::int64_t src = (col - sw + w) % w;
      std::copy_n(x.ptr() + (r * w + src) * c, c, d.data() + (r * w + col) * c);
    }
  return make_op("shift_cols", x.shape(), std::move(d), {x}, [w, sw](const Tensor& g) {
    return std::vector<Tensor>{shift_cols(g, (w - sw) % w)};
  });
}

// All H row rotations side by side along the width: block s holds
// shift_rows(x, s), block 0 is x itself. Output [H, H*W, C].
inline Tensor shift_concat_rows(const Tensor& x) {
  const std::int64_t h = x.dim(0);
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<std::size_t>(h));
  for (std::int64_t s = 0; s < h; ++s) blocks.push_back(shift_rows(x, s));
  return concat(blocks, 1);
}

// All W column rotations stacked along the height. Output [H*W, W, C].
inline Tensor shift_concat_cols(const Tensor& x) {
  const std::int64_t w = x.dim(1);
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<std::size_t>(w));
  for (std::int64_t s = 0; s < w; ++s) blocks.push_back(shift_cols(x, s));
  return concat(blocks, 0);
}

// Shift-disabled generators: the same block layout built from unshifted
// copies.
inline Tensor repeat_concat_rows(const Tensor& x) {
  const std::int64_t h = x.dim(0);
  return concat(std::vector<Tensor>(static_cast<std::size_t>(h), x), 1);
}

inline Tensor repeat_concat_cols(const Tensor& x) {
  const std::int64_t w = x.dim(1);
  return concat(std::vector<Tensor>(static_cast<std::size_t>(w), x), 0);
}

// ---------------------------------------------------------------------------
// Correlations: channel information of the parsed context becomes maps.

// out[i,j,k] = sum_c parsed[i,j,c] * gen_row[i,k,c]; batched per row.
inline Tensor correlate_rowwise(const Tensor& parsed, const Tensor& gen_row) {
  if (parsed.rank() != 3 || gen_row.rank() != 3 || parsed.dim(0) != gen_row.dim(0) ||
      parsed.dim(2) != gen_row.dim(2))
    throw ShapeError("correlate_rowwise: incompatible shapes " + shape_str(parsed.shape()) +
                     " vs " + shape_str(gen_row.shape()));
  return matmul(parsed, permute(gen_row, {0, 2, 1}));
}

// out[i,j,k] = sum_c parsed[i,j,c] * gen_col[k,j,c]; batched per column and
// permuted back to [H, W, K].
inline Tensor correlate_colwise(const Tensor& parsed, const Tensor& gen_col) {
  if (parsed.rank() != 3 || gen_col.rank() != 3 || parsed.dim(1) != gen_col.dim(1) ||
      parsed.dim(2) != gen_col.dim(2))
    throw ShapeError("correlate_colwise: incompatible shapes " + shape_str(parsed.shape()) +
                     " vs " + shape_str(gen_col.shape()));
  const Tensor by_col = matmul(permute(parsed, {1, 0, 2}), permute(gen_col, {1, 2, 0}));
  return permute(by_col, {1, 0, 2});
}

// ---------------------------------------------------------------------------
// Step 1: distributing the language feature.

inline Tensor distribute_language(const Tensor& v4, const Tensor& t, const Tensor& positional,
                                  FusionParams& params, Mode mode, Tensor* attention_out = nullptr) {
  if (v4.rank() != 3) throw ShapeError("distribute_language: v4 must be HxWxC, got " + shape_str(v4.shape()));
  if (t.rank() != 2) throw ShapeError("distribute_language: t must be NxC_lang, got " + shape_str(t.shape()));
  const std::int64_t h = v4.dim(0), w = v4.dim(1), c4 = v4.dim(2);
  const std::int64_t n = t.dim(0), c_lang = t.dim(1);
  if (n > kMaxTokens)
    throw ValueError("distribute_language: " + std::to_string(n) + " tokens exceed clip length " +
                     std::to_string(kMaxTokens));
  if (positional.shape() != Shape{h, w, kPositionalChannels})
    throw ShapeError("distribute_language: positional shape " + shape_str(positional.shape()) +
                     " does not match feature " + shape_str(v4.shape()));
  if (params.query.in() != c4 + c_lang + kPositionalChannels)
    throw ShapeError("distribute_language: query block expects in=" +
                     std::to_string(params.query.in()) + ", features give " +
                     std::to_string(c4 + c_lang + kPositionalChannels));

  const Tensor t_avg = avg_pool(t, {0});  // [c_lang]
  const Tensor tiled = broadcast_to(reshape(t_avg, {1, 1, c_lang}), {h, w, c_lang});
  const Tensor q = linear_block(concat({v4, tiled, positional}, 2), params.query, Norm::batch,
                                Act::relu, mode);
  const Tensor k = permute(linear_block(t, params.key, Norm::layer, Act::relu, mode), {1, 0});
  const Tensor v = linear_block(t, params.value, Norm::layer, Act::relu, mode);

  const Tensor logits = scale(matmul(reshape(q, {h * w, c4}), k),
                              1.0 / std::sqrt(static_cast<double>(c4)));
  const Tensor attention = softmax_lastaxis(logits);  // [h*w, n], rows sum to 1
  if (attention_out) *attention_out = attention;
  return reshape(matmul(attention, v), {h, w, c4});
}

// ---------------------------------------------------------------------------
// Step 2: spatial semantic recurrent coparsing.

struct CoparseMaps {
  Tensor c_l2v, r_l2v, c_v2l, r_v2l;  // each [h, w, h*w]
};

inline CoparseMaps coparse(const Tensor& v4, const Tensor& t_dist, const FusionConfig& cfg) {
  if (v4.shape() != t_dist.shape())
    throw ShapeError("coparse: context shapes differ: " + shape_str(v4.shape()) + " vs " +
                     shape_str(t_dist.shape()));
  const std::int64_t h = v4.dim(0), w = v4.dim(1);
  const Shape map_shape{h, w, h * w};
  const auto gen_rows = [&](const Tensor& x) {
    return cfg.shift ? shift_concat_rows(x) : repeat_concat_rows(x);
  };
  const auto gen_cols = [&](const Tensor& x) {
    return cfg.shift ? shift_concat_cols(x) : repeat_concat_cols(x);
  };
  CoparseMaps maps;
  if (cfg.use_l2v) {
    maps.c_l2v = correlate_rowwise(v4, gen_rows(t_dist));
    maps.r_l2v = correlate_colwise(v4, gen_cols(t_dist));
  } else {
    maps.c_l2v = Tensor::zeros(map_shape);
    maps.r_l2v = Tensor::zeros(map_shape);
  }
  if (cfg.use_v2l) {
    maps.c_v2l = correlate_rowwise(t_dist, gen_rows(v4));
    maps.r_v2l = correlate_colwise(t_dist, gen_cols(v4));
  } else {
    maps.c_v2l = Tensor::zeros(map_shape);
    maps.r_v2l = Tensor::zeros(map_shape);
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Step 3: parsed-semantics balancing. Returns the gate vector and the fused
// feature v4 + compress(gated maps); the residual keeps the identity path.

inline std::pair<Tensor, Tensor> balance(const CoparseMaps& maps, const Tensor& v4,
                                         FusionParams& params, const FusionConfig& cfg,
                                         Mode mode) {
  const Shape& ms = maps.c_l2v.shape();
  if (maps.r_l2v.shape() != ms || maps.c_v2l.shape() != ms || maps.r_v2l.shape() != ms)
    throw ShapeError("balance: the four maps must share one shape");
  const std::vector<Tensor> list{maps.c_l2v, maps.r_l2v, maps.c_v2l, maps.r_v2l};

  Tensor gates;
  if (cfg.balance) {
    const Tensor logits = linear_block(concat(list, 2), params.gate, Norm::none, Act::none, mode);
    gates = sigmoid(avg_pool(logits, {0, 1}));  // [4]
  } else {
    gates = Tensor::full({4}, 1.0);
  }

  std::vector<Tensor> scaled;
  scaled.reserve(4);
  for (int i = 0; i < 4; ++i)
    scaled.push_back(mul(list[static_cast<std::size_t>(i)],
                         broadcast_to(slice(gates, 0, i, 1), ms)));
  const Tensor bundle = concat(scaled, 2);
  const Tensor fused = add(v4, linear_block(bundle, params.compress, Norm::batch, Act::relu, mode));
  return {gates, fused};
}

// ---------------------------------------------------------------------------
// Full trilogy.

inline FusionBundle s2rm_forward(const Tensor& v4, const Tensor& t, FusionParams& params,
                                 const FusionConfig& cfg, Mode mode) {
  if (v4.shape() != Shape{cfg.h, cfg.w, cfg.c4})
    throw ShapeError("s2rm_forward: v4 shape " + shape_str(v4.shape()) +
                     " does not match configured " + shape_str({cfg.h, cfg.w, cfg.c4}));
  FusionBundle bundle;
  const Tensor positional = make_positional(cfg.h, cfg.w);
  bundle.t_dist = distribute_language(v4, t, positional, params, mode, &bundle.attention);
  const CoparseMaps maps = coparse(v4, bundle.t_dist, cfg);
  bundle.c_l2v = maps.c_l2v;
  bundle.r_l2v = maps.r_l2v;
  bundle.c_v2l = maps.c_v2l;
  bundle.r_v2l = maps.r_v2l;
  auto [gates, fused] = balance(maps, v4, params, cfg, mode);
  bundle.gates = gates;
  bundle.fused = fused;
  return bundle;
}

}  // namespace srm
