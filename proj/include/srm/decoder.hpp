// SPDX-License-Identifier: Apache-2.0
//
// CASG decoder: three stages (i = 3, 2, 1) that combine upsampled fused
// features with channel/spatial attention distilled from the sentence
// embedding and the running abstract semantics, then a 1x1 mask head with
// bilinear upsampling and sigmoid to full resolution.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "srm/fusion.hpp"
#include "srm/linear.hpp"
#include "srm/tensor.hpp"

namespace srm {

struct DecoderConfig {
  std::int64_t h = 8, w = 8;          // deepest feature grid (image / 32)
  std::int64_t c1 = 8, c2 = 12, c3 = 16, c4 = 24;
  std::int64_t c_lang = 32;
  bool spatial_attention = true;      // off: spatial gate pinned to 1
  bool channel_attention = true;      // off: channel gate pinned to 1
  bool language = true;               // off: attention inputs drop the sentence vector
  bool sigmoid_attention = false;     // attention activation: tanh (default) or sigmoid
  int stages = 3;                     // 3: {3,2,1}; 2: {2,1}; 1: {1}; 0: head on F4

  std::int64_t channels(int stage) const {
    switch (stage) {
      case 1: return c1;
      case 2: return c2;
      case 3: return c3;
      case 4: return c4;
    }
    throw ValueError("DecoderConfig::channels: bad stage");
  }
  std::vector<int> enabled_stages() const {
    if (stages < 0 || stages > 3) throw ValueError("DecoderConfig: stages must be 0..3");
    std::vector<int> out;
    for (int i = stages; i >= 1; --i) out.push_back(i);
    return out;
  }
};

struct StageParams {
  LinearParams coord;      // concat of upsampled fused features -> c_i
  LinearParams mlp1;       // (c_lang- if language) + c_i -> c_i, relu between layers
  LinearParams mlp2;       // c_i -> c_i
  LinearParams lang_proj;  // c_lang -> c_i (language on)
  Tensor free_vec;         // [c_i] learned kernel (language off)
  LinearParams fuse_a;     // 2*c_i -> c_i
  LinearParams fuse_b;     // 2*c_i -> c_i
};

struct DecoderParams {
  std::map<int, StageParams> stages;  // keyed by stage index
  LinearParams mask_head;             // last feature -> 1
};

inline DecoderParams make_decoder_params(const DecoderConfig& cfg, Rng& rng) {
  DecoderParams p;
  const auto enabled = cfg.enabled_stages();
  for (int i : enabled) {
    StageParams sp;
    // Coord input: every fused feature available above this stage (the s2rm
    // output plus any already-decoded stage), each upsampled to this grid.
    std::int64_t coord_in = cfg.c4;
    for (int j : enabled)
      if (j > i) coord_in += cfg.channels(j);
    const std::int64_t ci = cfg.channels(i);
    sp.coord = make_linear(coord_in, ci, Norm::none, rng);
    sp.mlp1 = make_linear((cfg.language ? cfg.c_lang : 0) + ci, ci, Norm::none, rng);
    sp.mlp2 = make_linear(ci, ci, Norm::none, rng);
    if (cfg.language) {
      sp.lang_proj = make_linear(cfg.c_lang, ci, Norm::none, rng);
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(ci));
      sp.free_vec = rand_uniform({ci}, -bound, bound, rng, /*requires_grad=*/true);
    }
    sp.fuse_a = make_linear(2 * ci, ci, Norm::none, rng);
    sp.fuse_b = make_linear(2 * ci, ci, Norm::none, rng);
    p.stages[i] = std::move(sp);
  }
  p.mask_head = make_linear(cfg.stages > 0 ? cfg.c1 : cfg.c4, 1, Norm::none, rng);
  return p;
}

struct StageOutput {
  int stage = 0;
  Tensor i_1;       // [h_i, w_i, c_i]
  Tensor chan_att;  // [c_i]
  Tensor spat_att;  // [h_i, w_i, 1]
  Tensor i_2;       // [h_i, w_i, c_i]
  Tensor f_cross;   // [h_i, w_i, c_i]
};

namespace detail {
inline Tensor att_act(const Tensor& x, bool sigmoid_att) {
  return sigmoid_att ? sigmoid(x) : srm::tanh(x);
}
}  // namespace detail

// Recombine the fused features available above `stage` (Coord): each is
// bilinearly upsampled to the stage grid and the channel concat goes through
// the stage's 1x1 conv.
inline Tensor coord_combine(int stage, const std::map<int, Tensor>& fused, StageParams& params,
                            Mode mode) {
  std::vector<Tensor> parts;
  for (auto it = fused.rbegin(); it != fused.rend(); ++it) {  // deepest (4) first
    const int j = it->first;
    if (j <= stage) continue;
    const int factor = 1 << (j - stage);
    parts.push_back(upsample_bilinear(it->second, factor));
  }
  if (parts.empty()) throw ValueError("coord_combine: no fused features above stage");
  const Tensor cat = parts.size() == 1 ? parts[0] : concat(parts, 2);
  if (cat.dim(2) != params.coord.in())
    throw ShapeError("coord_combine: channels " + std::to_string(cat.dim(2)) +
                     " do not match coord conv in=" + std::to_string(params.coord.in()));
  return linear_block(cat, params.coord, Norm::none, Act::none, mode);
}

// Channel attention: act(MLP(cat(avg(T), avg(I_1)))). With language off the
// sentence vector is dropped from the MLP input.
inline Tensor channel_attention(const Tensor& t_avg, const Tensor& i_1, StageParams& params,
                                const DecoderConfig& cfg, Mode mode) {
  const std::int64_t ci = i_1.dim(2);
  const Tensor pooled = avg_pool(i_1, {0, 1});  // [c_i]
  const Tensor in = cfg.language ? concat({t_avg, pooled}, 0) : pooled;
  const Tensor hidden =
      linear_block(reshape(in, {1, in.numel()}), params.mlp1, Norm::none, Act::relu, mode);
  const Tensor out = linear_block(hidden, params.mlp2, Norm::none, Act::none, mode);
  return detail::att_act(reshape(out, {ci}), cfg.sigmoid_attention);
}

// Spatial attention: dynamic 1x1 convolution of I_1 with a kernel projected
// from the sentence vector (or a learned free vector when language is off).
inline Tensor spatial_attention(const Tensor& t_avg, const Tensor& i_1, StageParams& params,
                                const DecoderConfig& cfg, Mode mode) {
  const std::int64_t h = i_1.dim(0), w = i_1.dim(1), ci = i_1.dim(2);
  Tensor kernel;
  if (cfg.language) {
    kernel = reshape(linear_block(reshape(t_avg, {1, t_avg.numel()}), params.lang_proj, Norm::none,
                                  Act::none, mode),
                     {ci});
  } else {
    kernel = params.free_vec;
  }
  const Tensor logits = matmul(reshape(i_1, {h * w, ci}), reshape(kernel, {ci, 1}));
  return detail::att_act(reshape(logits, {h, w, 1}), cfg.sigmoid_attention);
}

// Two gated skip connections around the pure vision feature.
inline std::pair<Tensor, Tensor> stage_fuse(const Tensor& v_i, const Tensor& i_1,
                                            const Tensor& chan_att, const Tensor& spat_att,
                                            StageParams& params, const DecoderConfig& cfg,
                                            Mode mode) {
  if (v_i.shape() != i_1.shape())
    throw ShapeError("stage_fuse: v_i " + shape_str(v_i.shape()) + " vs i_1 " +
                     shape_str(i_1.shape()));
  const std::int64_t ci = v_i.dim(2);
  const Tensor v_gated = cfg.channel_attention
                             ? mul(v_i, broadcast_to(reshape(chan_att, {1, 1, ci}), v_i.shape()))
                             : v_i;
  const Tensor i_2 = linear_block(concat({v_gated, i_1}, 2), params.fuse_a, Norm::none, Act::none, mode);
  const Tensor i_gated =
      cfg.spatial_attention ? mul(i_2, broadcast_to(spat_att, i_2.shape())) : i_2;
  const Tensor f_cross =
      linear_block(concat({i_gated, i_1}, 2), params.fuse_b, Norm::none, Act::none, mode);
  return {i_2, f_cross};
}

struct DecodeResult {
  Tensor mask;                      // [H, W, 1], values in (0, 1)
  std::vector<StageOutput> stages;  // in run order (3, 2, 1)
};

// Runs the enabled stages, then the mask head, upsampling, and sigmoid.
// Stage-i inputs live on the grid (h * 2^(3-i+1) ... ) = image / 2^(i+1).
inline DecodeResult decode(const std::map<int, Tensor>& vision, const Tensor& f4_cross,
                           const Tensor& t_avg, DecoderParams& params, const DecoderConfig& cfg,
                           Mode mode) {
  std::map<int, Tensor> fused;
  fused[4] = f4_cross;
  DecodeResult result;
  for (int i : cfg.enabled_stages()) {
    auto pit = params.stages.find(i);
    if (pit == params.stages.end())
      throw ValueError("decode: missing parameters for stage " + std::to_string(i));
    StageParams& sp = pit->second;
    auto vit = vision.find(i);
    if (vit == vision.end()) throw ValueError("decode: missing vision feature for stage " + std::to_string(i));
    StageOutput so;
    so.stage = i;
    so.i_1 = coord_combine(i, fused, sp, mode);
    if (vit->second.shape() != so.i_1.shape())
      throw ShapeError("decode: stage " + std::to_string(i) + " vision feature " +
                       shape_str(vit->second.shape()) + " does not match grid " +
                       shape_str(so.i_1.shape()));
    so.chan_att = channel_attention(t_avg, so.i_1, sp, cfg, mode);
    so.spat_att = spatial_attention(t_avg, so.i_1, sp, cfg, mode);
    auto [i2, fc] = stage_fuse(vit->second, so.i_1, so.chan_att, so.spat_att, sp, cfg, mode);
    so.i_2 = i2;
    so.f_cross = fc;
    fused[i] = fc;
    result.stages.push_back(std::move(so));
  }

  const Tensor last = cfg.stages > 0 ? fused[cfg.enabled_stages().back()] : f4_cross;
  Tensor logits = linear_block(last, params.mask_head, Norm::none, Act::none, mode);
  if (cfg.stages > 0) {
    logits = upsample_bilinear(logits, 4);
  } else {
    // Head sits on the 1/32 grid; two supported hops reach full resolution.
    logits = upsample_bilinear(upsample_bilinear(logits, 8), 4);
  }
  result.mask = sigmoid(logits);
  return result;
}

inline Tensor decode_mask(const std::map<int, Tensor>& vision, const Tensor& f4_cross,
                          const Tensor& t_avg, DecoderParams& params, const DecoderConfig& cfg,
                          Mode mode) {
  return decode(vision, f4_cross, t_avg, params, cfg, mode).mask;
}

}  // namespace srm
