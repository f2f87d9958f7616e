// SPDX-License-Identifier: Apache-2.0
//
// End-to-end assembly: seeded synthetic feature providers standing in for
// the vision/language backbones, dice loss, a plain-SGD toy training loop,
// and inference with IoU reporting.

#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "srm/config.hpp"
#include "srm/decoder.hpp"
#include "srm/fusion.hpp"
#include "srm/serialize.hpp"

namespace srm {

struct SyntheticSample {
  Tensor v1, v2, v3, v4;  // stage features at image / 4, 8, 16, 32
  Tensor t;               // [tokens, c_lang]
  Tensor mask;            // [H, W], values in {0, 1}
};

// Deterministic in (config, seed, index): Gaussian features plus a
// procedural rectangle (even index) or ellipse (odd index) target.
inline SyntheticSample make_sample(const ModelConfig& cfg, std::uint64_t seed, std::int64_t index) {
  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(index)));
  SyntheticSample s;
  s.v1 = randn({cfg.height / 4, cfg.width / 4, cfg.c1}, rng);
  s.v2 = randn({cfg.height / 8, cfg.width / 8, cfg.c2}, rng);
  s.v3 = randn({cfg.height / 16, cfg.width / 16, cfg.c3}, rng);
  s.v4 = randn({cfg.height / 32, cfg.width / 32, cfg.c4}, rng);
  s.t = randn({cfg.tokens, cfg.c_lang}, rng);

  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(cfg.width);
  const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(cfg.height);
  const double hx = rng.uniform(0.12, 0.28) * static_cast<double>(cfg.width);
  const double hy = rng.uniform(0.12, 0.28) * static_cast<double>(cfg.height);
  const bool rectangle = (index % 2 == 0);
  std::vector<double> m(static_cast<std::size_t>(cfg.height * cfg.width), 0.0);
  for (std::int64_t y = 0; y < cfg.height; ++y)
    for (std::int64_t x = 0; x < cfg.width; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx);
      const double dy = (static_cast<double>(y) + 0.5 - cy);
      bool inside;
      if (rectangle)
        inside = std::abs(dx) <= hx && std::abs(dy) <= hy;
      else
        inside = (dx * dx) / (hx * hx) + (dy * dy) / (hy * hy) <= 1.0;
      if (inside) m[static_cast<std::size_t>(y * cfg.width + x)] = 1.0;
    }
  s.mask = Tensor({cfg.height, cfg.width}, std::move(m));
  return s;
}

inline std::vector<SyntheticSample> synth_batch(const ModelConfig& cfg, std::uint64_t seed,
                                                std::int64_t count) {
  if (count < 1) throw ValueError("synth_batch: count must be >= 1");
  cfg.validate();
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) out.push_back(make_sample(cfg, seed, i));
  return out;
}

// ---------------------------------------------------------------------------
// Dice loss: 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps).

inline Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps = 1e-6) {
  if (pred.shape() != target.shape())
    throw ShapeError("dice_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const Tensor inter = sum_all(mul(pred, target));
  const Tensor denom = add_scalar(add(sum_all(pred), sum_all(target)), eps);
  const Tensor ratio = div(add_scalar(scale(inter, 2.0), eps), denom);
  return add_scalar(scale(ratio, -1.0), 1.0);
}

inline double iou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("iou: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::int64_t inter = 0, uni = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const bool pa = a.ptr()[i] != 0.0, pb = b.ptr()[i] != 0.0;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Threshold 0.5, ties to foreground.
inline Tensor threshold_mask(const Tensor& soft) {
  std::vector<double> d(static_cast<std::size_t>(soft.numel()));
  for (std::int64_t i = 0; i < soft.numel(); ++i) d[i] = soft.ptr()[i] >= 0.5 ? 1.0 : 0.0;
  return Tensor(soft.shape(), std::move(d));
}

// ---------------------------------------------------------------------------
// Model = fusion + decoder parameters. Draw order is fixed (fusion first) so
// decoder ablations leave the fusion draws untouched for a given seed.

struct Model {
  FusionParams fusion;
  DecoderParams decoder;
};

inline Model make_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x705));
  Model m;
  m.fusion = make_fusion_params(cfg.fusion_config(), rng);
  m.decoder = make_decoder_params(cfg.decoder_config(), rng);
  return m;
}

namespace detail {
inline void collect_linear(LinearParams& p, std::vector<Tensor*>& out) {
  out.push_back(&p.weight);
  if (p.bias.requires_grad()) out.push_back(&p.bias);
  if (p.gamma.defined()) out.push_back(&p.gamma);
  if (p.beta.defined()) out.push_back(&p.beta);
}
}  // namespace detail

inline std::vector<Tensor*> trainable_params(Model& m) {
  std::vector<Tensor*> out;
  detail::collect_linear(m.fusion.query, out);
  detail::collect_linear(m.fusion.key, out);
  detail::collect_linear(m.fusion.value, out);
  detail::collect_linear(m.fusion.gate, out);
  detail::collect_linear(m.fusion.compress, out);
  for (auto& [stage, sp] : m.decoder.stages) {
    detail::collect_linear(sp.coord, out);
    detail::collect_linear(sp.mlp1, out);
    detail::collect_linear(sp.mlp2, out);
    if (sp.lang_proj.weight.defined()) detail::collect_linear(sp.lang_proj, out);
    if (sp.free_vec.defined()) out.push_back(&sp.free_vec);
    detail::collect_linear(sp.fuse_a, out);
    detail::collect_linear(sp.fuse_b, out);
  }
  detail::collect_linear(m.decoder.mask_head, out);
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass over one sample

struct ForwardResult {
  FusionBundle bundle;
  DecodeResult decode;
};

inline ForwardResult forward(Model& m, const ModelConfig& cfg, const SyntheticSample& s,
                             Mode mode) {
  ForwardResult r;
  r.bundle = s2rm_forward(s.v4, s.t, m.fusion, cfg.fusion_config(), mode);
  const Tensor t_avg = avg_pool(s.t, {0});
  const std::map<int, Tensor> vision{{1, s.v1}, {2, s.v2}, {3, s.v3}};
  r.decode = decode(vision, r.bundle.fused, t_avg, m.decoder, cfg.decoder_config(), mode);
  return r;
}

// ---------------------------------------------------------------------------
// Toy training: plain SGD on the dice loss over a fixed synthetic set.

struct TrainResult {
  std::vector<double> losses;  // one entry per step
  Model model;
  std::vector<SyntheticSample> samples;
};

inline TrainResult train_toy(const ModelConfig& cfg) {
  cfg.validate();
  TrainResult result;
  result.samples = synth_batch(cfg, cfg.seed, cfg.batch);
  result.model = make_model(cfg, cfg.seed);
  std::vector<Tensor*> params = trainable_params(result.model);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Tape tape;
    Tensor total = Tensor::scalar(0.0);
    for (const auto& sample : result.samples) {
      ForwardResult fr = forward(result.model, cfg, sample, Mode::train);
      const Tensor pred = reshape(fr.decode.mask, {cfg.height, cfg.width});
      total = add(total, dice_loss(pred, sample.mask));
    }
    const Tensor loss = scale(total, 1.0 / static_cast<double>(cfg.batch));
    const double loss_value = loss.value();
    if (!std::isfinite(loss_value))
      throw ValueError("train_toy: non-finite loss at step " + std::to_string(step));
    result.losses.push_back(loss_value);
    Gradients grads = tape.backward(loss);
    for (Tensor* p : params) {
      const Tensor g = grads.at(*p);
      std::vector<double> next(static_cast<std::size_t>(p->numel()));
      for (std::int64_t i = 0; i < p->numel(); ++i)
        next[static_cast<std::size_t>(i)] = p->ptr()[i] - cfg.learning_rate * g.ptr()[i];
      *p = Tensor(p->shape(), std::move(next), /*requires_grad=*/true);
    }
  }
  return result;
}

struct InferResult {
  Tensor soft;    // [H, W, 1]
  Tensor binary;  // [H, W]
  double iou = 0.0;
};

inline InferResult infer(Model& m, const ModelConfig& cfg, const SyntheticSample& s) {
  InferResult r;
  ForwardResult fr = forward(m, cfg, s, Mode::eval);
  r.soft = fr.decode.mask;
  r.binary = threshold_mask(reshape(r.soft, {cfg.height, cfg.width}));
  r.iou = iou(r.binary, s.mask);
  return r;
}

// ---------------------------------------------------------------------------
// Parameter blob round trip

namespace detail {
inline void store_linear(TensorStore& store, const std::string& prefix, const LinearParams& p) {
  store.add(prefix + ".weight", p.weight);
  store.add(prefix + ".bias", p.bias);
  if (p.gamma.defined()) store.add(prefix + ".gamma", p.gamma);
  if (p.beta.defined()) store.add(prefix + ".beta", p.beta);
  if (p.running_mean.defined()) {
    store.add(prefix + ".running_mean", p.running_mean);
    store.add(prefix + ".running_var", p.running_var);
    store.add(prefix + ".bn_updates", Tensor::scalar(static_cast<double>(p.bn_updates)));
  }
}

inline void load_linear(const TensorStore& store, const std::string& prefix, LinearParams& p) {
  const auto fetch = [&](const std::string& name, const Tensor& like) {
    const Tensor& t = store.get(name);
    if (t.shape() != like.shape())
      throw ValueError("params/config dimension mismatch at '" + name + "': blob " +
                       shape_str(t.shape()) + " vs configured " + shape_str(like.shape()));
    return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
                  like.requires_grad());
  };
  p.weight = fetch(prefix + ".weight", p.weight);
  p.bias = fetch(prefix + ".bias", p.bias);
  if (p.gamma.defined()) p.gamma = fetch(prefix + ".gamma", p.gamma);
  if (p.beta.defined()) p.beta = fetch(prefix + ".beta", p.beta);
  if (p.running_mean.defined()) {
    p.running_mean = fetch(prefix + ".running_mean", p.running_mean);
    p.running_var = fetch(prefix + ".running_var", p.running_var);
    p.bn_updates = static_cast<std::int64_t>(store.get(prefix + ".bn_updates").value());
  }
}
}  // namespace detail

inline TensorStore pack_model(const Model& m) {
  TensorStore store;
  detail::store_linear(store, "fusion.query", m.fusion.query);
  detail::store_linear(store, "fusion.key", m.fusion.key);
  detail::store_linear(store, "fusion.value", m.fusion.value);
  detail::store_linear(store, "fusion.gate", m.fusion.gate);
  detail::store_linear(store, "fusion.compress", m.fusion.compress);
  for (const auto& [stage, sp] : m.decoder.stages) {
    const std::string prefix = "decoder.stage" + std::to_string(stage);
    detail::store_linear(store, prefix + ".coord", sp.coord);
    detail::store_linear(store, prefix + ".mlp1", sp.mlp1);
    detail::store_linear(store, prefix + ".mlp2", sp.mlp2);
    if (sp.lang_proj.weight.defined()) detail::store_linear(store, prefix + ".lang_proj", sp.lang_proj);
    if (sp.free_vec.defined()) store.add(prefix + ".free_vec", sp.free_vec);
    detail::store_linear(store, prefix + ".fuse_a", sp.fuse_a);
    detail::store_linear(store, prefix + ".fuse_b", sp.fuse_b);
  }
  detail::store_linear(store, "decoder.mask_head", m.decoder.mask_head);
  return store;
}

// Builds the model for `cfg` and fills it from the blob, validating every
// shape against the configured dimensions.
inline Model unpack_model(const TensorStore& store, const ModelConfig& cfg) {
  Model m = make_model(cfg, cfg.seed);
  detail::load_linear(store, "fusion.query", m.fusion.query);
  detail::load_linear(store, "fusion.key", m.fusion.key);
  detail::load_linear(store, "fusion.value", m.fusion.value);
  detail::load_linear(store, "fusion.gate", m.fusion.gate);
  detail::load_linear(store, "fusion.compress", m.fusion.compress);
  for (auto& [stage, sp] : m.decoder.stages) {
    const std::string prefix = "decoder.stage" + std::to_string(stage);
    detail::load_linear(store, prefix + ".coord", sp.coord);
    detail::load_linear(store, prefix + ".mlp1", sp.mlp1);
    detail::load_linear(store, prefix + ".mlp2", sp.mlp2);
    if (sp.lang_proj.weight.defined()) detail::load_linear(store, prefix + ".lang_proj", sp.lang_proj);
    if (sp.free_vec.defined()) {
      const Tensor& t = store.get(prefix + ".free_vec");
      if (t.shape() != sp.free_vec.shape())
        throw ValueError("params/config dimension mismatch at '" + prefix + ".free_vec'");
      sp.free_vec = Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
    }
    detail::load_linear(store, prefix + ".fuse_a", sp.fuse_a);
    detail::load_linear(store, prefix + ".fuse_b", sp.fuse_b);
  }
  detail::load_linear(store, "decoder.mask_head", m.decoder.mask_head);
  return m;
}

// ---------------------------------------------------------------------------
// Artifact writers

// Binary P5, one byte per pixel, value round(255 * p).
inline void write_pgm(const std::string& path, const Tensor& soft) {
  const std::int64_t h = soft.dim(0), w = soft.dim(1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValueError("write_pgm: cannot open '" + path + "'");
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x)
      row[static_cast<std::size_t>(x)] =
          static_cast<unsigned char>(std::lround(255.0 * soft.ptr()[(y * w + x) * (soft.rank() == 3 ? soft.dim(2) : 1)]));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

// Raw little-endian f64 values plus a JSON sidecar ("<path>.json") carrying
// the shape.
inline void write_mask_raw(const std::string& path, const Tensor& soft) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValueError("write_mask_raw: cannot open '" + path + "'");
  for (std::int64_t i = 0; i < soft.numel(); ++i) {
    std::uint64_t bits;
    const double v = soft.ptr()[i];
    std::memcpy(&bits, &v, 8);
    char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>(bits >> (8 * b));
    f.write(buf, 8);
  }
  nlohmann::ordered_json side;
  side["dtype"] = "f64";
  side["order"] = "row-major";
  side["shape"] = soft.shape();
  std::ofstream sf(path + ".json");
  sf << side.dump(2) << "\n";
}

inline void write_trace_csv(const std::string& path, const std::vector<double>& losses, double lr) {
  std::ofstream f(path);
  if (!f) throw ValueError("write_trace_csv: cannot open '" + path + "'");
  f << "step,loss,lr\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", losses[i]);
    f << i << "," << buf << "," << lr << "\n";
  }
}

}  // namespace srm
