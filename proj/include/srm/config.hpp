// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. JSON schema (all fields optional; defaults below):
//
//   {
//     "image":    {"height": 512, "width": 512},         // divisible by 32
//     "channels": {"c1": 96, "c2": 192, "c3": 384, "c4": 768, "lang": 768},
//     "language": {"tokens": 7},                         // 1..20
//     "ablation": {
//       "shift": true, "l2v": true, "v2l": true, "balance": true,
//       "spatial": true, "channel": true, "language": true,
//       "activation": "tanh",                            // or "sigmoid"
//       "decoder_stages": 3                              // 3,2,1,0
//     },
//     "train": {"learning_rate": 0.05, "steps": 500, "batch": 4},
//     "seed": 42,
//     "artifacts": {"params": "...", "trace": "...",
//                   "mask_pgm": "...", "mask_raw": "..."}
//   }

#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"

#include "srm/decoder.hpp"
#include "srm/fusion.hpp"

namespace srm {

struct ModelConfig {
  std::int64_t height = 512, width = 512;
  std::int64_t c1 = 96, c2 = 192, c3 = 384, c4 = 768;
  std::int64_t c_lang = 768;
  std::int64_t tokens = 7;

  bool shift = true, l2v = true, v2l = true, balance = true;
  bool spatial_attention = true, channel_attention = true, language = true;
  bool sigmoid_attention = false;
  int decoder_stages = 3;

  std::uint64_t seed = 42;
  double learning_rate = 0.05;
  std::int64_t steps = 500;
  std::int64_t batch = 4;

  std::string params_path = "params.srmblob";
  std::string trace_path = "loss_trace.csv";
  std::string mask_pgm_path = "mask.pgm";
  std::string mask_raw_path = "mask.f64";

  // Laptop-sized default: 256x256 images (8x8 deepest grid) and a small
  // channel schedule that still overfits four synthetic samples.
  static ModelConfig toy() {
    ModelConfig c;
    c.height = c.width = 256;
    c.c1 = 8;
    c.c2 = 12;
    c.c3 = 16;
    c.c4 = 24;
    c.c_lang = 32;
    c.tokens = 5;
    return c;
  }

  std::int64_t grid_h() const { return height / 32; }
  std::int64_t grid_w() const { return width / 32; }

  void validate() const {
    const auto fail = [](const std::string& field, const std::string& why) {
      throw ValueError("config: " + field + " " + why);
    };
    if (height < 32 || height % 32 != 0) fail("image.height", "must be a positive multiple of 32");
    if (width < 32 || width % 32 != 0) fail("image.width", "must be a positive multiple of 32");
    if (c1 < 1 || c2 < 1 || c3 < 1 || c4 < 1) fail("channels", "must be positive");
    if (!(c1 <= c2 && c2 <= c3 && c3 <= c4))
      fail("channels", "must be monotone non-decreasing c1 <= c2 <= c3 <= c4");
    if (c_lang < 1) fail("channels.lang", "must be positive");
    if (tokens < 1 || tokens > kMaxTokens)
      fail("language.tokens", "must be in 1.." + std::to_string(kMaxTokens));
    if (decoder_stages < 0 || decoder_stages > 3) fail("ablation.decoder_stages", "must be 0..3");
    if (learning_rate < 0.0) fail("train.learning_rate", "must be non-negative");
    if (steps < 0) fail("train.steps", "must be non-negative");
    // Batch-norm statistics need a few samples per training step.
    if (batch < 4) fail("train.batch", "must be >= 4 while batch norm is active");
  }

  FusionConfig fusion_config() const {
    FusionConfig f;
    f.h = grid_h();
    f.w = grid_w();
    f.c4 = c4;
    f.c_lang = c_lang;
    f.shift = shift;
    f.use_l2v = l2v;
    f.use_v2l = v2l;
    f.balance = balance;
    return f;
  }

  DecoderConfig decoder_config() const {
    DecoderConfig d;
    d.h = grid_h();
    d.w = grid_w();
    d.c1 = c1;
    d.c2 = c2;
    d.c3 = c3;
    d.c4 = c4;
    d.c_lang = c_lang;
    d.spatial_attention = spatial_attention;
    d.channel_attention = channel_attention;
    d.language = language;
    d.sigmoid_attention = sigmoid_attention;
    d.stages = decoder_stages;
    return d;
  }

  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig()); }

  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base) {
    ModelConfig c = base;
    const auto geti = [](const nlohmann::json& o, const char* k, std::int64_t& dst) {
      if (o.contains(k)) dst = o.at(k).get<std::int64_t>();
    };
    const auto getb = [](const nlohmann::json& o, const char* k, bool& dst) {
      if (o.contains(k)) dst = o.at(k).get<bool>();
    };
    const auto gets = [](const nlohmann::json& o, const char* k, std::string& dst) {
      if (o.contains(k)) dst = o.at(k).get<std::string>();
    };
    if (j.contains("image")) {
      geti(j.at("image"), "height", c.height);
      geti(j.at("image"), "width", c.width);
    }
    if (j.contains("channels")) {
      const auto& ch = j.at("channels");
      geti(ch, "c1", c.c1);
      geti(ch, "c2", c.c2);
      geti(ch, "c3", c.c3);
      geti(ch, "c4", c.c4);
      geti(ch, "lang", c.c_lang);
    }
    if (j.contains("language")) geti(j.at("language"), "tokens", c.tokens);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      getb(a, "shift", c.shift);
      getb(a, "l2v", c.l2v);
      getb(a, "v2l", c.v2l);
      getb(a, "balance", c.balance);
      getb(a, "spatial", c.spatial_attention);
      getb(a, "channel", c.channel_attention);
      getb(a, "language", c.language);
      if (a.contains("activation")) {
        const std::string s = a.at("activation").get<std::string>();
        if (s == "tanh")
          c.sigmoid_attention = false;
        else if (s == "sigmoid")
          c.sigmoid_attention = true;
        else
          throw ValueError("config: ablation.activation must be \"tanh\" or \"sigmoid\"");
      }
      if (a.contains("decoder_stages")) c.decoder_stages = a.at("decoder_stages").get<int>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("learning_rate")) c.learning_rate = t.at("learning_rate").get<double>();
      geti(t, "steps", c.steps);
      geti(t, "batch", c.batch);
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("artifacts")) {
      const auto& a = j.at("artifacts");
      gets(a, "params", c.params_path);
      gets(a, "trace", c.trace_path);
      gets(a, "mask_pgm", c.mask_pgm_path);
      gets(a, "mask_raw", c.mask_raw_path);
    }
    c.validate();
    return c;
  }

  static ModelConfig from_file(const std::string& path) { return from_file(path, ModelConfig()); }

  static ModelConfig from_file(const std::string& path, ModelConfig base) {
    std::ifstream f(path);
    if (!f) throw ValueError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValueError("config: parse error in '" + path + "': " + e.what());
    }
    return from_json(j, base);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["image"] = {{"height", height}, {"width", width}};
    j["channels"] = {{"c1", c1}, {"c2", c2}, {"c3", c3}, {"c4", c4}, {"lang", c_lang}};
    j["language"] = {{"tokens", tokens}};
    j["ablation"] = {{"shift", shift},
                     {"l2v", l2v},
                     {"v2l", v2l},
                     {"balance", balance},
                     {"spatial", spatial_attention},
                     {"channel", channel_attention},
                     {"language", language},
                     {"activation", sigmoid_attention ? "sigmoid" : "tanh"},
                     {"decoder_stages", decoder_stages}};
    j["train"] = {{"learning_rate", learning_rate}, {"steps", steps}, {"batch", batch}};
    j["seed"] = seed;
    j["artifacts"] = {{"params", params_path},
                      {"trace", trace_path},
                      {"mask_pgm", mask_pgm_path},
                      {"mask_raw", mask_raw_path}};
    return j;
  }
};

}  // namespace srm
