// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the committed golden artifacts under tests/golden/. Each
// golden is produced by the loop oracle (or hashed only after the optimized
// path has been verified against it), never typed by hand.
//
// Usage: gen_goldens <output-dir>

#include <cstdio>
#include <fstream>
#include <string>

#include "srm/fusion.hpp"
#include "srm/oracle.hpp"
#include "srm/pipeline.hpp"
#include "srm/serialize.hpp"
#include "srm/sha256.hpp"

using namespace srm;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: gen_goldens <output-dir>\n");
    return 2;
  }
  const std::string dir = argv[1];

  // Correlation goldens: oracle output on fixed seeded instances. The
  // optimized kernel must agree before we record anything.
  {
    Rng rng(0x90157);
    Tensor v = randn({3, 2, 2}, rng);
    Tensor t = randn({3, 2, 2}, rng);
    Tensor ref = oracle::correlate_row(v, t);
    const double err = max_abs_diff(ref, correlate_rowwise(v, shift_concat_rows(t)));
    if (err > 1e-10) {
      std::fprintf(stderr, "row correlate mismatch %.3g; refusing to record\n", err);
      return 1;
    }
    TensorStore store;
    store.add("v", v);
    store.add("t", t);
    store.add("out", ref);
    store.save(dir + "/correlate_row_3x2x2.srmblob");
  }
  {
    Rng rng(0x90158);
    Tensor v = randn({2, 3, 2}, rng);
    Tensor t = randn({2, 3, 2}, rng);
    Tensor ref = oracle::correlate_col(v, t);
    const double err = max_abs_diff(ref, correlate_colwise(v, shift_concat_cols(t)));
    if (err > 1e-10) {
      std::fprintf(stderr, "col correlate mismatch %.3g; refusing to record\n", err);
      return 1;
    }
    TensorStore store;
    store.add("v", v);
    store.add("t", t);
    store.add("out", ref);
    store.save(dir + "/correlate_col_2x3x2.srmblob");
  }

  // Bundle fingerprint: seeded fusion forward, cross-checked against the
  // oracle before hashing.
  {
    FusionConfig cfg;
    cfg.h = 8;
    cfg.w = 8;
    cfg.c4 = 16;
    cfg.c_lang = 32;
    Rng prng(Rng::derive(0x5eed, 1));
    FusionParams params = make_fusion_params(cfg, prng);
    Rng drng(Rng::derive(0x5eed, 2));
    Tensor v4 = randn({cfg.h, cfg.w, cfg.c4}, drng);
    Tensor t = randn({5, cfg.c_lang}, drng);
    FusionBundle bundle = s2rm_forward(v4, t, params, cfg, Mode::train);

    Rng prng2(Rng::derive(0x5eed, 1));
    FusionParams params2 = make_fusion_params(cfg, prng2);
    oracle::OracleFusion ref = oracle::o_s2rm(v4, t, params2, cfg, Mode::train);
    const double err = std::max({max_abs_diff(bundle.fused, ref.fused),
                                 max_abs_diff(bundle.gates, ref.gates),
                                 max_abs_diff(bundle.t_dist, ref.t_dist)});
    if (err > 1e-10) {
      std::fprintf(stderr, "bundle/oracle mismatch %.3g; refusing to record\n", err);
      return 1;
    }

    TensorStore store;
    store.add("t_dist", bundle.t_dist);
    store.add("c_l2v", bundle.c_l2v);
    store.add("r_l2v", bundle.r_l2v);
    store.add("c_v2l", bundle.c_v2l);
    store.add("r_v2l", bundle.r_v2l);
    store.add("gates", bundle.gates);
    store.add("fused", bundle.fused);
    const auto bytes = store.serialize();
    std::ofstream f(dir + "/bundle_sha256.txt");
    f << sha256_hex(bytes) << "\n";
  }

  // Full-pipeline mask fingerprint on a 4x4-grid toy instance, recorded only
  // once the optimized path agrees with the loop oracle at 1e-9.
  {
    ModelConfig cfg = ModelConfig::toy();
    cfg.height = cfg.width = 128;
    cfg.c1 = 2;
    cfg.c2 = 2;
    cfg.c3 = 3;
    cfg.c4 = 3;
    cfg.c_lang = 4;
    cfg.tokens = 2;
    const SyntheticSample sample = make_sample(cfg, 0x9a5e, 0);
    Model model = make_model(cfg, 0x9a5e);
    ForwardResult fr = forward(model, cfg, sample, Mode::train);

    Model model2 = make_model(cfg, 0x9a5e);
    const std::map<int, Tensor> vision{{1, sample.v1}, {2, sample.v2}, {3, sample.v3}};
    oracle::OraclePipeline ref =
        oracle::o_pipeline(vision, sample.v4, sample.t, model2.fusion, model2.decoder,
                           cfg.fusion_config(), cfg.decoder_config(), Mode::train);
    const double err = max_abs_diff(fr.decode.mask, ref.mask);
    if (err > 1e-9) {
      std::fprintf(stderr, "pipeline/oracle mismatch %.3g; refusing to record\n", err);
      return 1;
    }
    TensorStore store;
    store.add("mask", fr.decode.mask);
    std::ofstream f(dir + "/pipeline_mask_sha256.txt");
    f << sha256_hex(store.serialize()) << "\n";
  }

  std::printf("goldens written to %s\n", dir.c_str());
  return 0;
}
