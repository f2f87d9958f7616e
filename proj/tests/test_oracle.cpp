// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "srm/checks.hpp"
#include "srm/oracle.hpp"
#include "srm/serialize.hpp"

using namespace srm;

TEST_CASE("oracle correlate single-cell and Gram identities") {
  Tensor v({1, 1, 1}, {2.0});
  Tensor t({1, 1, 1}, {3.0});
  REQUIRE(oracle::correlate_row(v, t).value() == 6.0);
  REQUIRE(oracle::correlate_col(v, t).value() == 6.0);

  // H=1, t=v: channel k=w' at (0,j) equals dot(v[0,j], v[0,w']).
  Rng rng(0x71);
  Tensor x = randn({1, 4, 3}, rng);
  Tensor gram = oracle::correlate_row(x, x);
  for (std::int64_t j = 0; j < 4; ++j)
    for (std::int64_t wp = 0; wp < 4; ++wp) {
      double dot = 0.0;
      for (std::int64_t c = 0; c < 3; ++c) dot += x.at({0, j, c}) * x.at({0, wp, c});
      REQUIRE(std::abs(gram.at({0, j, wp}) - dot) <= 1e-12);
    }

  // W=1 reduces the column oracle to a per-column Gram against unshifted t.
  Tensor y = randn({3, 1, 2}, rng);
  Tensor z = randn({3, 1, 2}, rng);
  Tensor colgram = oracle::correlate_col(y, z);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t ip = 0; ip < 3; ++ip) {
      double dot = 0.0;
      for (std::int64_t c = 0; c < 2; ++c) dot += y.at({i, 0, c}) * z.at({ip, 0, c});
      REQUIRE(std::abs(colgram.at({i, 0, ip}) - dot) <= 1e-12);
    }
}

TEST_CASE("committed correlation goldens reproduce") {
  {
    TensorStore store = TensorStore::load(std::string(SRM_GOLDEN_DIR) + "/correlate_row_3x2x2.srmblob");
    Rng rng(0x90157);
    Tensor v = randn({3, 2, 2}, rng);
    Tensor t = randn({3, 2, 2}, rng);
    REQUIRE(bit_equal(store.get("v"), v));
    REQUIRE(bit_equal(store.get("t"), t));
    REQUIRE(bit_equal(oracle::correlate_row(v, t), store.get("out")));
  }
  {
    TensorStore store = TensorStore::load(std::string(SRM_GOLDEN_DIR) + "/correlate_col_2x3x2.srmblob");
    Rng rng(0x90158);
    Tensor v = randn({2, 3, 2}, rng);
    Tensor t = randn({2, 3, 2}, rng);
    REQUIRE(bit_equal(oracle::correlate_col(v, t), store.get("out")));
  }
}

TEST_CASE("o_pipeline enforces the oracle size cap") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.height = 32 * 9;  // grid 9 > 8
  cfg.width = 32 * 2;
  cfg.c1 = cfg.c2 = cfg.c3 = cfg.c4 = 2;
  cfg.c_lang = 2;
  const SyntheticSample s = make_sample(cfg, 1, 0);
  Model m = make_model(cfg, 1);
  const std::map<int, Tensor> vision{{1, s.v1}, {2, s.v2}, {3, s.v3}};
  REQUIRE_THROWS_AS(oracle::o_pipeline(vision, s.v4, s.t, m.fusion, m.decoder, cfg.fusion_config(),
                                       cfg.decoder_config(), Mode::train),
                    ValueError);
}

TEST_CASE("o_pipeline trivial cases: zero parameters and one token") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.height = cfg.width = 32 * 2;
  cfg.c1 = 2;
  cfg.c2 = 2;
  cfg.c3 = 3;
  cfg.c4 = 3;
  cfg.c_lang = 4;
  cfg.tokens = 1;
  const SyntheticSample s = make_sample(cfg, 7, 0);
  Model m = make_model(cfg, 7);

  // Zero decoder parameters (mask head included) -> 0.5 mask from the oracle.
  const auto zero = [](LinearParams& p) {
    p.weight = Tensor::zeros(p.weight.shape(), true);
    p.bias = Tensor::zeros(p.bias.shape(), p.bias.requires_grad());
  };
  for (auto& [st, sp] : m.decoder.stages) {
    zero(sp.coord);
    zero(sp.mlp1);
    zero(sp.mlp2);
    zero(sp.lang_proj);
    zero(sp.fuse_a);
    zero(sp.fuse_b);
  }
  zero(m.decoder.mask_head);
  const std::map<int, Tensor> vision{{1, s.v1}, {2, s.v2}, {3, s.v3}};
  oracle::OraclePipeline ref = oracle::o_pipeline(vision, s.v4, s.t, m.fusion, m.decoder,
                                                  cfg.fusion_config(), cfg.decoder_config(),
                                                  Mode::train);
  REQUIRE(max_abs_diff(ref.mask, Tensor::full(ref.mask.shape(), 0.5)) == 0.0);

  // One token: every attention row is the single value 1.
  for (std::int64_t i = 0; i < ref.fusion.attention.numel(); ++i)
    REQUIRE(std::abs(ref.fusion.attention.ptr()[i] - 1.0) <= 1e-12);
}

TEST_CASE("o_pipeline agrees with the optimized pipeline on seeded instances") {
  Rng rng(0x72);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg = ModelConfig::toy();
    cfg.height = 32 * (1 + static_cast<std::int64_t>(rng.next_u64() % 8));
    cfg.width = 32 * (1 + static_cast<std::int64_t>(rng.next_u64() % 8));
    cfg.c1 = 2;
    cfg.c2 = 2;
    cfg.c3 = 3;
    cfg.c4 = 3;
    cfg.c_lang = 4;
    cfg.tokens = 1 + static_cast<std::int64_t>(rng.next_u64() % 3);
    const std::uint64_t seed = rng.next_u64();
    const SyntheticSample s = make_sample(cfg, seed, 0);
    Model model = make_model(cfg, seed);
    ForwardResult fr = forward(model, cfg, s, Mode::train);

    Model model2 = make_model(cfg, seed);
    const std::map<int, Tensor> vision{{1, s.v1}, {2, s.v2}, {3, s.v3}};
    oracle::OraclePipeline ref =
        oracle::o_pipeline(vision, s.v4, s.t, model2.fusion, model2.decoder, cfg.fusion_config(),
                           cfg.decoder_config(), Mode::train);
    REQUIRE(max_abs_diff(fr.decode.mask, ref.mask) <= 1e-10);
    REQUIRE(max_abs_diff(fr.bundle.fused, ref.fusion.fused) <= 1e-10);
  }
}

TEST_CASE("finite_diff_grad is exact on linear maps and tight on quadratics") {
  const auto quad = [](const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.ptr()[i] * x.ptr()[i];
    return acc;
  };
  Tensor g = oracle::finite_diff_grad(quad, Tensor({2}, {1.0, 2.0}));
  REQUIRE(std::abs(g.ptr()[0] - 2.0) <= 1e-8);
  REQUIRE(std::abs(g.ptr()[1] - 4.0) <= 1e-8);
}

TEST_CASE("gradcheck report carries the spec rel-err convention") {
  REQUIRE(oracle::rel_err(1.0, 1.0) == 0.0);
  REQUIRE(oracle::rel_err(0.0, 1e-9) == Catch::Approx(1e-9 / 1e-8));
  oracle::GradCheckReport r;
  r.op = "demo";
  r.note("a", 5e-5);
  REQUIRE(r.pass);
  r.note("b", 2e-4);
  REQUIRE_FALSE(r.pass);
  REQUIRE(r.max_rel_err == 2e-4);
}
