// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "srm/fusion.hpp"
#include "srm/oracle.hpp"
#include "srm/serialize.hpp"
#include "srm/sha256.hpp"

using namespace srm;

namespace {

Tensor random_hwc(std::int64_t h, std::int64_t w, std::int64_t c, Rng& rng) {
  return randn({h, w, c}, rng);
}

FusionBundle run_bundle(const FusionConfig& cfg, std::uint64_t seed, Mode mode = Mode::train) {
  Rng prng(Rng::derive(seed, 1));
  FusionParams params = make_fusion_params(cfg, prng);
  Rng drng(Rng::derive(seed, 2));
  Tensor v4 = randn({cfg.h, cfg.w, cfg.c4}, drng);
  Tensor t = randn({5, cfg.c_lang}, drng);
  return s2rm_forward(v4, t, params, cfg, mode);
}

}  // namespace

TEST_CASE("positional tensor closed forms") {
  Tensor p1 = make_positional(1, 1);
  const double expect[8] = {0, 0, -1, -1, 1, 1, 1, 1};
  for (int c = 0; c < 8; ++c) REQUIRE(p1.at({0, 0, c}) == expect[c]);

  Tensor p = make_positional(3, 4);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      REQUIRE(p.at({i, j, 6}) == 1.0 / 4.0);
      REQUIRE(p.at({i, j, 7}) == 1.0 / 3.0);
      for (int c = 0; c < 8; ++c) {
        REQUIRE(p.at({i, j, c}) <= 1.0);
        REQUIRE(p.at({i, j, c}) >= -1.0);
      }
    }

  Tensor p2 = make_positional(2, 2);
  REQUIRE(p2.at({0, 0, 0}) == -0.5);  // x_c
  REQUIRE(p2.at({0, 0, 1}) == -0.5);  // y_c

  // Matches the loop oracle everywhere.
  REQUIRE(max_abs_diff(p, oracle::o_positional(3, 4)) == 0.0);
}

TEST_CASE("shift laws hold exhaustively and bit-exactly") {
  Rng rng(0x51);
  for (std::int64_t h = 1; h <= 4; ++h)
    for (std::int64_t w = 1; w <= 5; ++w) {
      Tensor x = random_hwc(h, w, 3, rng);
      REQUIRE(bit_equal(shift_rows(x, 0), x));
      REQUIRE(bit_equal(shift_rows(x, h), x));
      REQUIRE(bit_equal(shift_cols(x, 0), x));
      REQUIRE(bit_equal(shift_cols(x, w), x));
      for (std::int64_t a = 0; a <= 2 * h; ++a)
        for (std::int64_t b = 0; b <= 2 * h; ++b)
          REQUIRE(bit_equal(shift_rows(shift_rows(x, a), b), shift_rows(x, (a + b) % h)));
      for (std::int64_t a = 0; a <= 2 * w; ++a)
        for (std::int64_t b = 0; b <= 2 * w; ++b)
          REQUIRE(bit_equal(shift_cols(shift_cols(x, a), b), shift_cols(x, (a + b) % w)));
    }
}

TEST_CASE("shift examples") {
  // H=2 rows [a;b] with shift 1 -> [b;a]
  Tensor x({2, 1, 1}, {1.0, 2.0});
  Tensor s = shift_rows(x, 1);
  REQUIRE(s.at({0, 0, 0}) == 2.0);
  REQUIRE(s.at({1, 0, 0}) == 1.0);

  // W=3 cols [a b c] with shift 1 -> [c a b]
  Tensor y({1, 3, 1}, {1.0, 2.0, 3.0});
  Tensor sc = shift_cols(y, 1);
  REQUIRE(sc.at({0, 0, 0}) == 3.0);
  REQUIRE(sc.at({0, 1, 0}) == 1.0);
  REQUIRE(sc.at({0, 2, 0}) == 2.0);
}

TEST_CASE("shift_concat block structure") {
  // H=1 leaves the tensor unchanged.
  Rng rng(0x52);
  Tensor flat = random_hwc(1, 4, 2, rng);
  REQUIRE(bit_equal(shift_concat_rows(flat), flat));
  Tensor thin = random_hwc(3, 1, 2, rng);
  REQUIRE(bit_equal(shift_concat_cols(thin), thin));

  // H=2, W=1: x=[a;b] -> [[a,b],[b,a]] along the width.
  Tensor x({2, 1, 1}, {1.0, 2.0});
  Tensor cat = shift_concat_rows(x);
  REQUIRE(cat.shape() == Shape{2, 2, 1});
  REQUIRE(cat.at({0, 0, 0}) == 1.0);
  REQUIRE(cat.at({0, 1, 0}) == 2.0);
  REQUIRE(cat.at({1, 0, 0}) == 2.0);
  REQUIRE(cat.at({1, 1, 0}) == 1.0);

  // H=1, W=2: x=[a b] -> rows [a b; b a].
  Tensor y({1, 2, 1}, {1.0, 2.0});
  Tensor cc = shift_concat_cols(y);
  REQUIRE(cc.shape() == Shape{2, 2, 1});
  REQUIRE(cc.at({0, 0, 0}) == 1.0);
  REQUIRE(cc.at({0, 1, 0}) == 2.0);
  REQUIRE(cc.at({1, 0, 0}) == 2.0);
  REQUIRE(cc.at({1, 1, 0}) == 1.0);

  // Random cases: width-block s equals shift_rows(x, s) bit-exactly.
  Tensor z = random_hwc(3, 4, 2, rng);
  Tensor zr = shift_concat_rows(z);
  for (std::int64_t s = 0; s < 3; ++s)
    REQUIRE(bit_equal(slice(zr, 1, s * 4, 4), shift_rows(z, s)));
  Tensor z2 = random_hwc(2, 3, 2, rng);
  Tensor zc = shift_concat_cols(z2);
  for (std::int64_t s = 0; s < 3; ++s)
    REQUIRE(bit_equal(slice(zc, 0, s * 2, 2), shift_cols(z2, s)));
}

TEST_CASE("correlate single-cell dot products and zero propagation") {
  Tensor v({1, 1, 2}, {1.0, 2.0});
  Tensor g({1, 1, 2}, {3.0, 4.0});
  REQUIRE(correlate_rowwise(v, g).value() == 11.0);
  REQUIRE(correlate_colwise(v, g).value() == 11.0);

  Rng rng(0x53);
  Tensor parsed = random_hwc(2, 3, 4, rng);
  Tensor zero_gen = Tensor::zeros({2, 6 * 2, 4});
  // gen_row of zeros -> all-zero map (note gen width = H*W for map shape).
  Tensor m = correlate_rowwise(parsed, Tensor::zeros({2, 6, 4}));
  REQUIRE(max_abs_diff(m, Tensor::zeros({2, 3, 6})) == 0.0);
  Tensor mz = correlate_colwise(Tensor::zeros({2, 3, 4}), random_hwc(6, 3, 4, rng));
  REQUIRE(max_abs_diff(mz, Tensor::zeros({2, 3, 6})) == 0.0);
}

TEST_CASE("correlate matches the brute-force index formulas") {
  Rng rng(0x54);
  {
    Tensor v = random_hwc(3, 4, 5, rng);
    Tensor t = random_hwc(3, 4, 5, rng);
    Tensor opt = correlate_rowwise(v, shift_concat_rows(t));
    Tensor ref = oracle::correlate_row(v, t);
    REQUIRE(opt.shape() == ref.shape());
    REQUIRE(max_abs_diff(opt, ref) <= 1e-10);
  }
  {
    Tensor v = random_hwc(2, 3, 4, rng);
    Tensor t = random_hwc(2, 3, 4, rng);
    Tensor opt = correlate_colwise(v, shift_concat_cols(t));
    Tensor ref = oracle::correlate_col(v, t);
    REQUIRE(opt.shape() == ref.shape());
    REQUIRE(max_abs_diff(opt, ref) <= 1e-10);
  }
}

TEST_CASE("coparse symmetry, no-shift degenerate case, ablations") {
  Rng rng(0x55);
  FusionConfig cfg;
  cfg.h = 3;
  cfg.w = 4;
  cfg.c4 = 5;

  // v4 == t_dist makes the two directions identical.
  Tensor x = random_hwc(3, 4, 5, rng);
  CoparseMaps maps = coparse(x, x, cfg);
  REQUIRE(bit_equal(maps.c_l2v, maps.c_v2l));
  REQUIRE(bit_equal(maps.r_l2v, maps.r_v2l));

  // 1x1 grid: shifting is impossible, so the no-shift mode agrees bit-exactly.
  FusionConfig tiny = cfg;
  tiny.h = tiny.w = 1;
  Tensor a = random_hwc(1, 1, 5, rng), b = random_hwc(1, 1, 5, rng);
  CoparseMaps full = coparse(a, b, tiny);
  tiny.shift = false;
  CoparseMaps noshift = coparse(a, b, tiny);
  REQUIRE(bit_equal(full.c_l2v, noshift.c_l2v));
  REQUIRE(bit_equal(full.r_l2v, noshift.r_l2v));

  // Dropping a direction zeroes exactly that pair.
  FusionConfig drop = cfg;
  drop.use_l2v = false;
  Tensor v = random_hwc(3, 4, 5, rng), t = random_hwc(3, 4, 5, rng);
  CoparseMaps dropped = coparse(v, t, drop);
  REQUIRE(max_abs_diff(dropped.c_l2v, Tensor::zeros({3, 4, 12})) == 0.0);
  REQUIRE(max_abs_diff(dropped.r_l2v, Tensor::zeros({3, 4, 12})) == 0.0);
  REQUIRE(max_abs_diff(dropped.c_v2l, oracle::correlate_row(t, v)) <= 1e-10);
}

TEST_CASE("coparse matches loop oracles on random instances") {
  Rng rng(0x56);
  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.next_u64() % 5);
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.next_u64() % 5);
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.next_u64() % 8);
    FusionConfig cfg;
    cfg.h = h;
    cfg.w = w;
    cfg.c4 = c;
    Tensor v = random_hwc(h, w, c, rng);
    Tensor t = random_hwc(h, w, c, rng);
    CoparseMaps maps = coparse(v, t, cfg);
    REQUIRE(max_abs_diff(maps.c_l2v, oracle::correlate_row(v, t)) <= 1e-10);
    REQUIRE(max_abs_diff(maps.r_l2v, oracle::correlate_col(v, t)) <= 1e-10);
    REQUIRE(max_abs_diff(maps.c_v2l, oracle::correlate_row(t, v)) <= 1e-10);
    REQUIRE(max_abs_diff(maps.r_v2l, oracle::correlate_col(t, v)) <= 1e-10);
  }
}

TEST_CASE("map shapes keep H and W straight on non-square grids") {
  Rng rng(0x57);
  FusionConfig cfg;
  cfg.h = 4;
  cfg.w = 5;
  cfg.c4 = 3;
  Tensor v = random_hwc(4, 5, 3, rng), t = random_hwc(4, 5, 3, rng);
  CoparseMaps maps = coparse(v, t, cfg);
  REQUIRE(maps.c_l2v.shape() == Shape{4, 5, 20});
  REQUIRE(maps.r_l2v.shape() == Shape{4, 5, 20});
  REQUIRE(maps.c_v2l.shape() == Shape{4, 5, 20});
  REQUIRE(maps.r_v2l.shape() == Shape{4, 5, 20});
}

TEST_CASE("balance trivial gates and residual identity") {
  Rng rng(0x58);
  FusionConfig cfg;
  cfg.h = 2;
  cfg.w = 2;
  cfg.c4 = 3;
  FusionParams params = make_fusion_params(cfg, rng);

  // Zero gate conv -> sigmoid(0) = 0.5 on every gate.
  params.gate.weight = Tensor::zeros({4, 4 * cfg.h * cfg.w}, true);
  params.gate.bias = Tensor::zeros({4}, true);
  Tensor v4 = random_hwc(2, 2, 3, rng);
  CoparseMaps maps = coparse(v4, random_hwc(2, 2, 3, rng), cfg);
  auto [gates, fused] = balance(maps, v4, params, cfg, Mode::train);
  for (int i = 0; i < 4; ++i) REQUIRE(gates.ptr()[i] == 0.5);

  // All-zero maps with zero compress offset -> fused == v4 (BN of zeros is
  // zero, relu keeps it, residual passes v4 through).
  CoparseMaps zeros;
  zeros.c_l2v = Tensor::zeros({2, 2, 4});
  zeros.r_l2v = Tensor::zeros({2, 2, 4});
  zeros.c_v2l = Tensor::zeros({2, 2, 4});
  zeros.r_v2l = Tensor::zeros({2, 2, 4});
  auto [g2, fused2] = balance(zeros, v4, params, cfg, Mode::train);
  REQUIRE(max_abs_diff(fused2, v4) == 0.0);
}

TEST_CASE("balance matches loop oracle") {
  Rng rng(0x59);
  FusionConfig cfg;
  cfg.h = 4;
  cfg.w = 4;
  cfg.c4 = 6;
  for (int trial = 0; trial < 5; ++trial) {
    FusionParams params = make_fusion_params(cfg, rng);
    Tensor v4 = random_hwc(cfg.h, cfg.w, cfg.c4, rng);
    Tensor td = random_hwc(cfg.h, cfg.w, cfg.c4, rng);
    CoparseMaps maps = coparse(v4, td, cfg);

    auto [gates, fused] = balance(maps, v4, params, cfg, Mode::train);

    oracle::OracleFusion ref;
    ref.t_dist = td;
    oracle::o_coparse(v4, td, cfg, ref);
    oracle::o_balance(v4, params, cfg, Mode::train, ref);
    REQUIRE(max_abs_diff(gates, ref.gates) <= 1e-10);
    REQUIRE(max_abs_diff(fused, ref.fused) <= 1e-10);
  }
}

TEST_CASE("distribute_language trivial token cases") {
  Rng rng(0x60);
  FusionConfig cfg;
  cfg.h = 2;
  cfg.w = 3;
  cfg.c4 = 4;
  cfg.c_lang = 5;
  FusionParams params = make_fusion_params(cfg, rng);
  Tensor v4 = random_hwc(cfg.h, cfg.w, cfg.c4, rng);
  Tensor pos = make_positional(cfg.h, cfg.w);

  // Single token: attention collapses to an all-ones column and the output
  // tiles that token's projected value everywhere.
  Tensor t1 = randn({1, cfg.c_lang}, rng);
  Tensor att;
  Tensor out1 = distribute_language(v4, t1, pos, params, Mode::train, &att);
  REQUIRE(att.shape() == Shape{6, 1});
  for (int i = 0; i < 6; ++i) REQUIRE(std::abs(att.ptr()[i] - 1.0) <= 1e-12);
  for (std::int64_t i = 0; i < cfg.h; ++i)
    for (std::int64_t j = 0; j < cfg.w; ++j)
      for (std::int64_t c = 0; c < cfg.c4; ++c)
        REQUIRE(std::abs(out1.at({i, j, c}) - out1.at({0, 0, c})) <= 1e-12);

  // Two identical tokens behave exactly like the single token.
  std::vector<double> twice(t1.data().begin(), t1.data().end());
  twice.insert(twice.end(), t1.data().begin(), t1.data().end());
  Tensor t2({2, cfg.c_lang}, std::move(twice));
  Tensor out2 = distribute_language(v4, t2, pos, params, Mode::train);
  REQUIRE(max_abs_diff(out1, out2) <= 1e-12);

  // Clip length enforcement.
  Tensor too_long = randn({kMaxTokens + 1, cfg.c_lang}, rng);
  REQUIRE_THROWS_AS(distribute_language(v4, too_long, pos, params, Mode::train), ValueError);
}

TEST_CASE("distribute_language matches the loop oracle") {
  Rng rng(0x61);
  FusionConfig cfg;
  cfg.h = 4;
  cfg.w = 4;
  cfg.c4 = 6;
  cfg.c_lang = 7;
  for (int trial = 0; trial < 5; ++trial) {
    FusionParams params = make_fusion_params(cfg, rng);
    Tensor v4 = random_hwc(4, 4, 6, rng);
    Tensor t = randn({5, 7}, rng);
    Tensor att;
    Tensor got = distribute_language(v4, t, make_positional(4, 4), params, Mode::train, &att);
    Tensor ref_att;
    Tensor ref = oracle::o_distribute(v4, t, params, Mode::train, &ref_att);
    REQUIRE(max_abs_diff(got, ref) <= 1e-10);
    REQUIRE(max_abs_diff(att, ref_att) <= 1e-10);
  }
}

TEST_CASE("attention rows sum to one") {
  Rng rng(0x62);
  FusionConfig cfg;
  cfg.h = 3;
  cfg.w = 5;
  cfg.c4 = 4;
  cfg.c_lang = 6;
  FusionParams params = make_fusion_params(cfg, rng);
  Tensor att;
  distribute_language(randn({3, 5, 4}, rng), randn({4, 6}, rng), make_positional(3, 5), params,
                      Mode::train, &att);
  for (std::int64_t r = 0; r < att.dim(0); ++r) {
    double sum = 0.0;
    for (std::int64_t c = 0; c < att.dim(1); ++c) sum += att.at({r, c});
    REQUIRE(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("s2rm_forward equals the full fusion oracle") {
  Rng rng(0x63);
  for (int trial = 0; trial < 5; ++trial) {
    FusionConfig cfg;
    cfg.h = 1 + static_cast<std::int64_t>(rng.next_u64() % 5);
    cfg.w = 1 + static_cast<std::int64_t>(rng.next_u64() % 5);
    cfg.c4 = 2 + static_cast<std::int64_t>(rng.next_u64() % 5);
    cfg.c_lang = 3 + static_cast<std::int64_t>(rng.next_u64() % 5);
    FusionParams params = make_fusion_params(cfg, rng);
    Tensor v4 = randn({cfg.h, cfg.w, cfg.c4}, rng);
    Tensor t = randn({3, cfg.c_lang}, rng);

    FusionBundle got = s2rm_forward(v4, t, params, cfg, Mode::train);
    oracle::OracleFusion ref = oracle::o_s2rm(v4, t, params, cfg, Mode::train);
    REQUIRE(max_abs_diff(got.t_dist, ref.t_dist) <= 1e-10);
    REQUIRE(max_abs_diff(got.c_l2v, ref.c_l2v) <= 1e-10);
    REQUIRE(max_abs_diff(got.r_l2v, ref.r_l2v) <= 1e-10);
    REQUIRE(max_abs_diff(got.c_v2l, ref.c_v2l) <= 1e-10);
    REQUIRE(max_abs_diff(got.r_v2l, ref.r_v2l) <= 1e-10);
    REQUIRE(max_abs_diff(got.gates, ref.gates) <= 1e-10);
    REQUIRE(max_abs_diff(got.fused, ref.fused) <= 1e-10);
  }
}

TEST_CASE("gates sit strictly inside (0,1); no-balance pins them to one") {
  FusionConfig cfg;
  cfg.h = 4;
  cfg.w = 4;
  cfg.c4 = 8;
  cfg.c_lang = 6;
  FusionBundle bundle = run_bundle(cfg, 0xbeef);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(bundle.gates.ptr()[i] > 0.0);
    REQUIRE(bundle.gates.ptr()[i] < 1.0);
  }

  FusionConfig nb = cfg;
  nb.balance = false;
  FusionBundle fixed = run_bundle(nb, 0xbeef);
  for (int i = 0; i < 4; ++i) REQUIRE(fixed.gates.ptr()[i] == 1.0);

  // The no-balance output equals the gates-fixed-to-1 computation bit-exactly:
  // recompute the full path with gates forced to one.
  Rng prng(Rng::derive(0xbeef, 1));
  FusionParams params = make_fusion_params(cfg, prng);
  Rng drng(Rng::derive(0xbeef, 2));
  Tensor v4 = randn({cfg.h, cfg.w, cfg.c4}, drng);
  Tensor t = randn({5, cfg.c_lang}, drng);
  Tensor pos = make_positional(cfg.h, cfg.w);
  Tensor td = distribute_language(v4, t, pos, params, Mode::train);
  CoparseMaps maps = coparse(v4, td, cfg);
  const Tensor ones = Tensor::full({4}, 1.0);
  std::vector<Tensor> scaled;
  const std::vector<Tensor> list{maps.c_l2v, maps.r_l2v, maps.c_v2l, maps.r_v2l};
  for (int i = 0; i < 4; ++i)
    scaled.push_back(mul(list[static_cast<std::size_t>(i)],
                         broadcast_to(slice(ones, 0, i, 1), maps.c_l2v.shape())));
  // params.compress running stats were touched above; rebuild params to keep
  // the comparison on identical state.
  Rng prng2(Rng::derive(0xbeef, 1));
  FusionParams params2 = make_fusion_params(cfg, prng2);
  Tensor manual =
      add(v4, linear_block(concat(scaled, 2), params2.compress, Norm::batch, Act::relu, Mode::train));
  REQUIRE(bit_equal(fixed.fused, manual));
}

TEST_CASE("gradients flow from fused output to both modalities") {
  FusionConfig cfg;
  cfg.h = 3;
  cfg.w = 4;
  cfg.c4 = 4;
  cfg.c_lang = 5;
  Rng rng(0x64);
  FusionParams params = make_fusion_params(cfg, rng);
  Tensor v4 = randn({3, 4, 4}, rng);
  Tensor t = randn({3, 5}, rng);

  const auto f = [&params, &cfg](const std::vector<Tensor>& in) {
    return s2rm_forward(in[0], in[1], params, cfg, Mode::train).fused;
  };
  const auto report = oracle::gradcheck("s2rm_forward", f, {v4, t});
  INFO("max rel err " << report.max_rel_err);
  REQUIRE(report.pass);
}

TEST_CASE("fusion bundle hash is stable across runs (golden)") {
  FusionConfig cfg;
  cfg.h = 8;
  cfg.w = 8;
  cfg.c4 = 16;
  cfg.c_lang = 32;
  FusionBundle bundle = run_bundle(cfg, 0x5eed);
  TensorStore store;
  store.add("t_dist", bundle.t_dist);
  store.add("c_l2v", bundle.c_l2v);
  store.add("r_l2v", bundle.r_l2v);
  store.add("c_v2l", bundle.c_v2l);
  store.add("r_v2l", bundle.r_v2l);
  store.add("gates", bundle.gates);
  store.add("fused", bundle.fused);
  const auto bytes = store.serialize();
  const std::string hash = sha256_hex(bytes);

  std::ifstream golden(std::string(SRM_GOLDEN_DIR) + "/bundle_sha256.txt");
  REQUIRE(golden.good());
  std::string expected;
  golden >> expected;
  REQUIRE(hash == expected);
}
