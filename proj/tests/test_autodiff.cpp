// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of every differentiable primitive and the
// composite blocks built from them.

#include <catch2/catch_amalgamated.hpp>

#include "srm/fusion.hpp"
#include "srm/linear.hpp"
#include "srm/oracle.hpp"
#include "srm/tensor.hpp"

using namespace srm;
using oracle::gradcheck;

namespace {

Rng g_rng(0xabcdef);

void expect_pass(const oracle::GradCheckReport& r) {
  INFO(r.op << " max rel err " << r.max_rel_err);
  CHECK(r.pass);
}

}  // namespace

TEST_CASE("finite_diff_grad analytic cases") {
  // f = sum of squares at [1, 2] -> gradient [2, 4].
  const auto f = [](const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x.ptr()[i] * x.ptr()[i];
    return acc;
  };
  Tensor g = oracle::finite_diff_grad(f, Tensor({2}, {1.0, 2.0}));
  CHECK(std::abs(g.ptr()[0] - 2.0) <= 1e-8);
  CHECK(std::abs(g.ptr()[1] - 4.0) <= 1e-8);

  // Linear functions differentiate exactly (up to roundoff of the quotient).
  const auto lin = [](const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += 3.5 * x.ptr()[i];
    return acc;
  };
  Tensor gl = oracle::finite_diff_grad(lin, Tensor({3}, {0.1, -0.7, 2.0}));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(gl.ptr()[i] - 3.5) <= 1e-9);

  const auto bad = [](const Tensor&) { return std::numeric_limits<double>::infinity(); };
  CHECK_THROWS_AS(oracle::finite_diff_grad(bad, Tensor({1}, {0.0})), ValueError);
}

TEST_CASE("gradcheck elementwise primitives") {
  Tensor a = randn({3, 4}, g_rng);
  Tensor b = randn({3, 4}, g_rng);
  Tensor pos = rand_uniform({3, 4}, 0.5, 2.0, g_rng);

  expect_pass(gradcheck("add", [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }, {a, b}));
  expect_pass(gradcheck("sub", [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }, {a, b}));
  expect_pass(gradcheck("mul", [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }, {a, b}));
  expect_pass(gradcheck("div", [](const std::vector<Tensor>& in) { return div(in[0], in[1]); }, {a, pos}));
  expect_pass(gradcheck("scale", [](const std::vector<Tensor>& in) { return scale(in[0], -1.75); }, {a}));
  expect_pass(gradcheck("add_scalar", [](const std::vector<Tensor>& in) { return add_scalar(in[0], 0.25); }, {a}));
  expect_pass(gradcheck("sqrt", [](const std::vector<Tensor>& in) { return srm::sqrt(in[0]); }, {pos}));
  expect_pass(gradcheck("sum_all", [](const std::vector<Tensor>& in) { return sum_all(in[0]); }, {a}));
}

TEST_CASE("gradcheck activations and softmax") {
  Tensor x = randn({4, 5}, g_rng);
  expect_pass(gradcheck("relu", [](const std::vector<Tensor>& in) { return relu(in[0]); }, {x}));
  expect_pass(gradcheck("sigmoid", [](const std::vector<Tensor>& in) { return sigmoid(in[0]); }, {x}));
  expect_pass(gradcheck("tanh", [](const std::vector<Tensor>& in) { return srm::tanh(in[0]); }, {x}));
  expect_pass(gradcheck("softmax_lastaxis",
                        [](const std::vector<Tensor>& in) { return softmax_lastaxis(in[0]); }, {x}));
}

TEST_CASE("gradcheck structural ops") {
  Tensor x = randn({2, 3, 4}, g_rng);
  Tensor y = randn({2, 5, 4}, g_rng);
  expect_pass(gradcheck("permute", [](const std::vector<Tensor>& in) { return permute(in[0], {2, 0, 1}); }, {x}));
  expect_pass(gradcheck("reshape", [](const std::vector<Tensor>& in) { return reshape(in[0], {6, 4}); }, {x}));
  expect_pass(gradcheck("concat",
                        [](const std::vector<Tensor>& in) { return concat({in[0], in[1]}, 1); }, {x, y}));
  expect_pass(gradcheck("slice", [](const std::vector<Tensor>& in) { return slice(in[0], 1, 1, 2); }, {x}));
  expect_pass(gradcheck("broadcast_to",
                        [](const std::vector<Tensor>& in) { return broadcast_to(in[0], {5, 3, 4}); },
                        {randn({1, 3, 4}, g_rng)}));
  expect_pass(gradcheck("avg_pool", [](const std::vector<Tensor>& in) { return avg_pool(in[0], {0, 2}); }, {x}));
  expect_pass(gradcheck("upsample_bilinear",
                        [](const std::vector<Tensor>& in) { return upsample_bilinear(in[0], 2); },
                        {randn({3, 2, 2}, g_rng)}));
}

TEST_CASE("gradcheck matmul variants") {
  expect_pass(gradcheck("matmul_2x2",
                        [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                        {randn({3, 4}, g_rng), randn({4, 5}, g_rng)}));
  expect_pass(gradcheck("matmul_3x3",
                        [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                        {randn({2, 3, 4}, g_rng), randn({2, 4, 5}, g_rng)}));
  expect_pass(gradcheck("matmul_3x2",
                        [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                        {randn({2, 3, 4}, g_rng), randn({4, 5}, g_rng)}));
  expect_pass(gradcheck("matmul_2x3",
                        [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                        {randn({3, 4}, g_rng), randn({2, 4, 5}, g_rng)}));
}

TEST_CASE("gradcheck shifts") {
  Tensor x = randn({3, 4, 2}, g_rng);
  expect_pass(gradcheck("shift_rows", [](const std::vector<Tensor>& in) { return shift_rows(in[0], 2); }, {x}));
  expect_pass(gradcheck("shift_cols", [](const std::vector<Tensor>& in) { return shift_cols(in[0], 3); }, {x}));
  expect_pass(gradcheck("shift_concat_rows",
                        [](const std::vector<Tensor>& in) { return shift_concat_rows(in[0]); }, {x}));
  expect_pass(gradcheck("shift_concat_cols",
                        [](const std::vector<Tensor>& in) { return shift_concat_cols(in[0]); }, {x}));
}

TEST_CASE("gradcheck linear_block under each norm") {
  const std::int64_t in = 4, out = 3, positions = 12;
  Tensor x = randn({positions, in}, g_rng);
  Rng wrng(0x11);
  LinearParams proto = make_linear(in, out, Norm::batch, wrng);

  const auto run = [&](Norm norm, const char* name, bool with_bias) {
    // Batch norm cancels a per-channel bias exactly (frozen at zero there),
    // so it enters the check only for the other norms.
    const auto f = [norm, with_bias](const std::vector<Tensor>& args) {
      LinearParams p;
      p.weight = args[1];
      p.gamma = args[2];
      p.beta = args[3];
      p.bias = with_bias ? args[4] : Tensor::zeros({args[1].dim(0)});
      p.running_mean = Tensor::zeros({args[1].dim(0)});
      p.running_var = Tensor::full({args[1].dim(0)}, 1.0);
      return linear_block(args[0], p, norm, Act::relu, Mode::train);
    };
    std::vector<Tensor> inputs{x, proto.weight, proto.gamma, proto.beta};
    if (with_bias) inputs.push_back(rand_uniform({3}, -0.3, 0.3, g_rng));
    expect_pass(gradcheck(name, f, inputs));
  };
  run(Norm::none, "linear_block_none", true);
  run(Norm::layer, "linear_block_layer", true);
  run(Norm::batch, "linear_block_batch", false);
}

TEST_CASE("gradcheck flows through a custom op but flags a corrupted rule") {
  Tensor x = randn({4}, g_rng);

  // Honest custom square: backward 2x.
  const auto square_ok = [](const std::vector<Tensor>& in) {
    const Tensor& v = in[0];
    std::vector<double> d(static_cast<std::size_t>(v.numel()));
    for (std::int64_t i = 0; i < v.numel(); ++i) d[i] = v.ptr()[i] * v.ptr()[i];
    return make_op("square_ok", v.shape(), std::move(d), {v}, [v](const Tensor& g) {
      std::vector<double> n(static_cast<std::size_t>(g.numel()));
      for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = 2.0 * v.ptr()[i] * g.ptr()[i];
      return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
    });
  };
  expect_pass(gradcheck("square_ok", square_ok, {x}));

  // Deliberately corrupted rule (3x instead of 2x) must fail the gate.
  const auto square_bad = [](const std::vector<Tensor>& in) {
    const Tensor& v = in[0];
    std::vector<double> d(static_cast<std::size_t>(v.numel()));
    for (std::int64_t i = 0; i < v.numel(); ++i) d[i] = v.ptr()[i] * v.ptr()[i];
    return make_op("square_bad", v.shape(), std::move(d), {v}, [v](const Tensor& g) {
      std::vector<double> n(static_cast<std::size_t>(g.numel()));
      for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = 3.0 * v.ptr()[i] * g.ptr()[i];
      return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
    });
  };
  const auto bad = gradcheck("square_bad", square_bad, {x});
  CHECK_FALSE(bad.pass);
  CHECK(bad.op == "square_bad");
}

TEST_CASE("gradients accumulate when one tensor feeds several ops") {
  Tape tape;
  Tensor x({2}, {1.5, -2.0}, true);
  // loss = sum(x*x) + sum(x) -> d/dx = 2x + 1
  Tensor loss = add(sum_all(mul(x, x)), sum_all(x));
  Gradients g = tape.backward(loss);
  const Tensor gx = g.at(x);
  CHECK(std::abs(gx.ptr()[0] - (2.0 * 1.5 + 1.0)) <= 1e-12);
  CHECK(std::abs(gx.ptr()[1] - (2.0 * -2.0 + 1.0)) <= 1e-12);
}
