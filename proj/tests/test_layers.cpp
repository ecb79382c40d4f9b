#include <enelf/layers.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace enelf;
using namespace enelf::testutil;

namespace {

ConvParams<double> random_conv(Rng& rng, int64_t cout, int64_t cin, int64_t k,
                               int64_t stride, int64_t pad,
                               PadMode pm = PadMode::Zero) {
  ConvParams<double> p;
  p.weight = tensor_random<double>(Shape4{cout, cin, k, k}, rng,
                                   Dist::normal(0, 0.5));
  p.bias.resize(cout);
  for (auto& b : p.bias) b = rng.normal(0, 0.3);
  p.stride = stride;
  p.padding = pad;
  p.pad_mode = pm;
  return p;
}

// FD check of all three conv gradients on one case
void check_conv_grads(const TensorD& x, const ConvParams<double>& p,
                      bool transposed, double tol) {
  Rng gr(99);
  ConvParams<double> params = p;  // mutable copy for FD wiggling
  TensorD xm = x;
  const TensorD out =
      transposed ? convt2d_fwd(xm, params) : conv2d_fwd(xm, params);
  const TensorD gout =
      tensor_random<double>(out.shape(), gr, Dist::normal(0, 1));

  auto loss = [&]() {
    return probe_loss(
        transposed ? convt2d_fwd(xm, params) : conv2d_fwd(xm, params), gout);
  };

  const auto [gx, gw, gb] = transposed ? convt2d_bwd(xm, params, gout)
                                       : conv2d_bwd(xm, params, gout);
  double max_err = 0;
  for (int64_t i = 0; i < xm.size(); ++i)
    max_err = std::max(max_err, grad_err(gx[i], fd_grad(loss, xm[i])));
  for (int64_t i = 0; i < params.weight.size(); ++i)
    max_err =
        std::max(max_err, grad_err(gw[i], fd_grad(loss, params.weight[i])));
  for (size_t i = 0; i < params.bias.size(); ++i)
    max_err = std::max(max_err, grad_err(gb[i], fd_grad(loss, params.bias[i])));
  REQUIRE(max_err < tol);
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d forward

TEST_CASE("conv2d 1x1 hand-computed dot product") {
  TensorD x(Shape4{1, 2, 1, 1});
  x[0] = 1.0;
  x[1] = 2.0;
  ConvParams<double> p;
  p.weight = TensorD(Shape4{1, 2, 1, 1});
  p.weight[0] = 0.5;
  p.weight[1] = -1.0;
  p.bias = {0.25};
  const TensorD y = conv2d_fwd(x, p);
  REQUIRE(y.size() == 1);
  REQUIRE(y[0] == Catch::Approx(-1.25).epsilon(1e-12));
}

TEST_CASE("conv2d identity 3x3 kernel with pad 1 reproduces the input") {
  Rng rng(11);
  const TensorD x =
      tensor_random<double>(Shape4{1, 1, 5, 6}, rng, Dist::normal(0, 1));
  ConvParams<double> p;
  p.weight = TensorD(Shape4{1, 1, 3, 3});
  p.weight[4] = 1.0;  // center tap
  p.bias = {0.0};
  p.padding = 1;
  for (PadMode pm : {PadMode::Zero, PadMode::Replicate}) {
    p.pad_mode = pm;
    const TensorD y = conv2d_fwd(x, p);
    REQUIRE(y.same_shape(x));
    for (int64_t i = 0; i < x.size(); ++i)
      REQUIRE(y[i] == Catch::Approx(x[i]).margin(1e-15));
  }
}

TEST_CASE("conv2d output shape formula") {
  Rng rng(2);
  const TensorD x =
      tensor_random<double>(Shape4{2, 4, 10, 10}, rng, Dist::uniform(-1, 1));
  const auto p = random_conv(rng, 8, 4, 1, 1, 0);
  const TensorD y = conv2d_fwd(x, p);
  REQUIRE(y.shape() == Shape4{2, 8, 10, 10});
}

TEST_CASE("conv2d rejects channel mismatch and non-integral extents") {
  Rng rng(3);
  const TensorD x =
      tensor_random<double>(Shape4{1, 3, 5, 5}, rng, Dist::uniform(-1, 1));
  auto p = random_conv(rng, 2, 4, 1, 1, 0);
  REQUIRE_THROWS_AS(conv2d_fwd(x, p), ShapeError);
  // (5 - 2) % 2 != 0
  auto q = random_conv(rng, 2, 3, 2, 2, 0);
  REQUIRE_THROWS_AS(conv2d_fwd(x, q), ShapeError);
}

TEST_CASE("replicate padding keeps a constant channel constant") {
  Rng rng(4);
  TensorD x(Shape4{1, 1, 6, 6});
  x.fill(0.7);
  auto p = random_conv(rng, 2, 1, 3, 1, 1, PadMode::Replicate);
  const TensorD y = conv2d_fwd(x, p);
  for (int64_t c = 0; c < 2; ++c) {
    const double expect = y.at(0, c, 3, 3);
    for (int64_t r = 0; r < 6; ++r)
      for (int64_t w = 0; w < 6; ++w)
        REQUIRE(y.at(0, c, r, w) == Catch::Approx(expect).margin(1e-12));
  }
}

// ---------------------------------------------------------------------------
// conv2d backward

TEST_CASE("conv2d_bwd zero upstream gradient gives zero gradients") {
  Rng rng(5);
  const TensorD x =
      tensor_random<double>(Shape4{1, 3, 4, 4}, rng, Dist::normal(0, 1));
  const auto p = random_conv(rng, 2, 3, 3, 1, 1);
  TensorD gout(Shape4{1, 2, 4, 4});
  const auto [gx, gw, gb] = conv2d_bwd(x, p, gout);
  for (int64_t i = 0; i < gx.size(); ++i) REQUIRE(gx[i] == 0.0);
  for (int64_t i = 0; i < gw.size(); ++i) REQUIRE(gw[i] == 0.0);
  for (double b : gb) REQUIRE(b == 0.0);
}

TEST_CASE("conv2d_bwd matches finite differences") {
  Rng rng(6);
  const TensorD x =
      tensor_random<double>(Shape4{2, 3, 5, 4}, rng, Dist::normal(0, 1));
  check_conv_grads(x, random_conv(rng, 2, 3, 3, 1, 1), false, 1e-5);
  check_conv_grads(x, random_conv(rng, 2, 3, 3, 1, 1, PadMode::Replicate),
                   false, 1e-5);
  const TensorD x2 =
      tensor_random<double>(Shape4{2, 3, 6, 4}, rng, Dist::normal(0, 1));
  check_conv_grads(x2, random_conv(rng, 4, 3, 2, 2, 1), false, 1e-5);
}

TEST_CASE("conv2d_bwd 1x1 single-pixel weight gradient is the outer product") {
  Rng rng(7);
  const TensorD x =
      tensor_random<double>(Shape4{1, 3, 1, 1}, rng, Dist::normal(0, 1));
  const auto p = random_conv(rng, 2, 3, 1, 1, 0);
  const TensorD y = conv2d_fwd(x, p);
  TensorD gout =
      tensor_random<double>(y.shape(), rng, Dist::normal(0, 1));
  const auto [gx, gw, gb] = conv2d_bwd(x, p, gout);
  for (int64_t o = 0; o < 2; ++o)
    for (int64_t i = 0; i < 3; ++i)
      REQUIRE(gw.at(o, i, 0, 0) ==
              Catch::Approx(gout[o] * x[i]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// transposed conv

TEST_CASE("convt2d output size formula") {
  Rng rng(8);
  const TensorD x =
      tensor_random<double>(Shape4{1, 2, 2, 2}, rng, Dist::normal(0, 1));
  ConvParams<double> p;
  p.weight = tensor_random<double>(Shape4{2, 3, 4, 4}, rng, Dist::normal(0, 1));
  p.bias.assign(3, 0.0);
  p.stride = 2;
  p.padding = 1;
  REQUIRE(convt2d_fwd(x, p).shape() == Shape4{1, 3, 4, 4});
}

TEST_CASE("convt2d single input pixel with all-ones kernel") {
  TensorD x(Shape4{1, 1, 1, 1});
  x[0] = 1.0;
  ConvParams<double> p;
  p.weight = TensorD(Shape4{1, 1, 4, 4});
  p.weight.fill(1.0);
  p.bias = {0.0};
  p.stride = 2;
  p.padding = 1;
  const TensorD y = convt2d_fwd(x, p);
  REQUIRE(y.shape() == Shape4{1, 1, 2, 2});
  for (int64_t i = 0; i < 4; ++i) REQUIRE(y[i] == 1.0);
}

TEST_CASE("convt2d 12x upsampling sizes from the SR tower specs") {
  // SR^1 twice then SR^2: 84 -> 168 -> 336 -> 1008
  auto hout = [](int64_t h, int64_t k, int64_t s, int64_t p) {
    return (h - 1) * s - 2 * p + k;
  };
  REQUIRE(hout(84, 4, 2, 1) == 168);
  REQUIRE(hout(168, 4, 2, 1) == 336);
  REQUIRE(hout(336, 3, 3, 0) == 1008);
  ConvParams<double> p;
  p.weight = TensorD(Shape4{1, 1, 3, 3});
  p.bias = {0.0};
  p.stride = 3;
  p.padding = 0;
  REQUIRE(convt2d_out_shape(Shape4{1, 1, 336, 336}, p) ==
          Shape4{1, 1, 1008, 1008});
}

TEST_CASE("convt2d rejects sub-unit output extents") {
  ConvParams<double> p;
  p.weight = TensorD(Shape4{1, 1, 2, 2});
  p.bias = {0.0};
  p.stride = 1;
  p.padding = 2;
  REQUIRE_THROWS_AS(convt2d_out_shape(Shape4{1, 1, 2, 2}, p), ShapeError);
}

TEST_CASE("convt2d_bwd zero upstream gradient gives zeros") {
  Rng rng(9);
  const TensorD x =
      tensor_random<double>(Shape4{1, 2, 3, 3}, rng, Dist::normal(0, 1));
  ConvParams<double> p;
  p.weight = tensor_random<double>(Shape4{2, 2, 4, 4}, rng, Dist::normal(0, 1));
  p.bias.assign(2, 0.1);
  p.stride = 2;
  p.padding = 1;
  TensorD gout(convt2d_out_shape(x.shape(), p));
  const auto [gx, gw, gb] = convt2d_bwd(x, p, gout);
  for (int64_t i = 0; i < gx.size(); ++i) REQUIRE(gx[i] == 0.0);
  for (int64_t i = 0; i < gw.size(); ++i) REQUIRE(gw[i] == 0.0);
}

TEST_CASE("convt2d_bwd matches finite differences") {
  Rng rng(10);
  const TensorD x =
      tensor_random<double>(Shape4{2, 2, 3, 4}, rng, Dist::normal(0, 1));
  ConvParams<double> p;
  p.weight = tensor_random<double>(Shape4{2, 3, 4, 4}, rng, Dist::normal(0, 0.5));
  p.bias.assign(3, 0.0);
  for (auto& b : p.bias) b = rng.normal(0, 0.2);
  p.stride = 2;
  p.padding = 1;

  TensorD xm = x;
  ConvParams<double> pm = p;
  const TensorD out = convt2d_fwd(xm, pm);
  const TensorD gout =
      tensor_random<double>(out.shape(), rng, Dist::normal(0, 1));
  auto loss = [&]() { return probe_loss(convt2d_fwd(xm, pm), gout); };
  const auto [gx, gw, gb] = convt2d_bwd(xm, pm, gout);
  double max_err = 0;
  for (int64_t i = 0; i < xm.size(); ++i)
    max_err = std::max(max_err, grad_err(gx[i], fd_grad(loss, xm[i])));
  for (int64_t i = 0; i < pm.weight.size(); ++i)
    max_err = std::max(max_err, grad_err(gw[i], fd_grad(loss, pm.weight[i])));
  for (size_t i = 0; i < pm.bias.size(); ++i)
    max_err = std::max(max_err, grad_err(gb[i], fd_grad(loss, pm.bias[i])));
  REQUIRE(max_err < 1e-5);
}

TEST_CASE("convt grad_x equals conv2d_fwd of grad_out with the same kernel") {
  Rng rng(12);
  const TensorD x =
      tensor_random<double>(Shape4{1, 2, 3, 3}, rng, Dist::normal(0, 1));
  ConvParams<double> p;
  p.weight = tensor_random<double>(Shape4{2, 3, 4, 4}, rng, Dist::normal(0, 1));
  p.bias.assign(3, 0.0);
  p.stride = 2;
  p.padding = 1;
  const TensorD out = convt2d_fwd(x, p);
  const TensorD gout =
      tensor_random<double>(out.shape(), rng, Dist::normal(0, 1));
  const auto [gx, gw, gb] = convt2d_bwd(x, p, gout);

  // same weight tensor read as a conv kernel [Cout=2, Cin=3, k, k]
  ConvParams<double> q;
  q.weight = p.weight;
  q.bias.assign(2, 0.0);
  q.stride = p.stride;
  q.padding = p.padding;
  const TensorD gx_ref = conv2d_fwd(gout, q);
  REQUIRE(gx_ref.same_shape(gx));
  for (int64_t i = 0; i < gx.size(); ++i)
    REQUIRE(gx[i] == Catch::Approx(gx_ref[i]).margin(1e-12));
}

TEST_CASE("conv and convt are adjoint under the inner product") {
  Rng rng(13);
  for (int rep = 0; rep < 10; ++rep) {
    const int64_t cin = 1 + static_cast<int64_t>(rng.next_u64() % 3);
    const int64_t cout = 1 + static_cast<int64_t>(rng.next_u64() % 3);
    const int64_t k = 1 + static_cast<int64_t>(rng.next_u64() % 3);
    const int64_t s = 1 + static_cast<int64_t>(rng.next_u64() % 2);
    const int64_t pad = static_cast<int64_t>(rng.next_u64() % k);
    const int64_t ho = 2 + static_cast<int64_t>(rng.next_u64() % 3);
    const int64_t h = (ho - 1) * s + k - 2 * pad;  // exact conv geometry
    if (h < 1) continue;

    ConvParams<double> conv;
    conv.weight =
        tensor_random<double>(Shape4{cout, cin, k, k}, rng, Dist::normal(0, 1));
    conv.bias.assign(cout, 0.0);
    conv.stride = s;
    conv.padding = pad;

    const TensorD x =
        tensor_random<double>(Shape4{1, cin, h, h}, rng, Dist::normal(0, 1));
    const TensorD y =
        tensor_random<double>(Shape4{1, cout, ho, ho}, rng, Dist::normal(0, 1));

    ConvParams<double> tconv;
    tconv.weight = conv.weight;  // [Cin_t = cout, Cout_t = cin]
    tconv.bias.assign(cin, 0.0);
    tconv.stride = s;
    tconv.padding = pad;

    const TensorD cx = conv2d_fwd(x, conv);
    const TensorD ty = convt2d_fwd(y, tconv);
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (int64_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-8));
  }
}

// ---------------------------------------------------------------------------
// batch normalization

TEST_CASE("bn infer with identity stats is a near-identity") {
  Rng rng(14);
  const TensorD x =
      tensor_random<double>(Shape4{2, 3, 4, 4}, rng, Dist::uniform(-2, 2));
  auto p = BnParams<double>::identity(3);
  const TensorD y = bn_fwd(x, p, BnMode::Infer);
  for (int64_t i = 0; i < x.size(); ++i)
    REQUIRE(std::abs(y[i] - x[i]) < 1e-4);
}

TEST_CASE("bn train normalizes with batch mean and biased variance") {
  TensorD x(Shape4{2, 1, 1, 1});
  x[0] = 1.0;
  x[1] = 3.0;
  auto p = BnParams<double>::identity(1);
  BnCache<double> cache;
  const TensorD y = bn_fwd(x, p, BnMode::Train, &cache);
  REQUIRE(cache.mean[0] == Catch::Approx(2.0));
  REQUIRE(cache.var[0] == Catch::Approx(1.0));
  REQUIRE(y[0] == Catch::Approx(-1.0).margin(1e-4));
  REQUIRE(y[1] == Catch::Approx(1.0).margin(1e-4));
  // running stats: mean with batch mean, var with the unbiased variance
  REQUIRE(p.running_mean[0] == Catch::Approx(0.9 * 0.0 + 0.1 * 2.0));
  REQUIRE(p.running_var[0] == Catch::Approx(0.9 * 1.0 + 0.1 * 2.0));
}

TEST_CASE("bn zero gamma broadcasts beta in infer mode") {
  Rng rng(15);
  const TensorD x =
      tensor_random<double>(Shape4{1, 2, 3, 3}, rng, Dist::normal(0, 5));
  auto p = BnParams<double>::identity(2, 0.0);
  p.beta = {0.7, -0.3};
  const TensorD y = bn_fwd(x, p, BnMode::Infer);
  for (int64_t i = 0; i < 9; ++i) {
    REQUIRE(y[i] == 0.7);
    REQUIRE(y[9 + i] == -0.3);
  }
}

TEST_CASE("bn train rejects a degenerate batch") {
  TensorD x(Shape4{1, 2, 1, 1});
  auto p = BnParams<double>::identity(2);
  REQUIRE_THROWS_AS(bn_fwd(x, p, BnMode::Train), ShapeError);
}

TEST_CASE("bn_bwd gradients match finite differences in train mode") {
  Rng rng(16);
  TensorD x =
      tensor_random<double>(Shape4{2, 2, 3, 3}, rng, Dist::normal(0.3, 1.5));
  auto p = BnParams<double>::identity(2);
  p.gamma = {1.2, -0.7};
  p.beta = {0.1, 0.4};

  const TensorD gout =
      tensor_random<double>(x.shape(), rng, Dist::normal(0, 1));
  auto loss = [&]() {
    auto pc = p;  // keep running stats fixed across FD evaluations
    return probe_loss(bn_fwd(x, pc, BnMode::Train), gout);
  };

  auto pc = p;
  BnCache<double> cache;
  const TensorD y = bn_fwd(x, pc, BnMode::Train, &cache);
  const auto [gx, gg, gb] = bn_bwd(x, p, BnMode::Train, gout, cache);

  double max_err = 0;
  for (int64_t i = 0; i < x.size(); ++i)
    max_err = std::max(max_err, grad_err(gx[i], fd_grad(loss, x[i])));
  for (size_t c = 0; c < 2; ++c) {
    max_err = std::max(max_err, grad_err(gg[c], fd_grad(loss, p.gamma[c])));
    max_err = std::max(max_err, grad_err(gb[c], fd_grad(loss, p.beta[c])));
  }
  REQUIRE(max_err < 1e-5);

  // grad_beta is the per-channel sum of grad_out
  for (int64_t c = 0; c < 2; ++c) {
    double sum = 0;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < 9; ++i)
        sum += gout.data()[(n * 2 + c) * 9 + i];
    REQUIRE(gb[static_cast<size_t>(c)] == Catch::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("bn_bwd zero upstream gradient gives zeros") {
  Rng rng(17);
  TensorD x =
      tensor_random<double>(Shape4{1, 2, 2, 2}, rng, Dist::normal(0, 1));
  auto p = BnParams<double>::identity(2);
  BnCache<double> cache;
  auto pc = p;
  bn_fwd(x, pc, BnMode::Train, &cache);
  TensorD gout(x.shape());
  const auto [gx, gg, gb] = bn_bwd(x, p, BnMode::Train, gout, cache);
  for (int64_t i = 0; i < gx.size(); ++i) REQUIRE(gx[i] == 0.0);
  for (double v : gg) REQUIRE(v == 0.0);
  for (double v : gb) REQUIRE(v == 0.0);
}

// ---------------------------------------------------------------------------
// activations

TEST_CASE("gelu closed-form values") {
  REQUIRE(gelu_scalar(0.0) == 0.0);
  REQUIRE(gelu_scalar(1.0) == Catch::Approx(0.8412).margin(1e-3));
}

TEST_CASE("gelu_bwd matches finite differences") {
  Rng rng(18);
  TensorD x =
      tensor_random<double>(Shape4{1, 1, 4, 8}, rng, Dist::uniform(-3, 3));
  const TensorD gout =
      tensor_random<double>(x.shape(), rng, Dist::normal(0, 1));
  auto loss = [&]() { return probe_loss(gelu_fwd(x), gout); };
  const TensorD gx = gelu_bwd(x, gout);
  double max_err = 0;
  for (int64_t i = 0; i < x.size(); ++i)
    max_err = std::max(max_err, grad_err(gx[i], fd_grad(loss, x[i])));
  REQUIRE(max_err < 1e-6);
}

TEST_CASE("sigmoid_bwd matches finite differences") {
  Rng rng(19);
  TensorD x =
      tensor_random<double>(Shape4{1, 1, 3, 5}, rng, Dist::uniform(-3, 3));
  const TensorD gout =
      tensor_random<double>(x.shape(), rng, Dist::normal(0, 1));
  auto loss = [&]() { return probe_loss(sigmoid_fwd(x), gout); };
  const TensorD gx = sigmoid_bwd(sigmoid_fwd(x), gout);
  double max_err = 0;
  for (int64_t i = 0; i < x.size(); ++i)
    max_err = std::max(max_err, grad_err(gx[i], fd_grad(loss, x[i])));
  REQUIRE(max_err < 1e-6);
}

// ---------------------------------------------------------------------------
// purity

TEST_CASE("layer ops do not modify inputs and repeat bit-identically") {
  Rng rng(20);
  const TensorD x =
      tensor_random<double>(Shape4{1, 3, 5, 5}, rng, Dist::normal(0, 1));
  const TensorD x_copy = x;
  const auto p = random_conv(rng, 2, 3, 3, 1, 1);

  const TensorD y1 = conv2d_fwd(x, p);
  const TensorD y2 = conv2d_fwd(x, p);
  for (int64_t i = 0; i < x.size(); ++i) REQUIRE(x[i] == x_copy[i]);
  for (int64_t i = 0; i < y1.size(); ++i) REQUIRE(y1[i] == y2[i]);

  const TensorD g1 = gelu_fwd(x);
  const TensorD g2 = gelu_fwd(x);
  for (int64_t i = 0; i < g1.size(); ++i) REQUIRE(g1[i] == g2[i]);

  auto bp = BnParams<double>::identity(3);
  const TensorD b1 = bn_fwd(x, bp, BnMode::Infer);
  const TensorD b2 = bn_fwd(x, bp, BnMode::Infer);
  for (int64_t i = 0; i < b1.size(); ++i) REQUIRE(b1[i] == b2[i]);
}
