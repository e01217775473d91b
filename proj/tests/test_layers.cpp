#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "oracles.hpp"
#include "voxseg/layers.hpp"
#include "voxseg/parallel.hpp"

using namespace voxseg;

TEST_CASE("conv3d counts padded zeros on the all-ones instance") {
  auto x = new_filled<float>({1, 1, 3, 3, 3}, 1.f);
  auto w = new_filled<float>({1, 1, 3, 3, 3}, 1.f);
  auto b = Tensor<float>::zeros({1, 1, 1, 1, 1});
  auto y = conv3d(x, w, b);
  REQUIRE(y.shape() == x.shape());
  REQUIRE(y.at(0, 0, 1, 1, 1) == 27.f);
  REQUIRE(y.at(0, 0, 0, 1, 1) == 18.f);
  REQUIRE(y.at(0, 0, 0, 0, 0) == 8.f);
}

TEST_CASE("conv3d with a delta kernel is the identity") {
  Rng rng(2);
  auto x = oracle::random_tensor<float>({1, 1, 4, 5, 3}, rng);
  auto w = Tensor<float>::zeros({1, 1, 3, 3, 3});
  w.at(0, 0, 1, 1, 1) = 1.f;
  auto b = Tensor<float>::zeros({1, 1, 1, 1, 1});
  auto y = conv3d(x, w, b);
  REQUIRE(std::memcmp(y.data(), x.data(), sizeof(float) * x.size()) == 0);
}

TEST_CASE("conv3d matches the direct-loop oracle") {
  Rng rng(3);
  auto x = oracle::random_tensor<float>({1, 2, 5, 5, 5}, rng);
  auto w = oracle::random_tensor<float>({3, 2, 3, 3, 3}, rng);
  auto b = oracle::random_tensor<float>({1, 3, 1, 1, 1}, rng);
  REQUIRE(oracle::max_abs_diff(conv3d(x, w, b), oracle::conv3d(x, w, b)) < 1e-5);

  // randomized instances, double precision
  for (int trial = 0; trial < 25; ++trial) {
    Shape5 xs{1 + rng.uniform_int(0, 1), 1 + rng.uniform_int(0, 2), 1 + rng.uniform_int(0, 5),
              1 + rng.uniform_int(0, 5), 1 + rng.uniform_int(0, 5)};
    const std::int64_t co = 1 + rng.uniform_int(0, 2);
    const std::int64_t k = rng.uniform_int(0, 1) ? 3 : 1;
    auto xd = oracle::random_tensor<double>(xs, rng);
    auto wd = oracle::random_tensor<double>({co, xs.c, k, k, k}, rng);
    auto bd = oracle::random_tensor<double>({1, co, 1, 1, 1}, rng);
    REQUIRE(oracle::max_abs_diff(conv3d(xd, wd, bd), oracle::conv3d(xd, wd, bd)) < 1e-10);
  }
}

TEST_CASE("conv3d rejects mismatched channels and even kernels") {
  auto x = Tensor<float>::zeros({1, 2, 4, 4, 4});
  auto b = Tensor<float>::zeros({1, 1, 1, 1, 1});
  REQUIRE_THROWS_AS(conv3d(x, Tensor<float>::zeros({1, 3, 3, 3, 3}), b), std::invalid_argument);
  REQUIRE_THROWS_AS(conv3d(x, Tensor<float>::zeros({1, 2, 2, 2, 2}), b), std::invalid_argument);
}

TEST_CASE("conv3d adjoint identity") {
  // <conv_nobias(x, w), y> == <x, conv_backward_input(y, w)>
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Shape5 xs{1, 1 + rng.uniform_int(0, 2), 1 + rng.uniform_int(0, 4), 1 + rng.uniform_int(0, 4),
              1 + rng.uniform_int(0, 4)};
    const std::int64_t co = 1 + rng.uniform_int(0, 2);
    auto x = oracle::random_tensor<double>(xs, rng);
    auto w = oracle::random_tensor<double>({co, xs.c, 3, 3, 3}, rng);
    auto y = oracle::random_tensor<double>({xs.n, co, xs.d, xs.h, xs.w}, rng);
    auto zero_b = Tensor<double>::zeros({1, co, 1, 1, 1});
    const double lhs = oracle::dot(conv3d(x, w, zero_b), y);
    const double rhs = oracle::dot(x, conv3d_backward_input(y, w));
    REQUIRE(std::abs(lhs - rhs) < 1e-6);
  }
}

TEST_CASE("conv3d_backward_filter matches a finite-difference probe") {
  // d/dw_j of sum(conv(x, w)) equals the filter gradient with g = ones
  Rng rng(6);
  auto x = oracle::random_tensor<double>({1, 2, 3, 4, 3}, rng);
  auto w = oracle::random_tensor<double>({2, 2, 3, 3, 3}, rng);
  auto b = Tensor<double>::zeros({1, 2, 1, 1, 1});
  auto g = new_filled<double>({1, 2, 3, 4, 3}, 1.0);
  Tensor<double> gw = Tensor<double>::uninitialized(w.shape());
  Tensor<double> gb = Tensor<double>::uninitialized(b.shape());
  conv3d_backward_filter(g, x, gw, gb);
  const double eps = 1e-6;
  for (int probe = 0; probe < 20; ++probe) {
    const auto j = rng.uniform_int(0, w.size() - 1);
    Tensor<double> wp = w;
    wp[j] += eps;
    const double f_plus = sum_all(conv3d(x, wp, b));
    wp[j] -= 2 * eps;
    const double f_minus = sum_all(conv3d(x, wp, b));
    REQUIRE(std::abs((f_plus - f_minus) / (2 * eps) - gw[j]) < 1e-6);
  }
  // bias gradient with all-ones upstream is the output voxel count
  REQUIRE(gb[0] == Catch::Approx(36.0));
}

TEST_CASE("maxpool3d block maxima and tie rule") {
  auto x = Tensor<float>::from_vector({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto [y, argmax] = maxpool3d(x);
  REQUIRE(y.size() == 1);
  REQUIRE(y[0] == 8.f);
  REQUIRE(argmax[0] == 7);

  auto c = new_filled<float>({1, 2, 4, 4, 4}, 3.f);
  auto [yc, am] = maxpool3d(c);
  for (std::int64_t i = 0; i < yc.size(); ++i) REQUIRE(yc[i] == 3.f);
  // ties resolve to the first element of each block in scan order
  REQUIRE(am[0] == 0);
  REQUIRE(am[1] == 2);

  Rng rng(7);
  auto r = oracle::random_tensor<float>({2, 3, 4, 4, 4}, rng);
  auto [yr, amr] = maxpool3d(r);
  auto ref = oracle::maxpool3d(r);
  REQUIRE(oracle::max_abs_diff(yr, ref) == 0.0);

  REQUIRE_THROWS_AS(maxpool3d(Tensor<float>::zeros({1, 1, 3, 4, 4})), std::invalid_argument);
}

TEST_CASE("maxpool3d backward routes gradient to the argmax") {
  auto x = Tensor<float>::from_vector({1, 1, 2, 2, 2}, {1, 9, 3, 4, 5, 6, 7, 8});
  auto [y, argmax] = maxpool3d(x);
  auto g = new_filled<float>({1, 1, 1, 1, 1}, 2.5f);
  auto gx = maxpool3d_backward(g, argmax, x.shape());
  for (std::int64_t i = 0; i < gx.size(); ++i) REQUIRE(gx[i] == (i == 1 ? 2.5f : 0.f));
}

TEST_CASE("tconv3d scatter semantics") {
  // single input voxel broadcasts one kernel block
  auto x = Tensor<float>::zeros({1, 1, 2, 2, 2});
  x.at(0, 0, 1, 0, 1) = 2.f;
  auto w = new_filled<float>({1, 1, 2, 2, 2}, 1.f);
  auto b = Tensor<float>::zeros({1, 1, 1, 1, 1});
  auto y = tconv3d(x, w, b);
  REQUIRE(y.shape() == Shape5{1, 1, 4, 4, 4});
  for (std::int64_t z = 0; z < 4; ++z)
    for (std::int64_t yy = 0; yy < 4; ++yy)
      for (std::int64_t xx = 0; xx < 4; ++xx) {
        const bool inside = z >= 2 && z < 4 && yy < 2 && xx >= 2 && xx < 4;
        REQUIRE(y.at(0, 0, z, yy, xx) == (inside ? 2.f : 0.f));
      }

  // zero input broadcasts the bias
  Rng rng(8);
  auto zb = oracle::random_tensor<float>({1, 2, 1, 1, 1}, rng);
  auto zeros = Tensor<float>::zeros({1, 1, 2, 2, 2});
  auto wz = Tensor<float>::zeros({2, 1, 2, 2, 2});
  auto yz = tconv3d(zeros, wz, zb);
  for (std::int64_t o = 0; o < 2; ++o)
    for (std::int64_t i = 0; i < 64; ++i) REQUIRE(yz[o * 64 + i] == zb[o]);
}

TEST_CASE("tconv3d matches the scatter-loop oracle") {
  Rng rng(9);
  auto x = oracle::random_tensor<float>({1, 2, 3, 3, 3}, rng);
  auto w = oracle::random_tensor<float>({2, 2, 2, 2, 2}, rng);
  auto b = oracle::random_tensor<float>({1, 2, 1, 1, 1}, rng);
  REQUIRE(oracle::max_abs_diff(tconv3d(x, w, b), oracle::tconv3d(x, w, b)) < 1e-5);

  for (int trial = 0; trial < 25; ++trial) {
    Shape5 xs{1 + rng.uniform_int(0, 1), 1 + rng.uniform_int(0, 2), 1 + rng.uniform_int(0, 3),
              1 + rng.uniform_int(0, 3), 1 + rng.uniform_int(0, 3)};
    const std::int64_t co = 1 + rng.uniform_int(0, 2);
    auto xd = oracle::random_tensor<double>(xs, rng);
    auto wd = oracle::random_tensor<double>({co, xs.c, 2, 2, 2}, rng);
    auto bd = oracle::random_tensor<double>({1, co, 1, 1, 1}, rng);
    REQUIRE(oracle::max_abs_diff(tconv3d(xd, wd, bd), oracle::tconv3d(xd, wd, bd)) < 1e-10);
  }
}

TEST_CASE("relu") {
  auto x = Tensor<float>::from_vector({1, 1, 1, 1, 3}, {-1.f, 0.f, 2.f});
  auto y = relu(x);
  REQUIRE(y[0] == 0.f);
  REQUIRE(y[1] == 0.f);
  REQUIRE(y[2] == 2.f);

  Rng rng(10);
  auto pos = oracle::random_tensor<float>({1, 2, 3, 3, 3}, rng, 0.1, 1.0);
  auto same = relu(pos);
  REQUIRE(std::memcmp(same.data(), pos.data(), sizeof(float) * pos.size()) == 0);

  auto r = oracle::random_tensor<float>({1, 2, 3, 3, 3}, rng);
  auto twice = relu(relu(r));
  auto once = relu(r);
  REQUIRE(std::memcmp(twice.data(), once.data(), sizeof(float) * once.size()) == 0);
}

TEST_CASE("batchnorm3d on constant input is all zeros") {
  BNParams<float> p{new_filled<float>({1, 2, 1, 1, 1}, 1.f), Tensor<float>::zeros({1, 2, 1, 1, 1}),
                    Tensor<float>::zeros({1, 2, 1, 1, 1}), new_filled<float>({1, 2, 1, 1, 1}, 1.f)};
  auto x = new_filled<float>({2, 2, 2, 2, 2}, 4.f);
  auto y = batchnorm3d(x, p, BNMode::train);
  for (std::int64_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.f);
  // running stats moved toward the batch stats
  REQUIRE(p.running_mean[0] == Catch::Approx(0.4f));
  REQUIRE(p.running_var[0] == Catch::Approx(0.9f));
}

TEST_CASE("batchnorm3d affine form and moments") {
  Rng rng(11);
  auto x = oracle::random_tensor<double>({2, 3, 6, 6, 6}, rng);
  BNParams<double> p{new_filled<double>({1, 3, 1, 1, 1}, 2.0), new_filled<double>({1, 3, 1, 1, 1}, 1.0),
                     Tensor<double>::zeros({1, 3, 1, 1, 1}), new_filled<double>({1, 3, 1, 1, 1}, 1.0)};
  auto y = batchnorm3d(x, p, BNMode::train);

  const std::int64_t block = x.shape().spatial();
  for (std::int64_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    std::int64_t m = 0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < block; ++i) {
        const double v = y.data()[(n * 3 + c) * block + i];
        sum += v;
        sq += v * v;
        ++m;
      }
    const double mean = sum / m;
    const double var = sq / m - mean * mean;
    REQUIRE(std::abs(mean - 1.0) < 1e-4);   // beta
    REQUIRE(std::abs(var - 4.0) < 1e-3);    // gamma^2
  }

  // infer mode applies the running-stat affine map
  auto y2 = batchnorm3d(x, p, BNMode::infer);
  for (int probe = 0; probe < 10; ++probe) {
    const auto i = rng.uniform_int(0, x.size() - 1);
    const std::int64_t c = (i / block) % 3;
    const double expect = 2.0 * (x[i] - p.running_mean[c]) /
                              std::sqrt(p.running_var[c] + p.eps) + 1.0;
    REQUIRE(y2[i] == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("softmax_channels") {
  auto x0 = Tensor<float>::zeros({1, 2, 1, 1, 1});
  auto p0 = softmax_channels(x0);
  REQUIRE(p0[0] == 0.5f);
  REQUIRE(p0[1] == 0.5f);

  auto big = Tensor<float>::from_vector({1, 2, 1, 1, 1}, {1000.f, 0.f});
  auto pb = softmax_channels(big);
  REQUIRE(std::isfinite(pb[0]));
  REQUIRE(pb[0] == Catch::Approx(1.f));
  REQUIRE(pb[1] == Catch::Approx(0.f).margin(1e-30));

  Rng rng(12);
  auto logits = oracle::random_tensor<float>({2, 5, 3, 4, 3}, rng, -3.0, 3.0);
  auto p = softmax_channels(logits);
  const std::int64_t block = logits.shape().spatial();
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < block; ++i) {
      float sum = 0.f;
      for (std::int64_t c = 0; c < 5; ++c) {
        const float v = p.data()[(n * 5 + c) * block + i];
        REQUIRE(v > 0.f);
        REQUIRE(v < 1.f);
        sum += v;
      }
      REQUIRE(std::abs(sum - 1.f) < 1e-6f);
    }

  // adding a per-voxel constant to every channel is bitwise invisible once
  // the additions themselves are exact (integer logits, integer shifts)
  auto ints = Tensor<float>::uninitialized({1, 4, 2, 3, 2});
  for (std::int64_t i = 0; i < ints.size(); ++i)
    ints[i] = static_cast<float>(rng.uniform_int(-8, 8));
  auto shifted = ints;
  const std::int64_t iblock = ints.shape().spatial();
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 0; i < iblock; ++i)
      shifted.data()[c * iblock + i] += static_cast<float>(i % 7);
  auto pi = softmax_channels(ints);
  auto ps = softmax_channels(shifted);
  REQUIRE(std::memcmp(pi.data(), ps.data(), sizeof(float) * pi.size()) == 0);
}

TEST_CASE("layer kernels are bitwise identical across thread counts") {
  Rng rng(13);
  auto x = oracle::random_tensor<float>({2, 3, 8, 8, 8}, rng);
  auto w = oracle::random_tensor<float>({4, 3, 3, 3, 3}, rng);
  auto b = oracle::random_tensor<float>({1, 4, 1, 1, 1}, rng);
  auto wt = oracle::random_tensor<float>({4, 3, 2, 2, 2}, rng);
  auto g = oracle::random_tensor<float>({2, 4, 8, 8, 8}, rng);

  set_max_threads(1);
  auto c1 = conv3d(x, w, b);
  auto t1 = tconv3d(x, wt, b);
  Tensor<float> gw1 = Tensor<float>::uninitialized(w.shape());
  Tensor<float> gb1 = Tensor<float>::uninitialized(b.shape());
  conv3d_backward_filter(g, x, gw1, gb1);

  set_max_threads(5);
  auto c5 = conv3d(x, w, b);
  auto t5 = tconv3d(x, wt, b);
  Tensor<float> gw5 = Tensor<float>::uninitialized(w.shape());
  Tensor<float> gb5 = Tensor<float>::uninitialized(b.shape());
  conv3d_backward_filter(g, x, gw5, gb5);
  set_max_threads(0);

  REQUIRE(std::memcmp(c1.data(), c5.data(), sizeof(float) * c1.size()) == 0);
  REQUIRE(std::memcmp(t1.data(), t5.data(), sizeof(float) * t1.size()) == 0);
  REQUIRE(std::memcmp(gw1.data(), gw5.data(), sizeof(float) * gw1.size()) == 0);
  REQUIRE(std::memcmp(gb1.data(), gb5.data(), sizeof(float) * gb1.size()) == 0);
}
