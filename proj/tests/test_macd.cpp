#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mid/macd.hpp"
#include "test_support.hpp"

using mid::DecomposedConv;
using mid::Modality;
using mid::Tensor;
using testsup::rand_tensor;

namespace {

DecomposedConv random_decomp(int K, int S, int Cin, int Cout, uint64_t seed) {
  mid::Rng rng(seed);
  DecomposedConv p = mid::init_decomposition(K, S, Cin, Cout, rng);
  // break the tied-init symmetry so modality banks differ
  for (Tensor* a : {&p.alpha_rgb, &p.alpha_ir, &p.alpha_mix})
    for (int64_t i = 0; i < a->numel(); ++i) a->data()[i] += rng.uniform(-0.3f, 0.3f);
  return p;
}

// direct contraction of the filter decomposition, no tensor ops
Tensor naive_compose(const DecomposedConv& p, Modality m) {
  const Tensor& alpha = p.alpha(m);
  Tensor w = Tensor::zeros({p.Cout, p.Cin, p.S, p.S});
  for (int o = 0; o < p.Cout; ++o)
    for (int c = 0; c < p.Cin; ++c)
      for (int u = 0; u < p.S; ++u)
        for (int v = 0; v < p.S; ++v) {
          double acc = 0.0;
          for (int k = 0; k < p.K; ++k)
            acc += double(alpha.data()[(size_t(k) * p.S + u) * p.S + v]) *
                   double(p.psi.data()[(size_t(k) * p.Cin + c) * p.Cout + o]);
          w.data()[((size_t(o) * p.Cin + c) * p.S + u) * p.S + v] = float(acc);
        }
  return w;
}

}  // namespace

TEST_CASE("filter composition closed forms") {
  // K=1, alpha == 1: each filter is its psi coefficient broadcast over SxS
  mid::Rng rng(3);
  DecomposedConv p = mid::init_decomposition(1, 3, 2, 2, rng);
  for (int64_t i = 0; i < p.alpha_rgb.numel(); ++i) p.alpha_rgb.data()[i] = 1.0f;
  Tensor w = mid::compose_filters(p, Modality::rgb);
  for (int o = 0; o < 2; ++o)
    for (int c = 0; c < 2; ++c) {
      const float want = p.psi.data()[size_t(c) * 2 + o];
      for (int i = 0; i < 9; ++i)
        CHECK(w.data()[(size_t(o) * 2 + c) * 9 + i] == Catch::Approx(want));
    }

  // psi == 0 annihilates everything
  DecomposedConv z = mid::init_decomposition(4, 3, 2, 3, rng);
  for (int64_t i = 0; i < z.psi.numel(); ++i) z.psi.data()[i] = 0.0f;
  Tensor wz = mid::compose_filters(z, Modality::ir);
  for (int64_t i = 0; i < wz.numel(); ++i) CHECK(wz.data()[i] == 0.0f);
}

TEST_CASE("filter composition matches the contraction oracle") {
  DecomposedConv p = random_decomp(4, 3, 2, 2, 11);
  for (Modality m : {Modality::rgb, Modality::ir, Modality::mix}) {
    Tensor got = mid::compose_filters(p, m);
    Tensor want = naive_compose(p, m);
    REQUIRE(got.shape() == want.shape());
    for (int64_t i = 0; i < got.numel(); ++i)
      CHECK(got.data()[i] == Catch::Approx(want.data()[i]).margin(1e-6));
  }
}

TEST_CASE("two-stage forward equals composed forward") {
  mid::Rng rng(19);
  int idx = 0;
  for (auto [K, S, Cin, Cout] : {std::tuple{1, 1, 1, 1}, std::tuple{2, 3, 1, 4},
                                 std::tuple{4, 3, 3, 2}, std::tuple{3, 5, 2, 3}}) {
    DecomposedConv p = random_decomp(K, S, Cin, Cout, 100 + uint64_t(idx++));
    Tensor x = rand_tensor({2, Cin, 8, 7}, rng);
    for (Modality m : {Modality::rgb, Modality::mix}) {
      Tensor a = mid::macd_forward(x, p, m, 1, S / 2);
      Tensor b = mid::macd_forward_two_stage(x, p, m, 1, S / 2);
      REQUIRE(a.shape() == b.shape());
      double max_abs = 0.0;
      for (int64_t i = 0; i < a.numel(); ++i)
        max_abs = std::max(max_abs, std::abs(double(a.data()[i]) - double(b.data()[i])));
      CHECK(max_abs < 1e-5);
    }
  }
}

TEST_CASE("modality banks select behavior") {
  DecomposedConv p = random_decomp(3, 3, 2, 2, 23);
  mid::Rng rng(5);
  Tensor x = rand_tensor({1, 2, 6, 6}, rng);
  Tensor y_rgb = mid::macd_forward(x, p, Modality::rgb, 1, 1);
  Tensor y_ir = mid::macd_forward(x, p, Modality::ir, 1, 1);
  double diff = 0.0;
  for (int64_t i = 0; i < y_rgb.numel(); ++i)
    diff = std::max(diff, std::abs(double(y_rgb.data()[i]) - double(y_ir.data()[i])));
  CHECK(diff > 1e-4);  // distinct banks, distinct outputs

  // equal banks erase the modality distinction
  for (int64_t i = 0; i < p.alpha_rgb.numel(); ++i) p.alpha_ir.data()[i] = p.alpha_rgb.data()[i];
  Tensor y_ir2 = mid::macd_forward(x, p, Modality::ir, 1, 1);
  for (int64_t i = 0; i < y_rgb.numel(); ++i) CHECK(y_ir2.data()[i] == y_rgb.data()[i]);
}

TEST_CASE("initialization ties the banks") {
  mid::Rng rng(31);
  DecomposedConv p = mid::init_decomposition(4, 3, 3, 5, rng);
  Tensor w_rgb = mid::compose_filters(p, Modality::rgb);
  Tensor w_ir = mid::compose_filters(p, Modality::ir);
  Tensor w_mix = mid::compose_filters(p, Modality::mix);
  for (int64_t i = 0; i < w_rgb.numel(); ++i) {
    REQUIRE(w_rgb.data()[i] == w_ir.data()[i]);
    REQUIRE(w_rgb.data()[i] == w_mix.data()[i]);
  }

  // same seed reproduces the same parameters
  mid::Rng r1(7), r2(7);
  DecomposedConv a = mid::init_decomposition(1, 3, 2, 2, r1);
  DecomposedConv b = mid::init_decomposition(1, 3, 2, 2, r2);
  for (int64_t i = 0; i < a.psi.numel(); ++i) REQUIRE(a.psi.data()[i] == b.psi.data()[i]);
  for (int64_t i = 0; i < a.alpha_rgb.numel(); ++i)
    REQUIRE(a.alpha_rgb.data()[i] == b.alpha_rgb.data()[i]);
}

TEST_CASE("composed filter variance is near a standard init") {
  // composed entries should have variance within 3x of 1/(S^2*Cin), the
  // variance a directly initialized conv of the same fan-in would use
  const int K = 9, S = 3, Cin = 16, Cout = 16;
  const double target = 1.0 / double(S * S * Cin);
  double sum = 0.0, sumsq = 0.0;
  int64_t n = 0;
  for (int trial = 0; trial < 100; ++trial) {
    mid::Rng rng(1000 + uint64_t(trial));
    DecomposedConv p = mid::init_decomposition(K, S, Cin, Cout, rng);
    Tensor w = mid::compose_filters(p, Modality::rgb);
    for (int64_t i = 0; i < w.numel(); ++i) {
      sum += double(w.data()[i]);
      sumsq += double(w.data()[i]) * double(w.data()[i]);
      ++n;
    }
  }
  const double mean = sum / double(n);
  const double var = sumsq / double(n) - mean * mean;
  INFO("composed var " << var << " vs direct-init var " << target);
  CHECK(var > target / 3.0);
  CHECK(var < target * 3.0);
}

TEST_CASE("parameter count formulas") {
  CHECK(mid::decomposed_param_count(9, 3, 64, 64) == 3 * 9 * 9 + 9 * 64 * 64);
  CHECK(mid::full_param_count(3, 64, 64) == 3 * 9 * 64 * 64);
  // decomposition is the economical side for real channel widths
  CHECK(mid::decomposed_param_count(9, 3, 64, 64) < mid::full_param_count(3, 64, 64));

  mid::Rng rng(2);
  DecomposedConv p = mid::init_decomposition(4, 3, 5, 7, rng);
  const int64_t held = p.alpha_rgb.numel() + p.alpha_ir.numel() + p.alpha_mix.numel() +
                       p.psi.numel();
  CHECK(held == mid::decomposed_param_count(4, 3, 5, 7));
}

TEST_CASE("gradients flow through both forward paths") {
  mid::Rng rng(41);
  DecomposedConv p = random_decomp(2, 3, 2, 2, 55);
  Tensor x = rand_tensor({1, 2, 5, 5}, rng);

  auto res1 = testsup::gradcheck(
      [&]() {
        Tensor y = mid::macd_forward(x, p, Modality::rgb, 1, 1);
        return mid::sum_all(mid::mul(y, y));
      },
      {x, p.alpha_rgb, p.psi});
  CHECK(res1.ok());

  auto res2 = testsup::gradcheck(
      [&]() {
        Tensor y = mid::macd_forward_two_stage(x, p, Modality::mix, 1, 1);
        return mid::sum_all(mid::mul(y, y));
      },
      {x, p.alpha_mix, p.psi});
  CHECK(res2.ok());

  // the unused banks stay gradient-free
  p.alpha_ir.set_requires_grad(true);
  Tensor y = mid::macd_forward(x, p, Modality::rgb, 1, 1);
  mid::backward(mid::sum_all(y));
  CHECK_FALSE(p.alpha_ir.has_grad());
  for (Tensor* t : {&p.alpha_rgb, &p.alpha_ir, &p.alpha_mix, &p.psi, &x}) t->drop_grad();
}
