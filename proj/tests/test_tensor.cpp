#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "mid/checkpoint.hpp"
#include "mid/optim.hpp"
#include "mid/tensor.hpp"
#include "test_support.hpp"

using mid::Tensor;
using testsup::gradcheck;
using testsup::rand_tensor;

TEST_CASE("elementwise op values") {
  Tensor x = Tensor::zeros({3});
  x.data()[0] = -1.0f;
  x.data()[1] = 0.0f;
  x.data()[2] = 2.0f;
  Tensor r = mid::relu(x);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 0.0f);
  CHECK(r.data()[2] == 2.0f);

  CHECK(mid::sigmoid(Tensor::zeros({1})).item() == Catch::Approx(0.5));

  Tensor a = Tensor::zeros({2}), b = Tensor::zeros({2});
  a.data()[0] = 1.0f;
  a.data()[1] = 2.0f;
  b.data()[0] = 3.0f;
  b.data()[1] = 4.0f;
  Tensor s = mid::add(a, b);
  CHECK(s.data()[0] == 4.0f);
  CHECK(s.data()[1] == 6.0f);

  a.set_requires_grad(true);
  Tensor loss = mid::sum_all(mid::add(a, b));
  mid::backward(loss);
  CHECK(a.grad().data()[0] == 1.0f);
  CHECK(a.grad().data()[1] == 1.0f);
  a.drop_grad();
}

TEST_CASE("autodiff basics") {
  Tensor x = Tensor::zeros({3});
  for (int i = 0; i < 3; ++i) x.data()[i] = float(i) - 0.5f;
  x.set_requires_grad(true);
  mid::backward(mid::sum_all(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad().data()[i] == 1.0f);
  x.drop_grad();

  Tensor y = Tensor::zeros({2});
  y.data()[0] = 1.0f;
  y.data()[1] = 2.0f;
  y.set_requires_grad(true);
  mid::backward(mid::sum_all(mid::mul(y, y)));
  CHECK(y.grad().data()[0] == Catch::Approx(2.0));
  CHECK(y.grad().data()[1] == Catch::Approx(4.0));
  y.drop_grad();
}

TEST_CASE("linear matches hand products") {
  // unit row picks out a weight row
  Tensor x = Tensor::zeros({1, 2});
  x.data()[0] = 1.0f;
  Tensor w = Tensor::zeros({2, 2});
  w.data()[0] = 2.0f;
  w.data()[1] = 3.0f;
  w.data()[2] = 5.0f;
  w.data()[3] = 7.0f;
  Tensor b = Tensor::zeros({2});
  Tensor y = mid::linear(x, w, b);
  CHECK(y.data()[0] == 2.0f);
  CHECK(y.data()[1] == 3.0f);

  // identity weight passes input through
  mid::Rng rng(5);
  Tensor xr = rand_tensor({3, 4}, rng);
  Tensor eye = Tensor::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.data()[size_t(i) * 4 + i] = 1.0f;
  Tensor yr = mid::linear(xr, eye, Tensor::zeros({4}));
  for (int64_t i = 0; i < xr.numel(); ++i) CHECK(yr.data()[i] == Catch::Approx(xr.data()[i]));

  // random case against a triple loop
  Tensor x2 = rand_tensor({2, 3}, rng);
  Tensor w2 = rand_tensor({3, 2}, rng);
  Tensor b2 = rand_tensor({2}, rng);
  Tensor y2 = mid::linear(x2, w2, b2);
  for (int i = 0; i < 2; ++i)
    for (int o = 0; o < 2; ++o) {
      double acc = double(b2.data()[o]);
      for (int k = 0; k < 3; ++k)
        acc += double(x2.data()[size_t(i) * 3 + k]) * double(w2.data()[size_t(k) * 2 + o]);
      CHECK(y2.data()[size_t(i) * 2 + o] == Catch::Approx(acc).margin(1e-6));
    }
}

TEST_CASE("conv2d values") {
  mid::Rng rng(11);
  // 1x1 identity kernel
  Tensor x = rand_tensor({1, 1, 4, 4}, rng);
  Tensor w1 = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor y1 = mid::conv2d(x, w1, 1, 0);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y1.data()[i] == x.data()[i]);

  // all-ones 3x3 filter over an all-ones 3x3 image sums to 9
  Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor w3 = Tensor::full({1, 1, 3, 3}, 1.0f);
  CHECK(mid::conv2d(ones, w3, 1, 0).item() == 9.0f);

  // random case against the nested-loop oracle
  Tensor xr = rand_tensor({1, 2, 5, 5}, rng);
  Tensor wr = rand_tensor({3, 2, 3, 3}, rng);
  for (int pad : {0, 1}) {
    Tensor got = mid::conv2d(xr, wr, 1, pad);
    Tensor want = testsup::naive_conv2d(xr, wr, 1, pad);
    REQUIRE(got.shape() == want.shape());
    for (int64_t i = 0; i < got.numel(); ++i)
      CHECK(got.data()[i] == Catch::Approx(want.data()[i]).margin(1e-6));
  }

  // non-integral output geometry is rejected
  CHECK_THROWS_AS(mid::conv2d(rand_tensor({1, 1, 5, 5}, rng), wr, 2, 0), mid::Error);
}

TEST_CASE("batch norm semantics") {
  mid::Rng rng(13);
  Tensor x = rand_tensor({4, 3, 5, 5}, rng, -2.0f, 3.0f);
  Tensor gamma = Tensor::full({3}, 1.0f), beta = Tensor::zeros({3});
  Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0f);

  Tensor y = mid::batch_norm2d(x, gamma, beta, rm, rv, true);
  const int64_t per_c = 4 * 5 * 5;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) mean += double(y.data()[(size_t(b) * 3 + c) * 25 + i]);
    mean /= double(per_c);
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 25; ++i) {
        const double d = double(y.data()[(size_t(b) * 3 + c) * 25 + i]) - mean;
        var += d * d;
      }
    var /= double(per_c);
    CHECK(mean == Catch::Approx(0.0).margin(1e-5));
    CHECK(var == Catch::Approx(1.0).margin(1e-3));
  }

  // zero scale collapses to the shift
  Tensor beta2 = Tensor::full({3}, 0.7f);
  Tensor y0 = mid::batch_norm2d(x, Tensor::zeros({3}), beta2, rm, rv, true);
  for (int64_t i = 0; i < y0.numel(); ++i) CHECK(y0.data()[i] == Catch::Approx(0.7).margin(1e-6));

  // eval mode applies the running-stat formula verbatim
  Tensor rm2 = Tensor::zeros({1}), rv2 = Tensor::zeros({1});
  rm2.data()[0] = 0.3f;
  rv2.data()[0] = 2.0f;
  Tensor g2 = Tensor::full({1}, 1.5f), b2 = Tensor::full({1}, -0.25f);
  Tensor xe = rand_tensor({2, 1, 3, 3}, rng);
  Tensor ye = mid::batch_norm2d(xe, g2, b2, rm2, rv2, false);
  for (int64_t i = 0; i < xe.numel(); ++i) {
    const double want =
        (double(xe.data()[i]) - 0.3) / std::sqrt(2.0 + 1e-5) * 1.5 - 0.25;
    CHECK(ye.data()[i] == Catch::Approx(want).margin(1e-6));
  }

  // update_running=false leaves the buffers untouched in train mode
  Tensor rm3 = Tensor::zeros({3}), rv3 = Tensor::full({3}, 1.0f);
  mid::batch_norm2d(x, gamma, beta, rm3, rv3, true, 0.1f, 1e-5f, false);
  for (int c = 0; c < 3; ++c) {
    CHECK(rm3.data()[c] == 0.0f);
    CHECK(rv3.data()[c] == 1.0f);
  }
  mid::batch_norm2d(x, gamma, beta, rm3, rv3, true, 0.1f, 1e-5f, true);
  bool moved = false;
  for (int c = 0; c < 3; ++c) moved |= rm3.data()[c] != 0.0f;
  CHECK(moved);
}

TEST_CASE("pooling") {
  mid::Rng rng(17);
  Tensor c = Tensor::full({2, 3, 4, 4}, 0.4f);
  Tensor pg = mid::pool_global_avg(c);
  for (int64_t i = 0; i < pg.numel(); ++i) CHECK(pg.data()[i] == Catch::Approx(0.4));
  Tensor pr = mid::pool_region_avg(c, 2);
  for (int64_t i = 0; i < pr.numel(); ++i) CHECK(pr.data()[i] == Catch::Approx(0.4));

  // H=4, G=2, rows (1,1,3,3) -> region means (1,3)
  Tensor rows = Tensor::zeros({1, 1, 4, 2});
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 2; ++w) rows.data()[size_t(h) * 2 + w] = h < 2 ? 1.0f : 3.0f;
  Tensor pr2 = mid::pool_region_avg(rows, 2);
  CHECK(pr2.data()[0] == 1.0f);
  CHECK(pr2.data()[1] == 3.0f);

  // random G=3 against the stripe-mean loop
  Tensor xr = rand_tensor({2, 2, 7, 3}, rng);
  Tensor pr3 = mid::pool_region_avg(xr, 3);
  for (int b = 0; b < 2; ++b)
    for (int ch = 0; ch < 2; ++ch)
      for (int g = 0; g < 3; ++g) {
        auto [lo, hi] = mid::stripe_bounds(7, 3, g);
        double acc = 0.0;
        for (int h = lo; h < hi; ++h)
          for (int w = 0; w < 3; ++w)
            acc += double(xr.data()[((size_t(b) * 2 + ch) * 7 + h) * 3 + w]);
        acc /= double((hi - lo) * 3);
        CHECK(pr3.data()[(size_t(b) * 2 + ch) * 3 + g] == Catch::Approx(acc).margin(1e-6));
      }

  // 2x2 average pooling halves each spatial dim
  Tensor xp = rand_tensor({1, 1, 4, 6}, rng);
  Tensor yp = mid::avg_pool2x2(xp);
  REQUIRE(yp.shape() == mid::Shape{1, 1, 2, 3});
  CHECK(yp.data()[0] ==
        Catch::Approx((xp.data()[0] + xp.data()[1] + xp.data()[6] + xp.data()[7]) / 4.0f));
  CHECK_THROWS_AS(mid::avg_pool2x2(rand_tensor({1, 1, 3, 4}, rng)), mid::Error);
}

TEST_CASE("shape ops") {
  mid::Rng rng(19);
  Tensor x = rand_tensor({2, 3, 2, 2}, rng);
  Tensor r = mid::reshape(x, {2, 12});
  REQUIRE(r.shape() == mid::Shape{2, 12});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(r.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(mid::reshape(x, {5, 5}), mid::Error);

  Tensor s = mid::slice_channels(x, 1, 3);
  REQUIRE(s.shape() == mid::Shape{2, 2, 2, 2});
  CHECK(s.data()[0] == x.data()[4]);

  Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({4, 3}, rng);
  Tensor cat = mid::concat_rows(a, b);
  REQUIRE(cat.shape() == mid::Shape{6, 3});
  CHECK(cat.data()[0] == a.data()[0]);
  CHECK(cat.data()[6] == b.data()[0]);

  Tensor cc = mid::concat_cols(rand_tensor({2, 3}, rng), rand_tensor({2, 4}, rng));
  REQUIRE(cc.shape() == mid::Shape{2, 7});

  Tensor xc = rand_tensor({1, 2, 3, 3}, rng), yc = rand_tensor({1, 4, 3, 3}, rng);
  CHECK(mid::concat_channels(xc, yc).shape() == mid::Shape{1, 6, 3, 3});

  Tensor reg = rand_tensor({2, 3, 4}, rng);
  Tensor sel = mid::select_region(reg, 1);
  REQUIRE(sel.shape() == mid::Shape{2, 3});
  CHECK(sel.data()[0] == reg.data()[1]);
}

TEST_CASE("row ops") {
  mid::Rng rng(23);
  Tensor x = rand_tensor({6, 4}, rng);
  Tensor m = mid::group_mean_rows(x, 3);
  REQUIRE(m.shape() == mid::Shape{2, 4});
  for (int d = 0; d < 4; ++d) {
    const double want =
        (double(x.data()[d]) + double(x.data()[4 + d]) + double(x.data()[8 + d])) / 3.0;
    CHECK(m.data()[d] == Catch::Approx(want).margin(1e-6));
  }

  Tensor n = mid::l2_normalize_rows(x);
  for (int i = 0; i < 6; ++i) {
    double norm = 0.0;
    for (int d = 0; d < 4; ++d) norm += double(n.data()[size_t(i) * 4 + d]) *
                                        double(n.data()[size_t(i) * 4 + d]);
    CHECK(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-5));
  }

  Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({2, 4}, rng);
  Tensor d = mid::pairwise_dist(a, b);
  REQUIRE(d.shape() == mid::Shape{3, 2});
  auto ra = testsup::rows_of(a), rb = testsup::rows_of(b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(d.data()[size_t(i) * 2 + j] ==
            Catch::Approx(testsup::euclid(ra[size_t(i)], rb[size_t(j)])).margin(1e-5));
}

TEST_CASE("gradcheck core ops") {
  mid::Rng rng(29);
  {
    Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 3}, rng);
    auto res = gradcheck(
        [&]() { return mid::sum_all(mid::mul(mid::add(a, b), mid::sub(a, b))); }, {a, b});
    CHECK(res.ok());
  }
  {
    Tensor x = testsup::rand_tensor_away_from_zero({2, 4}, rng);
    auto res = gradcheck([&]() { return mid::sum_all(mid::relu(x)); }, {x});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_tensor({2, 4}, rng);
    auto res = gradcheck([&]() { return mid::sum_all(mid::sigmoid(x)); }, {x});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 2}, rng), b = rand_tensor({2}, rng);
    auto res = gradcheck(
        [&]() { return mid::mean_all(mid::mul(mid::linear(x, w, b), mid::linear(x, w, b))); },
        {x, w, b});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_tensor({1, 2, 4, 4}, rng), w = rand_tensor({2, 2, 3, 3}, rng, -0.5f, 0.5f);
    auto res = gradcheck(
        [&]() {
          Tensor y = mid::conv2d(x, w, 1, 1);
          return mid::sum_all(mid::mul(y, y));
        },
        {x, w});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_tensor({2, 4}, rng), y = rand_tensor({3, 4}, rng);
    auto res = gradcheck([&]() { return mid::sum_all(mid::pairwise_dist(x, y)); }, {x, y});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_tensor({3, 5}, rng);
    Tensor probe = rand_tensor({3, 5}, rng);  // fixed direction, keeps the loss non-symmetric
    auto res =
        gradcheck([&]() { return mid::sum_all(mid::mul(mid::l2_normalize_rows(x), probe)); }, {x});
    CHECK(res.ok());
  }
}

TEST_CASE("sgd and adam") {
  // single SGD step without momentum history: p -= lr * g
  Tensor p = Tensor::zeros({1});
  p.set_requires_grad(true);
  mid::SgdMomentum opt({p}, 0.1f, 0.0f);
  mid::backward(mid::sum_all(p));  // grad = 1
  opt.step();
  CHECK(p.data()[0] == Catch::Approx(-0.1));

  // Adam's first bias-corrected step has magnitude ~= lr
  Tensor q = Tensor::zeros({1});
  q.set_requires_grad(true);
  mid::Adam aopt({q}, 0.01f);
  mid::backward(mid::scale(mid::sum_all(q), 3.0f));  // grad = 3
  aopt.step();
  CHECK(std::abs(q.data()[0]) == Catch::Approx(0.01).epsilon(0.01));

  // 100 SGD steps on (w-3)^2 converge
  Tensor w = Tensor::zeros({1});
  w.set_requires_grad(true);
  mid::SgdMomentum wopt({w}, 0.1f, 0.0f);
  for (int i = 0; i < 100; ++i) {
    Tensor diff = mid::add_scalar(w, -3.0f);
    mid::backward(mid::sum_all(mid::mul(diff, diff)));
    wopt.step();
  }
  CHECK(w.data()[0] == Catch::Approx(3.0).margin(1e-2));

  // missing gradient is an error, not a silent no-op
  Tensor r = Tensor::zeros({1});
  r.set_requires_grad(true);
  mid::SgdMomentum ropt({r}, 0.1f);
  CHECK_THROWS_AS(ropt.step(), mid::Error);
}

TEST_CASE("param store contract") {
  mid::ParamStore store;
  Tensor a = store.param("w.a", Tensor::zeros({2}));
  store.buffer("b.stat", Tensor::zeros({2}));
  CHECK(a.requires_grad());
  CHECK(store.contains("w.a"));
  CHECK(store.parameters().size() == 1);
  CHECK(store.num_values(true) == 4);
  CHECK_THROWS_AS(store.param("w.a", Tensor::zeros({2})), mid::Error);
  CHECK_THROWS_AS(store.get("missing"), mid::Error);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  mid::Rng rng(31);
  mid::ParamStore s1;
  s1.param("layer.w", rand_tensor({3, 4}, rng));
  s1.buffer("layer.stat", rand_tensor({4}, rng));
  const std::string path = (fs::temp_directory_path() / "mid_test_ckpt.bin").string();
  mid::save_checkpoint(path, {&s1});

  mid::ParamStore s2;
  Tensor w2 = s2.param("layer.w", Tensor::zeros({3, 4}));
  Tensor st2 = s2.buffer("layer.stat", Tensor::zeros({4}));
  mid::load_checkpoint(path, {&s2});
  for (int64_t i = 0; i < w2.numel(); ++i) CHECK(w2.data()[i] == s1.get("layer.w").data()[i]);
  for (int64_t i = 0; i < st2.numel(); ++i)
    CHECK(st2.data()[i] == s1.get("layer.stat").data()[i]);

  // shape mismatch and missing-name coverage are hard failures
  mid::ParamStore s3;
  s3.param("layer.w", Tensor::zeros({4, 3}));
  s3.buffer("layer.stat", Tensor::zeros({4}));
  CHECK_THROWS_AS(mid::load_checkpoint(path, {&s3}), mid::Error);
  mid::ParamStore s4;
  s4.param("other.w", Tensor::zeros({3, 4}));
  CHECK_THROWS_AS(mid::load_checkpoint(path, {&s4}), mid::Error);
  fs::remove(path);
}

TEST_CASE("graph detaches between iterations") {
  Tensor x = Tensor::full({2}, 1.5f);
  x.set_requires_grad(true);
  mid::backward(mid::sum_all(mid::mul(x, x)));
  CHECK(x.grad().data()[0] == Catch::Approx(3.0));
  x.drop_grad();
  // a second independent pass accumulates from zero, not from stale state
  mid::backward(mid::sum_all(mid::mul(x, x)));
  CHECK(x.grad().data()[0] == Catch::Approx(3.0));
  x.drop_grad();

  // values computed under NoGradGuard never join a graph
  {
    mid::NoGradGuard ng;
    Tensor y = mid::mul(x, x);
    CHECK_THROWS_AS(mid::backward(mid::sum_all(y)), mid::Error);
  }
}
