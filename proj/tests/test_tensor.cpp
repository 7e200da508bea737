#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "augdet/checkpoint.hpp"
#include "augdet/gradcheck.hpp"
#include "augdet/rng.hpp"
#include "augdet/tensor.hpp"

using namespace augdet;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (auto& v : t.value_mut()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d hand cases", "[tensor]") {
  SECTION("1x1 scalar multiply") {
    Tensor x({1, 1, 1, 1}, {2.0});
    Tensor w({1, 1, 1, 1}, {3.0});
    auto y = conv2d(x, w, 1, 0);
    CHECK(y.value()[0] == 6.0);
  }
  SECTION("identity 3x3 kernel with pad 1") {
    Rng rng(5);
    Tensor x = random_tensor({1, 1, 4, 5}, rng);
    Tensor w({1, 1, 3, 3}, 0.0);
    w.value_mut()[4] = 1.0;  // center tap
    auto y = conv2d(x, w, 1, 1);
    CHECK(y.shape() == x.shape());
    CHECK(y.value() == x.value());
  }
  SECTION("2x2 all-ones kernel sums the window") {
    Tensor x({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor w({1, 1, 2, 2}, 1.0);
    auto y = conv2d(x, w, 1, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(y.value()[0] == 10.0);
  }
  SECTION("channel mismatch raises a dimension error") {
    Tensor x({1, 3, 4, 4}, 0.0);
    Tensor w({2, 4, 3, 3}, 0.0);
    CHECK_THROWS_AS(conv2d(x, w, 1, 1), ShapeError);
  }
  SECTION("output dims follow the floor formula") {
    Tensor x({1, 1, 7, 5}, 0.0);
    Tensor w({1, 1, 3, 3}, 0.0);
    auto y = conv2d(x, w, 2, 1);
    CHECK(y.shape() == std::vector<int>{1, 1, 4, 3});
  }
}

TEST_CASE("conv2d_transposed hand cases", "[tensor]") {
  SECTION("1x1 weight of 1 is the identity") {
    Rng rng(6);
    Tensor x = random_tensor({1, 1, 3, 3}, rng);
    Tensor w({1, 1, 1, 1}, {1.0});
    auto y = conv2d_transposed(x, w, 1, 0);
    CHECK(y.value() == x.value());
  }
  SECTION("single pixel scatters the 2x2 kernel") {
    Tensor x({1, 1, 1, 1}, {1.0});
    Tensor w({1, 1, 2, 2}, 1.0);
    auto y = conv2d_transposed(x, w, 2, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 2, 2});
    for (double v : y.value()) CHECK(v == 1.0);
  }
  SECTION("output dims follow (H-1)*s - 2p + k") {
    Tensor x({1, 2, 5, 4}, 0.0);
    Tensor w({2, 3, 4, 4}, 0.0);
    auto y = conv2d_transposed(x, w, 2, 1);
    CHECK(y.shape() == std::vector<int>{1, 3, 10, 8});
  }
}

TEST_CASE("adjoint identities", "[tensor]") {
  Rng rng(42);
  SECTION("conv2d vs conv2d_transposed") {
    for (int trial = 0; trial < 20; ++trial) {
      const int stride = 1 + static_cast<int>(rng.below(2));
      const int pad = static_cast<int>(rng.below(2));
      const int kh = 1 + static_cast<int>(rng.below(3));
      const int kw = 1 + static_cast<int>(rng.below(3));
      // keep the conv tiling exact so the transposed output shape matches
      int h = kh + 2 + static_cast<int>(rng.below(4));
      int w = kw + 2 + static_cast<int>(rng.below(4));
      h -= (h + 2 * pad - kh) % stride;
      w -= (w + 2 * pad - kw) % stride;
      const int ic = 1 + static_cast<int>(rng.below(3));
      const int oc = 1 + static_cast<int>(rng.below(3));
      Tensor x = random_tensor({1, ic, h, w}, rng);
      Tensor wt = random_tensor({oc, ic, kh, kw}, rng);
      auto ax = conv2d(x, wt, stride, pad);
      Tensor y = random_tensor(ax.shape(), rng);
      auto aty = conv2d_transposed(y, wt, stride, pad);
      REQUIRE(aty.shape() == x.shape());
      const double lhs = dot(ax.value(), y.value());
      const double rhs = dot(x.value(), aty.value());
      CHECK(std::abs(lhs - rhs) < 1e-10);
    }
  }
  SECTION("linear vs transposed weight") {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng);
    Tensor zero_out({5}, 0.0), zero_in({4}, 0.0);
    Tensor y = random_tensor({3, 5}, rng);
    const double lhs = dot(linear(x, w, zero_out).value(), y.value());
    const double rhs =
        dot(x.value(), linear(y, transpose2d(w), zero_in).value());
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
  SECTION("upsample_nearest2 vs 2x2 sum pooling") {
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    auto up = upsample_nearest2(x);
    Tensor y = random_tensor(up.shape(), rng);
    // Adjoint computed by hand: sum-pool y into x's grid.
    double rhs = 0.0;
    const auto& yv = y.value();
    const auto& xv = x.value();
    for (int i = 0; i < 2; ++i)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          double s = 0.0;
          for (int dr = 0; dr < 2; ++dr)
            for (int dc = 0; dc < 2; ++dc)
              s += yv[(std::size_t(i) * 6 + 2 * r + dr) * 6 + 2 * c + dc];
          rhs += xv[(std::size_t(i) * 3 + r) * 3 + c] * s;
        }
    CHECK(std::abs(dot(up.value(), y.value()) - rhs) < 1e-10);
  }
}

TEST_CASE("linear hand cases", "[tensor]") {
  SECTION("identity weight and zero bias") {
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor w({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor b({2}, 0.0);
    CHECK(linear(x, w, b).value() == x.value());
  }
  SECTION("hand matrix arithmetic") {
    Tensor x({1, 2}, {1.0, 2.0});
    Tensor w({2, 2}, {1.0, 1.0, 1.0, -1.0});
    Tensor b({2}, {0.0, 1.0});
    auto y = linear(x, w, b);
    CHECK(y.value()[0] == 3.0);
    CHECK(y.value()[1] == 0.0);
  }
  SECTION("zero weight broadcasts the bias") {
    Tensor x({3, 2}, 7.0);
    Tensor w({2, 2}, 0.0);
    Tensor b({2}, {0.5, -0.5});
    auto y = linear(x, w, b);
    for (int r = 0; r < 3; ++r) {
      CHECK(y.value()[2 * r] == 0.5);
      CHECK(y.value()[2 * r + 1] == -0.5);
    }
  }
  SECTION("inner dim mismatch") {
    Tensor x({1, 3}, 0.0);
    Tensor w({2, 2}, 0.0);
    Tensor b({2}, 0.0);
    CHECK_THROWS_AS(linear(x, w, b), ShapeError);
  }
}

TEST_CASE("layer_norm hand cases", "[tensor]") {
  Tensor gamma({2}, 1.0), beta({2}, 0.0);
  SECTION("constant row maps to zeros") {
    Tensor x({1, 2}, {3.0, 3.0});
    auto y = layer_norm(x, gamma, beta, 1e-5);
    CHECK(std::abs(y.value()[0]) < 1e-12);
    CHECK(std::abs(y.value()[1]) < 1e-12);
  }
  SECTION("already normalized row is preserved as eps -> 0") {
    Tensor x({1, 2}, {1.0, -1.0});
    auto y = layer_norm(x, gamma, beta, 1e-14);
    CHECK(y.value()[0] == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(y.value()[1] == Catch::Approx(-1.0).epsilon(1e-6));
  }
  SECTION("zero gamma leaves only beta") {
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor g0({2}, 0.0), b5({2}, 5.0);
    auto y = layer_norm(x, g0, b5, 1e-5);
    for (double v : y.value()) CHECK(v == 5.0);
  }
  SECTION("rows have tiny mean with beta = 0") {
    Rng rng(3);
    Tensor x = random_tensor({4, 16}, rng);
    Tensor g({16}, 1.0), b({16}, 0.0);
    auto y = layer_norm(x, g, b, 1e-5);
    for (int r = 0; r < 4; ++r) {
      double m = 0.0;
      for (int c = 0; c < 16; ++c) m += y.value()[std::size_t(r) * 16 + c];
      CHECK(std::abs(m / 16.0) < 1e-10);
    }
  }
}

TEST_CASE("softmax hand cases", "[tensor]") {
  SECTION("equal logits give the uniform distribution") {
    Tensor x({1, 4}, 0.7);
    auto y = softmax(x, 1);
    for (double v : y.value()) CHECK(v == Catch::Approx(0.25).margin(1e-14));
  }
  SECTION("[0, ln 3] -> [0.25, 0.75]") {
    Tensor x({1, 2}, {0.0, std::log(3.0)});
    auto y = softmax(x, 1);
    CHECK(y.value()[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(y.value()[1] == Catch::Approx(0.75).margin(1e-12));
  }
  SECTION("shift invariance") {
    Rng rng(9);
    Tensor x = random_tensor({2, 5}, rng);
    Tensor xs = x;
    Tensor shifted({2, 5}, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
      shifted.value_mut()[i] = x.value()[i] + 3.25;
    auto a = softmax(x, 1), b = softmax(shifted, 1);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::abs(a.value()[i] - b.value()[i]) < 1e-12);
  }
  SECTION("rows sum to one within 1e-12") {
    Rng rng(11);
    Tensor x = random_tensor({6, 9}, rng, -30.0, 30.0);
    auto y = softmax(x, 1);
    for (int r = 0; r < 6; ++r) {
      double s = 0.0;
      for (int c = 0; c < 9; ++c) s += y.value()[std::size_t(r) * 9 + c];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  SECTION("permuting a line permutes the softmax bitwise") {
    Rng rng(13);
    Tensor x = random_tensor({1, 8}, rng, -5.0, 5.0);
    std::vector<std::size_t> perm{3, 1, 7, 0, 5, 2, 6, 4};
    Tensor xp({1, 8}, 0.0);
    for (int i = 0; i < 8; ++i) xp.value_mut()[i] = x.value()[perm[i]];
    auto y = softmax(x, 1), yp = softmax(xp, 1);
    for (int i = 0; i < 8; ++i) CHECK(yp.value()[i] == y.value()[perm[i]]);
  }
  SECTION("works along axis 0") {
    Tensor x({2, 2}, {0.0, 1.0, std::log(3.0), 1.0});
    auto y = softmax(x, 0);
    CHECK(y.value()[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(y.value()[2] == Catch::Approx(0.75).margin(1e-12));
  }
}

TEST_CASE("sgd_step", "[tensor]") {
  SECTION("single step without momentum") {
    Parameter p("p", Tensor({1}, {1.0}));
    p.tensor.zero_grad();
    // plant grad = 1
    Tensor loss = sum_all(p.tensor);
    loss.backward();
    sgd_step({&p}, 0.1, 0.0);
    CHECK(p.tensor.value()[0] == Catch::Approx(0.9).margin(1e-15));
  }
  SECTION("two steps with momentum 0.5 and constant grad") {
    Parameter p("p", Tensor({1}, {1.0}));
    for (int i = 0; i < 2; ++i) {
      sum_all(p.tensor).backward();
      sgd_step({&p}, 0.1, 0.5);
    }
    CHECK(p.tensor.value()[0] == Catch::Approx(0.75).margin(1e-15));
  }
  SECTION("zero grad leaves the parameter unchanged") {
    Parameter p("p", Tensor({2}, {1.0, -2.0}));
    p.tensor.zero_grad();
    sgd_step({&p}, 0.1, 0.9);
    CHECK(p.tensor.value()[0] == 1.0);
    CHECK(p.tensor.value()[1] == -2.0);
  }
  SECTION("missing grad raises") {
    Parameter p("p", Tensor({2}, {1.0, -2.0}));
    CHECK_THROWS(sgd_step({&p}, 0.1, 0.0));
  }
}

TEST_CASE("finite difference checker", "[tensor]") {
  SECTION("quadratic is exact to machine precision") {
    Parameter p("p", Tensor({1}, {3.0}));
    auto f = [&] { return mul(p.tensor, p.tensor); };
    auto report = finite_diff_check(f, {&p}, 1e-5);
    CHECK(report.max_rel_error < 1e-9);
  }
  SECTION("conv -> layer_norm -> softmax -> sum composition") {
    Rng rng(21);
    Parameter w("w", glorot_uniform({2, 1, 3, 3}, 9, 18, rng));
    Parameter b("b", Tensor({2}, {0.05, -0.1}));
    Parameter g("g", Tensor({8}, 1.0));
    Parameter be("be", Tensor({8}, 0.0));
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    auto f = [&] {
      auto c = conv2d(x, w.tensor, b.tensor, 1, 1);
      auto flat = reshape(c, {4, 8});
      auto ln = layer_norm(flat, g.tensor, be.tensor, 1e-5);
      auto sm = softmax(ln, 1);
      return sum_all(mul(sm, sm));
    };
    auto report = finite_diff_check(f, {&w, &b, &g, &be}, 1e-5);
    CHECK(report.max_rel_error < 1e-4);
  }
  SECTION("a corrupted backward is detected") {
    Rng rng(22);
    Parameter w("w", glorot_uniform({1, 1, 2, 2}, 4, 4, rng));
    Tensor x = random_tensor({1, 1, 3, 3}, rng);
    auto f = [&] { return sum_all(conv2d(x, w.tensor, 1, 0)); };
    zero_grads({&w});
    f().backward();
    std::vector<double> analytic = w.tensor.grad();
    for (auto& v : analytic) v *= 2.0;  // planted fault: doubled conv backward
    std::vector<std::size_t> coords{0, 1, 2, 3};
    auto numeric = central_diff_grads(f, w, coords, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < coords.size(); ++i)
      worst = std::max(worst, relative_error(analytic[i], numeric[i]));
    CHECK(worst > 0.4);
    CHECK(worst < 0.6);
  }
}

TEST_CASE("per-op gradients pass finite differences", "[tensor]") {
  Rng rng(31);
  const double eps = 1e-5;
  SECTION("conv2d with stride and pad") {
    Parameter w("w", glorot_uniform({2, 3, 3, 2}, 18, 12, rng));
    Parameter b("b", glorot_uniform({2}, 1, 1, rng));
    Parameter x("x", random_tensor({2, 3, 5, 4}, rng));
    auto f = [&] {
      auto y = conv2d(x.tensor, w.tensor, b.tensor, 2, 1);
      return sum_all(mul(y, y));
    };
    CHECK(finite_diff_check(f, {&w, &b, &x}, eps).max_rel_error < 1e-4);
  }
  SECTION("conv2d_transposed") {
    Parameter w("w", glorot_uniform({3, 2, 2, 2}, 12, 8, rng));
    Parameter b("b", glorot_uniform({2}, 1, 1, rng));
    Parameter x("x", random_tensor({1, 3, 3, 4}, rng));
    auto f = [&] {
      auto y = conv2d_transposed(x.tensor, w.tensor, b.tensor, 2, 0);
      return sum_all(mul(y, y));
    };
    CHECK(finite_diff_check(f, {&w, &b, &x}, eps).max_rel_error < 1e-4);
  }
  SECTION("linear, layer_norm, softmax, matmul") {
    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter w("w", random_tensor({5, 4}, rng));
    Parameter b("b", random_tensor({5}, rng));
    Parameter g("g", random_tensor({5}, rng, 0.5, 1.5));
    Parameter be("be", random_tensor({5}, rng));
    Parameter m2("m2", random_tensor({5, 3}, rng));
    auto f = [&] {
      auto y = linear(a.tensor, w.tensor, b.tensor);
      auto ln = layer_norm(y, g.tensor, be.tensor, 1e-3);
      auto sm = softmax(ln, 1);
      auto mm = matmul(sm, m2.tensor);
      return sum_all(mul(mm, mm));
    };
    CHECK(finite_diff_check(f, {&a, &w, &b, &g, &be, &m2}, eps)
              .max_rel_error < 1e-4);
  }
  SECTION("elementwise, structural and loss ops") {
    Parameter a("a", random_tensor({2, 6}, rng, 0.2, 1.0));
    Parameter b("b", random_tensor({2, 6}, rng, -1.0, -0.2));
    auto targets = std::make_shared<std::vector<double>>(12, 0.35);
    auto weights = std::make_shared<std::vector<double>>(12, 0.5);
    auto f = [&] {
      auto lr = leaky_relu(sub(a.tensor, b.tensor), 0.1);
      auto sg = sigmoid(mul(a.tensor, b.tensor));
      auto cat = concat_cols({lr, sg});
      auto sl = slice_cols(cat, 2, 10);
      auto up = upsample_nearest2(reshape(sl, {1, 1, 4, 4}));
      auto flat = reshape(up, {4, 16});
      auto part = slice_rows(flat, 1, 3);
      auto l1 = l1_loss(part, scale(part, 0.25));
      auto bce = bce_with_logits(reshape(sg, {1, 12}), targets, weights);
      auto sm = smooth_l1(reshape(sg, {1, 12}), targets, weights, 0.4);
      return add(add(scale(l1, 2.0), bce), sm);
    };
    CHECK(finite_diff_check(f, {&a, &b}, eps).max_rel_error < 1e-4);
  }
}

TEST_CASE("rng determinism and contract", "[tensor]") {
  SECTION("identical seeds give identical streams") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  }
  SECTION("different seeds diverge") {
    Rng a(123), b(124);
    CHECK(a.next_u64() != b.next_u64());
  }
  SECTION("uniform stays in [0,1)") {
    Rng r(7);
    for (int i = 0; i < 1000; ++i) {
      const double u = r.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
  }
  SECTION("split streams depend only on seed and stream id") {
    Rng a(55), b(55);
    a.next_u64();  // advance parent; split must not care
    Rng c1 = a.split(3), c2 = b.split(3);
    CHECK(c1.next_u64() == c2.next_u64());
    Rng d = b.split(4);
    CHECK(c2.next_u64() != d.next_u64());
  }
  SECTION("glorot init is reproducible") {
    Rng a(99), b(99);
    auto t1 = glorot_uniform({3, 3}, 3, 3, a);
    auto t2 = glorot_uniform({3, 3}, 3, 3, b);
    CHECK(t1.value() == t2.value());
  }
}

TEST_CASE("checkpoint round trip is bit exact", "[tensor]") {
  namespace fs = std::filesystem;
  Rng rng(77);
  Parameter w1("enc.w", random_tensor({2, 3, 3, 3}, rng, -3.0, 3.0));
  Parameter b1("enc.b", random_tensor({2}, rng));
  // include values that stress exact bit patterns
  w1.tensor.value_mut()[0] = 0.1 + 0.2;
  w1.tensor.value_mut()[1] = -0.0;
  const auto path = fs::temp_directory_path() / "augdet_ckpt_test.rplk";
  save_checkpoint(path, {&w1, &b1});

  Parameter w2("enc.w", Tensor({2, 3, 3, 3}, 0.0));
  Parameter b2("enc.b", Tensor({2}, 0.0));
  restore_params(path, {&w2, &b2});
  REQUIRE(w2.tensor.value().size() == w1.tensor.value().size());
  for (std::size_t i = 0; i < w1.tensor.size(); ++i)
    CHECK(std::memcmp(&w2.tensor.value()[i], &w1.tensor.value()[i], 8) == 0);
  CHECK(b2.tensor.value() == b1.tensor.value());

  SECTION("shape mismatch is detected") {
    Parameter bad("enc.w", Tensor({3, 2, 3, 3}, 0.0));
    Parameter b3("enc.b", Tensor({2}, 0.0));
    CHECK_THROWS_AS(restore_params(path, {&bad, &b3}), IoError);
  }
  SECTION("bad magic is detected") {
    const auto bad_path = fs::temp_directory_path() / "augdet_bad.rplk";
    write_file_atomic(bad_path, "NOPE!whatever");
    CHECK_THROWS_AS(load_checkpoint(bad_path), IoError);
  }
  fs::remove(path);
}

TEST_CASE("backward accumulates and zero_grad resets", "[tensor]") {
  Parameter p("p", Tensor({2}, {1.0, 2.0}));
  sum_all(p.tensor).backward();
  sum_all(p.tensor).backward();
  CHECK(p.tensor.grad()[0] == 2.0);
  p.tensor.zero_grad();
  CHECK(p.tensor.grad()[0] == 0.0);
  SECTION("backward requires a scalar") {
    CHECK_THROWS_AS(p.tensor.backward(), ShapeError);
  }
}
