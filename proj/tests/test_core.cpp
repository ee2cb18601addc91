#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mdpcnn/gradcheck.hpp"
#include "mdpcnn/graph.hpp"

using namespace mdpcnn;

namespace {

Tensor4d random_tensor(Shape4 s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor4d t(s);
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.data) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("conv2d hand cases") {
  SUBCASE("zero input gives zero output") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(1, 1, 3, 3));
    auto w = g.param(Tensor4d(Shape4{2, 1, 3, 3},
                              std::vector<double>(18, 0.7)));
    auto b = g.param(Tensor4d::zeros(2, 1, 1, 1));
    auto y = g.conv2d(x, w, b, 1, 1);
    for (double v : g.value(y).data) CHECK(v == 0.0);
  }
  SUBCASE("1x1 kernel scales") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{1, 1, 2, 2}, {1, 2, 3, 4}));
    auto w = g.param(Tensor4d(Shape4{1, 1, 1, 1}, {2}));
    auto b = g.param(Tensor4d::zeros(1, 1, 1, 1));
    auto y = g.conv2d(x, w, b, 1, 0);
    CHECK(g.value(y).data == std::vector<double>{2, 4, 6, 8});
  }
  SUBCASE("all-ones 3x3 kernel sums the window") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto w = g.param(Tensor4d(Shape4{1, 1, 3, 3}, std::vector<double>(9, 1.0)));
    auto b = g.param(Tensor4d::zeros(1, 1, 1, 1));
    auto y = g.conv2d(x, w, b, 1, 0);
    CHECK(g.value(y).shape == Shape4{1, 1, 1, 1});
    CHECK(g.value(y).data[0] == doctest::Approx(45.0).epsilon(1e-15));
  }
  SUBCASE("channel mismatch is a configuration error") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(1, 2, 4, 4));
    auto w = g.param(Tensor4d::zeros(3, 1, 3, 3));
    auto b = g.param(Tensor4d::zeros(3, 1, 1, 1));
    CHECK_THROWS_AS(g.conv2d(x, w, b, 1, 1), ConfigError);
  }
  SUBCASE("kernel larger than padded input is a configuration error") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(1, 1, 2, 2));
    auto w = g.param(Tensor4d::zeros(1, 1, 5, 5));
    auto b = g.param(Tensor4d::zeros(1, 1, 1, 1));
    CHECK_THROWS_AS(g.conv2d(x, w, b, 1, 0), ConfigError);
  }
}

TEST_CASE("relu") {
  GraphD g;
  auto x = g.param(Tensor4d(Shape4{1, 3, 1, 1}, {-1, 0, 2}));
  auto y = g.relu(x);
  CHECK(g.value(y).data == std::vector<double>{0, 0, 2});

  SUBCASE("identity on positives") {
    GraphD g2;
    auto p = g2.input(Tensor4d(Shape4{1, 4, 1, 1}, {0.5, 1, 2, 3}));
    auto out = g2.relu(p);
    CHECK(g2.value(out).data == g2.value(p).data);
  }
  SUBCASE("gradient blocked at negative input") {
    GraphD g2;
    auto p = g2.param(Tensor4d(Shape4{1, 1, 1, 1}, {-0.5}));
    auto out = g2.sum(g2.relu(p));
    g2.backward(out);
    CHECK(g2.grad(p).data[0] == 0.0);
  }
}

TEST_CASE("maxpool2d") {
  SUBCASE("2x2 window maximum") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{1, 1, 2, 2}, {1, 2, 3, 4}));
    auto y = g.maxpool2d(x, 2, 2);
    CHECK(g.value(y).data == std::vector<double>{4});
  }
  SUBCASE("constant tensor pools to constant") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{2, 3, 4, 4}, std::vector<double>(96, 7.0)));
    auto y = g.maxpool2d(x, 2, 2);
    CHECK(g.value(y).shape == Shape4{2, 3, 2, 2});
    for (double v : g.value(y).data) CHECK(v == 7.0);
  }
  SUBCASE("tie routes gradient to first argmax in row-major order") {
    GraphD g;
    auto x = g.param(Tensor4d(Shape4{1, 1, 2, 2}, {1, 5, 5, 2}));
    auto y = g.sum(g.maxpool2d(x, 2, 2));
    g.backward(y);
    CHECK(g.grad(x).data == std::vector<double>{0, 1, 0, 0});
  }
  SUBCASE("window larger than spatial dims is a configuration error") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(1, 1, 2, 2));
    CHECK_THROWS_AS(g.maxpool2d(x, 3, 1), ConfigError);
  }
}

TEST_CASE("fully_connected hand cases") {
  SUBCASE("identity weights keep the input") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{1, 2, 1, 1}, {3, -4}));
    auto w = g.param(Tensor4d(Shape4{2, 2, 1, 1}, {1, 0, 0, 1}));
    auto b = g.param(Tensor4d::zeros(2, 1, 1, 1));
    auto y = g.fully_connected(x, w, b);
    CHECK(g.value(y).data == std::vector<double>{3, -4});
  }
  SUBCASE("hand matrix multiply") {
    GraphD g;
    auto x = g.input(Tensor4d(Shape4{1, 2, 1, 1}, {1, 2}));
    auto w = g.param(Tensor4d(Shape4{2, 2, 1, 1}, {1, 1, 1, -1}));
    auto b = g.param(Tensor4d::zeros(2, 1, 1, 1));
    auto y = g.fully_connected(x, w, b);
    CHECK(g.value(y).data == std::vector<double>{3, -1});
  }
  SUBCASE("zero input returns the bias") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(2, 3, 1, 1));
    auto w = g.param(Tensor4d(Shape4{2, 3, 1, 1}, {1, 2, 3, 4, 5, 6}));
    auto b = g.param(Tensor4d(Shape4{2, 1, 1, 1}, {10, 20}));
    auto y = g.fully_connected(x, w, b);
    CHECK(g.value(y).data == std::vector<double>{10, 20, 10, 20});
  }
  SUBCASE("dimension mismatch is a configuration error") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(1, 3, 1, 1));
    auto w = g.param(Tensor4d::zeros(2, 4, 1, 1));
    auto b = g.param(Tensor4d::zeros(2, 1, 1, 1));
    CHECK_THROWS_AS(g.fully_connected(x, w, b), ConfigError);
  }
}

TEST_CASE("slice and concat") {
  std::mt19937_64 rng(7);

  SUBCASE("N=18 slices into six parts of N=3") {
    GraphD g;
    auto x = g.input(random_tensor(Shape4{18, 2, 3, 3}, rng));
    auto parts = g.slice_batch(x, std::vector<int>(6, 3));
    CHECK(parts.size() == 6);
    for (auto p : parts) CHECK(g.value(p).shape == Shape4{3, 2, 3, 3});
  }
  SUBCASE("slice into the whole is identity") {
    GraphD g;
    auto x = g.input(random_tensor(Shape4{3, 1, 2, 2}, rng));
    auto parts = g.slice_batch(x, {3});
    CHECK(g.value(parts[0]).data == g.value(x).data);
  }
  SUBCASE("concat(slice(x)) round-trips bit-exactly") {
    GraphD g;
    auto x = g.input(random_tensor(Shape4{7, 2, 2, 2}, rng));
    auto parts = g.slice_batch(x, {2, 1, 4});
    auto back = g.concat_batch(parts);
    CHECK(g.value(back).data == g.value(x).data);
  }
  SUBCASE("six N=1 parts concat to N=6") {
    GraphD g;
    std::vector<GraphD::Var> parts;
    for (int i = 0; i < 6; ++i) {
      parts.push_back(g.input(random_tensor(Shape4{1, 2, 2, 2}, rng)));
    }
    CHECK(g.value(g.concat_batch(parts)).shape == Shape4{6, 2, 2, 2});
  }
  SUBCASE("single-part concat is identity") {
    GraphD g;
    auto x = g.input(random_tensor(Shape4{4, 1, 2, 2}, rng));
    CHECK(g.value(g.concat_batch({x})).data == g.value(x).data);
  }
  SUBCASE("bad boundaries are configuration errors") {
    GraphD g;
    auto x = g.input(Tensor4d::zeros(5, 1, 1, 1));
    CHECK_THROWS_AS(g.slice_batch(x, {2, 2}), ConfigError);
    auto a = g.input(Tensor4d::zeros(1, 2, 2, 2));
    auto b = g.input(Tensor4d::zeros(1, 2, 3, 2));
    CHECK_THROWS_AS(g.concat_batch({a, b}), ConfigError);
  }
  SUBCASE("backward conserves gradient mass across slice") {
    GraphD g;
    auto x = g.param(random_tensor(Shape4{6, 2, 2, 2}, rng));
    auto parts = g.slice_batch(x, {1, 2, 3});
    // Weight each part differently so the routing matters.
    auto l0 = g.scale(g.sum(g.square(parts[0])), 1.0);
    auto l1 = g.scale(g.sum(g.square(parts[1])), 2.0);
    auto l2 = g.scale(g.sum(g.square(parts[2])), 3.0);
    g.backward(g.sum(g.concat_batch({l0, l1, l2})));
    const Tensor4d& gx = g.grad(x);
    std::size_t off = 0;
    double part_mass = 0.0, input_mass = 0.0;
    for (auto p : parts) {
      const Tensor4d& gp = g.grad(p);
      for (std::size_t j = 0; j < gp.size(); ++j) {
        CHECK(gx.data[off + j] == gp.data[j]);
        part_mass += gp.data[j];
      }
      off += gp.size();
    }
    for (double v : gx.data) input_mass += v;
    CHECK(part_mass == doctest::Approx(input_mass).epsilon(1e-12));
  }
}

TEST_CASE("view_pool") {
  std::mt19937_64 rng(11);
  SUBCASE("single view is identity") {
    GraphD g;
    auto x = g.input(random_tensor(Shape4{1, 2, 3, 3}, rng));
    CHECK(g.value(g.view_pool({x})).data == g.value(x).data);
  }
  SUBCASE("elementwise maximum") {
    GraphD g;
    auto a = g.input(Tensor4d(Shape4{1, 1, 1, 1}, {1}));
    auto b = g.input(Tensor4d(Shape4{1, 1, 1, 1}, {5}));
    auto c = g.input(Tensor4d(Shape4{1, 1, 1, 1}, {3}));
    CHECK(g.value(g.view_pool({a, b, c})).data[0] == 5.0);
  }
  SUBCASE("permutation invariant") {
    std::vector<Tensor4d> views;
    for (int i = 0; i < 4; ++i) {
      views.push_back(random_tensor(Shape4{1, 3, 4, 4}, rng));
    }
    std::vector<double> reference;
    std::vector<int> perm{0, 1, 2, 3};
    for (int trial = 0; trial < 10; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      GraphD g;
      std::vector<GraphD::Var> vars;
      for (int i : perm) vars.push_back(g.input(views[i]));
      auto out = g.value(g.view_pool(vars)).data;
      if (reference.empty()) {
        reference = out;
      } else {
        CHECK(out == reference);
      }
    }
  }
  SUBCASE("tie routes gradient to the lowest view index") {
    GraphD g;
    auto a = g.param(Tensor4d(Shape4{1, 1, 1, 1}, {5}));
    auto b = g.param(Tensor4d(Shape4{1, 1, 1, 1}, {5}));
    g.backward(g.sum(g.view_pool({a, b})));
    CHECK(g.grad(a).data[0] == 1.0);
    CHECK(g.grad(b).data[0] == 0.0);
  }
  SUBCASE("errors") {
    GraphD g;
    CHECK_THROWS_AS(g.view_pool({}), ConfigError);
    auto a = g.input(Tensor4d::zeros(1, 1, 2, 2));
    auto b = g.input(Tensor4d::zeros(1, 1, 3, 3));
    CHECK_THROWS_AS(g.view_pool({a, b}), ConfigError);
    auto c = g.input(Tensor4d::zeros(2, 1, 2, 2));
    CHECK_THROWS_AS(g.view_pool({c}), ConfigError);
  }
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(13);
  SUBCASE("loss = sum(x) gives all-ones gradient") {
    GraphD g;
    auto x = g.param(random_tensor(Shape4{2, 3, 2, 2}, rng));
    g.backward(g.sum(x));
    for (double v : g.grad(x).data) CHECK(v == 1.0);
  }
  SUBCASE("loss = 0.5 * ||x||^2 gives gradient x") {
    GraphD g;
    auto x = g.param(random_tensor(Shape4{1, 5, 1, 1}, rng));
    g.backward(g.scale(g.sum(g.square(x)), 0.5));
    for (std::size_t i = 0; i < g.value(x).size(); ++i) {
      CHECK(g.grad(x).data[i] == doctest::Approx(g.value(x).data[i]).epsilon(1e-15));
    }
  }
  SUBCASE("non-scalar root is a usage error") {
    GraphD g;
    auto x = g.param(random_tensor(Shape4{1, 2, 1, 1}, rng));
    CHECK_THROWS_AS(g.backward(x), UsageError);
  }
  SUBCASE("tape is consumed by backward") {
    GraphD g;
    auto x = g.param(Tensor4d::scalar(2.0));
    g.backward(g.sum(x));
    CHECK_THROWS_AS(g.backward(x), UsageError);
    CHECK_THROWS_AS(g.sum(x), UsageError);
  }
  SUBCASE("gradient accumulation is additive across consumers") {
    GraphD g;
    auto x = g.param(Tensor4d::scalar(3.0));
    auto a = g.scale(x, 2.0);
    auto b = g.scale(x, 5.0);
    g.backward(g.sum(g.concat_batch({a, b})));
    CHECK(g.grad(x).data[0] == doctest::Approx(7.0).epsilon(1e-15));
  }
}

TEST_CASE("finite-difference checks per op") {
  std::mt19937_64 rng(17);

  // Shared driver: loss(x) = sum(square(f(x))) probed against the analytic
  // gradient from the tape.
  auto check_op = [&rng](auto build_loss, std::vector<Tensor4d*> params,
                         double tol, std::uint64_t salt) {
    auto eval = [&]() {
      GraphD g;
      return build_loss(g, /*want_grads=*/nullptr);
    };
    auto analytic = [&]() {
      GraphD g;
      std::vector<Tensor4d> grads;
      build_loss(g, &grads);
      return grads;
    };
    const double err = grad_check(eval, analytic, params, 1e-5, -1, salt);
    CHECK(err <= tol);
  };

  SUBCASE("linear graph is exact") {
    Tensor4d x = random_tensor(Shape4{2, 3, 1, 1}, rng);
    auto build = [&x](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto loss = g.sum(g.scale(xv, 3.0));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
      }
      return value;
    };
    auto eval = [&]() { GraphD g; return build(g, nullptr); };
    auto analytic = [&]() {
      GraphD g;
      std::vector<Tensor4d> out;
      build(g, &out);
      return out;
    };
    CHECK(grad_check(eval, analytic, {&x}, 1e-5) <= 1e-10);
  }

  SUBCASE("relu probed away from zero") {
    Tensor4d x(Shape4{2, 4, 2, 2});
    std::uniform_real_distribution<double> mag(0.2, 1.5);
    std::bernoulli_distribution sign(0.5);
    for (double& v : x.data) v = (sign(rng) ? 1 : -1) * mag(rng);
    auto build = [&x](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto loss = g.sum(g.square(g.relu(xv)));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
      }
      return value;
    };
    check_op(build, {&x}, 1e-6, 1);
  }

  SUBCASE("conv2d gradients for input, weights and bias") {
    // stride 2 exercises the patch-matrix path, stride 1 the direct path.
    for (int stride : {1, 2}) {
      for (int probe = 0; probe < 3; ++probe) {
        Tensor4d x = random_tensor(Shape4{2, 2, 5, 5}, rng);
        Tensor4d w = random_tensor(Shape4{3, 2, 3, 3}, rng);
        Tensor4d b = random_tensor(Shape4{3, 1, 1, 1}, rng);
        auto build = [&](GraphD& g, std::vector<Tensor4d>* grads) {
          auto xv = g.param(x);
          auto wv = g.param(w);
          auto bv = g.param(b);
          auto loss = g.sum(g.square(g.conv2d(xv, wv, bv, stride, 1)));
          const double value = g.value(loss).data[0];
          if (grads) {
            g.backward(loss);
            grads->push_back(g.grad(xv));
            grads->push_back(g.grad(wv));
            grads->push_back(g.grad(bv));
          }
          return value;
        };
        check_op(build, {&x, &w, &b}, 1e-6, 100 + 10 * stride + probe);
      }
    }
  }
  SUBCASE("direct 3x3 path agrees with the patch-matrix path") {
    for (int probe = 0; probe < 5; ++probe) {
      Tensor4d x = random_tensor(Shape4{3, 2, 6, 7}, rng);
      Tensor4d w = random_tensor(Shape4{4, 2, 3, 3}, rng);
      Tensor4d b = random_tensor(Shape4{4, 1, 1, 1}, rng);
      // Direct path: stride 1, pad 1.
      GraphD g1;
      auto y1 = g1.conv2d(g1.input(x), g1.param(w), g1.param(b), 1, 1);
      // Reference: pad by hand, then stride-1 pad-0 goes through im2col.
      Tensor4d xp(Shape4{3, 2, 8, 9});
      for (int n = 0; n < 3; ++n) {
        for (int k = 0; k < 2; ++k) {
          for (int h = 0; h < 6; ++h) {
            for (int c = 0; c < 7; ++c) {
              xp.at(n, k, h + 1, c + 1) = x.at(n, k, h, c);
            }
          }
        }
      }
      GraphD g2;
      auto y2 = g2.conv2d(g2.input(xp), g2.param(w), g2.param(b), 1, 0);
      const auto& a = g1.value(y1);
      const auto& r = g2.value(y2);
      REQUIRE(a.shape == r.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.data[i] == doctest::Approx(r.data[i]).epsilon(1e-12));
      }
    }
  }

  SUBCASE("maxpool2d gradient") {
    Tensor4d x = random_tensor(Shape4{2, 2, 6, 6}, rng);
    auto build = [&x](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto loss = g.sum(g.square(g.maxpool2d(xv, 2, 2)));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
      }
      return value;
    };
    check_op(build, {&x}, 1e-6, 2);
  }

  SUBCASE("fully_connected gradients") {
    Tensor4d x = random_tensor(Shape4{3, 4, 1, 1}, rng);
    Tensor4d w = random_tensor(Shape4{5, 4, 1, 1}, rng);
    Tensor4d b = random_tensor(Shape4{5, 1, 1, 1}, rng);
    auto build = [&](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto wv = g.param(w);
      auto bv = g.param(b);
      auto loss = g.sum(g.square(g.fully_connected(xv, wv, bv)));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
        grads->push_back(g.grad(wv));
        grads->push_back(g.grad(bv));
      }
      return value;
    };
    check_op(build, {&x, &w, &b}, 1e-6, 3);
  }

  SUBCASE("slice, view_pool, concat composite") {
    Tensor4d x = random_tensor(Shape4{6, 2, 4, 4}, rng);
    auto build = [&x](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto groups = g.slice_batch(xv, {3, 3});
      std::vector<GraphD::Var> pooled;
      for (auto group : groups) {
        auto singles = g.slice_batch(group, {1, 1, 1});
        pooled.push_back(g.maxpool2d(g.view_pool(singles), 2, 2));
      }
      auto loss = g.sum(g.square(g.concat_batch(pooled)));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        grads->push_back(g.grad(xv));
      }
      return value;
    };
    check_op(build, {&x}, 1e-6, 4);
  }

  SUBCASE("composite conv-relu-pool-fc graph") {
    Tensor4d x = random_tensor(Shape4{2, 1, 8, 8}, rng);
    Tensor4d cw = random_tensor(Shape4{3, 1, 3, 3}, rng);
    Tensor4d cb = random_tensor(Shape4{3, 1, 1, 1}, rng, 0.1);
    Tensor4d fw = random_tensor(Shape4{4, 48, 1, 1}, rng, 0.3);
    Tensor4d fb = random_tensor(Shape4{4, 1, 1, 1}, rng, 0.1);
    auto build = [&](GraphD& g, std::vector<Tensor4d>* grads) {
      auto xv = g.param(x);
      auto cwv = g.param(cw);
      auto cbv = g.param(cb);
      auto fwv = g.param(fw);
      auto fbv = g.param(fb);
      auto h = g.maxpool2d(g.relu(g.conv2d(xv, cwv, cbv, 1, 1)), 2, 2);
      auto out = g.fully_connected(g.flatten(h), fwv, fbv);
      auto loss = g.sum(g.square(out));
      const double value = g.value(loss).data[0];
      if (grads) {
        g.backward(loss);
        for (auto v : {xv, cwv, cbv, fwv, fbv}) grads->push_back(g.grad(v));
      }
      return value;
    };
    check_op(build, {&x, &cw, &cb, &fw, &fb}, 1e-4, 5);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical results") {
  auto run_once = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    GraphD g;
    auto x = g.param(random_tensor(Shape4{4, 2, 8, 8}, rng));
    auto w = g.param(random_tensor(Shape4{3, 2, 3, 3}, rng));
    auto b = g.param(random_tensor(Shape4{3, 1, 1, 1}, rng));
    auto y = g.maxpool2d(g.relu(g.conv2d(x, w, b, 1, 1)), 2, 2);
    auto loss = g.sum(g.square(y));
    std::vector<double> out = g.value(y).data;
    g.backward(loss);
    std::vector<double> gx = g.grad(x).data;
    std::vector<double> gw = g.grad(w).data;
    out.insert(out.end(), gx.begin(), gx.end());
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  CHECK(run_once(42) == run_once(42));
}

TEST_CASE("forward ops keep finite inputs finite") {
  std::mt19937_64 rng(23);
  GraphD g;
  auto x = g.input(random_tensor(Shape4{4, 2, 8, 8}, rng, 10.0));
  auto w = g.param(random_tensor(Shape4{5, 2, 3, 3}, rng, 10.0));
  auto b = g.param(random_tensor(Shape4{5, 1, 1, 1}, rng, 10.0));
  auto y = g.maxpool2d(g.relu(g.conv2d(x, w, b, 1, 1)), 2, 2);
  CHECK(g.value(y).all_finite());
}
