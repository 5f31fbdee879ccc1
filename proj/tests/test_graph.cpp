#include <doctest.h>

#include <cmath>

#include "compatfam/graph.hpp"
#include "compatfam/rng.hpp"

using namespace compatfam;

namespace {

Tensor randt(Rng& rng, std::int64_t r, std::int64_t c, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(r, c);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("forward: basic arithmetic") {
    Graph g;
    NodeId x = g.param("x", 1, 1);
    NodeId sq = g.square(x);
    NodeId e = g.exp(g.constant_scalar(0.0));

    std::unordered_map<std::string, Tensor> binds{{"x", Tensor::scalar(3.0)}};
    auto out = forward(g, binds, {sq, e});
    CHECK(out[0][0] == doctest::Approx(9.0).epsilon(1e-15));
    CHECK(out[1][0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("forward: softmin weights match the scalar formula at extreme gaps") {
    Graph g;
    NodeId d = g.input("d", 1, 2);
    NodeId w = g.softmin_weights(d);
    std::unordered_map<std::string, Tensor> binds{{"d", Tensor::row({0.0, 100.0})}};
    auto out = forward(g, binds, {w});

    const double e100 = std::exp(-100.0);  // ~3.72e-44
    const double w0 = 1.0 / (1.0 + e100);
    const double w1 = e100 / (1.0 + e100);
    CHECK(out[0].at(0, 0) == doctest::Approx(w0).epsilon(1e-14));
    CHECK(out[0].at(0, 1) == doctest::Approx(w1).epsilon(1e-10));
    CHECK(out[0].at(0, 1) == doctest::Approx(3.72008e-44).epsilon(1e-4));
}

TEST_CASE("forward errors: shape mismatch, unbound leaf, non-finite") {
    Graph g;
    NodeId a = g.input("a", 1, 2);
    NodeId b = g.input("b", 2, 2);
    CHECK_THROWS_AS(g.add(a, b), ShapeError);

    NodeId la = g.log(a);
    Session s(g);
    CHECK_THROWS_AS(s.value(la), BindError);

    Session s2(g);
    Tensor bad = Tensor::row({-1.0, 2.0});
    s2.bind("a", bad);
    try {
        s2.value(la);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(e.node == la);  // reported with node id
    }
}

TEST_CASE("backward: forced calculus examples") {
    SUBCASE("x^2 at 3 -> 6") {
        Graph g;
        g.param("x", 1, 1);
        NodeId y = g.square(g.leaf("x"));
        auto grads = backward(g, y, {{"x", Tensor::scalar(3.0)}});
        CHECK(grads["x"][0] == doctest::Approx(6.0).epsilon(1e-15));
    }
    SUBCASE("constant output -> 0") {
        Graph g;
        g.param("x", 1, 1);
        NodeId y = g.sum(g.constant_scalar(5.0));
        auto grads = backward(g, y, {{"x", Tensor::scalar(3.0)}});
        CHECK(grads["x"][0] == 0.0);
    }
    SUBCASE("||x-y||^2 wrt x is 2(x-y)") {
        Graph g;
        NodeId x = g.param("x", 1, 2);
        NodeId y = g.input("y", 1, 2);
        NodeId d = g.sum(g.square(g.sub(x, y)));
        auto grads = backward(g, d, {{"x", Tensor::row({1.0, 2.0})}, {"y", Tensor::row({0.0, 0.0})}});
        CHECK(grads["x"].at(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
        CHECK(grads["x"].at(0, 1) == doctest::Approx(4.0).epsilon(1e-15));
    }
    SUBCASE("non-scalar output rejected") {
        Graph g;
        NodeId x = g.param("x", 1, 2);
        CHECK_THROWS_AS(g.gradients(g.square(x), {x}), ShapeError);
    }
}

TEST_CASE("finite_diff_check: polynomial exactness and epsilon bounds") {
    Graph g;
    NodeId p = g.param("p", 1, 5);
    NodeId a = g.constant(Tensor::row({0.3, -1.2, 2.0, 0.7, -0.4}));
    NodeId y = g.sum(g.add(g.mul(a, g.square(p)), p));
    std::unordered_map<std::string, Tensor> binds{{"p", Tensor::row({1.0, -2.0, 0.5, 3.0, -0.1})}};
    CHECK(finite_diff_check(g, y, binds, 1e-5) < 1e-8);

    CHECK_THROWS_AS(finite_diff_check(g, y, binds, 0.0), ConfigError);
    CHECK_THROWS_AS(finite_diff_check(g, y, binds, 0.5), ConfigError);
}

TEST_CASE("finite_diff_check: hinge away from the kink") {
    Graph g;
    NodeId p = g.param("p", 1, 4);
    NodeId y = g.sum(g.square(g.max_const(p, 0.0)));
    std::unordered_map<std::string, Tensor> binds{{"p", Tensor::row({0.7, -0.9, 1.4, -2.0})}};
    CHECK(finite_diff_check(g, y, binds, 1e-5) < 1e-6);
}

TEST_CASE("every differentiable primitive passes finite differences at random points") {
    // Detached ops (row_min, detach, masks) are excluded by contract: their
    // gradient is defined to be zero. The softmin composite covers row_min's
    // only production use and is checked below.
    Rng rng(42);
    const int points = 100;

    auto check = [&](const char* name, auto build, auto gen_binds) {
        for (int i = 0; i < points; ++i) {
            Graph g;
            NodeId out = build(g);
            auto binds = gen_binds(rng);
            const double err = finite_diff_check(g, out, binds, 1e-5);
            INFO(name << " point " << i);
            CHECK(err < 1e-6);
        }
    };

    using Binds = std::unordered_map<std::string, Tensor>;

    check("add/sub/mul/neg/scale/add_const",
          [](Graph& g) {
              NodeId a = g.param("a", 2, 3);
              NodeId b = g.param("b", 2, 3);
              return g.sum(g.add_const(g.scale(g.neg(g.mul(g.add(a, b), g.sub(a, b))), 1.7), 0.3));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 2, 3)}, {"b", randt(r, 2, 3)}}; });

    check("div",
          [](Graph& g) {
              NodeId a = g.param("a", 2, 2);
              NodeId b = g.param("b", 2, 2);
              return g.sum(g.div(a, b));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 2, 2)}, {"b", randt(r, 2, 2, 0.5, 2.0)}}; });

    check("matmul/transpose",
          [](Graph& g) {
              NodeId a = g.param("a", 2, 3);
              NodeId b = g.param("b", 3, 2);
              return g.sum(g.matmul(g.transpose(g.matmul(a, b)), a));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 2, 3)}, {"b", randt(r, 3, 2)}}; });

    check("exp/log/sqrt/square/sigmoid",
          [](Graph& g) {
              NodeId a = g.param("a", 1, 4);
              return g.sum(g.add(g.sigmoid(g.square(a)), g.log(g.sqrt(g.exp(a)))));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 1, 4, 0.2, 1.5)}}; });

    check("leaky_relu/max_const off-kink",
          [](Graph& g) {
              NodeId a = g.param("a", 1, 6);
              return g.sum(g.add(g.square(g.leaky_relu(a, 0.2)), g.square(g.max_const(a, 0.1))));
          },
          [&](Rng& r) {
              Tensor t = Tensor::zeros(1, 6);
              for (std::int64_t i = 0; i < 6; ++i) {
                  double v;
                  do {
                      v = r.uniform(-2.0, 2.0);
                  } while (std::abs(v) < 0.05 || std::abs(v - 0.1) < 0.05);
                  t[i] = v;
              }
              return Binds{{"a", t}};
          });

    check("row_sum/expand/reduce_to",
          [](Graph& g) {
              NodeId a = g.param("a", 3, 4);
              NodeId b = g.param("b", 1, 4);
              NodeId r = g.mul(a, g.expand(b, 3, 4));
              return g.sum(g.square(g.reduce_to(g.expand(g.row_sum(r), 3, 4), 1, 4)));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 3, 4)}, {"b", randt(r, 1, 4)}}; });

    check("concat/slice",
          [](Graph& g) {
              NodeId a = g.param("a", 2, 2);
              NodeId b = g.param("b", 2, 3);
              NodeId cat = g.concat_cols(a, b);
              return g.sum(g.square(g.slice_cols(cat, 1, 4)));
          },
          [&](Rng& r) { return Binds{{"a", randt(r, 2, 2)}, {"b", randt(r, 2, 3)}}; });

    check("softmin composite",
          [](Graph& g) {
              NodeId d = g.param("d", 3, 4);
              NodeId w = g.softmin_weights(d);
              NodeId v = g.constant(Tensor({3, 4}, {0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.2,
                                                    -1.0, 0.7, 0.9, -0.3}));
              return g.sum(g.square(g.mul(w, v)));
          },
          [&](Rng& r) { return Binds{{"d", randt(r, 3, 4, 0.0, 5.0)}}; });
}

TEST_CASE("backward linearity: gradient of a sum equals the sum of gradients") {
    Rng rng(7);
    Tensor pa = randt(rng, 2, 2), pb = randt(rng, 2, 2);

    auto build_f1 = [](Graph& g) {
        return g.sum(g.square(g.matmul(g.leaf("a"), g.leaf("b"))));
    };
    auto build_f2 = [](Graph& g) { return g.sum(g.exp(g.mul(g.leaf("a"), g.leaf("b")))); };

    Graph g1;
    g1.param("a", 2, 2);
    g1.param("b", 2, 2);
    auto ga = backward(g1, build_f1(g1), {{"a", pa}, {"b", pb}});

    Graph g2;
    g2.param("a", 2, 2);
    g2.param("b", 2, 2);
    auto gb = backward(g2, build_f2(g2), {{"a", pa}, {"b", pb}});

    Graph gs;
    gs.param("a", 2, 2);
    gs.param("b", 2, 2);
    NodeId total = gs.add(build_f1(gs), build_f2(gs));
    auto gt = backward(gs, total, {{"a", pa}, {"b", pb}});

    for (const char* n : {"a", "b"})
        for (std::int64_t i = 0; i < 4; ++i)
            CHECK(gt[n][i] == doctest::Approx(ga[n][i] + gb[n][i]).epsilon(1e-12));
}

TEST_CASE("double backprop: grad of ||grad g||^2 for quadratic g matches closed form") {
    // g(x) = x^T A x with symmetric A. grad_x g = 2 A x =: H x, and
    // f = ||H x||^2 has grad_x f = 2 H^T H x = 8 A^2 x on symmetric A.
    Graph g;
    NodeId x = g.param("x", 2, 1);
    const double a11 = 1.5, a12 = -0.7, a22 = 0.9;
    NodeId A = g.constant(Tensor({2, 2}, {a11, a12, a12, a22}));
    NodeId quad = g.sum(g.matmul(g.transpose(x), g.matmul(A, x)));

    NodeId gx = g.gradients(quad, {x})[0];
    NodeId f = g.sum(g.square(gx));
    NodeId gfx = g.gradients(f, {x})[0];

    const double x1 = 0.8, x2 = -1.3;
    std::unordered_map<std::string, Tensor> binds{{"x", Tensor({2, 1}, {x1, x2})}};
    auto out = forward(g, binds, {gfx});

    const double h11 = 2 * a11, h12 = 2 * a12, h22 = 2 * a22;
    const double hx1 = h11 * x1 + h12 * x2;
    const double hx2 = h12 * x1 + h22 * x2;
    const double e1 = 2 * (h11 * hx1 + h12 * hx2);
    const double e2 = 2 * (h12 * hx1 + h22 * hx2);
    CHECK(out[0].at(0, 0) == doctest::Approx(e1).epsilon(1e-12));
    CHECK(out[0].at(1, 0) == doctest::Approx(e2).epsilon(1e-12));
}

TEST_CASE("session determinism: identical bindings give identical values") {
    Rng rng(3);
    Graph g;
    NodeId a = g.param("a", 4, 4);
    NodeId out = g.sum(g.sigmoid(g.matmul(a, g.transpose(a))));
    Tensor pa = randt(rng, 4, 4);
    auto v1 = forward(g, {{"a", pa}}, {out});
    auto v2 = forward(g, {{"a", pa}}, {out});
    CHECK(v1[0][0] == v2[0][0]);
}
