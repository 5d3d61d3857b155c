#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "ptsm/errors.hpp"
#include "ptsm/gradcheck.hpp"
#include "ptsm/tape.hpp"

using namespace ptsm;

namespace {

// Keep finite-difference probes away from kinks (relu/abs at 0) by nudging
// small entries outward.
Tensor kink_safe_randn(const Shape& s, Rng& rng) {
  Tensor t = Tensor::randn(s, rng);
  for (i64 i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < 0.05) t[i] = t[i] < 0 ? -0.1 : 0.1;
  return t;
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Full-probe finite-difference audit of a scalar graph over its leaves.
GradCheckReport check_graph(const std::vector<Tensor>& params, const GraphFn& graph,
                            double tol = 1e-4) {
  ScalarFn f = [&graph](const std::vector<Tensor>& ps) {
    Tape t;
    std::vector<Var> vs;
    for (const Tensor& p : ps) vs.push_back(t.leaf(p));
    return t.value(graph(t, vs)).item();
  };
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Var> vs;
    for (const Tensor& p : params) vs.push_back(t.leaf(p));
    t.backward(graph(t, vs));
    for (Var v : vs) analytic.push_back(t.grad(v));
  }
  std::vector<std::string> names;
  for (size_t i = 0; i < params.size(); ++i) names.push_back("p" + std::to_string(i));
  return grad_check(f, params, analytic, names, 1e-5, tol);
}

// Weighted sum so every output entry carries a distinct gradient signal
// (a plain sum would give softmax rows a zero derivative).
Var weighted(Tape& t, Var v, const Tensor& w) { return t.sum(t.mul(v, t.constant(w))); }

}  // namespace

TEST_CASE("primitive set names the required operations") {
  const std::vector<std::string> prims = primitive_set();
  auto has = [&](const char* name) {
    return std::find(prims.begin(), prims.end(), name) != prims.end();
  };
  CHECK(has("sigmoid"));
  CHECK(has("trace"));
  CHECK(has("conv1d"));
  CHECK(has("matmul"));
  CHECK(has("softmax_rows"));
  CHECK(has("batch_norm"));
  CHECK(has("dropout"));
  CHECK(has("adaptive_avg_pool"));
}

TEST_CASE("sum of squares has gradient 2w") {
  Tape t;
  Var w = t.leaf(Tensor::vector({3}));
  t.backward(t.sum(t.mul(w, w)));
  CHECK(t.grad(w)[0] == 6.0);
}

TEST_CASE("sigmoid at zero has slope one quarter") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(0.0));
  Var s = t.sigmoid(x);
  CHECK(t.value(s).item() == 0.5);
  t.backward(s);
  CHECK(t.grad(x)[0] == 0.25);
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(t.backward(t.mul(x, x)), ContractViolation);
}

TEST_CASE("leaves off the path to the root receive zero gradients") {
  Tape t;
  Var used = t.leaf(Tensor::vector({1, 2}));
  Var unused = t.leaf(Tensor::vector({3, 4, 5}));
  t.backward(t.sum(used));
  Tensor g = t.grad(unused);
  REQUIRE(g.numel() == 3);
  for (i64 i = 0; i < 3; ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("two backward passes produce bit-identical gradients") {
  Rng rng(5);
  Tape t;
  Var x = t.leaf(Tensor::randn({6, 6}, rng));
  Var root = t.sum(t.sigmoid(t.matmul(x, x)));
  t.backward(root);
  Tensor g1 = t.grad(x);
  t.backward(root);
  Tensor g2 = t.grad(x);
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * 36) == 0);
}

TEST_CASE("backward is linear in the root") {
  Rng rng(17);
  const Tensor x0 = kink_safe_randn({5, 5}, rng);
  const double a = 1.7, b = -0.6;

  auto f_graph = [](Tape& t, Var x) { return t.sum(t.sigmoid(x)); };
  auto g_graph = [](Tape& t, Var x) { return t.l2_norm(x); };

  Tape tf, tg, tc;
  Var xf = tf.leaf(x0), xg = tg.leaf(x0), xc = tc.leaf(x0);
  tf.backward(f_graph(tf, xf));
  tg.backward(g_graph(tg, xg));
  tc.backward(tc.add(tc.scale(f_graph(tc, xc), a), tc.scale(g_graph(tc, xc), b)));
  const Tensor gf = tf.grad(xf), gg = tg.grad(xg), gc = tc.grad(xc);
  for (i64 i = 0; i < x0.numel(); ++i)
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-10));
}

TEST_CASE("dropout in evaluation mode is the identity") {
  Rng rng(9);
  Tensor x0 = Tensor::randn({4, 8}, rng);
  Tape t;
  Var x = t.leaf(x0);
  const Tensor& y = t.value(t.dropout(x, 0.5, Mode::Eval));
  CHECK(std::memcmp(y.data(), x0.data(), sizeof(double) * 32) == 0);
}

TEST_CASE("dropout in train mode is deterministic per tape seed") {
  Rng rng(10);
  Tensor x0 = Tensor::randn({4, 8}, rng);
  Tape t1((Rng(123))), t2((Rng(123))), t3((Rng(124)));
  Tensor y1 = t1.value(t1.dropout(t1.leaf(x0), 0.5, Mode::Train));
  Tensor y2 = t2.value(t2.dropout(t2.leaf(x0), 0.5, Mode::Train));
  Tensor y3 = t3.value(t3.dropout(t3.leaf(x0), 0.5, Mode::Train));
  CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * 32) == 0);
  CHECK(std::memcmp(y1.data(), y3.data(), sizeof(double) * 32) != 0);
}

TEST_CASE("batch norm in eval mode uses running statistics deterministically") {
  Rng rng(21);
  Tensor x0 = Tensor::randn({6, 5}, rng);
  BnState st(5);
  st.running_mean = Tensor::randn({5}, rng);
  st.running_var = Tensor::rand_uniform({5}, rng, 0.5, 2.0);
  Tensor gamma = Tensor::ones({5});
  Tensor beta = Tensor::zeros({5});

  auto run = [&]() {
    Tape t;
    return t.value(t.batch_norm(t.leaf(x0), t.leaf(gamma), t.leaf(beta), st, Mode::Eval));
  };
  Tensor y1 = run(), y2 = run();
  CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * 30) == 0);
  // spot-check the normalization arithmetic
  const double expect =
      (x0.at(2, 3) - st.running_mean[3]) / std::sqrt(st.running_var[3] + st.eps);
  CHECK(y1.at(2, 3) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gradcheck passes a constant function") {
  const std::vector<Tensor> params = {Tensor::vector({1, 2, 3})};
  ScalarFn f = [](const std::vector<Tensor>&) { return 4.0; };
  const std::vector<Tensor> analytic = {Tensor::zeros({3})};
  GradCheckReport rep = grad_check(f, params, analytic, {"w"}, 1e-5, 1e-4);
  CHECK(rep.ok());
}

TEST_CASE("gradcheck reports non-finite objectives as numeric errors") {
  const std::vector<Tensor> params = {Tensor::vector({1.0})};
  ScalarFn f = [](const std::vector<Tensor>& ps) { return std::log(-ps[0][0]); };
  const std::vector<Tensor> analytic = {Tensor::zeros({1})};
  CHECK_THROWS_AS((void)grad_check(f, params, analytic, {"w"}, 1e-5, 1e-4), NumericError);
}

TEST_CASE("gradcheck probe sampling bounds work per parameter") {
  Rng rng(31);
  const std::vector<Tensor> params = {Tensor::randn({100}, rng)};
  ScalarFn f = [](const std::vector<Tensor>& ps) {
    double s = 0.0;
    for (i64 i = 0; i < ps[0].numel(); ++i) s += ps[0][i] * ps[0][i];
    return s;
  };
  Tensor analytic(Shape{100});
  for (i64 i = 0; i < 100; ++i) analytic[i] = 2.0 * params[0][i];
  Rng probe(7);
  GradCheckReport rep = grad_check(f, params, {analytic}, {"w"}, 1e-5, 1e-4, 5, &probe);
  CHECK(rep.ok());
  CHECK(rep.probes == 5);
}

TEST_CASE("every primitive passes finite differences on 100+ probes") {
  Rng rng(400);
  const Tensor w10x12 = Tensor::randn({10, 12}, rng);  // weighting for reductions

  SUBCASE("add") {
    Tensor a = Tensor::randn({10, 12}, rng), b = Tensor::randn({10, 12}, rng);
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.add(v[0], v[1]), w10x12);
          }).ok());
  }
  SUBCASE("sub") {
    Tensor a = Tensor::randn({10, 12}, rng), b = Tensor::randn({10, 12}, rng);
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.sub(v[0], v[1]), w10x12);
          }).ok());
  }
  SUBCASE("mul") {
    Tensor a = Tensor::randn({10, 12}, rng), b = Tensor::randn({10, 12}, rng);
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.mul(v[0], v[1]), w10x12);
          }).ok());
  }
  SUBCASE("div") {
    Tensor a = Tensor::randn({10, 12}, rng);
    Tensor b = Tensor::rand_uniform({10, 12}, rng, 0.5, 2.0);
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.div(v[0], v[1]), w10x12);
          }).ok());
  }
  SUBCASE("scale and shift") {
    Tensor a = Tensor::randn({10, 12}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.shift(t.scale(v[0], -1.3), 0.7), w10x12);
          }).ok());
  }
  SUBCASE("clamp_min and clamp_max") {
    // keep entries away from the clamp thresholds at +-0.5
    Tensor a = Tensor::randn({10, 12}, rng);
    for (i64 i = 0; i < a.numel(); ++i)
      if (std::abs(std::abs(a[i]) - 0.5) < 0.05) a[i] += 0.2;
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.clamp_max(t.clamp_min(v[0], -0.5), 0.5), w10x12);
          }).ok());
  }
  SUBCASE("sigmoid elu relu") {
    Tensor a = kink_safe_randn({10, 12}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.sigmoid(v[0]), w10x12);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.elu(v[0]), w10x12);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.relu(v[0]), w10x12);
          }).ok());
  }
  SUBCASE("log exp sqrt") {
    Tensor a = Tensor::rand_uniform({10, 12}, rng, 0.5, 2.0);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.log(v[0]), w10x12);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.exp(v[0]), w10x12);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.sqrt(v[0]), w10x12);
          }).ok());
  }
  SUBCASE("abs") {
    Tensor a = kink_safe_randn({10, 12}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.abs(v[0]), w10x12);
          }).ok());
  }
  SUBCASE("reshape transpose concat") {
    Tensor a = Tensor::randn({10, 12}, rng), b = Tensor::randn({10, 12}, rng);
    const Tensor w2 = Tensor::randn({10, 24}, rng);
    const Tensor wt = Tensor::randn({12, 10}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.reshape(v[0], {12, 10}), wt);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.transpose(v[0]), wt);
          }).ok());
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.concat_cols(v[0], v[1]), w2);
          }).ok());
  }
  SUBCASE("matmul") {
    Tensor a = Tensor::randn({9, 12}, rng), b = Tensor::randn({12, 10}, rng);
    const Tensor w = Tensor::randn({9, 10}, rng);
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.matmul(v[0], v[1]), w);
          }).ok());
  }
  SUBCASE("reductions") {
    Tensor a = Tensor::randn({10, 12}, rng);
    const Tensor wrow = Tensor::randn({10}, rng);
    const Tensor wcol = Tensor::randn({12}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return t.sum(v[0]);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return t.mean(v[0]);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.sum_axis(v[0], 1), wrow);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.mean_axis(v[0], 0), wcol);
          }).ok());
  }
  SUBCASE("norms and trace") {
    Tensor a = kink_safe_randn({10, 12}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return t.l1_norm(v[0]);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return t.l2_norm(v[0]);
          }).ok());
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return t.frobenius_norm(v[0]);
          }).ok());
    Tensor sq = Tensor::randn({11, 11}, rng);
    CHECK(check_graph({sq}, [&](Tape& t, const std::vector<Var>& v) {
            return t.trace(v[0]);
          }).ok());
  }
  SUBCASE("batch covariance") {
    Tensor a = Tensor::randn({12, 9}, rng), b = Tensor::randn({12, 9}, rng);
    const Tensor w = Tensor::randn({9, 9}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.batch_cov(v[0]), w);
          }).ok());
    CHECK(check_graph({a, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.batch_cross_cov(v[0], v[1]), w);
          }).ok());
  }
  SUBCASE("softmax rows") {
    Tensor a = Tensor::randn({15, 8}, rng);
    const Tensor w = Tensor::randn({15, 8}, rng);
    CHECK(check_graph({a}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.softmax_rows(v[0]), w);
          }).ok());
  }
  SUBCASE("conv1d") {
    Tensor x = Tensor::randn({3, 4, 16}, rng);
    Tensor w = Tensor::randn({6, 4, 5}, rng);
    Tensor b = Tensor::randn({6}, rng);
    const Tensor ww = Tensor::randn({3, 6, 16}, rng);
    CHECK(check_graph({x, w, b}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.conv1d(v[0], v[1], v[2], 2), ww);
          }).ok());
  }
  SUBCASE("batch norm train mode") {
    Tensor x = Tensor::randn({12, 9}, rng);
    Tensor gamma = Tensor::rand_uniform({9}, rng, 0.5, 1.5);
    Tensor beta = Tensor::randn({9}, rng);
    const Tensor w = Tensor::randn({12, 9}, rng);
    CHECK(check_graph({x, gamma, beta}, [&](Tape& t, const std::vector<Var>& v) {
            BnState st(9);  // fresh per evaluation; train mode reads batch stats
            return weighted(t, t.batch_norm(v[0], v[1], v[2], st, Mode::Train), w);
          }).ok());
  }
  SUBCASE("dropout train mode with fixed mask") {
    Tensor x = Tensor::randn({10, 12}, rng);
    auto graph = [&](Tape& t, const std::vector<Var>& v) {
      return weighted(t, t.dropout(v[0], 0.4, Mode::Train), w10x12);
    };
    // same tape seed every evaluation => same mask => differentiable
    ScalarFn f = [&](const std::vector<Tensor>& ps) {
      Tape t((Rng(55)));
      std::vector<Var> vs;
      for (const Tensor& p : ps) vs.push_back(t.leaf(p));
      return t.value(graph(t, vs)).item();
    };
    Tape t((Rng(55)));
    Var xv = t.leaf(x);
    t.backward(graph(t, {xv}));
    GradCheckReport rep = grad_check(f, {x}, {t.grad(xv)}, {"x"}, 1e-5, 1e-4);
    CHECK(rep.ok());
  }
  SUBCASE("adaptive average pooling") {
    Tensor x = Tensor::randn({3, 5, 14}, rng);
    const Tensor w = Tensor::randn({3, 5, 4}, rng);
    CHECK(check_graph({x}, [&](Tape& t, const std::vector<Var>& v) {
            return weighted(t, t.adaptive_avg_pool(v[0], 4), w);
          }).ok());
  }
}
