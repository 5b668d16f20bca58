#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "caml/errors.hpp"
#include "caml/nn.hpp"
#include "test_support.hpp"

using namespace caml;
using ad::Tensor;

namespace {

std::vector<double> vec(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

// Long-double reference for the softened 2-class softmax.
std::pair<long double, long double> soft2(double z0, double z1, double t) {
  long double a = std::exp(static_cast<long double>(z0) / t);
  long double b = std::exp(static_cast<long double>(z1) / t);
  return {a / (a + b), b / (a + b)};
}

}  // namespace

TEST_CASE("linear_forward identity and bias cases") {
  nn::Linear id{Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, {0, 0}), 0};
  CHECK(vec(nn::linear_forward(id, Tensor({1, 2}, {1, 2}))) ==
        std::vector<double>{1, 2});

  nn::Linear biased{Tensor({1, 2}, {0, 0}), Tensor({1}, {5}), 0};
  CHECK(vec(nn::linear_forward(biased, Tensor({1, 2}, {13, -4}))) ==
        std::vector<double>{5});

  CHECK_THROWS_AS(nn::linear_forward(id, Tensor({1, 3}, {1, 2, 3})), Error);
}

TEST_CASE("linear gradient vs finite differences") {
  nn::Linear layer = nn::make_linear(4, 3, 99);
  Rng rng(3);
  std::vector<double> xv(8);
  for (double& v : xv) v = rng.uniform(-2.0, 2.0);

  ad::Graph g;
  Tensor w = g.leaf(layer.weight);
  Tensor b = g.leaf(layer.bias);
  Tensor x = g.leaf({2, 4}, xv);
  auto grads = g.backward(ad::mean_all(ad::linear(x, w, b)));

  auto wv = vec(layer.weight);
  auto bv = vec(layer.bias);
  auto f_w = [&](const std::vector<double>& v) {
    return ad::mean_all(ad::linear(Tensor({2, 4}, xv), Tensor({3, 4}, v),
                                   Tensor({3}, bv)))
        .value();
  };
  auto f_x = [&](const std::vector<double>& v) {
    return ad::mean_all(ad::linear(Tensor({2, 4}, v), Tensor({3, 4}, wv),
                                   Tensor({3}, bv)))
        .value();
  };
  auto f_b = [&](const std::vector<double>& v) {
    return ad::mean_all(ad::linear(Tensor({2, 4}, xv), Tensor({3, 4}, wv),
                                   Tensor({3}, v)))
        .value();
  };
  CHECK(testing::max_rel_err(vec(grads.at(w.node_id())),
                             testing::fd_gradient(f_w, wv)) < 1e-6);
  CHECK(testing::max_rel_err(vec(grads.at(x.node_id())),
                             testing::fd_gradient(f_x, xv)) < 1e-6);
  CHECK(testing::max_rel_err(vec(grads.at(b.node_id())),
                             testing::fd_gradient(f_b, bv)) < 1e-6);
}

TEST_CASE("attention with one source returns that projected value row") {
  auto block = nn::make_attention(4, nn::AttnMode::Cross, 7);
  Tensor q({1, 4}, {0.3, -0.7, 2.0, 0.1});
  Tensor kv({1, 4}, {1.0, 0.5, -0.25, 0.75});
  Tensor out = nn::scaled_dot_attention(block, q, kv);
  Tensor projected = nn::linear_forward(block.value, kv);
  auto a = vec(out);
  auto b = vec(projected);
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));

  // changing the query cannot matter with a single source
  Tensor out2 = nn::scaled_dot_attention(block, Tensor({1, 4}, {9, 9, 9, 9}), kv);
  CHECK(vec(out2) == a);
}

TEST_CASE("uniform attention weights give mean of projected values") {
  // zero key projection makes every score equal regardless of the values
  auto block = nn::make_attention(3, nn::AttnMode::Cross, 11);
  block.key.weight = Tensor::zeros({3, 3});
  block.key.bias = Tensor::zeros({3});
  Tensor q({1, 3}, {0.2, -0.4, 1.0});
  Tensor kv({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1});
  Tensor out = nn::scaled_dot_attention(block, q, kv);
  Tensor projected = nn::linear_forward(block.value, kv);
  auto p = vec(projected);
  for (int c = 0; c < 3; ++c) {
    double m = (p[c] + p[3 + c] + p[6 + c] + p[9 + c]) / 4.0;
    CHECK(vec(out)[static_cast<std::size_t>(c)] ==
          doctest::Approx(m).epsilon(1e-14));
  }
}

TEST_CASE("attention rejects empty source and produces row-stochastic weights") {
  auto block = nn::make_attention(4, nn::AttnMode::Self, 1);
  CHECK_THROWS_AS(
      nn::scaled_dot_attention(block, Tensor({1, 4}, {1, 2, 3, 4}),
                               Tensor({1, 3}, {1, 2, 3})),
      Error);
}

TEST_CASE("attention gradient vs finite differences") {
  auto block = nn::make_attention(3, nn::AttnMode::Self, 21);
  Rng rng(5);
  std::vector<double> kvv(12);
  for (double& v : kvv) v = rng.uniform(-1.5, 1.5);

  ad::Graph g;
  Tensor kv = g.leaf({4, 3}, kvv);
  nn::AttentionBlock bound = block;  // constants; differentiate w.r.t. kv only
  Tensor out = nn::scaled_dot_attention(bound, kv, kv);
  auto grads = g.backward(ad::mean_all(out));
  auto f = [&](const std::vector<double>& v) {
    Tensor c({4, 3}, v);
    return ad::mean_all(nn::scaled_dot_attention(block, c, c)).value();
  };
  CHECK(testing::max_rel_err(vec(grads.at(kv.node_id())),
                             testing::fd_gradient(f, kvv)) < 1e-5);
}

TEST_CASE("bce_loss hand values") {
  CHECK(nn::bce_loss(Tensor({1}, {1.0 - 1e-7}), {1}).value() ==
        doctest::Approx(0.0).epsilon(1e-6));
  CHECK(nn::bce_loss(Tensor({1}, {0.5}), {1}).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // -(ln 0.8 + ln 0.7) / 2, evaluated in long double
  long double want = -(std::log(0.8L) + std::log(0.7L)) / 2.0L;
  CHECK(std::fabs(nn::bce_loss(Tensor({2}, {0.8, 0.3}), {1, 0}).value() -
                  static_cast<double>(want)) < 1e-12);
  CHECK_THROWS_AS(nn::bce_loss(Tensor({1}, {0.5}), {2}), Error);
}

TEST_CASE("ce_loss uniform, saturated, and random-oracle cases") {
  CHECK(nn::ce_loss(Tensor({1, 4}, {0, 0, 0, 0}), {2}).value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(nn::ce_loss(Tensor({1, 3}, {50.0, 0.0, 0.0}), {0}).value() ==
        doctest::Approx(0.0).epsilon(1e-9));

  Rng rng(13);
  std::vector<double> z(12);
  std::vector<int> y = {2, 0, 3};
  for (double& v : z) v = rng.uniform(-3.0, 3.0);
  long double ref = 0.0L;
  for (int r = 0; r < 3; ++r) {
    long double denom = 0.0L;
    for (int c = 0; c < 4; ++c)
      denom += std::exp(static_cast<long double>(z[static_cast<std::size_t>(r * 4 + c)]));
    ref += -(static_cast<long double>(
                 z[static_cast<std::size_t>(r * 4 + y[static_cast<std::size_t>(r)])]) -
             std::log(denom));
  }
  ref /= 3.0L;
  CHECK(std::fabs(nn::ce_loss(Tensor({3, 4}, z), y).value() -
                  static_cast<double>(ref)) < 1e-10);

  CHECK_THROWS_AS(nn::ce_loss(Tensor({1, 4}, {0, 0, 0, 0}), {4}), Error);
  CHECK_THROWS_AS(nn::ce_loss(Tensor({1, 4}, {0, 0, 0, 0}), {-1}), Error);
}

TEST_CASE("kd_loss hand values") {
  Tensor flat({1, 2}, {0.0, 0.0});
  CHECK(nn::kd_loss(flat, flat, 4.0).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // saturated teacher & student: 0 * log term vanishes
  Tensor sat({1, 2}, {800.0, 0.0});
  CHECK(std::fabs(nn::kd_loss(sat, sat, 4.0).value()) < 1e-12);

  // teacher [2,0], student uniform, t=4 -> ln 2 (uniform student makes the
  // cross-entropy independent of the teacher distribution)
  Tensor teacher({1, 2}, {2.0, 0.0});
  CHECK(nn::kd_loss(flat, teacher, 4.0).value() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(nn::kd_loss(flat, flat, 0.0), Error);
  CHECK_THROWS_AS(nn::kd_loss(flat, Tensor({1, 3}, {1, 2, 3}), 1.0), Error);
}

TEST_CASE("kd_loss matches long-double oracle on random 2-class cases") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    double t = rng.uniform(0.5, 8.0);
    std::vector<double> zs(8), zt(8);
    for (double& v : zs) v = rng.uniform(-4.0, 4.0);
    for (double& v : zt) v = rng.uniform(-4.0, 4.0);
    long double ref = 0.0L;
    for (int r = 0; r < 4; ++r) {
      auto [pt0, pt1] = soft2(zt[static_cast<std::size_t>(2 * r)],
                              zt[static_cast<std::size_t>(2 * r + 1)], t);
      auto [ps0, ps1] = soft2(zs[static_cast<std::size_t>(2 * r)],
                              zs[static_cast<std::size_t>(2 * r + 1)], t);
      ref += -(pt0 * std::log(ps0) + pt1 * std::log(ps1));
    }
    ref /= 4.0L;
    double got = nn::kd_loss(Tensor({4, 2}, zs), Tensor({4, 2}, zt), t).value();
    CHECK(std::fabs(got - static_cast<double>(ref)) < 1e-12);
  }
}

TEST_CASE("kd_loss(x, x, t) equals the entropy of softmax_t(x)") {
  Rng rng(37);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(6);
    for (double& v : z) v = rng.uniform(-3.0, 3.0);
    double t = rng.uniform(0.5, 6.0);
    Tensor logits({2, 3}, z);
    Tensor soft = ad::softmax_t(logits, t);
    auto probs = vec(soft);
    double entropy = 0.0;
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 3; ++c) {
        double p = probs[static_cast<std::size_t>(r * 3 + c)];
        entropy -= p * std::log(p);
      }
    }
    entropy /= 2.0;
    CHECK(nn::kd_loss(logits, logits, t).value() ==
          doctest::Approx(entropy).epsilon(1e-12));
  }
}

TEST_CASE("student_loss weighting") {
  Tensor task = Tensor::scalar(1.0);
  Tensor kd = Tensor::scalar(0.5);
  CHECK(nn::student_loss(task, kd, {0.0, 1.0}).value() == 1.0);
  CHECK(std::fabs(nn::student_loss(task, kd, {0.9, 4.0}).value() - 7.3) < 1e-12);
  CHECK(nn::student_loss(task, Tensor::scalar(0.2), {1.0, 1.0}).value() ==
        doctest::Approx(0.2).epsilon(1e-15));
  CHECK_THROWS_AS(nn::student_loss(task, kd, {1.5, 4.0}), Error);
  CHECK_THROWS_AS(nn::student_loss(task, kd, {0.9, 0.0}), Error);
}

TEST_CASE("student_loss is linear with coefficients (1-alpha) and alpha t^2") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    double alpha = rng.uniform(0.0, 1.0);
    double t = rng.uniform(0.5, 6.0);
    double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);
    double got = nn::student_loss(Tensor::scalar(a), Tensor::scalar(b),
                                  {alpha, t})
                     .value();
    CHECK(got == doctest::Approx((1 - alpha) * a + alpha * t * t * b)
                     .epsilon(1e-14));
  }
}

TEST_CASE("adam_step basics") {
  nn::ParamStore params;
  params.add("p", Tensor({2}, {1.0, -2.0}));
  auto state = nn::make_adam_state(params);

  SUBCASE("zero gradient leaves params unchanged") {
    std::vector<Tensor> grads = {Tensor::zeros({2})};
    nn::adam_step(params, grads, state, 1e-3);
    CHECK(vec(params.values[0]) == std::vector<double>{1.0, -2.0});
    CHECK(state.step == 1);
  }

  SUBCASE("first step moves by about lr in the gradient sign direction") {
    std::vector<Tensor> grads = {Tensor({2}, {0.5, -0.25})};
    nn::adam_step(params, grads, state, 1e-3);
    // bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
    CHECK(params.values[0].at(0) ==
          doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
    CHECK(params.values[0].at(1) ==
          doctest::Approx(-2.0 + 1e-3).epsilon(1e-7));
  }

  SUBCASE("lr = 0 is the identity") {
    std::vector<Tensor> grads = {Tensor({2}, {3.0, -1.0})};
    nn::adam_step(params, grads, state, 0.0);
    CHECK(vec(params.values[0]) == std::vector<double>{1.0, -2.0});
  }

  SUBCASE("shape mismatch raises a state error") {
    std::vector<Tensor> grads = {Tensor({3}, {1, 2, 3})};
    CHECK_THROWS_AS(nn::adam_step(params, grads, state, 1e-3), Error);
  }
}

TEST_CASE("adam runs are bitwise reproducible") {
  auto run = [] {
    nn::ParamStore params;
    params.add("w", nn::make_linear(3, 2, 5).weight);
    auto state = nn::make_adam_state(params);
    Rng rng(17);
    for (int step = 0; step < 25; ++step) {
      std::vector<double> gv(6);
      for (double& v : gv) v = rng.uniform(-1.0, 1.0);
      std::vector<Tensor> grads = {Tensor({2, 3}, gv)};
      nn::adam_step(params, grads, state, 1e-3 * (step + 1));
    }
    return vec(params.values[0]);
  };
  CHECK(run() == run());
}

TEST_CASE("cosine_lr schedule endpoints and midpoint") {
  CHECK(nn::cosine_lr(0, 100, 0.5) == 0.5);
  CHECK(nn::cosine_lr(100, 100, 0.5) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(nn::cosine_lr(50, 100, 0.5) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK_THROWS_AS(nn::cosine_lr(-1, 100, 0.5), Error);
  CHECK_THROWS_AS(nn::cosine_lr(101, 100, 0.5), Error);
}

TEST_CASE("make_linear init is seeded and in range") {
  auto a = nn::make_linear(16, 8, 123);
  auto b = nn::make_linear(16, 8, 123);
  auto c = nn::make_linear(16, 8, 124);
  CHECK(vec(a.weight) == vec(b.weight));
  CHECK(vec(a.weight) != vec(c.weight));
  double bound = 1.0 / std::sqrt(16.0);
  for (double v : vec(a.weight)) CHECK(std::fabs(v) <= bound);
}

TEST_CASE("param store bind/bind_frozen and grads alignment") {
  nn::ParamStore params;
  params.add("a", Tensor({2}, {1.0, 2.0}));
  params.add("b", Tensor({1}, {3.0}));
  CHECK_THROWS_AS(params.add("a", Tensor({1}, {0.0})), Error);

  ad::Graph g;
  auto bound = nn::bind(params, g);
  Tensor loss = ad::mean_all(ad::mul(bound.get("a"), bound.get("a")));
  auto grads = nn::collect_grads(bound, g, loss);
  CHECK(grads.size() == 2);
  CHECK(vec(grads[0]) == std::vector<double>{1.0, 2.0});
  CHECK(vec(grads[1]) == std::vector<double>{0.0});  // unreachable -> zeros

  auto frozen = nn::bind_frozen(params);
  CHECK_FALSE(frozen.get("a").requires_grad());
}
