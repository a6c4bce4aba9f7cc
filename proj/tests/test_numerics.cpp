#include <doctest.h>

#include <cmath>

#include "rulmae/adam.hpp"
#include "rulmae/error.hpp"
#include "rulmae/grad_check.hpp"
#include "rulmae/rng.hpp"
#include "rulmae/selftest.hpp"
#include "rulmae/tape.hpp"

using namespace rulmae;

namespace {

Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("linear: identity weights pass input through") {
  Tape tape;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b({3});
  VarId y = tape.linear(tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
}

TEST_CASE("linear: zero input broadcasts the bias") {
  Tape tape;
  Tensor x({2, 2});
  Tensor w = randn({2, 4}, 3);
  Tensor b({4}, {0.5, -1.0, 2.0, 0.25});
  VarId y = tape.linear(tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(tape.value(y).at(r, j) == b[j]);
  }
}

TEST_CASE("linear: shape mismatch raises") {
  Tape tape;
  Tensor x = randn({2, 3}, 1);
  Tensor w = randn({4, 2}, 2);
  Tensor b({2});
  CHECK_THROWS_AS(tape.linear(tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false)),
                  Error);
}

TEST_CASE("conv1d: centered delta kernel is the identity") {
  Tape tape;
  Tensor x = randn({6, 2}, 4);
  Tensor k({3, 2, 2});  // k[1] = identity over channels
  k.at(1, 0, 0) = 1.0;
  k.at(1, 1, 1) = 1.0;
  Tensor b({2});
  VarId y = tape.conv1d(tape.leaf(x, false), tape.leaf(k, false), tape.leaf(b, false), 1);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv1d: zero padding makes boundary rows differ on constant input") {
  Tape tape;
  Tensor x = Tensor::full({5, 1}, 1.0);
  Tensor k = Tensor::full({3, 1, 1}, 1.0);
  Tensor b({1});
  VarId y = tape.conv1d(tape.leaf(x, false), tape.leaf(k, false), tape.leaf(b, false), 1);
  const Tensor& out = tape.value(y);
  CHECK(out.at(0, 0) == doctest::Approx(2.0));  // one neighbor missing
  CHECK(out.at(2, 0) == doctest::Approx(3.0));
  CHECK(out.at(4, 0) == doctest::Approx(2.0));
}

TEST_CASE("glu: zero gate halves the value path; large gate saturates") {
  Tape tape;
  Tensor a = randn({3, 3}, 5);
  Tensor zero({3, 3});
  VarId y = tape.glu(tape.leaf(a, false), tape.leaf(zero, false));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(tape.value(y)[i] == doctest::Approx(0.5 * a[i]));
  }
  Tensor big = Tensor::full({3, 3}, 40.0);
  VarId y2 = tape.glu(tape.leaf(a, false), tape.leaf(big, false));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(tape.value(y2)[i] == doctest::Approx(a[i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax: identical scores give uniform rows; huge score wins") {
  Tape tape;
  Tensor x = Tensor::full({2, 4}, 1.7);
  VarId y = tape.softmax(tape.leaf(x, false));
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(tape.value(y)[i] == doctest::Approx(0.25));
  }
  Tensor z({1, 3}, {0.0, 500.0, 0.0});
  VarId y2 = tape.softmax(tape.leaf(z, false));
  CHECK(tape.value(y2)[1] == doctest::Approx(1.0));
}

TEST_CASE("softmax: non-finite input raises NonFinite") {
  Tape tape;
  Tensor x({1, 2}, {1.0, std::nan("")});
  VarId leaf = tape.leaf(x, false);
  CHECK_THROWS_WITH_AS(tape.softmax(leaf), doctest::Contains("NonFinite"), Error);
}

TEST_CASE("mse: frozen hand values") {
  Tape tape;
  Tensor pred({2}, {1.0, 3.0});
  Tensor target({2}, {0.0, 0.0});
  VarId loss = tape.mse(tape.leaf(pred, false), target);
  // mean of 1 and 9
  CHECK(tape.value(loss).scalar_value() == doctest::Approx(5.0));

  Tape tape2;
  VarId same = tape2.mse(tape2.leaf(target, false), target);
  CHECK(tape2.value(same).scalar_value() == 0.0);
}

TEST_CASE("mse gradient is 2(pred-target)/count") {
  Tensor pred = randn({3, 2}, 6);
  Tensor target = randn({3, 2}, 7);
  Tape tape;
  VarId p = tape.leaf(pred, true);
  VarId loss = tape.mse(p, target);
  tape.backward(loss);
  const Tensor& g = tape.grad(p);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    CHECK(g[i] == doctest::Approx(2.0 * (pred[i] - target[i]) / 6.0));
  }
}

TEST_CASE("dropout: rate 0 is the identity") {
  Tape tape;
  Tensor x = randn({4, 4}, 8);
  VarId in = tape.leaf(x, false);
  Rng rng(1);
  VarId y = tape.dropout(in, 0.0, true, rng);
  CHECK(y.index == in.index);
}

TEST_CASE("dropout: eval mode is the identity even at positive rates") {
  Tape tape;
  Tensor x = randn({4, 4}, 9);
  VarId in = tape.leaf(x, false);
  Rng rng(1);
  VarId y = tape.dropout(in, 0.5, false, rng);
  CHECK(y.index == in.index);
}

TEST_CASE("adam: zero gradient leaves parameters untouched and bumps t") {
  Tensor p = randn({5}, 10);
  const Tensor before = p;
  std::vector<Tensor*> params{&p};
  AdamState adam(AdamConfig{0.37, 0.9, 0.999, 1e-8}, params);
  Tensor zero({5});
  adam.step(params, {&zero});
  adam.step(params, {&zero});
  CHECK(adam.step_count() == 2);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == before[i]);
}

TEST_CASE("adam: first step is ~ -lr * sign(gradient)") {
  // Bias correction at t=1 gives m_hat = g, v_hat = g^2, so the update is
  // lr * g / (|g| + eps) regardless of the gradient magnitude.
  for (double g0 : {4.2, -0.003, 123.0}) {
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    AdamState adam(AdamConfig{0.05, 0.9, 0.999, 1e-14}, params);
    Tensor g = Tensor::scalar(g0);
    adam.step(params, {&g});
    CHECK(p[0] == doctest::Approx(-0.05 * (g0 > 0 ? 1.0 : -1.0)).epsilon(1e-9));
  }
}

TEST_CASE("adam: identical runs are bitwise identical") {
  auto run = [] {
    Tensor p = randn({16}, 77);
    std::vector<Tensor*> params{&p};
    AdamState adam(AdamConfig{0.01, 0.9, 0.999, 1e-8}, params);
    Rng rng(123);
    for (int i = 0; i < 25; ++i) {
      Tensor g = randn({16}, rng.next_u64());
      adam.step(params, {&g});
    }
    return p;
  };
  const Tensor a = run();
  const Tensor b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("adam: mismatched layout raises ShapeMismatch") {
  Tensor p = randn({4}, 5);
  std::vector<Tensor*> params{&p};
  AdamState adam(AdamConfig{}, params);
  Tensor g = randn({5}, 6);
  CHECK_THROWS_AS(adam.step(params, {&g}), Error);
}

TEST_CASE("per-layer gradient checks pass (finite-difference oracle)") {
  for (const CheckResult& r : gradient_checks()) {
    INFO(r.name, ": ", r.detail);
    CHECK(r.ok);
  }
}

TEST_CASE("full autoencoder gradient check passes at reduced dims") {
  const CheckResult r = end_to_end_grad_check();
  INFO(r.detail);
  CHECK(r.ok);
}

TEST_CASE("numeric invariants: softmax, layer_norm, adam, embeddings") {
  for (const CheckResult& r : numeric_invariant_checks()) {
    INFO(r.name);
    CHECK(r.ok);
  }
}

TEST_CASE("matmul transpose variants agree with naive loops") {
  const Tensor a = randn({4, 3}, 21);
  const Tensor b = randn({4, 3}, 22);
  auto naive = [](const Tensor& A, const Tensor& B, bool ta, bool tb) {
    const std::size_t m = ta ? A.dim(1) : A.dim(0);
    const std::size_t k = ta ? A.dim(0) : A.dim(1);
    const std::size_t n = tb ? B.dim(0) : B.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ta ? A.at(p, i) : A.at(i, p);
          const double bv = tb ? B.at(j, p) : B.at(p, j);
          s += av * bv;
        }
        out.at(i, j) = s;
      }
    }
    return out;
  };
  struct Case { bool ta, tb; Tensor x, y; };
  const Tensor c = randn({3, 5}, 23);
  std::vector<Case> cases;
  cases.push_back({false, false, a, c});
  cases.push_back({false, true, a, b});
  cases.push_back({true, false, a, randn({4, 5}, 24)});
  cases.push_back({true, true, randn({3, 4}, 25), randn({5, 3}, 26)});
  for (const Case& cs : cases) {
    Tape tape;
    VarId y = tape.matmul(tape.leaf(cs.x, false), tape.leaf(cs.y, false), cs.ta, cs.tb);
    const Tensor want = naive(cs.x, cs.y, cs.ta, cs.tb);
    REQUIRE(tape.value(y).shape() == want.shape());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(tape.value(y)[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("grad_check rejects a corrupted backward even through matmul") {
  LossAndGrad fn = [](const std::vector<Tensor>& ins, std::vector<Tensor>* grads) {
    Tape tape;
    VarId a = tape.leaf(ins[0], true);
    VarId b = tape.leaf(ins[1], true);
    Rng wrng(4);
    VarId y = tape.matmul(a, b, false, true);
    Tensor w(tape.value(y).shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = wrng.normal();
    VarId loss = tape.weighted_sum(y, w);
    const double v = tape.value(loss).scalar_value();
    if (grads) {
      tape.backward(loss);
      grads->clear();
      grads->push_back(tape.grad(a));
      Tensor gb = tape.grad(b);
      gb[0] += 0.5;  // corrupt one coordinate
      grads->push_back(std::move(gb));
    }
    return v;
  };
  std::vector<Tensor> inputs{randn({3, 4}, 31), randn({5, 4}, 32)};
  const auto report = grad_check(fn, std::move(inputs));
  CHECK_FALSE(report.pass(1e-6));
}
