#include <doctest.h>

#include <cmath>
#include <memory>
#include <random>

#include "oracles.hpp"
#include "reltr/tensor.hpp"

using namespace reltr;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Analytic gradients of f at the current parameter values.
std::vector<std::vector<double>> analytic(const std::function<Tensor()>& f, std::vector<Tensor>& params) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape tape;
  Tensor out;
  {
    auto rec = tape.record();
    out = f();
  }
  tape.backward(out);
  std::vector<std::vector<double>> g;
  for (auto& p : params)
    g.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                : std::vector<double>(p.size(), 0.0));
  return g;
}

// Max relative error of the analytic gradient of f against the independent
// finite-difference oracle.
double gradient_error(const std::function<Tensor()>& f, std::vector<Tensor> params) {
  const auto a = analytic(f, params);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = oracle::numeric_gradient([&] { return f().item(); }, params[i]);
    for (std::size_t j = 0; j < n.size(); ++j) worst = std::max(worst, oracle::rel_error(a[i][j], n[j]));
  }
  return worst;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul hand values and identity") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor ones = Tensor::matrix({{1}, {1}});
  const Tensor c = matmul(a, ones);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c[0] == 3.0);
  CHECK(c[1] == 7.0);
  const Tensor m = Tensor::matrix({{0.5, -2}, {7, 1.25}});
  const Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor r = matmul(i2, m);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == m[i]);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] and [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient within 1e-6 of central differences") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  CHECK(gradient_error([&] { return sum(matmul(a, b)); }, {a, b}) < 1e-6);
  CHECK(gradient_error([&] { return sum(matmul_nt(a, transpose(b))); }, {a, b}) < 1e-6);
}

TEST_CASE("softmax values") {
  const Tensor s0 = softmax(Tensor::vector({0, 0}), 0);
  CHECK(s0[0] == doctest::Approx(0.5).epsilon(1e-15));
  const Tensor s1 = softmax(Tensor::vector({std::log(2.0), 0}), 0);
  CHECK(std::fabs(s1[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::fabs(s1[1] - 1.0 / 3.0) < 1e-15);
  const Tensor s2 = softmax(Tensor::vector({1000, 1000}), 0);
  CHECK(s2[0] == 0.5);
  CHECK(s2[1] == 0.5);
}

TEST_CASE("softmax slices sum to one and are shift invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({4, 7}, rng, -30, 30);
    const Tensor s = softmax(x, 1);
    const Tensor shifted = softmax(shift(x, 123.0), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(s.at(r, c) >= 0.0);
        total += s.at(r, c);
        CHECK(std::fabs(s.at(r, c) - shifted.at(r, c)) < 1e-12);
      }
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
    const Tensor cols = softmax(x, 0);
    for (std::size_t c = 0; c < 7; ++c) {
      double total = 0.0;
      for (std::size_t r = 0; r < 4; ++r) total += cols.at(r, c);
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer norm cases") {
  const Tensor g = Tensor::vector({1, 1, 1}), b = Tensor::vector({0, 0, 0});
  const Tensor flat = layer_norm(Tensor::matrix({{5, 5, 5}}), g, b);
  for (std::size_t i = 0; i < 3; ++i) CHECK(flat[i] == 0.0);
  const Tensor pm = layer_norm(Tensor::matrix({{1, -1}}), Tensor::vector({1, 1}), Tensor::vector({0, 0}), 1e-12);
  CHECK(std::fabs(pm[0] - 1.0) < 1e-9);
  CHECK(std::fabs(pm[1] + 1.0) < 1e-9);

  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({5, 9}, rng, -4, 4);
  const Tensor y = layer_norm(x, Tensor::full({9}, 1.0), Tensor::zeros({9}), 0.0);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 9; ++c) m += y.at(r, c) / 9;
    for (std::size_t c = 0; c < 9; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 9;
    CHECK(std::fabs(m) < 1e-9);
    CHECK(std::fabs(v - 1.0) < 1e-9);
  }
}

TEST_CASE("layer norm of a constant slice yields the bias") {
  const Tensor y = layer_norm(Tensor::matrix({{2, 2}}), Tensor::vector({3, 3}), Tensor::vector({0.5, -1}));
  CHECK(y[0] == 0.5);
  CHECK(y[1] == -1.0);
}

TEST_CASE("layer norm gradient within 1e-5") {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  Tensor w = random_tensor({3, 6}, rng);
  w.set_requires_grad(false);
  CHECK(gradient_error([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}) < 1e-5);
}

TEST_CASE("grad_check trivial functions") {
  std::vector<Tensor> x = {Tensor::vector({3.0})};
  const auto r = grad_check([&] { return sum(mul(x[0], x[0])); }, x);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.worst_analytic == doctest::Approx(6.0));

  std::mt19937_64 rng(1);
  std::vector<Tensor> v = {random_tensor({5}, rng)};
  const auto g = analytic([&] { return sum(softmax(v[0], 0)); }, v);
  for (double d : g[0]) CHECK(std::fabs(d) < 1e-15);
}

TEST_CASE("grad_check flags non-finite evaluations") {
  std::vector<Tensor> x = {Tensor::vector({1e-6, 1.0})};
  const auto r = grad_check([&] { return sum(log(x[0])); }, x);
  REQUIRE(r.non_finite.size() == 1);
  CHECK(r.non_finite[0].second == 0);
}

TEST_CASE("value used twice accumulates both contributions") {
  std::vector<Tensor> x = {Tensor::vector({1.5, -2.0, 0.25})};
  const auto g = analytic([&] { return sum(mul(x[0], x[0])); }, x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g[0][i] == 2.0 * x[0][i]);
}

TEST_CASE("elementwise ops hand arithmetic") {
  const Tensor a = Tensor::vector({1, -2, 3}), b = Tensor::vector({4, 5, -6});
  CHECK(add(a, b)[2] == -3.0);
  CHECK(sub(a, b)[0] == -3.0);
  CHECK(mul(a, b)[1] == -10.0);
  CHECK(div(a, b)[0] == 0.25);
  CHECK(relu(a)[1] == 0.0);
  CHECK(relu(a)[2] == 3.0);
  CHECK(sigmoid(Tensor::vector({0}))[0] == 0.5);
  CHECK(log(Tensor::vector({1}))[0] == 0.0);
  CHECK(mean(a).item() == doctest::Approx(2.0 / 3.0));
  const Tensor lin = linear(Tensor::matrix({{1, 2}}), Tensor::matrix({{1, 0, 2}, {0, 1, 3}}), Tensor::vector({1, 1, 1}));
  CHECK(lin[0] == 2.0);
  CHECK(lin[1] == 3.0);
  CHECK(lin[2] == 9.0);
  const Tensor cat = concat({Tensor::matrix({{1, 2}}), Tensor::matrix({{3, 4}, {5, 6}})}, 0);
  CHECK(cat.shape() == Shape{3, 2});
  CHECK(cat[5] == 6.0);
  const Tensor catc = concat({Tensor::matrix({{1}, {2}}), Tensor::matrix({{3, 4}, {5, 6}})}, 1);
  CHECK(catc.at(1, 0) == 2.0);
  CHECK(catc.at(1, 2) == 6.0);
  // -log softmax([ln 3, 0])[1] = log 4
  CHECK(cross_entropy(Tensor::vector({std::log(3.0), 0.0}), 1).item() == doctest::Approx(std::log(4.0)));
  CHECK(add(a, Tensor::zeros({3}))[1] == -2.0);
  CHECK(mul(a, Tensor::full({3}, 1.0))[2] == 3.0);
}

TEST_CASE("every primitive matches finite differences on 100 random inputs") {
  std::mt19937_64 rng(11);
  const std::vector<std::pair<const char*, std::function<double(std::mt19937_64&)>>> cases = {
      {"add", [](auto& r) { Tensor a = random_tensor({2, 3}, r), b = random_tensor({2, 3}, r); Tensor w = random_tensor({2, 3}, r); return gradient_error([&] { return sum(mul(add(a, b), w)); }, {a, b}); }},
      {"sub", [](auto& r) { Tensor a = random_tensor({2, 3}, r), b = random_tensor({2, 3}, r); Tensor w = random_tensor({2, 3}, r); return gradient_error([&] { return sum(mul(sub(a, b), w)); }, {a, b}); }},
      {"mul", [](auto& r) { Tensor a = random_tensor({2, 3}, r), b = random_tensor({2, 3}, r); return gradient_error([&] { return sum(mul(a, b)); }, {a, b}); }},
      {"div", [](auto& r) { Tensor a = random_tensor({4}, r), b = random_tensor({4}, r, 0.5, 2.0); return gradient_error([&] { return sum(div(a, b)); }, {a, b}); }},
      {"min/max", [](auto& r) { Tensor a = random_tensor({5}, r), b = random_tensor({5}, r); return gradient_error([&] { return sum(add(minimum(a, b), scale(maximum(a, b), 2.0))); }, {a, b}); }},
      {"relu", [](auto& r) { Tensor a = random_tensor({6}, r); Tensor w = random_tensor({6}, r); return gradient_error([&] { return sum(mul(relu(a), w)); }, {a}); }},
      {"sigmoid", [](auto& r) { Tensor a = random_tensor({6}, r, -4, 4); Tensor w = random_tensor({6}, r); return gradient_error([&] { return sum(mul(sigmoid(a), w)); }, {a}); }},
      {"log/exp", [](auto& r) { Tensor a = random_tensor({4}, r, 0.2, 3); return gradient_error([&] { return sum(add(log(a), exp(a))); }, {a}); }},
      {"abs", [](auto& r) { Tensor a = random_tensor({4}, r, 0.1, 1); return gradient_error([&] { return sum(abs(scale(a, -1))); }, {a}); }},
      {"softmax", [](auto& r) { Tensor a = random_tensor({3, 4}, r, -3, 3); Tensor w = random_tensor({3, 4}, r); return gradient_error([&] { return sum(mul(softmax(a, 1), w)); }, {a}); }},
      {"softmax axis 0", [](auto& r) { Tensor a = random_tensor({3, 4}, r, -3, 3); Tensor w = random_tensor({3, 4}, r); return gradient_error([&] { return sum(mul(softmax(a, 0), w)); }, {a}); }},
      {"linear", [](auto& r) { Tensor x = random_tensor({3, 4}, r), W = random_tensor({4, 2}, r), b = random_tensor({2}, r); Tensor w = random_tensor({3, 2}, r); return gradient_error([&] { return sum(mul(linear(x, W, b), w)); }, {x, W, b}); }},
      {"add_row", [](auto& r) { Tensor x = random_tensor({3, 4}, r), v = random_tensor({4}, r); Tensor w = random_tensor({3, 4}, r); return gradient_error([&] { return sum(mul(add_row(x, v), w)); }, {x, v}); }},
      {"concat", [](auto& r) { Tensor a = random_tensor({2, 3}, r), b = random_tensor({1, 3}, r); Tensor w = random_tensor({3, 3}, r); return gradient_error([&] { return sum(mul(concat({a, b}, 0), w)); }, {a, b}); }},
      {"concat cols", [](auto& r) { Tensor a = random_tensor({2, 3}, r), b = random_tensor({2, 1}, r); Tensor w = random_tensor({2, 4}, r); return gradient_error([&] { return sum(mul(concat({a, b}, 1), w)); }, {a, b}); }},
      {"slice/reshape", [](auto& r) { Tensor a = random_tensor({4, 3}, r); Tensor w = random_tensor({3, 2}, r); return gradient_error([&] { return sum(mul(reshape(slice(a, 0, 1, 3), {3, 2}), w)); }, {a}); }},
      {"gather", [](auto& r) { Tensor a = random_tensor({4, 2}, r); const std::vector<std::size_t> idx = {3, 0, 3}; Tensor w = random_tensor({3, 2}, r); return gradient_error([&] { return sum(mul(gather_rows(a, idx), w)); }, {a}); }},
      {"mean", [](auto& r) { Tensor a = random_tensor({5}, r); return gradient_error([&] { return mean(mul(a, a)); }, {a}); }},
      {"cross entropy", [](auto& r) { Tensor a = random_tensor({3, 4}, r, -2, 2); const std::vector<std::size_t> t = {0, 3, 1}; const std::vector<double> wt = {1, 0.1, 2}; return gradient_error([&] { return cross_entropy(a, t, wt); }, {a}); }},
      {"cross entropy 1d", [](auto& r) { Tensor a = random_tensor({5}, r, -2, 2); return gradient_error([&] { return cross_entropy(a, std::size_t{2}); }, {a}); }},
      {"conv2d", [](auto& r) { Tensor x = random_tensor({1, 2, 5, 5}, r), W = random_tensor({3, 2, 3, 3}, r), b = random_tensor({3}, r); Tensor w = random_tensor({1, 3, 3, 3}, r); return gradient_error([&] { return sum(mul(conv2d(x, W, b, 2, 1), w)); }, {x, W, b}); }},
  };
  for (const auto& [name, run] : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) worst = std::max(worst, run(rng));
    INFO(name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("conv2d hand value") {
  // 3x3 ones kernel over a 3x3 ramp, padding 1, stride 2: corners sum their 2x2 neighbourhoods
  const Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, w, Tensor::vector({0.5}), 2, 1);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y[0] == 1 + 2 + 4 + 5 + 0.5);
  CHECK(y[3] == 5 + 6 + 8 + 9 + 0.5);
}

TEST_CASE("dropout is identity at rate zero and inverted otherwise") {
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::full({1000}, 2.0);
  const Tensor same = dropout(x, 0.0, rng);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same[i] == 2.0);
  const Tensor d = dropout(x, 0.5, rng);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK((d[i] == 0.0 || d[i] == 4.0));
  CHECK_THROWS(dropout(x, 1.0, rng));
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), std::invalid_argument);
  Tensor t = Tensor::zeros({2, 3}, true);
  CHECK(!t.has_grad());
  CHECK(t.mutable_grad().size() == t.size());
  CHECK_THROWS(t.item());
}

TEST_CASE("operations outside a recording leave no tape entries") {
  Tape tape;
  Tensor a = Tensor::vector({1, 2}, true);
  const Tensor b = mul(a, a);
  CHECK(tape.size() == 0);
  {
    auto rec = tape.record();
    const Tensor c = mul(a, a);
    (void)c;
  }
  CHECK(tape.size() == 1);
  (void)b;
}

TEST_CASE("grad_check shrinks the step across a relu kink") {
  // 3e-6 and -4e-6 sit inside the default 1e-5 stencil.
  std::vector<Tensor> x = {Tensor::vector({3e-6, -4e-6, 0.5})};
  const auto r = grad_check([&] { return sum(relu(x[0])); }, x);
  CHECK(r.refined == 2);
  CHECK(r.max_rel_error < 1e-8);

  std::vector<Tensor> y = {Tensor::vector({0.25, -0.5})};
  CHECK(grad_check([&] { return sum(mul(y[0], y[0])); }, y).refined == 0);
}

TEST_CASE("sparse product matches the dense one") {
  std::mt19937_64 rng(8);
  std::vector<double> dense(6 * 4, 0.0);
  std::uniform_int_distribution<int> coin(0, 2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : dense)
    if (coin(rng) == 0) v = u(rng);
  const Tensor m({6, 4}, dense);
  const auto sparse = std::make_shared<const SparseColumns>(SparseColumns::from_dense(m));
  CHECK(sparse->rows == 6);
  CHECK(sparse->cols() == 4);
  std::vector<Tensor> a = {random_tensor({3, 6}, rng)};
  const Tensor want = matmul(a[0], m), got = matmul_sparse(a[0], sparse);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  const Tensor w = random_tensor({3, 4}, rng);
  CHECK(gradient_error([&] { return sum(mul(matmul_sparse(a[0], sparse), w)); }, a) < 1e-6);
  CHECK_THROWS_AS(matmul_sparse(Tensor::zeros({3, 5}), sparse), std::invalid_argument);
}

TEST_CASE("corrupted softmax backward is detected") {
  std::mt19937_64 rng(4);
  std::vector<Tensor> p = {random_tensor({2, 3}, rng)};
  const Tensor w = random_tensor({2, 3}, rng);
  set_backward_fault(BackwardFault::softmax);
  const auto bad = grad_check([&] { return sum(mul(softmax(p[0], 1), w)); }, p);
  set_backward_fault(BackwardFault::none);
  const auto good = grad_check([&] { return sum(mul(softmax(p[0], 1), w)); }, p);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK(good.max_rel_error < 1e-8);

  // Kinks in front of the faulty rule do not hide it.
  std::vector<Tensor> q = {Tensor({2, 3}, {2e-6, -0.3, 0.7, -3e-6, 0.4, 1e-6}, true)};
  set_backward_fault(BackwardFault::softmax);
  const auto kinked = grad_check([&] { return sum(mul(softmax(relu(q[0]), 1), w)); }, q);
  set_backward_fault(BackwardFault::none);
  CHECK(kinked.refined > 0);
  CHECK(kinked.max_rel_error > 1e-2);
}

}  // TEST_SUITE
