#include <doctest.h>

#include <cmath>
#include <vector>

#include "dvps/common.hpp"
#include "dvps/rng.hpp"
#include "dvps/tensor.hpp"

using namespace dvps;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, stddev);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  const auto va = a.values();
  const auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

}  // namespace

TEST_CASE("linear identity and bias") {
  const Tensor x = Tensor::from({1, 2}, {1.0, 2.0});
  const Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor zero_b = Tensor::zeros({2});
  const Tensor y = linear(x, eye, zero_b);
  CHECK(y(0, 0) == 1.0);
  CHECK(y(0, 1) == 2.0);

  const Tensor b = Tensor::from({2}, {3.0, 4.0});
  const Tensor y2 = linear(x, eye, b);
  CHECK(y2(0, 0) == 4.0);
  CHECK(y2(0, 1) == 6.0);
}

TEST_CASE("linear matches a direct double-loop product") {
  Rng rng(11);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({4, 2}, rng);
  const Tensor b = random_tensor({2}, rng);
  const Tensor y = linear(x, w, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double expected = b(j);
      for (int p = 0; p < 4; ++p) expected += x(i, p) * w(p, j);
      CHECK(std::abs(y(i, j) - expected) <= 1e-12);
    }
  }
}

TEST_CASE("linear rejects shape mismatch") {
  const Tensor x = Tensor::zeros({2, 3});
  const Tensor w = Tensor::zeros({4, 2});
  const Tensor b = Tensor::zeros({2});
  CHECK_THROWS_AS((void)linear(x, w, b), std::invalid_argument);
}

TEST_CASE("softmax basics") {
  const Tensor uniform = softmax(Tensor::from({3}, {0.0, 0.0, 0.0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(uniform(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor single = softmax(Tensor::from({1}, {42.0}), 0);
  CHECK(single(0) == 1.0);

  const Tensor y = softmax(Tensor::from({3}, {1.0, 2.0, 3.0}), 0);
  const double denom = std::exp(1.0 - 3.0) + std::exp(2.0 - 3.0) + std::exp(0.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(y(i) - std::exp(1.0 + i - 3.0) / denom) <= 1e-12);
  }
}

TEST_CASE("softmax rows sum to one and shifts cancel") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({4, 5}, rng, 3.0);
    const Tensor y = softmax(x, 1);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 5; ++j) {
        CHECK(y(i, j) >= 0.0);
        s += y(i, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    const Tensor shifted = softmax(add_scalar(x, 123.5), 1);
    CHECK(max_abs_diff(y, shifted) <= 1e-12);
  }
}

TEST_CASE("softmax handles large magnitudes without overflow") {
  const Tensor y = softmax(Tensor::from({2}, {1000.0, 999.0}), 0);
  CHECK(std::abs(y(0) + y(1) - 1.0) <= 1e-12);
  CHECK(y(0) > y(1));
}

TEST_CASE("layer_norm edge rows") {
  const Tensor gamma = Tensor::full({4}, 1.0);
  const Tensor beta = Tensor::zeros({4});
  const Tensor constant_row = layer_norm(Tensor::full({1, 4}, 7.0), gamma, beta);
  for (int j = 0; j < 4; ++j) CHECK(std::abs(constant_row(0, j)) <= 1e-10);

  const Tensor zero_gamma = Tensor::zeros({4});
  const Tensor c_beta = Tensor::full({4}, 2.5);
  Rng rng(3);
  const Tensor y = layer_norm(random_tensor({2, 4}, rng), zero_gamma, c_beta);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 4; ++j) CHECK(y(i, j) == 2.5);
  }
}

TEST_CASE("layer_norm matches a two-pass oracle") {
  Rng rng(17);
  const int d = 6;
  const Tensor x = random_tensor({3, d}, rng, 2.0);
  const Tensor gamma = random_tensor({d}, rng);
  const Tensor beta = random_tensor({d}, rng);
  const Tensor y = layer_norm(x, gamma, beta);
  for (int i = 0; i < 3; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= d;
    for (int j = 0; j < d; ++j) {
      const double expected = gamma(j) * (x(i, j) - mean) / std::sqrt(var + 1e-5) + beta(j);
      CHECK(std::abs(y(i, j) - expected) <= 1e-10);
    }
  }
}

TEST_CASE("multi_head_attention with one key reduces to projected value") {
  Rng rng(23);
  const int d = 8;
  MhaParams p = MhaParams::init(d, 2, rng);
  const Tensor q = random_tensor({3, d}, rng);
  const Tensor kv = random_tensor({1, d}, rng);
  const Tensor out = multi_head_attention(q, kv, kv, p);
  // Attention over a single key is the constant 1, so every query row gets
  // the output projection of the projected value row.
  const Tensor expected_row = linear(linear(kv, p.wv, p.bv), p.wo, p.bo);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < d; ++j) {
      CHECK(std::abs(out(i, j) - expected_row(0, j)) <= 1e-12);
    }
  }
}

TEST_CASE("multi_head_attention invariant to joint key/value permutation") {
  Rng rng(29);
  const int d = 8, nk = 5;
  MhaParams p = MhaParams::init(d, 4, rng);
  const Tensor q = random_tensor({3, d}, rng);
  const Tensor k = random_tensor({nk, d}, rng);
  const Tensor v = random_tensor({nk, d}, rng);
  const Tensor base = multi_head_attention(q, k, v, p);

  const std::vector<int> perm = {3, 0, 4, 1, 2};
  auto permute_rows = [&](const Tensor& m) {
    Tensor out = Tensor::zeros({nk, d});
    auto vo = out.mutable_values();
    const auto vm = m.values();
    for (int r = 0; r < nk; ++r) {
      for (int c = 0; c < d; ++c) {
        vo[static_cast<std::size_t>(r) * d + c] =
            vm[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)]) * d + c];
      }
    }
    return out;
  };
  const Tensor shuffled = multi_head_attention(q, permute_rows(k), permute_rows(v), p);
  CHECK(max_abs_diff(base, shuffled) <= 1e-12);
}

TEST_CASE("multi_head_attention heads=1 equals the single-head formula") {
  Rng rng(31);
  const int d = 6, nq = 4, nk = 3;
  MhaParams p = MhaParams::init(d, 1, rng);
  const Tensor q = random_tensor({nq, d}, rng);
  const Tensor k = random_tensor({nk, d}, rng);
  const Tensor v = random_tensor({nk, d}, rng);
  const Tensor out = multi_head_attention(q, k, v, p);

  const Tensor qp = linear(q, p.wq, p.bq);
  const Tensor kp = linear(k, p.wk, p.bk);
  const Tensor vp = linear(v, p.wv, p.bv);
  const Tensor scores = scale(matmul(qp, transpose(kp)), 1.0 / std::sqrt(6.0));
  const Tensor expected = linear(matmul(softmax(scores, 1), vp), p.wo, p.bo);
  CHECK(max_abs_diff(out, expected) <= 1e-12);
}

TEST_CASE("multi_head_attention rejects indivisible head counts") {
  Rng rng(37);
  CHECK_THROWS_AS((void)MhaParams::init(6, 4, rng), std::invalid_argument);
}

TEST_CASE("conv1d_temporal identity kernel passes input through") {
  Rng rng(41);
  const int t = 5, d = 3;
  const Tensor x = random_tensor({t, d}, rng);
  Tensor kernel = Tensor::zeros({3, d, d});
  auto vk = kernel.mutable_values();
  for (int c = 0; c < d; ++c) vk[static_cast<std::size_t>(1) * d * d + c * d + c] = 1.0;
  const Tensor y = conv1d_temporal(x, kernel, Tensor::zeros({d}));
  CHECK(bitwise_equal(x, y));
}

TEST_CASE("conv1d_temporal averaging taps match a hand computation") {
  Tensor kernel = Tensor::zeros({3, 1, 1});
  auto vk = kernel.mutable_values();
  vk[0] = vk[1] = vk[2] = 1.0 / 3.0;
  const Tensor x = Tensor::from({3, 1}, {1.0, 2.0, 3.0});
  const Tensor y = conv1d_temporal(x, kernel, Tensor::zeros({1}));
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y(1, 0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(y(2, 0) == doctest::Approx(5.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("conv1d_temporal with one frame sees only the center tap") {
  Rng rng(43);
  const int d = 2;
  const Tensor x = random_tensor({1, d}, rng);
  const Tensor kernel = random_tensor({5, d, d}, rng);
  const Tensor bias = random_tensor({d}, rng);
  const Tensor y = conv1d_temporal(x, kernel, bias);
  for (int j = 0; j < d; ++j) {
    double expected = bias(j);
    for (int i = 0; i < d; ++i) expected += x(0, i) * kernel(2, i, j);
    CHECK(std::abs(y(0, j) - expected) <= 1e-12);
  }
}

TEST_CASE("conv1d_temporal rejects even kernels") {
  const Tensor x = Tensor::zeros({3, 2});
  CHECK_THROWS_AS((void)conv1d_temporal(x, Tensor::zeros({4, 2, 2}), Tensor::zeros({2})),
                  std::invalid_argument);
}

TEST_CASE("backward of a plain sum is all ones") {
  Rng rng(47);
  Tensor x = random_tensor({3, 4}, rng);
  x = x.clone(true);
  GradTape tape;
  {
    GradTape::Scope scope(tape);
    backward(sum_all(x), tape);
  }
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward rejects non-scalar losses") {
  Rng rng(48);
  Tensor x = random_tensor({2, 2}, rng).clone(true);
  GradTape tape;
  GradTape::Scope scope(tape);
  const Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y, tape), std::invalid_argument);
}

TEST_CASE("grad of sum(xW) matches finite differences") {
  Rng rng(53);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor w0 = random_tensor({4, 2}, rng);
  const double err = check_gradients(
      [&](const Tensor& w) { return sum_all(matmul(x, w)); }, w0, 1e-5);
  CHECK(err <= 1e-6);
}

TEST_CASE("composed layer_norm(linear(softmax)) gradient check") {
  Rng rng(59);
  const Tensor w = random_tensor({4, 4}, rng);
  const Tensor b = random_tensor({4}, rng);
  const Tensor gamma = random_tensor({4}, rng);
  const Tensor beta = random_tensor({4}, rng);
  const Tensor x0 = random_tensor({3, 4}, rng);
  const double err = check_gradients(
      [&](const Tensor& x) {
        return sum_all(mul(layer_norm(linear(softmax(x, 1), w, b), gamma, beta),
                           layer_norm(linear(softmax(x, 1), w, b), gamma, beta)));
      },
      x0, 1e-5);
  CHECK(err <= 1e-4);
}

TEST_CASE("check_gradients is near exact for an affine loss") {
  Rng rng(61);
  const Tensor w = random_tensor({4, 1}, rng);
  const Tensor b = random_tensor({1}, rng);
  const Tensor x0 = random_tensor({2, 4}, rng);
  const double err = check_gradients(
      [&](const Tensor& x) { return sum_all(linear(x, w, b)); }, x0, 1e-5);
  CHECK(err <= 1e-10);
}

// A quadratic pooling gives every primitive a nontrivial adjoint path.
namespace {
Tensor pool(const Tensor& t) { return sum_all(mul(t, t)); }
}  // namespace

TEST_CASE("every primitive passes gradient checks at 100 random points") {
  Rng rng(67);
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> fn;
    std::vector<int> shape;
    double tol;
  };
  Rng aux(68);
  const Tensor other = random_tensor({3, 4}, aux);
  const Tensor w = random_tensor({4, 3}, aux);
  const Tensor b = random_tensor({3}, aux);
  const Tensor gamma = random_tensor({4}, aux);
  const Tensor beta = random_tensor({4}, aux);
  const Tensor kernel = random_tensor({3, 4, 4}, aux, 0.5);
  const Tensor cbias = random_tensor({4}, aux);
  const Tensor targets = Tensor::from({3, 4}, {1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0});
  MhaParams mha = MhaParams::init(4, 2, aux);

  const std::vector<Case> cases = {
      {"add", [&](const Tensor& x) { return pool(add(x, other)); }, {3, 4}, 1e-4},
      {"sub", [&](const Tensor& x) { return pool(sub(x, other)); }, {3, 4}, 1e-4},
      {"mul", [&](const Tensor& x) { return pool(mul(x, other)); }, {3, 4}, 1e-4},
      {"div", [&](const Tensor& x) { return pool(div(x, add_scalar(mul(other, other), 1.0))); }, {3, 4}, 1e-4},
      {"neg", [&](const Tensor& x) { return pool(neg(x)); }, {3, 4}, 1e-4},
      {"scale", [&](const Tensor& x) { return pool(scale(x, -2.5)); }, {3, 4}, 1e-4},
      {"add_scalar", [&](const Tensor& x) { return pool(add_scalar(x, 0.75)); }, {3, 4}, 1e-4},
      {"sigmoid", [&](const Tensor& x) { return pool(sigmoid(x)); }, {3, 4}, 1e-4},
      {"sum_all", [&](const Tensor& x) { return pool(sum_all(x)); }, {3, 4}, 1e-4},
      {"mean_all", [&](const Tensor& x) { return pool(mean_all(x)); }, {3, 4}, 1e-4},
      {"matmul", [&](const Tensor& x) { return pool(matmul(x, w)); }, {3, 4}, 1e-4},
      {"transpose", [&](const Tensor& x) { return pool(transpose(x)); }, {3, 4}, 1e-4},
      {"slice_rows", [&](const Tensor& x) { return pool(slice_rows(x, 1, 2)); }, {3, 4}, 1e-4},
      {"slice_cols", [&](const Tensor& x) { return pool(slice_cols(x, 1, 2)); }, {3, 4}, 1e-4},
      {"concat_rows", [&](const Tensor& x) { return pool(concat_rows({x, other})); }, {3, 4}, 1e-4},
      {"concat_cols", [&](const Tensor& x) { return pool(concat_cols({x, other})); }, {3, 4}, 1e-4},
      {"swap_axes01", [&](const Tensor& x) { return pool(swap_axes01(x)); }, {2, 3, 4}, 1e-4},
      {"softmax", [&](const Tensor& x) { return pool(softmax(x, 1)); }, {3, 4}, 1e-4},
      {"log_softmax", [&](const Tensor& x) { return pool(log_softmax(x, 1)); }, {3, 4}, 1e-4},
      {"layer_norm", [&](const Tensor& x) { return pool(layer_norm(x, gamma, beta)); }, {3, 4}, 1e-4},
      {"linear", [&](const Tensor& x) { return pool(linear(x, w, b)); }, {3, 4}, 1e-4},
      {"conv1d", [&](const Tensor& x) { return pool(conv1d_temporal(x, kernel, cbias)); }, {5, 4}, 1e-4},
      {"bce", [&](const Tensor& x) { return pool(bce_with_logits(x, targets)); }, {3, 4}, 1e-4},
      {"mha", [&](const Tensor& x) { return pool(multi_head_attention(x, x, x, mha)); }, {3, 4}, 1e-4},
  };

  for (const Case& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Tensor x0 = random_tensor(c.shape, rng, 0.8);
      worst = std::max(worst, check_gradients(c.fn, x0, 1e-5));
    }
    INFO("primitive: " << c.name);
    CHECK(worst <= c.tol);
  }
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(71);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x0 = random_tensor({3, 4}, rng);
    auto v = x0.mutable_values();
    for (double& x : v) x += (x >= 0.0 ? 0.05 : -0.05);  // keep eps away from 0
    worst = std::max(worst, check_gradients([](const Tensor& x) { return pool(relu(x)); }, x0, 1e-5));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("primitives are deterministic") {
  Rng rng1(73), rng2(73);
  MhaParams p1 = MhaParams::init(8, 2, rng1);
  MhaParams p2 = MhaParams::init(8, 2, rng2);
  const Tensor a1 = random_tensor({4, 8}, rng1);
  const Tensor a2 = random_tensor({4, 8}, rng2);
  CHECK(bitwise_equal(a1, a2));
  CHECK(bitwise_equal(multi_head_attention(a1, a1, a1, p1),
                      multi_head_attention(a2, a2, a2, p2)));
  CHECK(bitwise_equal(softmax(a1, 1), softmax(a2, 1)));
}

TEST_CASE("non-finite results are reported as numeric errors") {
  const Tensor num = Tensor::from({2}, {1.0, 1.0});
  const Tensor den = Tensor::from({2}, {0.0, 1.0});
  CHECK_THROWS_AS((void)div(num, den), NumericError);
}

TEST_CASE("gradients accumulate once per leaf use") {
  Tensor x = Tensor::from({2}, {1.5, -0.5}, true);
  GradTape tape;
  {
    GradTape::Scope scope(tape);
    // loss = sum(x) + sum(x) uses the leaf twice.
    backward(add(sum_all(x), sum_all(x)), tape);
  }
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
}
