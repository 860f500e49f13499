#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "gradcheck.hpp"
#include "m2m/core/error.hpp"
#include "m2m/nn/checkpoint.hpp"
#include "m2m/nn/layers.hpp"
#include "m2m/nn/ops.hpp"
#include "support.hpp"

using namespace m2m;
using namespace m2m::nn;
using m2m::test::grad_check;

namespace {

Tensor<double> random_param(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng = make_rng(seed, 4);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = scale * standard_normal(rng);
  return Tensor<double>::parameter(std::move(shape), std::move(v));
}

std::vector<std::pair<Tensor<double>, std::size_t>> all_coords(std::initializer_list<Tensor<double>> ts) {
  std::vector<std::pair<Tensor<double>, std::size_t>> out;
  for (const auto& t : ts) {
    for (std::size_t i = 0; i < t.numel(); ++i) out.emplace_back(t, i);
  }
  return out;
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 5);
  std::vector<double> w(y.numel());
  for (double& x : w) x = standard_normal(rng);
  return sum(mul(y, Tensor<double>::from(y.shape(), std::move(w))));
}

void expect_gradients(const std::function<Tensor<double>()>& f, std::initializer_list<Tensor<double>> params) {
  auto r = grad_check(f, all_coords(params), 1e-5);
  CAPTURE(r.worst);
  CHECK(r.passed == r.checked);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
  auto a = random_param({2, 3}, 1), b = random_param({2, 3}, 2);
  expect_gradients([&] { return probe(add(a, b), 9); }, {a, b});
  expect_gradients([&] { return probe(mul(a, b), 9); }, {a, b});
  expect_gradients([&] { return probe(silu(a), 9); }, {a});
  expect_gradients([&] { return probe(gelu(a), 9); }, {a});
  expect_gradients([&] { return probe(sigmoid(a), 9); }, {a});
  expect_gradients([&] { return probe(nn::exp(scale(a, 0.5)), 9); }, {a});
  expect_gradients([&] { return mean(mul(a, a)); }, {a});
  expect_gradients([&] { return mse(a, b); }, {a, b});
}

TEST_CASE("convolution matches a direct loop and its gradients") {
  auto x = random_param({2, 3, 5, 4}, 3), w = random_param({4, 3, 3, 3}, 4), b = random_param({4}, 5);
  auto y = conv2d(x, w, b);
  REQUIRE(y.shape() == Shape{2, 4, 5, 4});
  for (int n = 0; n < 2; ++n) {
    for (int o = 0; o < 4; ++o) {
      for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 4; ++j) {
          double acc = b.data()[static_cast<std::size_t>(o)];
          for (int c = 0; c < 3; ++c) {
            for (int di = -1; di <= 1; ++di) {
              for (int dj = -1; dj <= 1; ++dj) {
                const int ii = i + di, jj = j + dj;
                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 4) continue;
                acc += x.data()[((n * 3 + c) * 5 + ii) * 4 + jj] * w.data()[((o * 3 + c) * 3 + di + 1) * 3 + dj + 1];
              }
            }
          }
          CHECK(y.data()[((n * 4 + o) * 5 + i) * 4 + j] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
  expect_gradients([&] { return probe(conv2d(x, w, b), 10); }, {x, w, b});
  auto w1 = random_param({2, 3, 1, 1}, 6);
  expect_gradients([&] { return probe(conv2d(x, w1, Tensor<double>()), 11); }, {x, w1});
}

TEST_CASE("pooling, upsampling and concatenation") {
  auto x = random_param({1, 2, 4, 6}, 7);
  auto p = max_pool2(x);
  CHECK(p.shape() == Shape{1, 2, 2, 3});
  CHECK(p.data()[0] == std::max({x.data()[0], x.data()[1], x.data()[6], x.data()[7]}));
  auto u = upsample2(p);
  CHECK(u.shape() == Shape{1, 2, 4, 6});
  CHECK(u.data()[7] == p.data()[0]);
  expect_gradients([&] { return probe(max_pool2(x), 12); }, {x});
  expect_gradients([&] { return probe(upsample2(x), 12); }, {x});
  auto y = random_param({1, 3, 4, 6}, 8);
  CHECK(concat_channels(x, y).shape() == Shape{1, 5, 4, 6});
  expect_gradients([&] { return probe(concat_channels(x, y), 13); }, {x, y});
  CHECK_THROWS_AS(max_pool2(random_param({1, 1, 3, 4}, 1)), ContractError);
}

TEST_CASE("group norm against a mean/variance loop") {
  auto x = random_param({2, 8, 3, 3}, 14, 2.0);
  auto y = group_norm(x, 2);
  for (int n = 0; n < 2; ++n) {
    for (int g = 0; g < 2; ++g) {
      double s = 0, sq = 0;
      const int count = 4 * 9;
      for (int c = g * 4; c < g * 4 + 4; ++c) {
        for (int k = 0; k < 9; ++k) s += x.data()[(n * 8 + c) * 9 + k];
      }
      const double mu = s / count;
      for (int c = g * 4; c < g * 4 + 4; ++c) {
        for (int k = 0; k < 9; ++k) sq += std::pow(x.data()[(n * 8 + c) * 9 + k] - mu, 2);
      }
      const double sd = std::sqrt(sq / count + 1e-5);
      for (int c = g * 4; c < g * 4 + 4; ++c) {
        for (int k = 0; k < 9; ++k) {
          const std::size_t i = static_cast<std::size_t>((n * 8 + c) * 9 + k);
          CHECK(std::abs(y.data()[i] - (x.data()[i] - mu) / sd) < 1e-5);
        }
      }
    }
  }
  Tensor<double> flat = Tensor<double>::full({1, 4, 2, 2}, 3.5);
  const auto flat_out = group_norm(flat, 2);
  for (double v : flat_out.data()) CHECK(v == 0.0);
  expect_gradients([&] { return probe(group_norm(x, 2), 15); }, {x});
  auto g = random_param({2, 8}, 16, 0.3), b = random_param({2, 8}, 17);
  expect_gradients([&] { return probe(modulate(group_norm(x, 4), g, b), 18); }, {x, g, b});
}

TEST_CASE("adaptive group norm with a zero conditioning map is plain group norm") {
  ParameterStore<double> store(1);
  AdaGroupNorm<double> norm(store, "n", 8, 6, 2);
  for (const auto& p : store.entries()) {
    Tensor<double> t = p.tensor;
    std::fill(t.data().begin(), t.data().end(), 0.0);
  }
  auto x = random_param({2, 8, 3, 3}, 19);
  auto tau = random_param({2, 6}, 20);
  CHECK(norm(x, tau).data().size() == group_norm(x, 2).data().size());
  auto a = norm(x, tau), b = group_norm(x, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
  CHECK_THROWS_AS(AdaGroupNorm<double>(store, "bad", 6, 6, 4), ConfigError);
}

TEST_CASE("linear, layer norm and token reshapes") {
  auto x = random_param({5, 4}, 21), w = random_param({3, 4}, 22), b = random_param({3}, 23);
  expect_gradients([&] { return probe(linear(x, w, b), 24); }, {x, w, b});
  auto gamma = random_param({4}, 25), beta = random_param({4}, 26);
  expect_gradients([&] { return probe(layer_norm(x, gamma, beta), 27); }, {x, gamma, beta});
  auto img = random_param({2, 3, 2, 2}, 28);
  auto tok = to_tokens(img);
  CHECK(tok.shape() == Shape{8, 3});
  CHECK(tok.data()[1] == img.data()[4]);
  auto back = from_tokens(tok, 2, 2, 2);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back.data()[i] == img.data()[i]);
  expect_gradients([&] { return probe(from_tokens(to_tokens(img), 2, 2, 2), 29); }, {img});
}

TEST_CASE("self-attention with relative bias") {
  const int batch = 2, length = 5, heads = 2, width = 4;
  auto qkv = random_param({batch * length, 3 * width}, 30);
  auto bias = random_param({heads, 2 * length - 1}, 31);
  auto weights = attention_weights(qkv, batch, length, heads, bias);
  REQUIRE(weights.size() == static_cast<std::size_t>(batch * heads * length * length));
  for (std::size_t row = 0; row < weights.size() / length; ++row) {
    double s = 0;
    for (int j = 0; j < length; ++j) s += weights[row * length + static_cast<std::size_t>(j)];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  // Single head, L = 2, direct softmax evaluation of output row 0.
  auto q2 = random_param({2, 6}, 32);
  auto b2 = random_param({1, 3}, 33);
  auto out = self_attention(q2, 1, 2, 1, b2);
  const auto d = q2.data();
  double s0 = (d[0] * d[2] + d[1] * d[3]) / std::sqrt(2.0) + b2.data()[1];
  double s1 = (d[0] * d[8] + d[1] * d[9]) / std::sqrt(2.0) + b2.data()[0];
  const double m = std::max(s0, s1);
  const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
  CHECK(out.data()[0] == doctest::Approx((e0 * d[4] + e1 * d[10]) / (e0 + e1)).epsilon(1e-12));
  expect_gradients([&] { return probe(self_attention(qkv, batch, length, heads, bias), 34); }, {qkv, bias});
}

TEST_CASE("losses") {
  auto z = random_param({6}, 35);
  std::vector<double> target{1, 0, 1, 0, 1, 1}, weight{1, 1, 0, 1, 0, 1};
  auto l = bce_with_logits(z, target, weight, 4.0);
  double want = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z.data()[i]));
    want -= weight[i] * (target[i] * std::log(p) + (1 - target[i]) * std::log(1 - p));
  }
  CHECK(l.item() == doctest::Approx(want / 4.0).epsilon(1e-12));
  expect_gradients([&] { return bce_with_logits(z, target, weight, 4.0); }, {z});

  auto mu = Tensor<double>::parameter({1}, {1.0});
  auto lv = Tensor<double>::parameter({1}, {0.0});
  CHECK(kl_standard_normal(mu, lv).item() == doctest::Approx(0.5));
  auto mu0 = Tensor<double>::parameter({3}, {0.0, 0.0, 0.0});
  auto lv0 = Tensor<double>::parameter({3}, {0.0, 0.0, 0.0});
  CHECK(kl_standard_normal(mu0, lv0).item() == 0.0);
  auto m2 = random_param({4}, 36), v2 = random_param({4}, 37, 0.5);
  expect_gradients([&] { return kl_standard_normal(m2, v2); }, {m2, v2});
}

TEST_CASE("closed-form KL agrees with a Monte-Carlo estimate") {
  Rng rng = make_rng(38);
  for (int trial = 0; trial < 5; ++trial) {
    const double mu = standard_normal(rng);
    const double sigma = 0.5 + 0.2 * trial;
    const double lv = 2.0 * std::log(sigma);
    const double closed = kl_standard_normal(Tensor<double>::from({1}, {mu}), Tensor<double>::from({1}, {lv})).item();
    // KL = E_q[log q(z) - log p(z)], z ~ N(mu, sigma^2).
    const int n = 20000;
    double s = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double e = standard_normal(rng);
      const double zz = mu + sigma * e;
      const double v = -std::log(sigma) - 0.5 * e * e + 0.5 * zz * zz;
      s += v;
      sq += v * v;
    }
    const double mean = s / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    CAPTURE(trial);
    CHECK(std::abs(mean - closed) < 3.0 * se);
  }
}

TEST_CASE("no-grad scope records nothing") {
  auto a = random_param({3}, 39);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(silu(a).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(silu(a).requires_grad());
}

TEST_CASE("checkpoint container round trip") {
  ParameterStore<float> store(7);
  Linear<float> lin(store, "head", 3, 2);
  Conv2d<float> conv(store, "stem", 2, 4, 3);
  Checkpoint ck{"ddpm", "a = 1\n", true, snapshot(store)};
  auto bytes = encode_checkpoint(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "M2MC");
  CHECK(decode_checkpoint(bytes) == ck);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);

  auto dir = test::scratch_dir("ckpt");
  const auto path = (dir / "x.m2mc").string();
  write_checkpoint_file(ck, path);
  CHECK(read_checkpoint_file(path) == ck);
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));

  ParameterStore<float> other(99);
  Linear<float> lin2(other, "head", 3, 2);
  Conv2d<float> conv2(other, "stem", 2, 4, 3);
  restore(other, ck.tensors);
  CHECK(snapshot(other) == ck.tensors);

  ParameterStore<float> wrong(1);
  Linear<float> lin3(wrong, "head", 3, 3);
  Conv2d<float> conv3(wrong, "stem", 2, 4, 3);
  CHECK_THROWS_AS(restore(wrong, ck.tensors), ContractError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_checkpoint(part), ParseError);
  }
}
