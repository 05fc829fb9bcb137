#include "moltok/nnblocks.hpp"

#include <cmath>

#include "doctest.h"

using namespace moltok;
using nn::AttentionMask;
using TD = ndt::Tensor<double>;

TEST_CASE("causal mask structure") {
  const auto m1 = nn::causal_mask(1);
  CHECK(m1.at(0, 0));
  CHECK(m1.popcount() == 1);

  const auto m3 = nn::causal_mask(3);
  CHECK(m3.at(0, 0));
  CHECK_FALSE(m3.at(0, 1));
  CHECK_FALSE(m3.at(0, 2));
  CHECK(m3.at(2, 0));
  CHECK(m3.at(2, 1));
  CHECK(m3.at(2, 2));

  for (int n = 1; n <= 8; ++n) {
    CHECK(nn::causal_mask(n).popcount() == n * (n + 1) / 2);
  }
  CHECK_THROWS(nn::causal_mask(0));
}

TEST_CASE("attention degenerate cases") {
  // single query, single key: output is exactly the value row
  TD q = TD::from({1, 4}, {0.3, -0.2, 0.9, 0.0});
  TD k = TD::from({1, 4}, {1.0, 1.0, -1.0, 0.5});
  TD v = TD::from({1, 3}, {5.0, -7.0, 2.0});
  TD out = nn::attention(q, k, v, AttentionMask::full(1, 1));
  for (int j = 0; j < 3; ++j) CHECK(out.data()[j] == doctest::Approx(v.data()[j]));

  // mask permitting only key j selects value row j
  ndt::Rng rng(3);
  TD q2 = ndt::uniform_init<double>({2, 4}, rng, -1, 1);
  TD k2 = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  TD v2 = ndt::uniform_init<double>({3, 5}, rng, -1, 1);
  AttentionMask only;
  only.query_len = 2;
  only.key_len = 3;
  only.allow.assign(6, 0);
  only.set(0, 2, true);
  only.set(1, 1, true);
  TD out2 = nn::attention(q2, k2, v2, only);
  for (int j = 0; j < 5; ++j) {
    CHECK(out2.data()[j] == doctest::Approx(v2.data()[2 * 5 + j]).epsilon(1e-9));
    CHECK(out2.data()[5 + j] == doctest::Approx(v2.data()[1 * 5 + j]).epsilon(1e-9));
  }

  AttentionMask empty_row = only;
  empty_row.set(0, 2, false);
  CHECK_THROWS(nn::attention(q2, k2, v2, empty_row));
}

TEST_CASE("attention matches a brute-force weighted-sum oracle") {
  ndt::Rng rng(11);
  TD q = ndt::uniform_init<double>({4, 4}, rng, -1, 1);
  TD k = ndt::uniform_init<double>({4, 4}, rng, -1, 1);
  TD v = ndt::uniform_init<double>({4, 4}, rng, -1, 1);
  TD out = nn::attention(q, k, v, AttentionMask::full(4, 4));

  const double scale = 1.0 / std::sqrt(4.0);
  for (int i = 0; i < 4; ++i) {
    double w[4];
    double mx = -1e300;
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int d = 0; d < 4; ++d) s += q.data()[i * 4 + d] * k.data()[j * 4 + d];
      w[j] = s * scale;
      mx = std::max(mx, w[j]);
    }
    double z = 0;
    for (int j = 0; j < 4; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (int d = 0; d < 4; ++d) {
      double acc = 0;
      for (int j = 0; j < 4; ++j) acc += (w[j] / z) * v.data()[j * 4 + d];
      CHECK(out.data()[i * 4 + d] == doctest::Approx(acc).epsilon(1e-5));
    }
  }
}

TEST_CASE("attention rows stay in the convex hull of value rows") {
  ndt::Rng rng(13);
  for (int t = 0; t < 5; ++t) {
    TD q = ndt::uniform_init<double>({3, 4}, rng, -2, 2);
    TD k = ndt::uniform_init<double>({5, 4}, rng, -2, 2);
    TD v = ndt::uniform_init<double>({5, 2}, rng, -2, 2);
    TD out = nn::attention(q, k, v, AttentionMask::full(3, 5));
    for (int d = 0; d < 2; ++d) {
      double lo = 1e300;
      double hi = -1e300;
      for (int j = 0; j < 5; ++j) {
        lo = std::min(lo, v.data()[j * 2 + d]);
        hi = std::max(hi, v.data()[j * 2 + d]);
      }
      for (int i = 0; i < 3; ++i) {
        CHECK(out.data()[i * 2 + d] >= lo - 1e-9);
        CHECK(out.data()[i * 2 + d] <= hi + 1e-9);
      }
    }
  }
}

TEST_CASE("stacked causal blocks never leak later positions backward") {
  ndt::Rng rng(21);
  const int n = 6;
  const int d = 16;
  auto b1 = nn::TransformerBlock<double>::init(d, 4, rng);
  auto b2 = nn::TransformerBlock<double>::init(d, 4, rng);
  const auto mask = nn::causal_mask(n);

  TD x = ndt::uniform_init<double>({n, d}, rng, -1, 1);
  TD y = b2(b1(x, mask), mask);

  for (int i = 0; i < n; ++i) {
    TD x2 = x.clone_detached();
    // perturb position i
    for (int j = 0; j < d; ++j) x2.data()[i * d + j] += 0.5 + j * 0.01;
    TD y2 = b2(b1(x2, mask), mask);
    for (int p = 0; p < i; ++p) {
      for (int j = 0; j < d; ++j) {
        // bit-identical at 64-bit
        CHECK(y.data()[p * d + j] == y2.data()[p * d + j]);
      }
    }
    bool same_at_i = true;
    for (int j = 0; j < d; ++j) same_at_i = same_at_i && y.data()[i * d + j] == y2.data()[i * d + j];
    CHECK_FALSE(same_at_i);
  }
}

TEST_CASE("cross_entropy values") {
  // one-hot correct logits with a huge margin
  TD big = TD::from({1, 3}, {100.0, 0.0, 0.0});
  CHECK(nn::cross_entropy(big, {0}).item() == doctest::Approx(0.0).epsilon(1e-12));

  // uniform logits over V classes -> ln V
  TD uni = TD::zeros({2, 7});
  CHECK(nn::cross_entropy(uni, {3, 6}).item() == doctest::Approx(std::log(7.0)));

  // hand-evaluated softmax: V=4, logits [2,0,0,0], target 0
  TD hand = TD::from({1, 4}, {2.0, 0.0, 0.0, 0.0});
  const double expected = std::log(std::exp(2.0) + 3.0) - 2.0;
  CHECK(nn::cross_entropy(hand, {0}).item() == doctest::Approx(expected).epsilon(1e-12));

  // ignore mask drops positions
  TD two = TD::from({2, 2}, {5.0, 0.0, 0.0, 5.0});
  const double only_first = nn::cross_entropy(two, {0, 0}, {0, 1}).item();
  CHECK(only_first == doctest::Approx(std::log(1 + std::exp(-5.0))).epsilon(1e-9));

  CHECK_THROWS(nn::cross_entropy(two, {0, 0}, {1, 1}));  // empty unignored set
  CHECK_THROWS(nn::cross_entropy(two, {0, 2}));          // out-of-range id
}

TEST_CASE("cross_entropy and mse gradients match finite differences") {
  ndt::Rng rng(31);
  TD logits = ndt::uniform_init<double>({5, 6}, rng, -1, 1);
  std::vector<int> targets = {1, 0, 5, 2, 2};
  std::vector<uint8_t> ignore = {0, 1, 0, 0, 1};
  const double err = ndt::gradcheck_max_rel_err<double>(
      [&] { return nn::cross_entropy(logits, targets, ignore); }, {logits});
  CHECK(err < 1e-4);

  TD a = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  TD b = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  const double err2 =
      ndt::gradcheck_max_rel_err<double>([&] { return nn::mse(a, b); }, {a, b});
  CHECK(err2 < 1e-4);
}

TEST_CASE("mse values and analytic gradient") {
  TD a = TD::from({2}, {1.0, 1.0});
  TD b = TD::from({2}, {0.0, 0.0});
  CHECK(nn::mse(a, b).item() == doctest::Approx(1.0));
  CHECK(nn::mse(a, a).item() == 0.0);

  a.set_requires_grad(true);
  ndt::Tape<double> tape;
  ndt::Tape<double>::Scope scope(tape);
  TD loss = nn::mse(a, b);
  a.ensure_grad();
  a.zero_grad();
  tape.backward(loss);
  // grad wrt a is 2 (a - b) / count
  for (int i = 0; i < 2; ++i) {
    CHECK(a.grad()[i] == doctest::Approx(2.0 * (a.data()[i] - b.data()[i]) / 2.0));
  }

  TD c = TD::zeros({3});
  CHECK_THROWS(nn::mse(a, c));
}

TEST_CASE("transformer block gradients flow end to end") {
  ndt::Rng rng(41);
  const int n = 3;
  const int d = 8;
  auto block = nn::TransformerBlock<double>::init(d, 2, rng, 6);
  TD x = ndt::uniform_init<double>({n, d}, rng, -0.5, 0.5);
  TD kv = ndt::uniform_init<double>({4, 6}, rng, -0.5, 0.5);
  const auto mask = nn::causal_mask(n);

  ndt::ParamMap<double> pm;
  block.params(pm, "blk");
  pm.set_requires_grad(true);

  std::vector<TD> inputs = {x, kv};
  const double err = ndt::gradcheck_max_rel_err<double>(
      [&] {
        TD y = block(x, mask, kv);
        return ndt::mean(ndt::mul(y, y));
      },
      inputs);
  CHECK(err < 1e-4);
}
