#include "moltok/causalq.hpp"

#include <cmath>

#include "doctest.h"
#include "testutil.hpp"

using namespace moltok;
using causalq::JointMode;
using causalq::QFormer;
using TD = ndt::Tensor<double>;

namespace {

QFormer<double> tiny_qformer(uint64_t seed, int m = 4, int d = 8, int f = 6,
                             int text_vocab = 12) {
  ndt::Rng rng(seed);
  return QFormer<double>::init(m, d, /*heads=*/2, /*blocks=*/2, f, text_vocab,
                               /*max_text_len=*/16, rng);
}

}  // namespace

TEST_CASE("causal contract: z_i ignores later bank rows, bit for bit") {
  auto model = tiny_qformer(1);
  ndt::Rng rng(99);
  TD x = ndt::uniform_init<double>({5, 6}, rng, -1, 1);
  TD z = model.forward_queries(x);

  for (int i = 0; i < model.query_count; ++i) {
    auto perturbed = model;
    perturbed.query_bank = model.query_bank.clone_detached();
    for (int row = i + 1; row < model.query_count; ++row) {
      for (int j = 0; j < model.dim; ++j) {
        perturbed.query_bank.data()[row * model.dim + j] = rng.uniform(-5, 5);
      }
    }
    TD z2 = perturbed.forward_queries(x);
    for (int row = 0; row <= i; ++row) {
      for (int j = 0; j < model.dim; ++j) {
        CHECK(z.data()[row * model.dim + j] == z2.data()[row * model.dim + j]);
      }
    }
  }
}

TEST_CASE("cross-attention contributes: zeroing atom features changes Z") {
  auto model = tiny_qformer(2);
  ndt::Rng rng(5);
  TD x = ndt::uniform_init<double>({4, 6}, rng, -1, 1);
  TD z = model.forward_queries(x);
  TD z0 = model.forward_queries(TD::zeros({4, 6}));
  bool same = true;
  for (int64_t i = 0; i < z.numel(); ++i) same = same && z.data()[i] == z0.data()[i];
  CHECK_FALSE(same);
}

TEST_CASE("mtc loss special cases") {
  // B = 1: softmax over a single element
  TD z1 = TD::from({1, 4}, {1.0, 0.0, 0.0, 0.0});
  CHECK(causalq::mtc_loss(z1, z1, 1.0).item() == doctest::Approx(0.0).epsilon(1e-12));

  // uniform similarities at tau = 1 give ln 2 for B = 2
  TD z2 = TD::from({2, 2}, {1.0, 0.0, 1.0, 0.0});
  TD y2 = TD::from({2, 2}, {0.0, 1.0, 0.0, 1.0});
  CHECK(causalq::mtc_loss(z2, y2, 1.0).item() == doctest::Approx(std::log(2.0)));

  // perfectly aligned orthonormal pairs at small tau
  TD z3 = TD::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(causalq::mtc_loss(z3, z3, 0.05).item() < 1e-3);

  CHECK_THROWS(causalq::mtc_loss(z2, z1, 1.0));
  CHECK_THROWS(causalq::mtc_loss(z2, y2, 0.0));
}

TEST_CASE("mtc loss is symmetric in molecule and text roles") {
  ndt::Rng rng(7);
  TD z = ndt::uniform_init<double>({5, 8}, rng, -1, 1);
  TD y = ndt::uniform_init<double>({5, 8}, rng, -1, 1);
  CHECK(causalq::mtc_loss(z, y, 0.3).item() ==
        doctest::Approx(causalq::mtc_loss(y, z, 0.3).item()).epsilon(1e-12));
}

TEST_CASE("mtm loss special cases and finite differences") {
  // equal scores everywhere, B = 2: one positive vs two negatives
  TD uniform = TD::zeros({2, 2});
  CHECK(causalq::mtm_loss(uniform).item() == doctest::Approx(std::log(3.0)));

  // dominant matched scores drive the loss to zero
  TD strong = TD::from({2, 2}, {50.0, 0.0, 0.0, 50.0});
  CHECK(causalq::mtm_loss(strong).item() < 1e-6);

  CHECK_THROWS(causalq::mtm_loss(TD::zeros({1, 1})));
  CHECK_THROWS(causalq::mtm_loss(TD::zeros({2, 3})));

  ndt::Rng rng(9);
  TD scores = ndt::uniform_init<double>({3, 3}, rng, -1, 1);
  const double err = ndt::gradcheck_max_rel_err<double>(
      [&] { return causalq::mtm_loss(scores); }, {scores});
  CHECK(err < 1e-4);
}

TEST_CASE("mtm classifier gradient matches finite differences") {
  auto model = tiny_qformer(11, 2, 8, 4, 10);
  ndt::Rng rng(13);
  TD xa = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  TD xb = ndt::uniform_init<double>({2, 4}, rng, -1, 1);
  const std::vector<int> ta = {1, 4, 2};
  const std::vector<int> tb = {3, 5};

  auto loss_fn = [&] {
    TD s00 = model.match_logit(xa, ta);
    TD s01 = model.match_logit(xa, tb);
    TD s10 = model.match_logit(xb, ta);
    TD s11 = model.match_logit(xb, tb);
    TD row0 = ndt::concat_cols(ndt::reshape(s00, {1, 1}), ndt::reshape(s01, {1, 1}));
    TD row1 = ndt::concat_cols(ndt::reshape(s10, {1, 1}), ndt::reshape(s11, {1, 1}));
    TD scores = ndt::concat_rows<double>({row0, row1});
    return causalq::mtm_loss(scores);
  };
  const double err = ndt::gradcheck_max_rel_err<double>(
      loss_fn, {model.mtm_head.w, model.mtm_head.b}, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("mtg loss: untrained head predicts uniformly") {
  const int vocab = 12;
  auto model = tiny_qformer(15, 3, 8, 4, vocab);
  ndt::Rng rng(17);
  TD x = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  const double loss = causalq::mtg_loss(model, x, {5}, 1, 2).item();
  CHECK(loss == doctest::Approx(std::log(static_cast<double>(vocab))).epsilon(0.02));

  CHECK_THROWS(causalq::mtg_loss(model, x, {}, 1, 2));
}

TEST_CASE("mtg: future caption tokens never affect earlier logits") {
  auto model = tiny_qformer(19, 3, 8, 4, 12);
  // train-free structural check: logits come from a causal text branch
  ndt::Rng rng(21);
  TD x = ndt::uniform_init<double>({4, 4}, rng, -1, 1);
  std::vector<int> input1 = {1, 5, 6, 7};
  std::vector<int> input2 = {1, 5, 6, 9};  // differs at the last position
  auto out1 = model.forward_joint(x, input1, JointMode::Generation);
  auto out2 = model.forward_joint(x, input2, JointMode::Generation);
  for (int p = 0; p < 3; ++p) {
    for (int j = 0; j < model.dim; ++j) {
      CHECK(out1.text.data()[p * model.dim + j] == out2.text.data()[p * model.dim + j]);
    }
  }
}

TEST_CASE("mtg memorizes a single pair") {
  auto model = tiny_qformer(23, 3, 16, 4, 12);
  ndt::Rng rng(25);
  TD x = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  const std::vector<int> caption = {4, 7, 5};

  ndt::ParamMap<double> pm;
  model.params(pm, "qf");
  pm.set_requires_grad(true);
  auto params = pm.tensors();
  ndt::AdamWConfig cfg;
  cfg.lr = 2e-3;
  ndt::AdamW<double> opt(params, cfg);

  double loss_val = 1e9;
  for (int step = 0; step < 500 && loss_val >= 0.05; ++step) {
    ndt::Tape<double> tape;
    ndt::Tape<double>::Scope scope(tape);
    TD loss = causalq::mtg_loss(model, x, caption, 1, 2);
    loss_val = loss.item();
    opt.zero_grad(params);
    tape.backward(loss);
    opt.step(params);
  }
  CHECK(loss_val < 0.05);
}

TEST_CASE("stage-1 loss is the exact unweighted sum of its parts") {
  auto model = tiny_qformer(27, 2, 8, 4, 12);
  ndt::Rng rng(29);
  TD xa = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  TD xb = ndt::uniform_init<double>({4, 4}, rng, -1, 1);
  const std::vector<int> ta = {1, 5, 6};
  const std::vector<int> tb = {1, 7};

  TD za = model.molecule_rep(xa);
  TD zb = model.molecule_rep(xb);
  TD ya = model.text_rep(ta);
  TD yb = model.text_rep(tb);
  TD mtc = causalq::mtc_loss(ndt::concat_rows<double>({za, zb}),
                             ndt::concat_rows<double>({ya, yb}), 0.5);

  TD s00 = model.match_logit(xa, ta);
  TD s01 = model.match_logit(xa, tb);
  TD s10 = model.match_logit(xb, ta);
  TD s11 = model.match_logit(xb, tb);
  TD scores = ndt::concat_rows<double>(
      {ndt::concat_cols(ndt::reshape(s00, {1, 1}), ndt::reshape(s01, {1, 1})),
       ndt::concat_cols(ndt::reshape(s10, {1, 1}), ndt::reshape(s11, {1, 1}))});
  TD mtm = causalq::mtm_loss(scores);

  TD mtg = ndt::mul_scalar(
      ndt::add(causalq::mtg_loss(model, xa, {5, 6}, 1, 2),
               causalq::mtg_loss(model, xb, {7}, 1, 2)),
      0.5);

  TD total = ndt::add(ndt::add(mtc, mtm), mtg);
  CHECK(total.item() == doctest::Approx(mtc.item() + mtm.item() + mtg.item()).epsilon(1e-12));
}

TEST_CASE("every stage-1 objective sends gradient into the shared attention") {
  auto model = tiny_qformer(31, 2, 8, 4, 12);
  ndt::Rng rng(33);
  TD xa = ndt::uniform_init<double>({3, 4}, rng, -1, 1);
  TD xb = ndt::uniform_init<double>({2, 4}, rng, -1, 1);

  ndt::ParamMap<double> pm;
  model.params(pm, "qf");
  pm.set_requires_grad(true);
  TD shared_w = *pm.find("qf.blk0.self.wq.w");

  auto grad_norm_for = [&](const std::function<TD()>& loss_fn) {
    ndt::Tape<double> tape;
    ndt::Tape<double>::Scope scope(tape);
    TD loss = loss_fn();
    for (auto& [n, t] : pm.items) {
      t.ensure_grad();
      t.zero_grad();
    }
    tape.backward(loss);
    double s = 0;
    for (double g : shared_w.grad()) s += std::abs(g);
    return s;
  };

  const double g_mtc = grad_norm_for([&] {
    TD z = ndt::concat_rows<double>({model.molecule_rep(xa), model.molecule_rep(xb)});
    TD y = ndt::concat_rows<double>({model.text_rep({1, 5}), model.text_rep({1, 7, 8})});
    return causalq::mtc_loss(z, y, 0.5);
  });
  CHECK(g_mtc > 0);

  const double g_mtg =
      grad_norm_for([&] { return causalq::mtg_loss(model, xa, {5, 6}, 1, 2); });
  CHECK(g_mtg > 0);
}

TEST_CASE("mtc and mtg gradients match finite differences on a micro-batch") {
  auto model = tiny_qformer(37, 2, 8, 4, 10);
  ndt::Rng rng(39);
  TD xa = ndt::uniform_init<double>({2, 4}, rng, -1, 1);
  TD xb = ndt::uniform_init<double>({3, 4}, rng, -1, 1);

  // check a representative subset of parameters (bank + one shared matrix)
  ndt::ParamMap<double> pm;
  model.params(pm, "qf");
  std::vector<TD> subset = {model.query_bank, *pm.find("qf.blk0.self.wq.w"),
                            *pm.find("qf.blk1.cross.wv.w"), *pm.find("qf.text_embed")};

  const double err_mtc = ndt::gradcheck_max_rel_err<double>(
      [&] {
        TD z = ndt::concat_rows<double>({model.molecule_rep(xa), model.molecule_rep(xb)});
        TD y = ndt::concat_rows<double>({model.text_rep({1, 4}), model.text_rep({1, 6, 3})});
        return causalq::mtc_loss(z, y, 0.5);
      },
      subset);
  CHECK(err_mtc < 1e-4);

  const double err_mtg = ndt::gradcheck_max_rel_err<double>(
      [&] { return causalq::mtg_loss(model, xa, {5, 3}, 1, 2); }, subset);
  CHECK(err_mtg < 1e-4);
}
