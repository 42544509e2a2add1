// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sste/engine.hpp"
#include "sste/optim.hpp"
#include "sste/rng.hpp"

using namespace sste;

namespace {

SparseLinearConfig mode_cfg(LayerMode mode, int n = 2, int m = 4,
                            RescaleRecipe r = RescaleRecipe::None, bool bias = true) {
  SparseLinearConfig c;
  c.mode = mode;
  c.prune = PruneConfig{n, m, 0.0, r};
  c.bias = bias;
  return c;
}

void fill_gaussian(Tensor& t, std::uint64_t seed, const char* label) {
  RngStream rng(seed, label);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_gaussian();
}

Batch toy_batch() {
  Batch b;
  b.x = Tensor::matrix({{1.0, -1.0}});
  b.target = Tensor::matrix({{0.0}});
  return b;
}

/// Largest relative mismatch between analytic gradients and central finite
/// differences of `loss_at` over every parameter of `params`.
template <class LossFn>
double max_grad_rel_err(const std::vector<Parameter*>& params, LossFn loss_at) {
  const double h = 1e-5;
  double worst = 0.0;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->w.size(); ++i) {
      const double keep = p->w[i];
      p->w[i] = keep + h;
      const double up = loss_at();
      p->w[i] = keep - h;
      const double dn = loss_at();
      p->w[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double an = p->grad[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("dense affine forward", "[engine]") {
  SparseLinear lin("lin", 2, 2, mode_cfg(LayerMode::Dense));
  lin.weight().w = Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}});
  std::vector<Parameter*> ps;
  lin.collect_parameters(ps);
  REQUIRE(ps.size() == 2);
  ps[1]->w[0] = 0.5;
  ps[1]->w[1] = -0.5;

  const Tensor z = lin.forward(Tensor::matrix({{1.0, 1.0}}));
  CHECK(z(0, 0) == 3.5);
  CHECK(z(0, 1) == 6.5);
}

TEST_CASE("projected forward on the two-weight toy", "[engine]") {
  const Batch b = toy_batch();

  SparseLinear hard("toy", 2, 1, mode_cfg(LayerMode::HardSte, 1, 2, RescaleRecipe::None, false));
  hard.weight().w[0] = 0.2;
  hard.weight().w[1] = 0.1;
  CHECK(hard.forward(b.x)(0, 0) == 0.2);

  ScaleRegistry reg;
  SparseLinear soft("toy", 2, 1, mode_cfg(LayerMode::SSte, 1, 2, RescaleRecipe::None, false),
                    &reg);
  soft.weight().w[0] = 0.2;
  soft.weight().w[1] = 0.1;
  CHECK(soft.forward(b.x)(0, 0) == 0.2 - 0.1);
}

TEST_CASE("straight-through gradient reaches pruned coordinates", "[engine]") {
  Model m;
  ScaleRegistry reg;
  SparseLinear* lin = m.net.emplace<SparseLinear>(
      "toy", 2, 1, mode_cfg(LayerMode::HardSte, 1, 2, RescaleRecipe::None, false), &reg);
  lin->weight().w[0] = 0.2;
  lin->weight().w[1] = 0.1;
  m.loss = make_loss("mse");

  const double L = m.train_forward_backward(toy_batch());
  CHECK(L == 0.2 * 0.2);
  // z = 0.2, dL/dz = 0.4, x = (1,-1): both coordinates get the update.
  CHECK(lin->weight().grad[0] == 0.4);
  CHECK(lin->weight().grad[1] == -0.4);
}

TEST_CASE("soft projection applies the frozen scale", "[engine]") {
  ScaleRegistry reg;
  SparseLinearConfig cfg = mode_cfg(LayerMode::SSte, 2, 4, RescaleRecipe::MinMse, false);
  SparseLinear lin("lin", 4, 1, cfg, &reg);
  lin.weight().w = Tensor({1, 4}, {4.0, 3.0, 2.0, 1.0});

  const Tensor x = Tensor::matrix({{1.0, 0.0, 0.0, 0.0}});
  const Tensor z = lin.forward(x);
  // s = (2,1,0,0), beta = 11/5.
  CHECK(z(0, 0) == Catch::Approx(2.2 * 2.0).epsilon(1e-15));
  CHECK(reg.frozen("lin.w").value() == Catch::Approx(2.2).epsilon(1e-15));
  CHECK(lin.last_beta() == Catch::Approx(2.2).epsilon(1e-15));

  // Weights move; the scale must not.
  lin.weight().w = Tensor({1, 4}, {8.0, 6.0, 4.0, 2.0});
  lin.forward(x);
  CHECK(reg.frozen("lin.w").value() == Catch::Approx(2.2).epsilon(1e-15));
}

TEST_CASE("decayed mode with zero strength matches plain hard mode", "[engine]") {
  auto build = [](LayerMode mode, double lambda) {
    auto model = std::make_unique<Model>();
    SparseLinearConfig cfg = mode_cfg(mode);
    cfg.sr_ste_lambda = lambda;
    model->net.emplace<SparseLinear>("l1", 8, 4, cfg);
    model->loss = make_loss("mse");
    model->net.init_weights(7);
    return model;
  };
  auto a = build(LayerMode::HardSte, 0.0);
  auto b = build(LayerMode::SrSte, 0.0);

  Batch batch;
  batch.x = Tensor({4, 8});
  batch.target = Tensor({4, 4});
  fill_gaussian(batch.x, 3, "x");
  fill_gaussian(batch.target, 4, "y");

  Optimizer oa(OptimizerKind::Sgd, LrSchedule{LrScheduleKind::Constant, 0.05, 5});
  Optimizer ob(OptimizerKind::Sgd, LrSchedule{LrScheduleKind::Constant, 0.05, 5});
  for (int k = 0; k < 5; ++k) {
    a->train_forward_backward(batch);
    a->net.apply_pruned_weight_decay();
    oa.step(a->net.parameters(), k);
    b->train_forward_backward(batch);
    b->net.apply_pruned_weight_decay();
    ob.step(b->net.parameters(), k);
  }
  const auto pa = a->net.parameters();
  const auto pb = b->net.parameters();
  for (std::size_t p = 0; p < pa.size(); ++p) {
    for (std::size_t i = 0; i < pa[p]->w.size(); ++i) {
      REQUIRE(pa[p]->w[i] == pb[p]->w[i]);
    }
  }
}

TEST_CASE("pruned-weight decay shrinks only pruned coordinates", "[engine]") {
  Model m;
  SparseLinearConfig cfg = mode_cfg(LayerMode::SrSte, 2, 4, RescaleRecipe::None, false);
  cfg.sr_ste_lambda = 0.5;
  SparseLinear* lin = m.net.emplace<SparseLinear>("l", 4, 1, cfg);
  lin->weight().w = Tensor({1, 4}, {4.0, 3.0, 2.0, 1.0});
  m.loss = make_loss("mse");

  // Zero input and zero target: the task gradient vanishes, only the decay
  // term acts.
  Batch b;
  b.x = Tensor({2, 4});
  b.target = Tensor({2, 1});

  const double lr = 0.1;
  Optimizer opt(OptimizerKind::Sgd, LrSchedule{LrScheduleKind::Constant, lr, 3});
  double expect2 = 2.0, expect3 = 1.0;
  for (int k = 0; k < 3; ++k) {
    m.train_forward_backward(b);
    m.net.apply_pruned_weight_decay();
    opt.step(m.net.parameters(), k);
    expect2 -= lr * (cfg.sr_ste_lambda * expect2);
    expect3 -= lr * (cfg.sr_ste_lambda * expect3);
    REQUIRE(lin->weight().w[0] == 4.0);
    REQUIRE(lin->weight().w[1] == 3.0);
    REQUIRE(lin->weight().w[2] == expect2);
    REQUIRE(lin->weight().w[3] == expect3);
  }
}

TEST_CASE("activation values and derivatives", "[engine]") {
  Gelu g;
  const Tensor x = Tensor::matrix({{0.0, 1.0, -2.0}});
  const Tensor y = g.forward(x);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == Catch::Approx(0.8413447460685429).epsilon(1e-15));
  CHECK(y(0, 2) == Catch::Approx(-2.0 * 0.022750131948179212).epsilon(1e-12));

  Tensor ones({1, 3});
  ones.fill(1.0);
  const Tensor dy = g.backward(ones);
  CHECK(dy(0, 0) == 0.5);  // cdf(0) exactly
  CHECK(dy(0, 1) == Catch::Approx(1.0833154705876864).epsilon(1e-14));

  Relu r;
  const Tensor rx = Tensor::matrix({{-1.0, 0.0, 2.0}});
  const Tensor ry = r.forward(rx);
  CHECK(ry(0, 0) == 0.0);
  CHECK(ry(0, 2) == 2.0);
  const Tensor rd = r.backward(ones);
  CHECK(rd(0, 0) == 0.0);
  CHECK(rd(0, 1) == 0.0);  // derivative at the kink defined as 0
  CHECK(rd(0, 2) == 1.0);
}

TEST_CASE("residual block with zero inner weights is the identity", "[engine]") {
  FfnBlock blk("ffn", 4, 8, mode_cfg(LayerMode::Dense));
  Tensor x({2, 4});
  fill_gaussian(x, 5, "x");
  const Tensor y = blk.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(y[i] == x[i]);
  Tensor g({2, 4});
  fill_gaussian(g, 6, "g");
  const Tensor gx = blk.backward(g);
  for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(gx[i] == g[i]);
}

TEST_CASE("loss oracles", "[engine]") {
  MseLoss mse;
  Batch b;
  b.target = Tensor::matrix({{1.0, 2.0}});
  const Tensor out = Tensor::matrix({{2.0, 0.0}});
  CHECK(mse.value(out, b) == Catch::Approx((1.0 + 4.0) / 2.0).epsilon(1e-15));
  const Tensor g = mse.grad(out, b);
  CHECK(g(0, 0) == 1.0);
  CHECK(g(0, 1) == -2.0);

  SoftmaxXentLoss xent;
  Batch c;
  c.labels = {0};
  const Tensor logits = Tensor::matrix({{0.0, 0.0}});
  CHECK(xent.value(logits, c) == Catch::Approx(std::log(2.0)).epsilon(1e-15));
  const Tensor xg = xent.grad(logits, c);
  CHECK(xg(0, 0) == Catch::Approx(-0.5).epsilon(1e-15));
  CHECK(xg(0, 1) == Catch::Approx(0.5).epsilon(1e-15));

  Batch wrong;
  wrong.labels = {5};
  CHECK_THROWS_AS(xent.value(logits, wrong), std::invalid_argument);
}

TEST_CASE("gradient check: dense gelu network", "[engine]") {
  Model m;
  m.net.emplace<SparseLinear>("fc1", 6, 8, mode_cfg(LayerMode::Dense));
  m.net.emplace<Gelu>();
  m.net.emplace<SparseLinear>("fc2", 8, 3, mode_cfg(LayerMode::Dense));
  m.loss = make_loss("mse");
  m.net.init_weights(11);

  Batch b;
  b.x = Tensor({5, 6});
  b.target = Tensor({5, 3});
  fill_gaussian(b.x, 12, "x");
  fill_gaussian(b.target, 13, "y");

  m.train_forward_backward(b);
  const double worst = max_grad_rel_err(m.net.parameters(), [&] { return m.loss_eval(b); });
  CHECK(worst <= 1e-5);
}

TEST_CASE("gradient check: relu network away from kinks", "[engine]") {
  Model m;
  m.net.emplace<SparseLinear>("fc1", 4, 6, mode_cfg(LayerMode::Dense));
  m.net.emplace<Relu>();
  m.net.emplace<SparseLinear>("fc2", 6, 2, mode_cfg(LayerMode::Dense));
  m.loss = make_loss("mse");
  m.net.init_weights(17);

  Batch b;
  b.x = Tensor({3, 4});
  b.target = Tensor({3, 2});
  fill_gaussian(b.x, 18, "x");
  fill_gaussian(b.target, 19, "y");

  // The check is only valid if no pre-activation sits within the finite
  // difference radius of the kink; verify the margin for this seed.
  std::vector<Parameter*> ps = m.net.parameters();
  const Tensor pre = matmul_nt(b.x, ps[0]->w);
  for (std::size_t i = 0; i < pre.size(); ++i) REQUIRE(std::abs(pre[i]) > 1e-2);

  m.train_forward_backward(b);
  const double worst = max_grad_rel_err(m.net.parameters(), [&] { return m.loss_eval(b); });
  CHECK(worst <= 1e-5);
}

TEST_CASE("gradient check: sparse modes against a dense twin", "[engine]") {
  // The straight-through weight gradient equals the dense gradient of a twin
  // network evaluated at the projected weights, on every coordinate.
  for (LayerMode mode : {LayerMode::HardSte, LayerMode::SSte}) {
    ScaleRegistry reg;
    Model m;
    SparseLinearConfig cfg = mode_cfg(mode, 2, 4, RescaleRecipe::MinMse);
    m.net.emplace<SparseLinear>("fc1", 8, 8, cfg, &reg);
    m.net.emplace<Gelu>();
    m.net.emplace<SparseLinear>("fc2", 8, 2, cfg, &reg);
    m.loss = make_loss("mse");
    m.net.init_weights(23);

    Batch b;
    b.x = Tensor({4, 8});
    b.target = Tensor({4, 2});
    fill_gaussian(b.x, 24, "x");
    fill_gaussian(b.target, 25, "y");

    m.train_forward_backward(b);

    // Twin with identical topology, dense mode, weights set to the projected
    // values of the sparse net.
    Model twin;
    twin.net.emplace<SparseLinear>("fc1", 8, 8, mode_cfg(LayerMode::Dense));
    twin.net.emplace<Gelu>();
    twin.net.emplace<SparseLinear>("fc2", 8, 2, mode_cfg(LayerMode::Dense));
    twin.loss = make_loss("mse");
    auto sparse_layers = m.net.sparse_linears();
    auto twin_params = twin.net.parameters();
    auto main_params = m.net.parameters();
    REQUIRE(twin_params.size() == main_params.size());
    std::size_t li = 0;
    for (std::size_t p = 0; p < twin_params.size(); ++p) {
      if (twin_params[p]->id.ends_with(".w")) {
        twin_params[p]->w = sparse_layers[li++]->last_effective_weight();
      } else {
        twin_params[p]->w = main_params[p]->w;
      }
    }

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < twin_params.size(); ++p) {
      for (std::size_t i = 0; i < twin_params[p]->w.size(); ++i) {
        const double keep = twin_params[p]->w[i];
        twin_params[p]->w[i] = keep + h;
        const double up = twin.loss_eval(b);
        twin_params[p]->w[i] = keep - h;
        const double dn = twin.loss_eval(b);
        twin_params[p]->w[i] = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double an = main_params[p]->grad[i];
        worst = std::max(worst,
                         std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0}));
      }
    }
    INFO("mode " << to_string(mode));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("masked evaluation semantics", "[engine]") {
  Batch b;
  b.x = Tensor::matrix({{1.0, 1.0, 1.0, 1.0}});
  b.target = Tensor::matrix({{0.0}});

  SECTION("hard mode masks the raw weights") {
    Model m;
    m.net.emplace<SparseLinear>("l", 4, 1,
                                mode_cfg(LayerMode::HardSte, 2, 4, RescaleRecipe::None, false));
    m.loss = make_loss("mse");
    m.net.parameters()[0]->w = Tensor({1, 4}, {4.0, 3.0, 2.0, 1.0});

    Mask keep_tail(4);
    keep_tail.set(2, true);
    keep_tail.set(3, true);
    EvalOverride ov;
    ov.masks.emplace("l.w", &keep_tail);
    // Forced mask keeps (2,1): output 3, loss 9.
    CHECK(m.loss_eval(b, &ov) == 9.0);
    // Without the override the layer's own top-2 mask keeps (4,3): loss 49.
    CHECK(m.loss_eval(b) == 49.0);
  }

  SECTION("soft mode masks the shrunk values and keeps the scale") {
    ScaleRegistry reg;
    Model m;
    m.net.emplace<SparseLinear>(
        "l", 4, 1, mode_cfg(LayerMode::SSte, 2, 4, RescaleRecipe::MinMse, false), &reg);
    m.loss = make_loss("mse");
    m.net.parameters()[0]->w = Tensor({1, 4}, {4.0, 3.0, 2.0, 1.0});

    // Freeze beta = 2.2 through a real forward.
    m.net.forward(b.x);

    Mask keep_head(4);
    keep_head.set(0, true);
    EvalOverride ov;
    ov.masks.emplace("l.w", &keep_head);
    // Shrunk values (2,1,0,0), masked to (2,0,0,0), scaled by 2.2: output 4.4.
    CHECK(m.loss_eval(b, &ov) == Catch::Approx(4.4 * 4.4).epsilon(1e-14));
  }

  SECTION("weight substitution") {
    Model m;
    m.net.emplace<SparseLinear>("l", 4, 1, mode_cfg(LayerMode::Dense, 2, 4, RescaleRecipe::None, false));
    m.loss = make_loss("mse");
    m.net.parameters()[0]->w = Tensor({1, 4}, {1.0, 1.0, 1.0, 1.0});
    const Tensor other({1, 4}, {2.0, 2.0, 2.0, 2.0});
    EvalOverride ov;
    ov.params.emplace("l.w", &other);
    CHECK(m.loss_eval(b) == 16.0);
    CHECK(m.loss_eval(b, &ov) == 64.0);
  }
}

TEST_CASE("randomized gradient sparsification is step-keyed", "[engine]") {
  SparseLinearConfig cfg = mode_cfg(LayerMode::HardSte);
  cfg.mvue_grad_z = true;
  Model m;
  m.net.emplace<SparseLinear>("l", 8, 4, cfg);
  m.loss = make_loss("mse");
  m.net.init_weights(31);

  Batch b;
  b.x = Tensor({4, 8});
  b.target = Tensor({4, 4});
  fill_gaussian(b.x, 32, "x");
  fill_gaussian(b.target, 33, "y");

  auto grads_at_step = [&](std::uint64_t step) {
    m.net.begin_step(77, step);
    m.train_forward_backward(b);
    return m.net.parameters()[0]->grad;
  };
  const Tensor g5a = grads_at_step(5);
  const Tensor g5b = grads_at_step(5);
  for (std::size_t i = 0; i < g5a.size(); ++i) REQUIRE(g5a[i] == g5b[i]);
  const Tensor g6 = grads_at_step(6);
  bool differs = false;
  for (std::size_t i = 0; i < g6.size(); ++i) differs = differs || g6[i] != g5a[i];
  CHECK(differs);
}

TEST_CASE("gradient sparsification is unbiased through the backward pass", "[engine]") {
  SparseLinearConfig cfg = mode_cfg(LayerMode::Dense);
  cfg.mvue_grad_z = true;
  Model m;
  m.net.emplace<SparseLinear>("l", 4, 4, cfg);
  m.loss = make_loss("mse");
  m.net.init_weights(41);

  Model dense;
  dense.net.emplace<SparseLinear>("l", 4, 4, mode_cfg(LayerMode::Dense));
  dense.loss = make_loss("mse");
  dense.net.parameters()[0]->w = m.net.parameters()[0]->w;
  dense.net.parameters()[1]->w = m.net.parameters()[1]->w;

  Batch b;
  b.x = Tensor({8, 4});
  b.target = Tensor({8, 4});
  fill_gaussian(b.x, 42, "x");
  fill_gaussian(b.target, 43, "y");

  dense.train_forward_backward(b);
  const Tensor exact = dense.net.parameters()[0]->grad;

  Tensor mean(exact.shape());
  const int reps = 4000;
  for (int rep = 0; rep < reps; ++rep) {
    m.net.begin_step(1000 + rep, 0);
    m.train_forward_backward(b);
    add_inplace(mean, m.net.parameters()[0]->grad);
  }
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= reps;
  // Loose statistical agreement coordinate-wise.
  for (std::size_t i = 0; i < mean.size(); ++i) {
    REQUIRE(std::abs(mean[i] - exact[i]) <= 0.05 * std::max(1.0, std::abs(exact[i])));
  }
}

TEST_CASE("low-precision casts apply at the matmul boundary", "[engine]") {
  SparseLinearConfig cfg = mode_cfg(LayerMode::Dense, 2, 4, RescaleRecipe::None, false);
  cfg.fp8_forward = FloatFormat::e4m3();
  SparseLinear lin("l", 4, 2, cfg);
  lin.init_weights(51);

  Tensor x({3, 4});
  fill_gaussian(x, 52, "x");
  const Tensor z = lin.forward(x);
  const Tensor manual = matmul_nt(fp8_round_trip(x, FloatFormat::e4m3()),
                                  fp8_round_trip(lin.weight().w, FloatFormat::e4m3()));
  for (std::size_t i = 0; i < z.size(); ++i) REQUIRE(z[i] == manual[i]);
}

TEST_CASE("engine rejects misuse", "[engine]") {
  SparseLinear lin("l", 4, 2, mode_cfg(LayerMode::Dense));
  CHECK_THROWS_AS(lin.backward(Tensor({1, 2})), std::logic_error);
  CHECK_THROWS_AS(lin.forward(Tensor({1, 3})), std::invalid_argument);

  // Sparse mode requires the input dimension to split into blocks.
  CHECK_THROWS_AS(SparseLinear("l", 6, 2, mode_cfg(LayerMode::HardSte)),
                  std::invalid_argument);
  // Soft mode without a registry cannot freeze scales.
  CHECK_THROWS_AS(SparseLinear("l", 4, 2, mode_cfg(LayerMode::SSte)), std::invalid_argument);

  SparseLinear ok("l", 4, 2, mode_cfg(LayerMode::HardSte));
  ok.init_weights(1);
  Tensor x({2, 4});
  fill_gaussian(x, 2, "x");
  ok.forward(x);
  CHECK_THROWS_AS(ok.backward(Tensor({3, 2})), std::invalid_argument);
}
