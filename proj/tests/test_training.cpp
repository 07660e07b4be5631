#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "support.hpp"
#include "tgcrn/errors.hpp"
#include "tgcrn/training.hpp"

using namespace tgcrn;
using numerics::Shape;
using numerics::Tensor;

namespace {

struct Setup {
  Dataset ds;
  Splits splits;
  Normalizer norm;
  ModelConfig model;
};

Setup small_setup() {
  Setup s;
  s.ds = generate_synthetic({4, 7, 24, 0.05, 3}).first;
  s.model.num_nodes = 4;
  s.model.history = 3;
  s.model.horizon = 3;
  s.model.layers = 1;
  s.model.hidden = 4;
  s.model.node_dim = 3;
  s.model.time_dim = 3;
  s.model.slots_per_day = 24;
  s.splits = make_windows(s.ds, 3, 3, {0.7, 0.15, 0.15});
  s.norm = Normalizer::fit(s.ds, 0, s.splits.train_end);
  return s;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 16;
  t.lr0 = 1e-2;
  return t;
}

std::string history_text(const FitResult& r) { return history_jsonl(r.history); }

}  // namespace

TEST_CASE("train config defaults and schedule") {
  const TrainConfig c;
  CHECK(c.lr0 == 1e-3);
  CHECK(c.decay == 0.3);
  CHECK(c.decay_epochs == std::vector<std::size_t>{5, 20, 40, 70, 90});
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.batch_size == 16);
  CHECK(c.patience == 15);
  CHECK(c.lr_at(1) == 1e-3);
  CHECK(c.lr_at(4) == 1e-3);
  CHECK(c.lr_at(5) == doctest::Approx(3e-4).epsilon(1e-15));
  CHECK(c.lr_at(19) == c.lr_at(5));
  CHECK(c.lr_at(20) == doctest::Approx(9e-5).epsilon(1e-15));
  for (std::size_t e = 1; e <= 100; ++e) {
    int count = 0;
    for (auto d : c.decay_epochs) count += d <= e ? 1 : 0;
    CHECK(c.lr_at(e) == c.lr0 * std::pow(c.decay, count));
  }
}

TEST_CASE("train config validation and json") {
  TrainConfig c;
  c.decay_epochs = {5, 5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr0 = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d;
  d.grad_clip.reset();
  d.max_epochs = 7;
  const TrainConfig back = train_config_from_json(to_json(d));
  CHECK_FALSE(back.grad_clip.has_value());
  CHECK(back.max_epochs == 7);
  CHECK(to_json(back) == to_json(d));
  try {
    train_config_from_json(nlohmann::json{{"learning_rate", 1}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
}

TEST_CASE("adam leaves parameters alone for a zero gradient") {
  Parameter p{"p", testing::random_tensor({3, 2}, 1)};
  const Tensor before = p.value;
  Parameter* list[] = {&p};
  AdamState state;
  GradientMap grads;
  grads.accumulate(p, Tensor({3, 2}));
  adam_step(list, grads, state, 1e-2, 0.0);
  CHECK(p.value == before);
  adam_step(list, GradientMap{}, state, 1e-2, 0.0);
  CHECK(p.value == before);
  CHECK(state.step == 2);
}

TEST_CASE("adam matches a hand-stepped trace") {
  Parameter p{"w", Tensor::matrix({{0.5}})};
  Parameter* list[] = {&p};
  AdamState state;
  const double lr = 0.1, wd = 0.5;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  double theta = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    GradientMap grads;
    grads.accumulate(p, Tensor::matrix({{1.0}}));
    adam_step(list, grads, state, lr, wd);
    const double g = 1.0 + wd * theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    theta -= lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(p.value.item() == doctest::Approx(theta).epsilon(1e-14));
  }
  // First step moves by lr (bias correction makes mhat/sqrt(vhat) = 1).
  CHECK(theta == doctest::Approx(0.5 - 0.1 - 0.1).epsilon(1e-3));
}

TEST_CASE("adam rejects non-finite gradients by name") {
  Parameter a{"alpha", Tensor::matrix({{1.0}})}, b{"beta", Tensor::matrix({{2.0}})};
  Parameter* list[] = {&a, &b};
  AdamState state;
  GradientMap grads;
  grads.accumulate(a, Tensor::matrix({{1.0}}));
  grads.accumulate(b, Tensor::matrix({{std::nan("")}}));
  try {
    adam_step(list, grads, state, 0.1, 0.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("beta") != std::string::npos);
  }
  CHECK(a.value.item() == 1.0);
}

TEST_CASE("gradient clipping") {
  Parameter a{"a", Tensor::matrix({{0}})}, b{"b", Tensor::matrix({{0, 0}})};
  GradientMap grads;
  grads.accumulate(a, Tensor::matrix({{3}}));
  grads.accumulate(b, Tensor::matrix({{0, 4}}));
  CHECK(gradient_norm(grads) == 5.0);
  CHECK(clip_scale(5.0, 5.0) == 1.0);
  CHECK(clip_scale(2.0, 5.0) == 1.0);
  CHECK(clip_scale(10.0, 5.0) == 0.5);
}

TEST_CASE("early stopping") {
  EarlyStopping worse(15);
  std::size_t stopped_at = 0;
  for (std::size_t epoch = 1; epoch <= 100; ++epoch) {
    worse.update(static_cast<double>(epoch));
    if (worse.should_stop()) {
      stopped_at = epoch;
      break;
    }
  }
  CHECK(stopped_at == 16);
  CHECK(worse.best() == 1.0);

  EarlyStopping s(2);
  CHECK(s.update(3.0));
  CHECK_FALSE(s.update(3.0));
  CHECK(s.update(2.0));
  CHECK(s.bad_epochs() == 0);
  CHECK_FALSE(s.update(2.5));
  CHECK_FALSE(s.should_stop());
  CHECK_FALSE(s.update(2.1));
  CHECK(s.should_stop());
}

TEST_CASE("metric examples") {
  const std::vector<double> y{1, 2}, yhat{2, 4};
  const Metrics m = compute_metrics(y, yhat);
  CHECK(m.mae == 1.5);
  CHECK(m.rmse == doctest::Approx(std::sqrt(2.5)).epsilon(1e-15));
  CHECK(m.rmse == doctest::Approx(1.5811).epsilon(1e-4));
  CHECK(m.mse == 2.5);
  CHECK(m.mape == doctest::Approx(100.0));

  const Metrics perfect = compute_metrics(y, y);
  CHECK(perfect.mae == 0);
  CHECK(perfect.rmse == 0);
  CHECK(perfect.mape == 0);
  CHECK(perfect.pcc == 1);

  const std::vector<double> with_zero{0, 2, 4}, guess{1, 3, 4};
  const Metrics masked = compute_metrics(with_zero, guess);
  CHECK(masked.mae == doctest::Approx(2.0 / 3.0));
  CHECK(masked.mape == doctest::Approx(25.0));  // the zero target is skipped
  CHECK_THROWS(compute_metrics(std::vector<double>{1}, std::vector<double>{1, 2}));
}

TEST_CASE("metric invariants on random inputs") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Tensor truth = testing::random_tensor({3, 2, 4, 1}, seed, -10, 10);
    const Tensor pred = testing::random_tensor({3, 2, 4, 1}, seed + 1000, -10, 10);
    const MetricsReport r = compute_metrics(truth, pred);
    REQUIRE(r.per_horizon.size() == 2);
    for (const Metrics& m : r.per_horizon) {
      CHECK(m.rmse >= m.mae);
      CHECK(m.mae >= 0);
      CHECK(std::abs(m.mse - m.rmse * m.rmse) < 1e-9);
      CHECK(m.pcc >= -1);
      CHECK(m.pcc <= 1);
    }
    CHECK(r.average.mae ==
          doctest::Approx((r.per_horizon[0].mae + r.per_horizon[1].mae) / 2).epsilon(1e-12));
  }
}

TEST_CASE("metrics csv layout") {
  MetricsReport r;
  r.per_horizon = {Metrics{1, 2, 4, 10, 0.5}, Metrics{3, 4, 16, 20, 0.25}};
  r.average = Metrics{2, 3, 10, 15, 0.375};
  const std::string csv = metrics_csv({{"full", r}});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "variant,horizon,MAE,RMSE,MAPE,MSE,PCC");
  std::getline(in, line);
  CHECK(line == "full,1,1,2,10,4,0.5");
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line == "full,avg,2,3,15,10,0.375");
  const auto j = to_json(r.average);
  CHECK(j.at("MAE") == 2);
  CHECK(j.at("PCC") == 0.375);
}

TEST_CASE("evaluation errors") {
  Setup s = small_setup();
  const Model model(s.model);
  CHECK_THROWS_AS(evaluate(model, s.ds, s.norm, std::vector<std::size_t>{}), ContractError);
  ModelConfig wrong = s.model;
  wrong.num_nodes = 5;
  try {
    evaluate(Model(wrong), s.ds, s.norm, s.splits.val);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find('5') != std::string::npos);
    CHECK(msg.find('4') != std::string::npos);
  }
}

TEST_CASE("training reduces loss and keeps the best checkpoint") {
  Setup s = small_setup();
  Model model(s.model);
  std::vector<std::size_t> seen;
  const FitResult r = fit(model, s.ds, s.splits, s.norm, quick_train(6),
                          [&](const EpochRecord& e) { seen.push_back(e.epoch); });
  REQUIRE_FALSE(r.diverged);
  REQUIRE(r.history.size() == 6);
  CHECK(seen == std::vector<std::size_t>{1, 2, 3, 4, 5, 6});
  CHECK(r.history[4].train_total < r.history[0].train_total);
  CHECK(r.history[0].train_time > 0);
  for (const auto& e : r.history)
    CHECK(e.train_total == doctest::Approx(e.train_error + 0.1 * e.train_time).epsilon(1e-12));

  double best = r.history[0].val.mae;
  std::size_t best_epoch = 1;
  for (const auto& e : r.history) {
    if (e.val.mae < best) {
      best = e.val.mae;
      best_epoch = e.epoch;
    }
    CHECK(e.improved == (e.epoch == best_epoch && e.val.mae == best));
  }
  CHECK(r.best_epoch == best_epoch);
  CHECK(r.best_val_mae == best);
  CHECK(evaluate(model, s.ds, s.norm, s.splits.val).average.mae == r.best_val_mae);
}

TEST_CASE("time loss ablated records zero") {
  Setup s = small_setup();
  s.model.ablations.tdl_off = true;
  Model model(s.model);
  const FitResult r = fit(model, s.ds, s.splits, s.norm, quick_train(2));
  for (const auto& e : r.history) {
    CHECK(e.train_time == 0.0);
    CHECK(e.train_total == e.train_error);
  }
}

TEST_CASE("training is deterministic") {
  Setup s = small_setup();
  Model a(s.model), b(s.model);
  const FitResult ra = fit(a, s.ds, s.splits, s.norm, quick_train(3));
  const FitResult rb = fit(b, s.ds, s.splits, s.norm, quick_train(3));
  CHECK(history_text(ra) == history_text(rb));
  CHECK(encode_checkpoint(a.to_checkpoint()) == encode_checkpoint(b.to_checkpoint()));
  auto other = quick_train(3);
  other.seed = 2;
  Model c(s.model);
  CHECK(history_text(fit(c, s.ds, s.splits, s.norm, other)) != history_text(ra));
}

TEST_CASE("history lines carry the recorded keys") {
  Setup s = small_setup();
  Model model(s.model);
  const FitResult r = fit(model, s.ds, s.splits, s.norm, quick_train(2));
  std::istringstream in(history_jsonl(r.history));
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "lr", "train_L_error", "train_L_time", "train_loss", "val"})
      CHECK(j.contains(key));
    CHECK(j.at("val").contains("MAE"));
    CHECK(j.at("epoch") == ++count);
  }
  CHECK(count == 2);
}

TEST_CASE("divergence is reported and the last good parameters are kept") {
  Setup s = small_setup();
  Model model(s.model);
  TrainConfig t = quick_train(5);
  t.lr0 = 1e305;
  t.grad_clip.reset();
  const Checkpoint before = model.to_checkpoint();
  const FitResult r = fit(model, s.ds, s.splits, s.norm, t);
  CHECK(r.diverged);
  CHECK_FALSE(r.divergence.empty());
  if (r.history.empty()) {
    CHECK(encode_checkpoint(model.to_checkpoint()) == encode_checkpoint(before));
  }
  for (const Parameter* p : model.parameters()) CHECK(p->value.all_finite());
}

TEST_CASE("ablation suite names and order") {
  CHECK(ablation_variants() ==
        std::vector<std::string>{"full", "w/o tagsl", "w/ TE", "w/o TDL", "w/o PDF", "w/o enc-dec"});
  Setup s = small_setup();
  const auto results = run_ablation({"full", "w/o TDL"}, s.model, quick_train(1), s.ds, s.splits,
                                    s.norm);
  REQUIRE(results.size() == 2);
  CHECK(results[0].variant == "full");
  CHECK(results[1].variant == "w/o TDL");
  CHECK(results[1].fit.history[0].train_time == 0.0);
  CHECK(results[0].test.per_horizon.size() == 3);
}
