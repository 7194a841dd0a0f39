// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <tuple>

#include "support/testing.hpp"
#include "voxformer/error.hpp"
#include "voxformer/ops.hpp"
#include "voxformer/optim.hpp"

namespace voxformer {
namespace {

using testing::pick;

/// Scalar Adam with decoupled decay, written from the textbook recurrences.
struct ScalarAdam {
  double lr, wd, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double theta, double g) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, t));
    const double vhat = v / (1.0 - std::pow(b2, t));
    return theta - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * theta;
  }
};

struct Param {
  Tensor value;
  std::vector<nn::NamedTensor> named() { return {{"theta", value}}; }
};

Param scalar_param(double v) {
  Param p{Tensor::from_values(Shape{1}, {v}, DType::f64)};
  p.value.set_requires_grad(true);
  return p;
}

void set_grad(Tensor& p, double g) {
  p.zero_grad();
  sum(mul(p, g)).backward();
}

TEST(AdamW, SingleStepHandOracle) {
  auto p = scalar_param(1.0);
  AdamW opt(p.named(), {.lr = 0.001, .weight_decay = 0.001});
  set_grad(p.value, 1.0);
  opt.step();
  EXPECT_NEAR(p.value.item(), 1.0 - 0.001 / (1.0 + 1e-8) - 0.001 * 0.001, 1e-15);
  EXPECT_NEAR(p.value.item(), 0.998999, 1e-6);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParametersUnchanged) {
  Rng rng(1);
  Tensor w = testing::random_tensor(Shape{3, 4}, rng);
  w.set_requires_grad(true);
  const auto before = w.to_vector();
  AdamW opt({{"w", w}}, {.lr = 0.01, .weight_decay = 0.0});
  for (int i = 0; i < 5; ++i) {
    w.zero_grad();
    sum(mul(w, 0.0)).backward();
    opt.step();
  }
  EXPECT_EQ(w.to_vector(), before);
}

TEST(AdamW, ZeroGradientWithDecayIsPureShrink) {
  auto p = scalar_param(2.5);
  AdamW opt(p.named(), {.lr = 0.01, .weight_decay = 0.1});
  double expected = 2.5;
  for (int i = 0; i < 10; ++i) {
    set_grad(p.value, 0.0);
    opt.step();
    expected *= 1.0 - 0.01 * 0.1;
    EXPECT_NEAR(p.value.item(), expected, 1e-15);
  }
}

TEST(AdamW, MomentsStartAtZeroAndStepCountsByOne) {
  auto p = scalar_param(0.3);
  AdamW opt(p.named(), {});
  EXPECT_EQ(opt.first_moments()[0].item(), 0.0);
  EXPECT_EQ(opt.second_moments()[0].item(), 0.0);
  for (int i = 1; i <= 4; ++i) {
    set_grad(p.value, 0.5);
    opt.step();
    EXPECT_EQ(opt.step_count(), i);
  }
}

TEST(AdamW, MissingGradientNamesParameterAndModifiesNothing) {
  Tensor a = Tensor::from_values(Shape{1}, {1.0}, DType::f64);
  Tensor b = Tensor::from_values(Shape{1}, {2.0}, DType::f64);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  AdamW opt({{"alpha", a}, {"beta", b}}, {});
  sum(mul(a, 3.0)).backward();
  try {
    opt.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  EXPECT_EQ(a.item(), 1.0);
  EXPECT_EQ(opt.step_count(), 0);
}

TEST(AdamW, NonFiniteGradientIsRejected) {
  auto p = scalar_param(1.0);
  AdamW opt(p.named(), {});
  set_grad(p.value, std::numeric_limits<double>::infinity());
  EXPECT_THROW(opt.step(), NumericError);
  EXPECT_EQ(p.value.item(), 1.0);
}

TEST(AdamW, SizeMismatchAndBadHyperparametersAreRejected) {
  std::vector<double> p(3), g(2), m(3), v(3);
  EXPECT_THROW(adamw_update<double>(p, std::span<const double>(g), m, v, 1, {}), ShapeError);
  EXPECT_THROW(AdamW({}, {.lr = -1.0}), ConfigError);
  EXPECT_THROW(AdamW({}, {.beta1 = 1.0}), ConfigError);
  EXPECT_THROW(AdamW({}, {.eps = 0.0}), ConfigError);
}

TEST(AdamWProperty, MatchesScalarOracleOverRandomSteps) {
  Rng rng(2);
  for (double wd : {0.0, 0.001, 0.05}) {
    for (int trial = 0; trial < 20; ++trial) {
      const double lr = std::pow(10.0, rng.uniform(-4.0, -1.0));
      double theta = rng.uniform(-2.0, 2.0);
      auto p = scalar_param(theta);
      AdamW opt(p.named(), {.lr = lr, .weight_decay = wd});
      ScalarAdam oracle{lr, wd};
      for (int s = 0; s < 100; ++s) {
        const double g = rng.normal() * std::pow(10.0, rng.uniform(-3.0, 1.0));
        set_grad(p.value, g);
        opt.step();
        theta = oracle.step(theta, g);
        const double rel = std::abs(p.value.item() - theta) / std::max(std::abs(theta), 1e-300);
        ASSERT_LT(rel, 1e-10) << "wd " << wd << " trial " << trial << " step " << s;
      }
    }
  }
}

TEST(AdamWProperty, UpdatesAreIndependentAcrossParameters) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = static_cast<int>(pick(rng, 2, 5));
    std::vector<double> init(n), grads(n * 10);
    for (auto& x : init) x = rng.uniform(-1.0, 1.0);
    for (auto& g : grads) g = rng.normal();

    std::vector<Tensor> together;
    std::vector<nn::NamedTensor> named;
    for (int i = 0; i < n; ++i) {
      together.push_back(Tensor::from_values(Shape{1}, {init[i]}, DType::f64));
      together.back().set_requires_grad(true);
      named.push_back({"p" + std::to_string(i), together.back()});
    }
    std::reverse(named.begin(), named.end());
    AdamW joint(named, {.lr = 0.01, .weight_decay = 0.01});
    for (int s = 0; s < 10; ++s) {
      for (int i = 0; i < n; ++i) set_grad(together[i], grads[s * n + i]);
      joint.step();
    }
    for (int i = 0; i < n; ++i) {
      auto alone = scalar_param(init[i]);
      AdamW solo(alone.named(), {.lr = 0.01, .weight_decay = 0.01});
      for (int s = 0; s < 10; ++s) {
        set_grad(alone.value, grads[s * n + i]);
        solo.step();
      }
      EXPECT_EQ(alone.value.item(), together[i].item());
    }
  }
}

TEST(AdamW, FloatParametersUpdateInPlace) {
  Tensor w = Tensor::from_values(Shape{2}, {1.0, -1.0}, DType::f32);
  w.set_requires_grad(true);
  AdamW opt({{"w", w}}, {.lr = 0.1});
  sum(mul(w, 1.0)).backward();
  opt.step();
  EXPECT_NEAR(w.value_at(0), 0.9, 1e-6);
  EXPECT_NEAR(w.value_at(1), -1.1, 1e-6);
}

// --- schedule --------------------------------------------------------------

ScheduleConfig schedule(double base, std::int64_t step, double gamma) {
  ScheduleConfig s;
  s.base_lr = base;
  s.step_size = step;
  s.gamma = gamma;
  return s;
}

TEST(Schedule, WarmupRampHitsDocumentedValues) {
  const auto s = schedule(0.01, 25, 0.3);
  EXPECT_DOUBLE_EQ(lr_at(0, s), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(4, s), 0.005);
  EXPECT_EQ(lr_at(9, s), 0.01);
  EXPECT_EQ(lr_at(10, s), 0.01);
}

TEST(Schedule, StepDecayAfterWarmup) {
  const auto s = schedule(0.01, 25, 0.3);
  EXPECT_EQ(lr_at(34, s), 0.01);
  EXPECT_DOUBLE_EQ(lr_at(35, s), 0.01 * 0.3);
  EXPECT_DOUBLE_EQ(lr_at(60, s), 9e-4);
  EXPECT_DOUBLE_EQ(lr_at(99, s), 0.01 * 0.3 * 0.3 * 0.3);
}

TEST(Schedule, EpochOutsideRangeAndBadConfigsThrow) {
  const auto s = schedule(0.01, 25, 0.3);
  EXPECT_THROW((void)lr_at(-1, s), ConfigError);
  EXPECT_THROW((void)lr_at(100, s), ConfigError);
  auto bad = s;
  bad.warmup_multiplier = 2.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.warmup_epochs = 101;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.step_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.gamma = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Schedule, TrainConfigCarriesGridPointIntoSchedule) {
  TrainConfig t;
  t.lr = 0.001;
  t.step_size = 40;
  t.gamma = 0.5;
  t.epochs = 30;
  const auto s = t.schedule();
  EXPECT_EQ(s.base_lr, 0.001);
  EXPECT_EQ(s.step_size, 40);
  EXPECT_EQ(s.gamma, 0.5);
  EXPECT_EQ(s.warmup_epochs, 10);
  EXPECT_EQ(s.total_epochs, 100);
  EXPECT_EQ(s.warmup_multiplier, 1.0);
}

TEST(ScheduleProperty, RampRisesThenDecayNeverIncreases) {
  Rng rng(4);
  const GridSpec grid;
  for (int trial = 0; trial < 200; ++trial) {
    auto s = schedule(grid.lr[rng.below(3)], grid.step_size[rng.below(3)], grid.gamma[rng.below(3)]);
    s.total_epochs = pick(rng, 10, 300);
    double prev = 0.0;
    for (std::int64_t e = 0; e < s.total_epochs; ++e) {
      const double lr = lr_at(e, s);
      ASSERT_GE(lr, 0.0);
      if (e <= 9) {
        ASSERT_GE(lr, prev) << "epoch " << e;
        ASSERT_DOUBLE_EQ(lr, s.base_lr * static_cast<double>(e + 1) / 10.0);
      } else {
        ASSERT_LE(lr, prev) << "epoch " << e;
        ASSERT_DOUBLE_EQ(lr, s.base_lr * std::pow(s.gamma, static_cast<double>((e - 10) / s.step_size)));
      }
      prev = lr;
    }
  }
}

// --- grid ------------------------------------------------------------------

TEST(Grid, HyperParameterTableYields54DistinctConfigs) {
  const auto all = grid_enumerate(GridSpec{});
  ASSERT_EQ(all.size(), 54u);
  std::set<std::tuple<double, double, std::int64_t, double>> seen;
  for (const auto& c : all) {
    seen.insert({c.lr, c.weight_decay, c.step_size, c.gamma});
    EXPECT_EQ(c.epochs, 100);
    EXPECT_EQ(c.batch_size, 1);
    EXPECT_EQ(c.embed_dim, 512);
  }
  EXPECT_EQ(seen.size(), 54u);
}

TEST(Grid, EnumerationOrderIsLexicographicOverTheLists) {
  const auto all = grid_enumerate(GridSpec{});
  EXPECT_EQ(std::make_tuple(all[0].lr, all[0].weight_decay, all[0].step_size, all[0].gamma),
            std::make_tuple(0.01, 0.001, std::int64_t{25}, 0.3));
  EXPECT_EQ(all[1].gamma, 0.5);
  EXPECT_EQ(all[3].step_size, 40);
  EXPECT_EQ(all[9].weight_decay, 0.0);
  EXPECT_EQ(all[18].lr, 0.001);
  EXPECT_EQ(std::make_tuple(all[53].lr, all[53].weight_decay, all[53].step_size, all[53].gamma),
            std::make_tuple(0.0001, 0.0, std::int64_t{80}, 0.9));
}

TEST(Grid, SingletonListsGiveOneConfigCarryingBase) {
  TrainConfig base;
  base.epochs = 7;
  const auto one = grid_enumerate(GridSpec{{0.5}, {0.25}, {3}, {0.7}}, base);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].lr, 0.5);
  EXPECT_EQ(one[0].epochs, 7);
  EXPECT_TRUE(grid_enumerate(GridSpec{{}, {0.0}, {1}, {1.0}}).empty());
}

}  // namespace
}  // namespace voxformer
