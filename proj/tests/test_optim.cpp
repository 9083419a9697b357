// Optimizer and schedule tests.

#include <gtest/gtest.h>

#include <cmath>

#include "dapmae/optim.hpp"

namespace {

using dapmae::AdamW;
using dapmae::OptimConfig;
using dapmae::ParamStore;
using dapmae::Rng;
using Mat = Eigen::MatrixXd;

TEST(Schedule, WarmupStartsAtZeroPeaksAtWarmupEnd) {
  const double peak = 5e-4;
  EXPECT_DOUBLE_EQ(dapmae::lr_at(peak, 10, 300, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(dapmae::lr_at(peak, 10, 300, 5.0), peak * 0.5);
  EXPECT_DOUBLE_EQ(dapmae::lr_at(peak, 10, 300, 10.0), peak);
}

TEST(Schedule, CosineDecaysToZero) {
  const double peak = 1e-3;
  double mid = dapmae::lr_at(peak, 10, 300, 155.0);
  EXPECT_NEAR(mid, peak * 0.5, 1e-12);
  double last = dapmae::lr_at(peak, 10, 300, 299.5);
  EXPECT_LE(last, 0.01 * peak);
  EXPECT_DOUBLE_EQ(dapmae::lr_at(peak, 10, 300, 300.0), 0.0);
  EXPECT_DOUBLE_EQ(dapmae::lr_at(peak, 0, 300, 0.0), peak);  // no warmup
}

TEST(AdamWOpt, FirstStepMatchesAnalyticForm) {
  ParamStore<double> ps;
  Rng rng(1);
  ps.add("w", 2, 2, rng, 0.5);
  ps.add("b", 1, 2, rng, 0.5);
  Mat w0 = ps.at("w").value, b0 = ps.at("b").value;
  Mat gw(2, 2), gb(1, 2);
  gw << 0.1, -0.2, 0.3, -0.4;
  gb << 0.5, -0.5;
  ps.at("w").grad = gw;
  ps.at("w").has_grad = true;
  ps.at("b").grad = gb;
  ps.at("b").has_grad = true;

  OptimConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.1;
  AdamW<double> opt(cfg);
  opt.step(ps, cfg.lr);

  // bias-corrected first step: mhat = g, vhat = g^2
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      double decayed = w0(r, c) - cfg.lr * cfg.weight_decay * w0(r, c);
      double want = decayed - cfg.lr * gw(r, c) / (std::abs(gw(r, c)) + cfg.eps);
      EXPECT_NEAR(ps.at("w").value(r, c), want, 1e-12);
    }
  // bias row: no weight decay
  for (int c = 0; c < 2; ++c) {
    double want = b0(0, c) - cfg.lr * gb(0, c) / (std::abs(gb(0, c)) + cfg.eps);
    EXPECT_NEAR(ps.at("b").value(0, c), want, 1e-12);
  }
}

TEST(AdamWOpt, UntouchedAndFrozenParamsStayBitIdentical) {
  ParamStore<double> ps;
  Rng rng(2);
  ps.add("used", 2, 2, rng, 0.5);
  ps.add("unused", 2, 2, rng, 0.5);
  ps.add("frozen", 2, 2, rng, 0.5, /*trainable=*/false);
  Mat unused0 = ps.at("unused").value;
  Mat frozen0 = ps.at("frozen").value;

  ps.at("used").grad = Mat::Ones(2, 2);
  ps.at("used").has_grad = true;
  ps.at("unused").grad = Mat::Zero(2, 2);
  ps.at("unused").has_grad = true;  // gradient entry exists but is zero
  AdamW<double> opt(OptimConfig{});
  for (int i = 0; i < 3; ++i) opt.step(ps, 1e-3);
  EXPECT_EQ(ps.at("unused").value, unused0);
  EXPECT_EQ(ps.at("frozen").value, frozen0);
  EXPECT_NE(ps.at("used").value, Mat(ps.at("used").value * 0));
}

TEST(AdamWOpt, ConfigValidation) {
  OptimConfig cfg;
  cfg.beta1 = 1.0;
  EXPECT_THROW(cfg.validate(), dapmae::ConfigError);
}

}  // namespace
