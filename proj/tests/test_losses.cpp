// Loss tests: the exact contrastive unit values, scale invariance,
// reconstruction against the geometry oracle, and total-loss weighting.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dapmae/common.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/losses.hpp"

namespace {

using dapmae::DomainId;
using dapmae::Graph;
using dapmae::LossConfig;
using dapmae::PairReduction;
using dapmae::Rng;
using dapmae::Ten;
using Mat = Graph<double>::Mat;

LossConfig unit_cfg(double margin = 0.0, PairReduction red = PairReduction::Sum) {
  LossConfig cfg;
  cfg.w1 = 1.0;
  cfg.w2 = 1.0;
  cfg.margin = margin;
  cfg.pair_reduction = red;
  return cfg;
}

double contrast_value(const Mat& d, const std::vector<DomainId>& domains,
                      const LossConfig& cfg, bool* clamped = nullptr) {
  Graph<double> g;
  return g.val(dapmae::contrastive_loss<double>(g, g.constant(d), domains, cfg,
                                                nullptr, clamped))(0, 0);
}

TEST(Contrastive, SameDomainIdenticalVectorsExactlyZero) {
  Mat d(3, 4);
  d.row(0) << 0.3, -1.2, 2.0, 0.7;
  d.row(1) = d.row(0);
  d.row(2) = d.row(0);
  std::vector<DomainId> doms(3, DomainId::Face);
  EXPECT_EQ(contrast_value(d, doms, unit_cfg()), 0.0);
}

TEST(Contrastive, OrthogonalCrossDomainExactlyZero) {
  Mat d(2, 4);
  d.row(0) << 1.0, 0.0, 2.0, 0.0;
  d.row(1) << 0.0, -3.0, 0.0, 0.5;
  std::vector<DomainId> doms{DomainId::Object, DomainId::Scene};
  EXPECT_EQ(contrast_value(d, doms, unit_cfg()), 0.0);
}

TEST(Contrastive, IdenticalCrossDomainIsTwo) {
  Mat d(2, 4);
  d.row(0) << 0.5, 1.5, -0.25, 2.0;
  d.row(1) = d.row(0);
  std::vector<DomainId> doms{DomainId::Object, DomainId::Face};
  EXPECT_EQ(contrast_value(d, doms, unit_cfg()), 2.0);
}

TEST(Contrastive, ScaleInvariantUnderPositiveRescaling) {
  Rng rng(3);
  Mat d(4, 6);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 6; ++c) d(r, c) = rng.uniform(-1, 1);
  std::vector<DomainId> doms{DomainId::Object, DomainId::Object, DomainId::Face,
                             DomainId::Scene};
  double base = contrast_value(d, doms, unit_cfg(0.1));
  Mat scaled = d;
  double factors[4] = {0.02, 3.0, 117.0, 0.6};
  for (int r = 0; r < 4; ++r) scaled.row(r) *= factors[r];
  EXPECT_NEAR(contrast_value(scaled, doms, unit_cfg(0.1)), base, 1e-6);
  EXPECT_GE(base, 0.0);
}

TEST(Contrastive, MeanReductionDividesByOrderedPairCount) {
  Rng rng(4);
  Mat d(3, 5);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) d(r, c) = rng.uniform(-1, 1);
  std::vector<DomainId> doms{DomainId::Object, DomainId::Face, DomainId::Scene};
  double s = contrast_value(d, doms, unit_cfg(0.0, PairReduction::Sum));
  double m = contrast_value(d, doms, unit_cfg(0.0, PairReduction::Mean));
  EXPECT_NEAR(m, s / 6.0, 1e-12);
}

TEST(Contrastive, SmallBatchRejectedAndZeroNormFlagged) {
  Mat one(1, 3);
  one << 1, 2, 3;
  Graph<double> g;
  EXPECT_THROW(
      dapmae::contrastive_loss(g, g.constant(one), {DomainId::Object}, unit_cfg()),
      std::invalid_argument);

  Mat d(2, 3);
  d.row(0).setZero();
  d.row(1) << 1, 0, 0;
  bool clamped = false;
  double v = contrast_value(d, {DomainId::Object, DomainId::Face}, unit_cfg(), &clamped);
  EXPECT_TRUE(clamped);
  EXPECT_TRUE(std::isfinite(v));
}

TEST(Contrastive, PairTermsReported) {
  Mat d(2, 3);
  d.row(0) << 1, 0, 0;
  d.row(1) << 1, 0, 0;
  Graph<double> g;
  std::vector<double> terms;
  dapmae::contrastive_loss(g, g.constant(d), {DomainId::Object, DomainId::Object},
                           unit_cfg(), &terms);
  EXPECT_EQ(terms.size(), 2u);
  EXPECT_EQ(terms[0], 0.0);
  EXPECT_EQ(terms[1], 0.0);
}

TEST(ReconLoss, ExactAndSinglePoint) {
  Graph<double> g;
  Mat gt1(1, 3);
  gt1 << 0.1, 0.2, 0.3;
  Mat pred(1, 3);
  pred << 0.1, 0.2, 0.3;
  EXPECT_EQ(g.val(dapmae::recon_loss(g, g.constant(pred), {gt1}))(0, 0), 0.0);

  Graph<double> g2;
  Mat p0(1, 3);
  p0 << 0, 0, 0;
  Mat q(1, 3);
  q << 1, 0, 0;
  EXPECT_EQ(g2.val(dapmae::recon_loss(g2, g2.constant(p0), {q}))(0, 0), 2.0);
}

TEST(ReconLoss, MeanOfGeometryOracleValues) {
  Rng rng(5);
  const int k = 4;
  Mat pred(3, 3 * k);
  std::vector<Mat> gt;
  double expect = 0;
  for (int i = 0; i < 3; ++i) {
    dapmae::Points pp(k), gg(k);
    Mat gmat(k, 3);
    for (int j = 0; j < k; ++j) {
      for (int c = 0; c < 3; ++c) {
        pred(i, j * 3 + c) = rng.uniform(-1, 1);
        gmat(j, c) = rng.uniform(-1, 1);
      }
      pp[std::size_t(j)] = dapmae::Vec3(pred(i, j * 3), pred(i, j * 3 + 1), pred(i, j * 3 + 2));
      gg[std::size_t(j)] = dapmae::Vec3(gmat(j, 0), gmat(j, 1), gmat(j, 2));
    }
    gt.push_back(gmat);
    expect += dapmae::chamfer(pp, gg);
  }
  expect /= 3.0;
  Graph<double> g;
  EXPECT_NEAR(g.val(dapmae::recon_loss(g, g.constant(pred), gt))(0, 0), expect, 1e-12);
}

TEST(ReconLoss, CountMismatchRejected) {
  Graph<double> g;
  Mat pred(2, 3);
  pred.setZero();
  Mat gt(1, 3);
  gt.setZero();
  EXPECT_THROW(dapmae::recon_loss(g, g.constant(pred), {gt}), std::invalid_argument);
}

TEST(ReconLoss, PermutationInvariantWithinPatch) {
  Rng rng(6);
  const int k = 5;
  Mat pred(1, 3 * k);
  Mat gt(k, 3);
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < 3; ++c) {
      pred(0, j * 3 + c) = rng.uniform(-1, 1);
      gt(j, c) = rng.uniform(-1, 1);
    }
  Graph<double> g;
  double base = g.val(dapmae::recon_loss(g, g.constant(pred), {gt}))(0, 0);
  Mat gt_perm(k, 3);
  int order[5] = {2, 0, 4, 1, 3};
  for (int j = 0; j < k; ++j) gt_perm.row(j) = gt.row(order[j]);
  Mat pred_perm(1, 3 * k);
  for (int j = 0; j < k; ++j)
    for (int c = 0; c < 3; ++c) pred_perm(0, j * 3 + c) = pred(0, order[j] * 3 + c);
  Graph<double> g2;
  EXPECT_NEAR(g2.val(dapmae::recon_loss(g2, g2.constant(pred_perm), {gt_perm}))(0, 0),
              base, 1e-12);
}

TEST(TotalLoss, PaperDefaultWeights) {
  LossConfig cfg;  // defaults w1 = 100, w2 = 0.001
  EXPECT_NEAR(dapmae::total_loss_value(0.02, 4.0, cfg), 2.004, 1e-12);
  cfg.w2 = 0.0;
  EXPECT_NEAR(dapmae::total_loss_value(0.02, 4.0, cfg), 2.0, 1e-12);
  LossConfig unit = unit_cfg();
  EXPECT_EQ(dapmae::total_loss_value(1.0, 1.0, unit), 2.0);
}

TEST(TotalLoss, GraphNodeMatchesScalarForm) {
  LossConfig cfg;
  Graph<double> g;
  Mat a(1, 1), b(1, 1);
  a << 0.125;
  b << 3.5;
  Ten<double> t = dapmae::total_loss(g, g.constant(a), g.constant(b), cfg);
  EXPECT_EQ(g.val(t)(0, 0), dapmae::total_loss_value(0.125, 3.5, cfg));
}

TEST(LossConfig, Validation) {
  LossConfig cfg;
  cfg.margin = 1.5;
  EXPECT_THROW(cfg.validate(), dapmae::ConfigError);
  cfg.margin = 0.0;
  cfg.w1 = -1;
  EXPECT_THROW(cfg.validate(), dapmae::ConfigError);
}

}  // namespace
