// Domain feature generator tests: cross-attention behavior, token
// selection, pooling, and pre-training supervision of the class token.

#include <gtest/gtest.h>

#include <cmath>

#include "dapmae/common.hpp"
#include "dapmae/dfg.hpp"
#include "dapmae/losses.hpp"

namespace {

using dapmae::DomainId;
using dapmae::Graph;
using dapmae::ModelDims;
using dapmae::ParamStore;
using dapmae::Rng;
using dapmae::Ten;
using Mat = Graph<double>::Mat;

ModelDims tiny_dims() {
  ModelDims d;
  d.d_model = 4;
  d.d_in = 4;
  d.hidden = 4;
  d.enc_layers = 1;
  d.dec_layers = 1;
  d.heads = 1;
  d.dfg_heads = 1;
  d.patch_hidden = 4;
  d.pos_hidden = 4;
  d.fusion_hidden = 4;
  return d;
}

struct Fixture {
  ModelDims dims = tiny_dims();
  ParamStore<double> ps;
  Fixture() {
    Rng rng(21);
    dapmae::register_dfg(ps, rng, dims);
  }
  Mat p(const std::string& path) { return ps.at(path).value; }
};

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1, 1);
  return m;
}

TEST(Dfg, SingleFeatureRowGivesItsValueProjection) {
  Fixture f;
  Rng rng(1);
  Mat feat = random_mat(rng, 1, 4);
  Graph<double> g;
  f.ps.bind(g);
  auto [c, d] = dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), DomainId::Face);
  Mat v = (feat * f.p("dfg.v.w")).rowwise() + f.p("dfg.v.b").row(0);
  EXPECT_EQ(g.val(c), v);
  EXPECT_EQ(g.val(d), v);
}

TEST(Dfg, IdenticalRowsGiveValueProjectionRegardlessOfQuery) {
  Fixture f;
  Rng rng(2);
  Mat row = random_mat(rng, 1, 4);
  Mat feat(5, 4);
  for (int r = 0; r < 5; ++r) feat.row(r) = row.row(0);
  Graph<double> g;
  f.ps.bind(g);
  auto [c, d] = dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), DomainId::Scene);
  Mat v = (row * f.p("dfg.v.w")).rowwise() + f.p("dfg.v.b").row(0);
  EXPECT_NEAR((g.val(c) - v).norm(), 0.0, 1e-12);
  EXPECT_NEAR((g.val(d) - v).norm(), 0.0, 1e-12);
}

TEST(Dfg, MatchesHandEvaluation) {
  Fixture f;
  Rng rng(3);
  Mat feat = random_mat(rng, 3, 4);
  Graph<double> g;
  f.ps.bind(g);
  auto [c, d] = dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), DomainId::Object);
  Mat queries(2, 4);
  queries.row(0) = f.p("dfg.class_token").row(0);
  queries.row(1) = f.p("dfg.token.object").row(0);
  Mat q = (queries * f.p("dfg.q.w")).rowwise() + f.p("dfg.q.b").row(0);
  Mat k = (feat * f.p("dfg.k.w")).rowwise() + f.p("dfg.k.b").row(0);
  Mat v = (feat * f.p("dfg.v.w")).rowwise() + f.p("dfg.v.b").row(0);
  Mat scores = q * k.transpose() / 2.0;  // sqrt(d_key) = 2
  Mat att(2, 3);
  for (int r = 0; r < 2; ++r) {
    Eigen::RowVectorXd e = (scores.row(r).array() - scores.row(r).maxCoeff()).exp();
    att.row(r) = e / e.sum();
  }
  Mat out = att * v;
  EXPECT_NEAR((g.val(c) - out.row(0)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((g.val(d) - out.row(1)).norm(), 0.0, 1e-12);
}

TEST(Dfg, DomainTokenSelectionIsolated) {
  Fixture f;
  Rng rng(4);
  Mat feat = random_mat(rng, 4, 4);
  Graph<double> g;
  f.ps.bind(g);
  auto [c0, d0] = dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), DomainId::Object);
  Mat c_before = g.val(c0), d_before = g.val(d0);
  f.ps.at("dfg.token.face").value.setConstant(55.0);
  Graph<double> g2;
  f.ps.bind(g2);
  auto [c1, d1] = dapmae::dfg_forward(g2, f.ps, f.dims, g2.constant(feat), DomainId::Object);
  EXPECT_EQ(g2.val(c1), c_before);
  EXPECT_EQ(g2.val(d1), d_before);
}

TEST(Dfg, PermutationInvariantOverFeatureRows) {
  Fixture f;
  Rng rng(5);
  Mat feat = random_mat(rng, 6, 4);
  Mat perm(6, 4);
  int order[6] = {4, 2, 0, 5, 1, 3};
  for (int r = 0; r < 6; ++r) perm.row(r) = feat.row(order[r]);
  Graph<double> g;
  f.ps.bind(g);
  auto [c0, d0] = dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), DomainId::Face);
  Graph<double> g2;
  f.ps.bind(g2);
  auto [c1, d1] = dapmae::dfg_forward(g2, f.ps, f.dims, g2.constant(perm), DomainId::Face);
  EXPECT_NEAR((g.val(c0) - g2.val(c1)).norm(), 0.0, 1e-9);
  EXPECT_NEAR((g.val(d0) - g2.val(d1)).norm(), 0.0, 1e-9);
}

TEST(Dfg, ClassTokenUnsupervisedInPretraining) {
  Fixture f;
  Rng rng(6);
  Graph<double> g;
  f.ps.bind(g);
  std::vector<Ten<double>> d_rows;
  std::vector<DomainId> domains{DomainId::Object, DomainId::Face};
  for (DomainId dom : domains) {
    Mat feat = random_mat(rng, 3, 4);
    d_rows.push_back(dapmae::dfg_forward(g, f.ps, f.dims, g.constant(feat), dom).second);
  }
  dapmae::LossConfig cfg;
  cfg.w1 = 1.0;
  cfg.w2 = 1.0;
  cfg.margin = 0.0;
  Ten<double> l_con = dapmae::contrastive_loss(g, g.concat_rows(d_rows), domains, cfg);
  g.backward(l_con);
  f.ps.pull_grads(g);
  EXPECT_TRUE(f.ps.at("dfg.class_token").grad.isZero(0.0));
  EXPECT_FALSE(f.ps.at("dfg.token.object").grad.isZero(0.0));
}

TEST(Dfg, EmptyFeaturesRejected) {
  Fixture f;
  Graph<double> g;
  f.ps.bind(g);
  Mat empty(0, 4);
  EXPECT_THROW(dapmae::dfg_forward(g, f.ps, f.dims, g.constant(empty), DomainId::Object),
               std::invalid_argument);
}

TEST(PoolFeatures, SingleRowDuplicates) {
  Graph<double> g;
  Mat row(1, 3);
  row << 0.5, -1.0, 2.0;
  Mat out = g.val(dapmae::pool_features(g, g.constant(row)));
  EXPECT_EQ(out.cols(), 6);
  EXPECT_EQ(out.leftCols(3), row);
  EXPECT_EQ(out.rightCols(3), row);
}

TEST(PoolFeatures, OppositeRows) {
  Graph<double> g;
  Mat rows(2, 3);
  rows << 1.0, -2.0, 0.5, -1.0, 2.0, -0.5;
  Mat out = g.val(dapmae::pool_features(g, g.constant(rows)));
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(out(0, c), 0.0);
    EXPECT_EQ(out(0, 3 + c), std::abs(rows(0, c)));
  }
}

TEST(PoolFeatures, MatchesIndependentRecomputation) {
  Rng rng(7);
  Mat feats = random_mat(rng, 5, 4);
  Graph<double> g;
  Mat out = g.val(dapmae::pool_features(g, g.constant(feats)));
  for (int c = 0; c < 4; ++c) {
    double mean = 0, mx = feats(0, c);
    for (int r = 0; r < 5; ++r) {
      mean += feats(r, c);
      mx = std::max(mx, feats(r, c));
    }
    EXPECT_NEAR(out(0, c), mean / 5.0, 1e-12);
    EXPECT_EQ(out(0, 4 + c), mx);
  }
}

}  // namespace
