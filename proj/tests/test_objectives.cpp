#include <gtest/gtest.h>

#include <cmath>

#include "miles/gradcheck.hpp"
#include "miles/objectives.hpp"

using namespace miles;

namespace {

Tensor<double> unit_rows(Tensor<double> m) {
  const std::size_t P = m.dim(1);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    double s = 0;
    for (std::size_t k = 0; k < P; ++k) s += m[r * P + k] * m[r * P + k];
    s = std::sqrt(s);
    for (std::size_t k = 0; k < P; ++k) m[r * P + k] /= s;
  }
  return m;
}

// Gram-Schmidt on a random square matrix.
Tensor<double> random_rotation(std::size_t n, Rng& rng) {
  Tensor<double> q = detail::randn({n, n}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < n; ++k) d += q[i * n + k] * q[j * n + k];
      for (std::size_t k = 0; k < n; ++k) q[i * n + k] -= d * q[j * n + k];
    }
    double s = 0;
    for (std::size_t k = 0; k < n; ++k) s += q[i * n + k] * q[i * n + k];
    for (std::size_t k = 0; k < n; ++k) q[i * n + k] /= std::sqrt(s);
  }
  return q;
}

Tensor<double> matmul_plain(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor<double> c({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t l = 0; l < k; ++l) c[i * m + j] += a[i * k + l] * b[l * m + j];
    }
  }
  return c;
}

double closs(const Tensor<double>& v, const Tensor<double>& t, double tau,
             Reduction red = Reduction::sum) {
  Tape<double> tape(false);
  return contrastive_loss(tape.constant(v), tape.constant(t), tau, red).value().item();
}

double nce_pos_vs_neg() { return -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)); }

}  // namespace

// ---------------------------------------------------------------------------
// NCE.

TEST(Nce, SingleCandidateIsExactlyZero) {
  const Tensor<double> y({1, 2}, std::vector<double>{0.6, 0.8});
  const std::vector<double> x{0.6, 0.8};
  EXPECT_EQ(nce<double>(x, y, 0, 0.05), 0.0);
}

TEST(Nce, TwoCandidatesAtUnitTemperature) {
  const Tensor<double> y({2, 2}, std::vector<double>{1, 0, 0, 1});
  const std::vector<double> x{1, 0};
  EXPECT_NEAR(nce<double>(x, y, 0, 1.0), 0.31326, 1e-5);
  EXPECT_NEAR(nce<double>(x, y, 0, 1.0), nce_pos_vs_neg(), 1e-15);
}

TEST(Nce, IdenticalCandidatesGiveLogB) {
  const Tensor<double> y({4, 2}, std::vector<double>{0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8});
  const std::vector<double> x{1, 0};
  EXPECT_NEAR(nce<double>(x, y, 2, 0.05), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.38629, 1e-5);
}

TEST(Nce, NoOverflowAtLowTemperature) {
  const Tensor<double> y({2, 2}, std::vector<double>{-1, 0, 1, 0});
  const std::vector<double> x{1, 0};
  const double l = nce<double>(x, y, 0, 0.05);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 40.0, 1e-9);
  const std::vector<float> xf{1, 0};
  const Tensor<float> yf({2, 2}, std::vector<float>{-1, 0, 1, 0});
  EXPECT_TRUE(std::isfinite(nce<float>(xf, yf, 0, 0.05f)));
}

TEST(Nce, NonPositiveTemperatureIsConfigError) {
  const Tensor<double> y({1, 2}, std::vector<double>{1, 0});
  const std::vector<double> x{1, 0};
  EXPECT_THROW(nce<double>(x, y, 0, 0.0), ConfigError);
  EXPECT_THROW(nce<double>(x, y, 0, -1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// Contrastive loss.

TEST(Contrastive, OrthonormalPairAtUnitTemperature) {
  const Tensor<double> v({2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_NEAR(closs(v, v, 1.0), 1.253047, 1e-6);
  EXPECT_NEAR(closs(v, v, 1.0), 4 * nce_pos_vs_neg(), 1e-12);
  EXPECT_NEAR(closs(v, v, 1.0, Reduction::mean), 2 * nce_pos_vs_neg(), 1e-12);
}

TEST(Contrastive, PerfectAlignmentLimit) {
  Tensor<double> v({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i * 4 + i] = 1.0;
  EXPECT_LT(closs(v, v, 0.01), 1e-20);
}

TEST(Contrastive, SingleRowBatchIsZero) {
  const Tensor<double> v({1, 2}, std::vector<double>{0.6, 0.8});
  const Tensor<double> t({1, 2}, std::vector<double>{1, 0});
  EXPECT_EQ(closs(v, t, 0.05), 0.0);
}

TEST(Contrastive, MatchesNceLoopOracle) {
  Rng rng(31);
  const auto v = unit_rows(detail::randn({6, 5}, rng));
  const auto t = unit_rows(detail::randn({6, 5}, rng));
  double oracle = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::span<const double> vi(v.raw() + i * 5, 5), ti(t.raw() + i * 5, 5);
    const double a = nce<double>(vi, t, i, 0.05), b = nce<double>(ti, v, i, 0.05);
    EXPECT_GE(a, 0.0);
    EXPECT_GE(b, 0.0);
    oracle += a + b;
  }
  EXPECT_NEAR(closs(v, t, 0.05), oracle, 1e-9);
}

TEST(Contrastive, InvariantUnderJointRowPermutation) {
  Rng rng(32);
  const auto v = unit_rows(detail::randn({5, 4}, rng));
  const auto t = unit_rows(detail::randn({5, 4}, rng));
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor<double> vp({5, 4}), tp({5, 4});
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      vp[i * 4 + k] = v[perm[i] * 4 + k];
      tp[i * 4 + k] = t[perm[i] * 4 + k];
    }
  }
  EXPECT_NEAR(closs(v, t, 0.05), closs(vp, tp, 0.05), 1e-9);
}

TEST(Contrastive, InvariantUnderSharedRotation) {
  Rng rng(33);
  const auto v = unit_rows(detail::randn({5, 6}, rng));
  const auto t = unit_rows(detail::randn({5, 6}, rng));
  const auto q = random_rotation(6, rng);
  EXPECT_NEAR(closs(v, t, 0.05), closs(matmul_plain(v, q), matmul_plain(t, q), 0.05), 1e-5);
}

TEST(Contrastive, NonUnitRowsAreContractErrors) {
  const Tensor<double> v({2, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor<double> bad({2, 2}, std::vector<double>{1.01, 0, 0, 1});
  EXPECT_THROW(closs(v, bad, 0.05), ContractError);
  EXPECT_THROW(closs(bad, v, 0.05), ContractError);
  const Tensor<double> w({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0});
  EXPECT_THROW(closs(v, w, 0.05), DimensionError);
  EXPECT_THROW(closs(v, v, 0.0), ConfigError);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto ps = std::make_shared<ParamStore<double>>();
    Rng rng(seed);
    ps->add("v", detail::randn({4, 3}, rng));
    ps->add("t", detail::randn({4, 3}, rng));
    GradcheckProblem p{{ps}, [ps](Tape<double>& tape) {
                         return contrastive_loss(l2_normalize(ps->var(tape, "v")), l2_normalize(ps->var(tape, "t")),
                                                 0.5);
                       }};
    EXPECT_LT(gradcheck_rel_error(p), 1e-4);
  }
}

// ---------------------------------------------------------------------------
// MVM loss.

TEST(Mvm, EqualFeaturesGiveZero) {
  Rng rng(34);
  const auto s = detail::randn({5, 4}, rng);
  Tape<double> tape(false);
  const auto r = mvm_loss(tape.constant(s), s, {2, 3});
  EXPECT_FALSE(r.empty);
  EXPECT_EQ(r.loss.value().item(), 0.0);
}

TEST(Mvm, ThreeFourFive) {
  const Tensor<double> v({1, 4}, std::vector<double>{1, 1, 1, 1});
  const Tensor<double> s({1, 4}, std::vector<double>{4, 5, 1, 1});
  Tape<double> tape(false);
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {1}).loss.value().item(), 5.0);
  MvmOptions sq;
  sq.distance = MvmDistance::squared;
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {1}, sq).loss.value().item(), 25.0);
}

TEST(Mvm, TokenMeanPerClipThenBatchSum) {
  // Clip 0: distances 1, 3; clip 1: distance 2.
  const Tensor<double> v({3, 1}, std::vector<double>{0, 0, 0});
  const Tensor<double> s({3, 1}, std::vector<double>{1, -3, 2});
  Tape<double> tape(false);
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {2, 1}).loss.value().item(), 2.0 + 2.0);
  MvmOptions o;
  o.token_reduction = Reduction::sum;
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {2, 1}, o).loss.value().item(), 6.0);
  o.batch_reduction = Reduction::mean;
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {2, 1}, o).loss.value().item(), 3.0);
  // A clip with no masked token contributes nothing.
  EXPECT_DOUBLE_EQ(mvm_loss(tape.constant(v), s, {2, 0, 1}).loss.value().item(), 4.0);
}

TEST(Mvm, NoMaskedTokensSignalsEmpty) {
  Tape<double> tape(false);
  const auto r = mvm_loss(tape.constant(Tensor<double>({0, 4})), Tensor<double>({0, 4}), {0, 0});
  EXPECT_TRUE(r.empty);
  EXPECT_EQ(r.loss.value().item(), 0.0);
}

TEST(Mvm, ShapeMismatchIsDimensionError) {
  Tape<double> tape(false);
  EXPECT_THROW(mvm_loss(tape.constant(Tensor<double>({2, 4}, 0.0)), Tensor<double>({2, 3}, 0.0), {2}), DimensionError);
  EXPECT_THROW(mvm_loss(tape.constant(Tensor<double>({2, 4}, 0.0)), Tensor<double>({2, 4}, 0.0), {1}), DimensionError);
}

TEST(Mvm, GradientIsUnitDirectionOverTokenCount) {
  Rng rng(35);
  const auto v = detail::randn({5, 3}, rng);
  const auto s = detail::randn({5, 3}, rng);
  const std::vector<std::size_t> per{2, 3};
  auto ps = std::make_shared<ParamStore<double>>();
  ps->add("v", v);
  {
    Tape<double> tape;
    tape.backward(mvm_loss(ps->var(tape, "v"), s, per).loss);
  }
  const auto& g = ps->at("v").grad;
  for (std::size_t r = 0; r < 5; ++r) {
    const double k = r < 2 ? 2.0 : 3.0;
    double n = 0;
    for (std::size_t j = 0; j < 3; ++j) n += (v[r * 3 + j] - s[r * 3 + j]) * (v[r * 3 + j] - s[r * 3 + j]);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g[r * 3 + j], (v[r * 3 + j] - s[r * 3 + j]) / n / k, 1e-12);
  }
  GradcheckProblem p{{ps}, [ps, s, per](Tape<double>& tape) { return mvm_loss(ps->var(tape, "v"), s, per).loss; }};
  EXPECT_LT(gradcheck_rel_error(p), 1e-4);
}

// ---------------------------------------------------------------------------
// Total loss.

TEST(Total, WarmupDropsTheMvmTerm) {
  Tape<double> tape(false);
  const auto c = tape.constant(Tensor<double>::scalar(2.0));
  const auto m = tape.constant(Tensor<double>::scalar(7.3));
  EXPECT_EQ(total_loss(c, m, true).value().item(), 2.0);
  EXPECT_EQ(total_loss(c, tape.constant(Tensor<double>::scalar(3.0)), false).value().item(), 5.0);
  EXPECT_EQ(total_loss(c, tape.constant(Tensor<double>::scalar(3.0)), false, 0.5).value().item(), 3.5);
}

TEST(Total, WarmupGivesNoGradientToTheStudentFeatures) {
  auto ps = std::make_shared<ParamStore<double>>();
  ps->add("v", Tensor<double>({2, 2}, std::vector<double>{1, 2, 3, 4}));
  ps->add("c", Tensor<double>::scalar(2.0));
  Tape<double> tape;
  const auto m = mvm_loss(ps->var(tape, "v"), Tensor<double>({2, 2}, 0.0), {2}).loss;
  tape.backward(total_loss(ps->var(tape, "c"), m, true));
  EXPECT_FALSE(ps->at("v").has_grad());
  EXPECT_TRUE(ps->at("c").has_grad());
}

TEST(Total, TargetsReceiveNoGradient) {
  // Targets enter as constants: only the prediction store is touched.
  auto pred = std::make_shared<ParamStore<double>>();
  Rng rng(36);
  pred->add("v", detail::randn({3, 2}, rng));
  Tensor<double> targets = detail::randn({3, 2}, rng);
  const Tensor<double> before = targets;
  Tape<double> tape;
  const auto c = tape.constant(Tensor<double>::scalar(1.0));
  tape.backward(total_loss(c, mvm_loss(pred->var(tape, "v"), targets, {3}).loss, false));
  EXPECT_EQ(targets.vec(), before.vec());
  EXPECT_TRUE(pred->at("v").has_grad());
}

TEST(Total, ParseEnums) {
  EXPECT_EQ(parse_reduction("sum"), Reduction::sum);
  EXPECT_EQ(parse_reduction("mean"), Reduction::mean);
  EXPECT_THROW(parse_reduction("max"), ConfigError);
  EXPECT_EQ(parse_mvm_distance("squared"), MvmDistance::squared);
  EXPECT_THROW(parse_mvm_distance("l1"), ConfigError);
}
