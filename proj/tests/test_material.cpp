#include <microsurr/material.hpp>

#include <gtest/gtest.h>

using namespace microsurr;

namespace {

const MaterialParams kParams{};

// Flattened map (eps, eps_p, kappa) -> (sig, eps_p', kappa') for finite differences.
Eigen::Matrix<double, 8, 1> update_map(const Eigen::Matrix<double, 8, 1>& x) {
  MatState st;
  st.eps_p = x.segment<4>(3);
  st.kappa = x(7);
  const auto [ss, next] = update_stress(x.head<3>(), st, kParams);
  Eigen::Matrix<double, 8, 1> y;
  y << ss.sig, next.eps_p, next.kappa;
  return y;
}

struct Sample {
  Voigt3 eps;
  MatState st;
};

// Random (strain, deviatoric plastic strain, kappa) with the trial state
// kept clear of the yield surface so central differences stay on one branch.
Sample random_sample(Rng& rng, bool want_plastic) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (;;) {
    Sample s;
    const double scale = want_plastic ? 0.02 + 0.08 * u01(rng) : 0.004 * u01(rng);
    s.eps = scale * Voigt3(n01(rng), n01(rng), n01(rng)).normalized();
    const double pxx = 0.01 * n01(rng), pyy = 0.01 * n01(rng), pxy = 0.01 * n01(rng);
    s.st.eps_p = want_plastic ? Vec4(pxx, pyy, -pxx - pyy, pxy) : Vec4::Zero();
    s.st.kappa = want_plastic ? 0.05 * u01(rng) : 0.0;
    const double q = detail::return_map(s.eps, s.st, kParams).q_trial;
    const double sy = yield_stress(s.st.kappa, kParams);
    if (want_plastic && q > 1.05 * sy) return s;
    if (!want_plastic && q < 0.95 * sy) return s;
  }
}

// max_ij |a - b| / max(|b_ij|, floor * max|b|), the floor absorbing
// cancellation noise in entries that vanish analytically.
double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-4) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / std::max(std::abs(b(i, j)), floor * scale));
  return worst;
}

Eigen::Matrix<double, 8, 8> fd_jacobian(const Sample& s) {
  Eigen::Matrix<double, 8, 1> x;
  x << s.eps, s.st.eps_p, s.st.kappa;
  Eigen::Matrix<double, 8, 8> J;
  for (int k = 0; k < 8; ++k) {
    const double h = 1e-7 * std::max(1.0, std::abs(x(k)));
    Eigen::Matrix<double, 8, 1> xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    J.col(k) = (update_map(xp) - update_map(xm)) / (2.0 * h);
  }
  return J;
}

}  // namespace

TEST(Elastic, PlaneStrainStiffness) {
  const Mat3 D = elastic_stiffness(kParams);
  const double E = 3130.0, nu = 0.37;
  EXPECT_NEAR(D(0, 0), E * (1 - nu) / ((1 + nu) * (1 - 2 * nu)), 1e-9);
  EXPECT_NEAR(D(0, 0), 5535.93, 0.01);
  EXPECT_NEAR(D(2, 2), 1142.3358, 1e-4);
  EXPECT_EQ(D, D.transpose());
  Eigen::SelfAdjointEigenSolver<Mat3> es(D);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST(Yield, Values) {
  EXPECT_NEAR(yield_stress(0.0, kParams), 31.20, 1e-12);
  EXPECT_NEAR(yield_stress(1.0, kParams), 64.80, 1e-12);
  EXPECT_NEAR(yield_stress(0.003407, kParams), 64.80 - 33.60 * std::exp(-1.0), 1e-12);
  EXPECT_NEAR(yield_stress(0.003407, kParams), 52.44, 0.005);
  const double k = 0.002, h = 1e-7;
  EXPECT_NEAR(yield_slope(k, kParams), (yield_stress(k + h, kParams) - yield_stress(k - h, kParams)) / (2 * h), 1e-4);
}

TEST(Params, Validation) {
  MaterialParams p;
  EXPECT_NO_THROW(p.validate());
  p.nu = 0.5;
  EXPECT_THROW(p.validate(), Error);
  p = MaterialParams{};
  p.delta_sig = 70.0;
  EXPECT_THROW(p.validate(), Error);
}

TEST(Update, ZeroStrain) {
  const auto [ss, st] = update_stress(Voigt3::Zero(), MatState{}, kParams);
  EXPECT_EQ(ss.sig, Voigt3::Zero());
  EXPECT_EQ(st.kappa, 0.0);
}

TEST(Update, SmallStrainElastic) {
  const Voigt3 eps(1e-4, 0, 0);
  const auto [ss, st] = update_stress(eps, MatState{}, kParams);
  EXPECT_LT(detail::return_map(eps, MatState{}, kParams).q_trial, 31.20);
  EXPECT_LE((ss.sig - elastic_stiffness(kParams) * eps).norm(), 1e-12 * ss.sig.norm());
  EXPECT_EQ(st.kappa, 0.0);
  EXPECT_NEAR(ss.sig_zz, kParams.lame_lambda() * 1e-4, 1e-12);
}

TEST(Update, LargeUniaxialYields) {
  const auto [ss, st] = update_stress(Voigt3(0.05, 0, 0), MatState{}, kParams);
  EXPECT_GT(st.kappa, 0.0);
  EXPECT_LE(std::abs(equivalent_stress(ss.sig, ss.sig_zz) - yield_stress(st.kappa, kParams)), 1e-8 * 31.20);
  EXPECT_NEAR(st.eps_p(0) + st.eps_p(1) + st.eps_p(2), 0.0, 1e-14);
}

TEST(Update, ElasticReversibility) {
  MatState st;
  const auto [s1, st1] = update_stress(Voigt3(2e-3, -1e-3, 1e-3), st, kParams);
  const auto [s2, st2] = update_stress(Voigt3::Zero(), st1, kParams);
  EXPECT_EQ(st1.kappa, 0.0);
  EXPECT_EQ(s2.sig, Voigt3::Zero());
  EXPECT_EQ(st2.eps_p, Vec4::Zero());
}

TEST(Update, MonotoneKappaAndConsistencyAlongPath) {
  Rng rng(3);
  std::normal_distribution<double> n01;
  MatState st;
  Voigt3 eps = Voigt3::Zero();
  for (int t = 0; t < 200; ++t) {
    eps += 0.003 * Voigt3(n01(rng), n01(rng), n01(rng));
    const auto [ss, next] = update_stress(eps, st, kParams);
    EXPECT_GE(next.kappa, st.kappa);
    if (next.kappa > st.kappa) {
      EXPECT_LE(std::abs(equivalent_stress(ss.sig, ss.sig_zz) - yield_stress(next.kappa, kParams)), 1e-8 * 31.20);
    }
    EXPECT_NEAR(next.eps_p(0) + next.eps_p(1) + next.eps_p(2), 0.0, 1e-10);
    st = next;
  }
  EXPECT_GT(st.kappa, 0.0);
}

TEST(Update, BitwiseDeterministic) {
  MatState st;
  st.kappa = 0.01;
  st.eps_p = Vec4(0.003, -0.001, -0.002, 0.004);
  const auto a = update_stress(Voigt3(0.03, 0.01, -0.02), st, kParams);
  const auto b = update_stress(Voigt3(0.03, 0.01, -0.02), st, kParams);
  EXPECT_EQ(a.first.sig, b.first.sig);
  EXPECT_EQ(a.second.kappa, b.second.kappa);
}

TEST(Tangent, ElasticEqualsHooke) {
  const Mat3 D = elastic_stiffness(kParams);
  const Mat3 Ct = consistent_tangent(Voigt3(1e-4, 2e-4, 0), MatState{}, kParams);
  EXPECT_LE((Ct - D).cwiseAbs().maxCoeff(), 1e-12 * D.cwiseAbs().maxCoeff());
}

TEST(Tangent, PlasticMatchesFiniteDifferenceAndIsSymmetric) {
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    const Sample s = random_sample(rng, true);
    const Mat3 Ct = consistent_tangent(s.eps, s.st, kParams);
    const Mat3 fd = fd_jacobian(s).block<3, 3>(0, 0);
    EXPECT_LT(rel_err(Ct, fd), 1e-5);
    EXPECT_LE((Ct - Ct.transpose()).cwiseAbs().maxCoeff(), 1e-9 * Ct.cwiseAbs().maxCoeff());
  }
}

TEST(Gradients, ElasticStep) {
  const UpdateGradients g = update_gradients(Voigt3(1e-4, 0, 0), MatState{}, kParams);
  EXPECT_FALSE(g.plastic);
  EXPECT_EQ(g.dkappa_deps(), Eigen::RowVector3d::Zero());
  EXPECT_EQ(g.dkappa_dkappa(), 1.0);
  EXPECT_EQ(g.depsp_depsp(), Mat4::Identity());
}

TEST(Gradients, PlasticKappaSensitivityInUnitInterval) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const Sample s = random_sample(rng, true);
    const UpdateGradients g = update_gradients(s.eps, s.st, kParams);
    ASSERT_TRUE(g.plastic);
    EXPECT_GT(g.dkappa_dkappa(), 0.0);
    EXPECT_LE(g.dkappa_dkappa(), 1.0);
  }
}

TEST(Gradients, AllPartialsMatchFiniteDifferences) {
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Sample s = random_sample(rng, i % 4 != 0);
    const UpdateGradients g = update_gradients(s.eps, s.st, kParams);
    const auto fd = fd_jacobian(s);
    for (int r = 0; r < 8; ++r) {
      // rows are compared one output block at a time
      const int rows = r < 3 ? 3 : (r < 7 ? 4 : 1);
      if (r != 0 && r != 3 && r != 7) continue;
      worst = std::max(worst, rel_err(g.J.middleRows(r, rows), fd.middleRows(r, rows)));
    }
  }
  EXPECT_LT(worst, 1e-5);
}
