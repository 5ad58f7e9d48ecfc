#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "robinbae/prior.hpp"

using namespace robinbae;

namespace {

SlabMesh surface(int n) { return extract_bottom_mesh(build_slab_mesh(n, n, 1, 1.0, 0.01, 3)); }

Matrix iso(int d, double g) { return Matrix::Identity(d, d) * g; }

double ratio(const Vector& v) { return v.maxCoeff() / v.minCoeff(); }

}  // namespace

TEST(Prior, SigmaMatchesIndependentFormula)
{
  // d = 2, nu = 1, Gamma(1) = 1.
  const double oracle2 = 1.0 / (4.0 * std::numbers::pi * 0.01 * 49.0);
  EXPECT_NEAR(prior_marginal_sigma(7.0, iso(2, 0.01)), oracle2, 1e-15);
  EXPECT_NEAR(oracle2, 0.162403, 5e-7);
  // d = 1, nu = 3/2, Gamma(3/2) = sqrt(pi)/2.
  const double oracle1 = (std::sqrt(std::numbers::pi) / 2.0) / (std::sqrt(4.0 * std::numbers::pi) * std::pow(0.01, 1.5) * 49.0);
  EXPECT_NEAR(prior_marginal_sigma(7.0, iso(1, 0.01)), oracle1, 1e-13);
}

TEST(Prior, DefaultParameterSets)
{
  const SlabMesh b = surface(6);
  const EllipticPrior beta(b, 7.0, iso(2, 0.01), 0.0, Vector::Ones(b.num_nodes()), BoundaryVariant::Weighted);
  EXPECT_EQ(beta.variant(), BoundaryVariant::Weighted);
  EXPECT_GT(beta.weight().minCoeff(), 0.0);

  const SlabMesh v = build_slab_mesh(4, 4, 2, 1.0, 0.01, 3);
  const EllipticPrior a(v, 100.0, iso(3, 1e-3), 0.0, Vector::Zero(v.num_nodes()), BoundaryVariant::Neumann);
  EXPECT_EQ(a.weight(), Vector::Ones(v.num_nodes()));
  Matrix aniso = Matrix::Zero(3, 3);
  aniso.diagonal() << 1e-2, 1e-2, 1e-8;
  EXPECT_NO_THROW(EllipticPrior(v, 100.0, aniso, 0.0, Vector::Zero(v.num_nodes()), BoundaryVariant::Neumann));
}

TEST(Prior, RejectsBadParameters)
{
  const SlabMesh b = surface(3);
  const Vector mean = Vector::Zero(b.num_nodes());
  Matrix bad(2, 2);
  bad << 1, 2, 2, 1;
  EXPECT_THROW(EllipticPrior(b, 7.0, bad, 0.0, mean, BoundaryVariant::Neumann), std::invalid_argument);
  Matrix asym(2, 2);
  asym << 1, 0.1, 0, 1;
  EXPECT_THROW(EllipticPrior(b, 7.0, asym, 0.0, mean, BoundaryVariant::Neumann), std::invalid_argument);
  EXPECT_THROW(EllipticPrior(b, 0.0, iso(2, 0.01), 0.0, mean, BoundaryVariant::Neumann), std::invalid_argument);
  EXPECT_THROW(EllipticPrior(b, 7.0, iso(2, 0.01), -1.0, mean, BoundaryVariant::Robin), std::invalid_argument);
  EXPECT_THROW(EllipticPrior(b, 7.0, iso(3, 0.01), 0.0, mean, BoundaryVariant::Neumann), std::invalid_argument);
}

TEST(Prior, WeightedVarianceIsFlatAndNeumannIsNot)
{
  const SlabMesh b = surface(12);
  const Vector mean = Vector::Ones(b.num_nodes());
  const EllipticPrior w(b, 7.0, iso(2, 0.01), 0.0, mean, BoundaryVariant::Weighted);
  const Vector vw = w.pointwise_variance();
  EXPECT_LE(ratio(vw), 1.0 + 1e-8);
  EXPECT_NEAR(vw.mean() / (w.sigma() * w.sigma()), 1.0, 1e-10);

  const EllipticPrior n(b, 7.0, iso(2, 0.01), 0.0, mean, BoundaryVariant::Neumann);
  EXPECT_GT(ratio(n.pointwise_variance()), 1.5);
}

TEST(Prior, RobinSitsBetweenNeumannAndDirichletOnTheBoundary)
{
  const SlabMesh b = surface(12);
  const Vector mean = Vector::Zero(b.num_nodes());
  const double alpha = 7.0, gamma = 0.01;
  const Vector vn = EllipticPrior(b, alpha, iso(2, gamma), 0.0, mean, BoundaryVariant::Neumann).pointwise_variance();
  const Vector vd = EllipticPrior(b, alpha, iso(2, gamma), 0.0, mean, BoundaryVariant::Dirichlet).pointwise_variance();
  const Vector vr = EllipticPrior(b, alpha, iso(2, gamma), robin_kappa(alpha, gamma), mean, BoundaryVariant::Robin)
                        .pointwise_variance();
  const auto on = boundary_nodes(b);
  int count = 0;
  for (int i = 0; i < b.num_nodes(); ++i) {
    if (!on[i]) continue;
    ++count;
    EXPECT_EQ(vd[i], 0.0);
    EXPECT_LT(vr[i], vn[i]);
    EXPECT_GT(vr[i], vd[i]);
  }
  EXPECT_EQ(count, 4 * 12);
}

TEST(Prior, FactorIdentities)
{
  const SlabMesh b = surface(6);
  const int n = b.num_nodes();
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Ones(n), BoundaryVariant::Weighted);
  const SparseMatrix& M = p.mass();
  std::srand(3);
  const Vector z = Vector::Random(n), y = Vector::Random(n);

  EXPECT_LT((p.apply_L_inverse(p.apply_L(z)) - z).norm(), 1e-10 * z.norm());
  EXPECT_LT((p.apply_L_adjoint_inverse(p.apply_L_adjoint(z)) - z).norm(), 1e-10 * z.norm());

  // L^* is the M-adjoint of L.
  const double lhs = p.apply_L(y).dot(M * z), rhs = y.dot(M * p.apply_L_adjoint(z));
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));

  const double g1 = p.covariance_apply(y).dot(M * z), g2 = y.dot(M * p.covariance_apply(z));
  EXPECT_NEAR(g1, g2, 1e-10 * std::abs(g1));

  EXPECT_LT((p.precision_apply(p.covariance_apply(z)) - z).norm(), 1e-8 * z.norm());
}

TEST(Prior, UnweightedCovarianceMatchesDenseOracle)
{
  const SlabMesh b = surface(6);  // 49 nodes
  const int n = b.num_nodes();
  ASSERT_LE(n, 50);
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Zero(n), BoundaryVariant::Neumann);
  const Matrix K(p.stiffness()), M(p.mass());
  const Matrix Kinv = K.inverse();
  const Vector z = Vector::Random(n);
  const Vector oracle = Kinv * M * Kinv * M * z;
  EXPECT_LT((p.covariance_apply(z) - oracle).norm(), 1e-10 * oracle.norm());

  const Vector diag = (Kinv * M * Kinv).diagonal();
  EXPECT_LT((p.unweighted_variance() - diag).norm(), 1e-12 * diag.norm());
}

TEST(Prior, WeightedCoefficientCovarianceMatchesDenseOracle)
{
  const SlabMesh b = surface(5);
  const int n = b.num_nodes();
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Zero(n), BoundaryVariant::Weighted);
  const Matrix K(p.stiffness()), M(p.mass());
  const Matrix W = p.weight().asDiagonal();
  const Matrix C = W * K.inverse() * M * K.inverse() * W;
  const Vector y = Vector::Random(n);
  EXPECT_LT((p.coefficient_covariance_apply(y) - C * y).norm(), 1e-10 * (C * y).norm());
  EXPECT_LT((C.diagonal().array() / (p.sigma() * p.sigma()) - 1.0).abs().maxCoeff(), 1e-10);
  const Vector x = Vector::Random(n);
  const Vector oracle = C.ldlt().solve(x);
  EXPECT_LT((p.precision_dual_apply(x) - oracle).norm(), 1e-8 * oracle.norm());
}

TEST(Prior, CostAndGradient)
{
  const SlabMesh b = surface(6);
  const int n = b.num_nodes();
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Ones(n), BoundaryVariant::Weighted);
  const auto at_mean = p.cost_and_grad(p.mean());
  EXPECT_EQ(at_mean.cost, 0.0);
  EXPECT_EQ(at_mean.gradient.norm(), 0.0);

  const Vector z = Vector::Random(n);
  const double c = p.cost_and_grad(p.mean() + p.apply_L(z)).cost;
  const double oracle = 0.5 * z.dot(p.mass() * z);
  EXPECT_NEAR(c, oracle, 1e-9 * oracle);

  // Central differences along random directions; the gradient is M-Riesz.
  const Vector x = p.sample(11);
  const auto cg = p.cost_and_grad(x);
  for (int trial = 0; trial < 3; ++trial) {
    const Vector v = Vector::Random(n);
    const double exact = cg.gradient.dot(p.mass() * v);
    const double h = 1e-4;
    const double fd = (p.cost_and_grad(x + h * v).cost - p.cost_and_grad(x - h * v).cost) / (2 * h);
    EXPECT_NEAR(fd, exact, 1e-6 * std::abs(exact));
  }
}

TEST(Prior, SamplesHaveTheRightMoments)
{
  const SlabMesh b = surface(6);
  const int n = b.num_nodes();
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Constant(n, 1.0), BoundaryVariant::Weighted);
  const int draws = 10000;
  Vector sum = Vector::Zero(n), sum2 = Vector::Zero(n);
  auto rng = make_rng(2024);
  for (int k = 0; k < draws; ++k) {
    const Vector s = p.mean() + p.apply_L(p.white_noise(rng));
    sum += s;
    sum2 += s.cwiseProduct(s);
  }
  const Vector mean = sum / draws;
  const Vector var = (sum2 - draws * mean.cwiseProduct(mean)) / (draws - 1);
  const double s2 = p.sigma() * p.sigma();
  EXPECT_LT((mean - p.mean()).cwiseAbs().maxCoeff(), 4.0 * p.sigma() / std::sqrt(double(draws)));
  EXPECT_LT((var.array() / s2 - 1.0).abs().maxCoeff(), 0.10);

  EXPECT_EQ(p.sample(5), p.sample(5));
  EXPECT_NE(p.sample(5), p.sample(6));
}

TEST(Prior, WhiteNoiseHasInverseMassCovariance)
{
  const SlabMesh b = surface(3);
  const int n = b.num_nodes();
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Zero(n), BoundaryVariant::Neumann);
  // Columns of the linear map xi -> w give its covariance exactly.
  Matrix S(n, n);
  for (int j = 0; j < n; ++j) S.col(j) = p.mass_solver().inverse_sqrt_apply(Vector::Unit(n, j));
  const Matrix Minv = Matrix(p.mass()).inverse();
  EXPECT_LT((S * S.transpose() - Minv).norm(), 1e-10 * Minv.norm());
}

TEST(Prior, DirichletHasNoPrecision)
{
  const SlabMesh b = surface(4);
  const EllipticPrior p(b, 7.0, iso(2, 0.01), 0.0, Vector::Zero(b.num_nodes()), BoundaryVariant::Dirichlet);
  EXPECT_THROW(p.cost_and_grad(Vector::Ones(b.num_nodes())), std::invalid_argument);
}

TEST(Prior, DeriveSeedIsStableAndDistinct)
{
  EXPECT_EQ(derive_seed(1, 2), derive_seed(1, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
}
