#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "cosim/error.hpp"
#include "cosim/numerics.hpp"
#include "temp_dir.hpp"

using namespace cosim;

namespace {

Matrix random_matrix(Eigen::Index n, Eigen::Index d, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = normal(gen) * (1.0 + static_cast<double>(j));
  }
  return m;
}

// Covariance formed with explicit loops, divisor n - 1.
Matrix loop_covariance(const Matrix& x) {
  const Eigen::Index n = x.rows(), d = x.cols();
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) mean[static_cast<std::size_t>(j)] += x(i, j);
    mean[static_cast<std::size_t>(j)] /= static_cast<double>(n);
  }
  Matrix c(d, d);
  for (Eigen::Index p = 0; p < d; ++p) {
    for (Eigen::Index q = 0; q < d; ++q) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        s += (x(i, p) - mean[static_cast<std::size_t>(p)]) * (x(i, q) - mean[static_cast<std::size_t>(q)]);
      }
      c(p, q) = s / static_cast<double>(n - 1);
    }
  }
  return c;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::Io;
}

}  // namespace

TEST(Cosine, Fixtures) {
  EXPECT_NEAR(cosine_distance(Vector{{3.0, 4.0}}, Vector{{3.0, 4.0}}), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_distance(Vector{{1.0, 0.0}}, Vector{{0.0, 1.0}}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_distance(Vector{{1.0, 0.0}}, Vector{{-2.0, 0.0}}), 2.0);
  EXPECT_EQ(code_of([] { cosine_distance(Vector{{0.0, 0.0}}, Vector{{1.0, 0.0}}); }), ErrorCode::ZeroVector);
  EXPECT_EQ(code_of([] { cosine_distance(Vector{{1.0, 0.0}}, Vector{{1.0, 0.0, 0.0}}); }), ErrorCode::LengthMismatch);
}

TEST(Cosine, ScaleInvariantAndBounded) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vector u(7), v(7);
    for (int i = 0; i < 7; ++i) {
      u(i) = normal(gen);
      v(i) = normal(gen);
    }
    const double d = cosine_distance(u, v);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
    EXPECT_NEAR(cosine_distance(Vector(scale(gen) * u), Vector(scale(gen) * v)), d, 1e-12);
  }
}

TEST(Cosine, GradientMatchesFiniteDifference) {
  const Vector u{{0.3, -1.2, 0.8}};
  const Vector v{{1.1, 0.4, -0.5}};
  const auto g = cosine_distance_gradient(u, v);
  const double h = 1e-6;
  for (int i = 0; i < 3; ++i) {
    Vector up = u, um = u, vp = v, vm = v;
    up(i) += h;
    um(i) -= h;
    vp(i) += h;
    vm(i) -= h;
    EXPECT_NEAR(g.d_u(i), (cosine_distance(up, v) - cosine_distance(um, v)) / (2 * h), 1e-8);
    EXPECT_NEAR(g.d_v(i), (cosine_distance(u, vp) - cosine_distance(u, vm)) / (2 * h), 1e-8);
  }
}

TEST(Jacobi, DiagonalizesRandomSymmetric) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    const Matrix a = random_matrix(12, 12, seed);
    const Matrix s = (a + a.transpose()) / 2.0;
    const auto eig = jacobi_eigen(s);
    const Matrix recon = eig.vectors * eig.values.asDiagonal() * eig.vectors.transpose();
    EXPECT_LT((recon - s).norm(), 1e-10 * s.norm());
    EXPECT_LT((eig.vectors.transpose() * eig.vectors - Matrix::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-12);
    for (Eigen::Index i = 1; i < 12; ++i) EXPECT_GE(eig.values(i - 1), eig.values(i));
    EXPECT_LE(eig.sweeps, 100u);
  }
}

TEST(Jacobi, TiesKeepAxisOrder) {
  Matrix d = Matrix::Zero(3, 3);
  d(0, 0) = 2.0;
  d(1, 1) = 5.0;
  d(2, 2) = 2.0;
  const auto eig = jacobi_eigen(d);
  EXPECT_EQ(eig.values(0), 5.0);
  EXPECT_EQ(eig.vectors(1, 0), 1.0);
  EXPECT_EQ(eig.vectors(0, 1), 1.0);  // first of the tied pair is axis 0
  EXPECT_EQ(eig.vectors(2, 2), 1.0);
}

TEST(CanonicalSign, LargestMagnitudePositive) {
  Vector v{{0.2, -0.9, 0.1}};
  canonicalize_sign(v);
  EXPECT_GT(v(1), 0.0);
  EXPECT_LT(v(0), 0.0);
}

TEST(Pca, AxisAlignedData) {
  Matrix x = Matrix::Zero(3, 4);
  x(0, 0) = -1.0;
  x(2, 0) = 1.0;  // variance 1 along the first axis
  const auto model = pca_fit(x, 1);
  EXPECT_NEAR(model.eigenvalues(0), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(model.components(0, 0)), 1.0, 1e-14);
}

TEST(Pca, IdenticalPointsHaveZeroVariance) {
  Matrix x = Matrix::Constant(5, 3, 2.5);
  const auto model = pca_fit(x, 3);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(model.eigenvalues(i), 0.0);
}

TEST(Pca, MatchesDenseEigensolverOracle) {
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Matrix x = random_matrix(50, 8, seed + 100);
    const auto model = pca_fit(x, 8);
    Eigen::SelfAdjointEigenSolver<Matrix> oracle(loop_covariance(x));
    for (Eigen::Index i = 0; i < 8; ++i) {
      EXPECT_NEAR(model.eigenvalues(i), oracle.eigenvalues()(7 - i), 1e-8);
      Vector c = oracle.eigenvectors().col(7 - i);
      Eigen::Index arg;
      c.cwiseAbs().maxCoeff(&arg);
      if (c(arg) < 0) c = -c;
      EXPECT_LT((model.components.row(i).transpose() - c).cwiseAbs().maxCoeff(), 1e-8);
    }
    EXPECT_LT((model.components * model.components.transpose() - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(model.eigenvalues.sum(), loop_covariance(x).trace(), 1e-8);

    // Projected variances equal eigenvalues; projected mean is zero.
    Matrix z(50, 8);
    for (Eigen::Index r = 0; r < 50; ++r) z.row(r) = pca_transform(model, Vector(x.row(r).transpose())).transpose();
    EXPECT_LT(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-10);
    const Matrix zc = loop_covariance(z);
    for (Eigen::Index i = 0; i < 8; ++i) EXPECT_NEAR(zc(i, i), model.eigenvalues(i), 1e-8);
  }
}

TEST(Pca, TransformFixtures) {
  const Matrix x = random_matrix(30, 5, 9);
  const auto model = pca_fit(x, 3);
  EXPECT_LT(pca_transform(model, model.mean).norm(), 1e-15);
  const Vector step = model.mean + model.components.row(0).transpose();
  const Vector z = pca_transform(model, step);
  EXPECT_NEAR(z(0), 1.0, 1e-12);
  EXPECT_NEAR(z(1), 0.0, 1e-12);
  EXPECT_NEAR(z(2), 0.0, 1e-12);

  const Vector v = x.row(3).transpose();
  for (Eigen::Index i = 0; i < 3; ++i) {
    double expect = 0.0;
    for (Eigen::Index k = 0; k < 5; ++k) expect += model.components(i, k) * (v(k) - model.mean(k));
    EXPECT_NEAR(pca_transform(model, v)(i), expect, 1e-12);
  }
  EXPECT_EQ(code_of([&] { pca_transform(model, Vector::Zero(4)); }), ErrorCode::LengthMismatch);
}

TEST(Pca, ErrorsAndClamping) {
  EXPECT_EQ(code_of([] { pca_fit(Matrix::Zero(1, 3), 1); }), ErrorCode::BadArgument);
  EXPECT_EQ(code_of([] { pca_fit(Matrix::Zero(4, 3), 4); }), ErrorCode::BadArgument);
  EXPECT_EQ(code_of([] { pca_fit(Matrix::Zero(4, 3), 0); }), ErrorCode::BadArgument);
  Matrix bad = Matrix::Zero(4, 3);
  bad(1, 1) = NAN;
  EXPECT_EQ(code_of([&] { pca_fit(bad, 1); }), ErrorCode::NonFiniteValue);
  EXPECT_EQ(clamp_pca_dim(64, 10, 100), 9u);
  EXPECT_EQ(clamp_pca_dim(64, 1000, 32), 32u);
  EXPECT_EQ(clamp_pca_dim(16, 1000, 32), 16u);
}

TEST(Pca, FileRoundTrip) {
  const auto model = pca_fit(random_matrix(40, 6, 5), 4);
  testutil::TempDir dir;
  save_pca(model, dir / "p.cspc");
  const auto loaded = load_pca(dir / "p.cspc");
  EXPECT_EQ(encode_pca(loaded), encode_pca(model));
  EXPECT_TRUE((loaded.components.array() == model.components.array()).all());
  std::string bytes = encode_pca(model);
  bytes[1] = 'X';
  EXPECT_EQ(code_of([&] { decode_pca(bytes); }), ErrorCode::BadMagic);
}
