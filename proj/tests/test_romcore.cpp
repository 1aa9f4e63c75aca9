#include <doctest.h>

#include <cmath>

#include "rom/linalg.hpp"
#include "rom/romcore.hpp"
#include "support.hpp"

using namespace rom;
using rom::test::random_matrix;
using rom::test::to_eigen;

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// ||Y - Y P_r||^2 where P_r projects onto the top-r right singular vectors of Y.
double svd_projection_error(const Matrix& w, const Matrix& x, std::size_t r) {
  const Eigen::MatrixXd y = to_eigen(x) * to_eigen(w).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(y, Eigen::ComputeFullV);
  const Eigen::MatrixXd v = svd.matrixV().leftCols(static_cast<Eigen::Index>(r));
  return (y - y * v * v.transpose()).squaredNorm();
}

Matrix rank_one_rows(std::size_t n, std::size_t width, std::uint64_t seed) {
  const Matrix dir = random_matrix(1, width, seed);
  const Matrix scale = random_matrix(n, 1, seed + 1);
  Matrix x(n, width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < width; ++j) x(i, j) = scale(i, 0) * dir(0, j);
  return x;
}

}  // namespace

TEST_CASE("second_moment examples") {
  CHECK(second_moment(Matrix::identity(2)) == Matrix(2, 2, {0.5f, 0, 0, 0.5f}));
  CHECK(second_moment(Matrix(2, 2, {1, 1, 1, 1})) == Matrix(2, 2, {1, 1, 1, 1}));
  CHECK_THROWS_AS(second_moment(Matrix(0, 3)), Error);

  const Matrix y = random_matrix(64, 8, 11);
  const Matrix s = second_moment(y);
  for (std::size_t a = 0; a < 8; ++a) {
    for (std::size_t b = 0; b < 8; ++b) {
      double naive = 0;
      for (std::size_t n = 0; n < 64; ++n) naive += static_cast<double>(y(n, a)) * y(n, b);
      naive /= 64.0;
      CHECK(std::abs(s(a, b) - naive) <= 1e-6 * std::max(1.0, std::abs(naive)));
      CHECK(s(a, b) == s(b, a));
    }
  }
}

TEST_CASE("GramAccumulator streams blocks to the same result") {
  const Matrix y = random_matrix(300, 10, 4);
  GramAccumulator acc(10);
  for (std::size_t start = 0; start < 300; start += 70) {
    const std::size_t n = std::min<std::size_t>(70, 300 - start);
    Matrix block(n, 10);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 10; ++j) block(i, j) = y(start + i, j);
    acc.add_rows(block);
  }
  CHECK(acc.sample_count() == 300);
  CHECK(max_abs_diff(acc.second_moment(), second_moment_wide(y)) <= 1e-12);
  CHECK_THROWS_AS(GramAccumulator(3).second_moment(), Error);
}

TEST_CASE("eig_sym_desc examples") {
  for (EigenMethod method : {EigenMethod::kJacobi, EigenMethod::kTridiagQl}) {
    const Spectrum d = eig_sym_desc(MatrixD(2, 2, {1, 0, 0, 3}), method);
    CHECK(d.eigenvalues[0] == doctest::Approx(3.0));
    CHECK(d.eigenvalues[1] == doctest::Approx(1.0));
    CHECK(std::abs(d.components(0, 1)) == doctest::Approx(1.0));
    CHECK(d.components(0, 1) > 0);
    CHECK(d.components(1, 0) == doctest::Approx(1.0));

    const Spectrum s = eig_sym_desc(MatrixD(2, 2, {2, 1, 1, 2}), method);
    const double h = 1.0 / std::sqrt(2.0);
    CHECK(s.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(s.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.components(0, 0) == doctest::Approx(h).epsilon(1e-12));
    CHECK(s.components(0, 1) == doctest::Approx(h).epsilon(1e-12));
    // Tie on magnitude resolves to the first component.
    CHECK(s.components(1, 0) == doctest::Approx(h).epsilon(1e-12));
    CHECK(s.components(1, 1) == doctest::Approx(-h).epsilon(1e-12));
  }
  CHECK_THROWS_AS(eig_sym_desc(MatrixD(2, 2, {1, 0.5, 0.4, 1})), Error);
}

TEST_CASE("Spectrum invariants on random second moments, both solvers") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t n = 4 + seed % 13;
    const MatrixD s = second_moment_wide(random_matrix(3 * n, n, 100 + seed));
    for (EigenMethod method : {EigenMethod::kJacobi, EigenMethod::kTridiagQl}) {
      const Spectrum sp = eig_sym_desc(s, method);
      const double lmax = sp.eigenvalues.front();
      for (std::size_t i = 0; i + 1 < n; ++i) CHECK(sp.eigenvalues[i] >= sp.eigenvalues[i + 1]);
      CHECK(sp.eigenvalues.back() >= 0.0);

      const Eigen::MatrixXd v = to_eigen(sp.components);
      CHECK((v * v.transpose() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-5);
      const Eigen::MatrixXd diag = v * to_eigen(s) * v.transpose();
      Eigen::MatrixXd off = diag;
      off.diagonal().setZero();
      CHECK(off.cwiseAbs().maxCoeff() <= 1e-4 * lmax);

      Eigen::MatrixXd lambda = Eigen::MatrixXd::Zero(n, n);
      for (std::size_t i = 0; i < n; ++i) lambda(i, i) = sp.eigenvalues[i];
      CHECK((v.transpose() * lambda * v - to_eigen(s)).cwiseAbs().maxCoeff() <= 1e-5);

      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> oracle(to_eigen(s));
      for (std::size_t i = 0; i < n; ++i)
        CHECK(std::abs(sp.eigenvalues[i] - oracle.eigenvalues()(n - 1 - i)) <= 1e-10 * lmax);

      for (std::size_t row = 0; row < n; ++row) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < n; ++c)
          if (std::abs(sp.components(row, c)) > std::abs(sp.components(row, arg)) * (1 + 1e-9)) arg = c;
        CHECK(sp.components(row, arg) >= 0.0);
      }
    }
  }
}

TEST_CASE("Jacobi and tridiagonal QL agree on the projector") {
  const MatrixD s = second_moment_wide(random_matrix(200, 40, 9));
  const Spectrum a = eig_sym_desc(s, EigenMethod::kJacobi);
  const Spectrum b = eig_sym_desc(s, EigenMethod::kTridiagQl);
  for (std::size_t i = 0; i < 40; ++i) CHECK(std::abs(a.eigenvalues[i] - b.eigenvalues[i]) <= 1e-10 * a.eigenvalues[0]);
  const Eigen::MatrixXd va = to_eigen(a.components).topRows(10);
  const Eigen::MatrixXd vb = to_eigen(b.components).topRows(10);
  CHECK((va.transpose() * va - vb.transpose() * vb).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("tiny negative eigenvalues clamp to zero, larger ones are errors") {
  const Spectrum s = eig_sym_desc(MatrixD(2, 2, {1, 0, 0, -1e-12}));
  CHECK(s.eigenvalues[1] == 0.0);
  CHECK_THROWS_AS(eig_sym_desc(MatrixD(2, 2, {1, 0, 0, -1e-3})), Error);
}

TEST_CASE("decompose_layer examples") {
  SUBCASE("full rank reproduces w") {
    const Matrix w = random_matrix(6, 5, 1);
    const Matrix x = random_matrix(40, 5, 2);
    const DecompositionResult r = decompose_layer(w, x, 6);
    CHECK(max_abs_diff(matmul_nt(r.w1, r.w2.transposed()), w) <= 1e-4);
    CHECK(r.discarded_energy <= 1e-12 * r.retained_energy);
    CHECK(reconstruction_error(r, w, x) <= 1e-6);
  }
  SUBCASE("rank-one activations at r = 1") {
    const Matrix w = random_matrix(7, 5, 3);
    const Matrix x = rank_one_rows(50, 5, 4);
    const DecompositionResult r = decompose_layer(w, x, 1);
    CHECK(reconstruction_error(r, w, x) <= 1e-8 * frobenius_sq(matmul_nt_wide(x, w)));
  }
  SUBCASE("8x6 at r = 3 against the SVD oracle") {
    const Matrix w = random_matrix(8, 6, 5);
    const Matrix x = random_matrix(100, 6, 6);
    const DecompositionResult r = decompose_layer(w, x, 3);
    const double err = reconstruction_error(r, w, x);
    CHECK(rel(err, 100.0 * r.discarded_energy) <= 1e-4);
    CHECK(rel(err, svd_projection_error(w, x, 3)) <= 1e-6);
    CHECK(r.sample_count == 100);
    CHECK(r.w1.rows() == 8);
    CHECK(r.w1.cols() == 3);
    CHECK(r.w2.rows() == 3);
    CHECK(r.w2.cols() == 6);
  }
  SUBCASE("errors") {
    const Matrix w = random_matrix(4, 3, 7);
    const Matrix x = random_matrix(10, 3, 8);
    auto kind = [](auto f) {
      try {
        f();
      } catch (const Error& e) {
        return e.kind();
      }
      return ErrorKind::kArgument;
    };
    CHECK(kind([&] { decompose_layer(w, x, 0); }) == ErrorKind::kRank);
    CHECK(kind([&] { decompose_layer(w, x, 5); }) == ErrorKind::kRank);
    CHECK(kind([&] { decompose_layer(w, Matrix(0, 3), 1); }) == ErrorKind::kEmptySample);
    CHECK(kind([&] { decompose_layer(w, random_matrix(10, 4, 9), 1); }) == ErrorKind::kDimension);
    DecompositionResult r = decompose_layer(w, x, 2);
    CHECK(kind([&] { reconstruction_error(r, w, random_matrix(10, 2, 1)); }) == ErrorKind::kDimension);
  }
}

TEST_CASE("decomposition invariants on random instances") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 60; ++trial) {
    std::uniform_int_distribution<std::size_t> out_dim(1, 16), in_dim(1, 12), samples(1, 200);
    const std::size_t d_out = out_dim(rng), d_in = in_dim(rng), n = samples(rng);
    const std::size_t r = std::uniform_int_distribution<std::size_t>(1, d_out)(rng);
    const Matrix w = random_matrix(d_out, d_in, rng());
    const Matrix x = random_matrix(n, d_in, rng());
    const DecompositionResult res = decompose_layer(w, x, r);
    CAPTURE(d_out);
    CAPTURE(d_in);
    CAPTURE(n);
    CAPTURE(r);

    const Eigen::MatrixXd w1 = to_eigen(res.w1);
    CHECK((w1.transpose() * w1 - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff() <= 1e-5);
    const Eigen::MatrixXd p = w1 * w1.transpose();
    CHECK((p * p - p).cwiseAbs().maxCoeff() <= 1e-4);
    CHECK((w1 * to_eigen(res.w2) - p * to_eigen(w)).cwiseAbs().maxCoeff() <= 1e-4);

    const MatrixD s = second_moment_wide(matmul_nt(x, w));
    double trace = 0;
    for (std::size_t i = 0; i < d_out; ++i) trace += s(i, i);
    CHECK(rel(res.retained_energy + res.discarded_energy, trace) <= 1e-5);
    CHECK(res.retained_energy >= 0);
    CHECK(res.discarded_energy >= 0);
    if (r < d_out) CHECK(res.retained_energy >= res.eigenvalues[r]);

    // Algebraic identity: (x w2^T) w1^T equals Y V_r^T V_r.
    const Eigen::MatrixXd y = to_eigen(x) * to_eigen(w).transpose();
    const Eigen::MatrixXd approx = (to_eigen(x) * to_eigen(res.w2).transpose()) * w1.transpose();
    CHECK((approx - y * p).cwiseAbs().maxCoeff() <= 1e-4 * std::max(1.0, y.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("reconstruction error is non-increasing in rank") {
  const Matrix w = random_matrix(8, 8, 21);
  const Matrix x = random_matrix(120, 8, 22);
  double previous = INFINITY;
  for (std::size_t r = 1; r <= 8; ++r) {
    const double err = reconstruction_error(decompose_layer(w, x, r), w, x);
    CHECK(err <= previous * (1 + 1e-9) + 1e-9);
    previous = err;
  }
  CHECK(previous <= 1e-6);
}

TEST_CASE("orthogonal change of input basis leaves the spectrum unchanged") {
  const Matrix w = random_matrix(9, 7, 31);
  const Matrix x = random_matrix(80, 7, 32);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(random_matrix(7, 7, 33)));
  const Eigen::MatrixXd q = qr.householderQ();
  Matrix q32(7, 7);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) q32(i, j) = static_cast<float>(q(i, j));
  const Matrix x2 = matmul_nt(x, q32.transposed());  // x Q
  const Matrix w2 = matmul_nt(w, q32.transposed());   // w Q
  const auto a = decompose_layer(w, x, 4).eigenvalues;
  const auto b = decompose_layer(w2, x2, 4).eigenvalues;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-5 * a[0]);
}

TEST_CASE("decomposition is bit-deterministic, including across thread counts") {
  const Matrix w = random_matrix(24, 20, 51);
  const Matrix x = random_matrix(2500, 20, 52);
  const auto a = decompose_layer(w, x, 9);
  const auto b = decompose_layer(w, x, 9);
  CHECK(a.w1 == b.w1);
  CHECK(a.w2 == b.w2);
  CHECK(a.eigenvalues == b.eigenvalues);
  set_num_threads(3);
  const auto c = decompose_layer(w, x, 9);
  set_num_threads(1);
  CHECK(a.w1 == c.w1);
  CHECK(a.w2 == c.w2);
}

TEST_CASE("wide layers take the tridiagonal path and still meet the invariants") {
  const Matrix w = random_matrix(400, 30, 61);
  const Matrix x = random_matrix(500, 30, 62);
  const DecompositionResult r = decompose_layer(w, x, 20);
  const Eigen::MatrixXd w1 = to_eigen(r.w1);
  CHECK((w1.transpose() * w1 - Eigen::MatrixXd::Identity(20, 20)).cwiseAbs().maxCoeff() <= 1e-5);
  const double err = reconstruction_error(r, w, x);
  CHECK(rel(err, svd_projection_error(w, x, 20)) <= 1e-6);
}
