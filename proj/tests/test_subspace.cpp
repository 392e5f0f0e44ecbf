#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vce/subspace.hpp"
#include "vce/tensor_store.hpp"

using namespace vce;
using namespace vce::subspace;

namespace {

EditingVectorSet set_from(const oracle::Mat& rows, std::size_t layer = 0) { return assemble_prior_matrix(rows, layer); }

oracle::Mat basis_of(const HalluSpace& s) {
  oracle::Mat out = oracle::zeros(s.dim(), s.rank());
  for (std::size_t i = 0; i < s.dim(); ++i)
    for (std::size_t j = 0; j < s.rank(); ++j) out[i][j] = s.basis.at(i, j);
  return out;
}

Tensor states(const oracle::Mat& rows) {
  std::vector<float> v;
  for (const auto& r : rows)
    for (double x : r) v.push_back(static_cast<float>(x));
  return Tensor("h", {rows.size(), rows[0].size()}, v);
}

/// Matrix with prescribed, well separated singular values: U diag(s) W^T.
oracle::Mat with_spectrum(std::mt19937_64& rng, std::size_t m, std::size_t d, const std::vector<double>& s) {
  const oracle::Mat u = oracle::random_orthonormal(rng, m, s.size());
  const oracle::Mat w = oracle::random_orthonormal(rng, d, s.size());
  oracle::Mat out = oracle::zeros(m, d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t l = 0; l < s.size(); ++l) out[i][j] += u[i][l] * s[l] * w[j][l];
  // Prior matrices are stored in float32; give the oracle the same entries.
  for (auto& row : out)
    for (auto& x : row) x = static_cast<float>(x);
  return out;
}

}  // namespace

TEST_CASE("editing vector hand cases") {
  const Tensor same = states({{1.0, 2.0}, {3.0, 4.0}});
  CHECK(editing_vector(same, same, std::vector<double>{1.0, 1.0}) == std::vector<double>{0.0, 0.0});

  const Tensor pos1 = states({{0.0, 0.0}}), neg1 = states({{1.0, 2.0}});
  CHECK(editing_vector(pos1, neg1, std::vector<double>{1.0}) == std::vector<double>{1.0, 2.0});

  const Tensor pos2 = states({{0.0, 0.0}, {0.0, 0.0}}), neg2 = states({{2.0, 0.0}, {0.0, 4.0}});
  CHECK(editing_vector(pos2, neg2, std::vector<double>{1.0, 0.5}) == std::vector<double>{1.0, 1.0});

  CHECK_THROWS_AS(editing_vector(pos2, neg1, std::vector<double>{1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(editing_vector(pos2, neg2, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("prior matrix assembly") {
  const auto one = set_from({{1.0, 2.0, 3.0}}, 5);
  CHECK(one.rows() == 1);
  CHECK(one.dim() == 3);
  CHECK(one.layer == 5);
  CHECK(one.matrix.name() == "layer5.V");

  std::mt19937_64 rng(1);
  const oracle::Mat rows = oracle::random_matrix(rng, 3, 4);
  const auto three = set_from(rows);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(three.matrix.at(i, j) == static_cast<float>(rows[i][j]));

  testutil::TempDir dir;
  TensorMap m;
  insert_unique(m, three.matrix);
  store::write_bundle(m, dir.path());
  CHECK(store::read_bundle(dir.path()).at("layer0.V").bit_equal(three.matrix));

  CHECK_THROWS_AS(assemble_prior_matrix({}, 0), std::invalid_argument);
  CHECK_THROWS_AS(assemble_prior_matrix({{1.0, 2.0}, {1.0}}, 0), std::invalid_argument);
  CHECK_THROWS_AS(assemble_prior_matrix({{1.0, NAN}}, 0), std::invalid_argument);
}

TEST_CASE("halluspace hand cases") {
  std::vector<double> row(8, 0.0);
  row[7] = 3.0;
  const HalluSpace a = halluspace(set_from({row}), 1);
  CHECK(a.basis.shape() == std::vector<std::size_t>{8, 1});
  for (std::size_t i = 0; i < 7; ++i) CHECK(a.basis.at(i, 0) == 0.0f);
  CHECK(a.basis.at(7, 0) == 1.0f);
  CHECK(a.spectrum.at(0) == doctest::Approx(3.0));

  const HalluSpace b = halluspace(set_from({{1.0, 0.0}, {1.0, 0.0}}), 1);
  CHECK(b.basis.at(0, 0) == doctest::Approx(1.0));
  CHECK(b.basis.at(1, 0) == doctest::Approx(0.0));
  CHECK(b.spectrum.at(0) == doctest::Approx(std::sqrt(2.0)));

  // Negative-dominant direction is flipped to the canonical sign.
  const HalluSpace c = halluspace(set_from({{0.0, -2.0, 1.0}}), 1);
  CHECK(c.basis.at(1, 0) > 0.0f);

  CHECK_THROWS_AS(halluspace(set_from({{1.0, 2.0}}), 0), std::out_of_range);
  CHECK_THROWS_AS(halluspace(set_from({{1.0, 2.0}}), 2), std::out_of_range);
}

TEST_CASE("sign convention breaks ties by lowest index") {
  Matrix basis(3, 2);
  basis << -0.5, 0.6, 0.5, 0.0, 0.70710678, -0.8;
  canonicalize_signs(basis);
  CHECK(basis(2, 0) > 0.0);   // largest magnitude in column 0
  CHECK(basis(2, 1) > 0.0);   // |-0.8| beats 0.6
  Matrix tie(2, 1);
  tie << -0.7071067811865476, 0.7071067811865476;
  canonicalize_signs(tie);
  CHECK(tie(0, 0) > 0.0);
}

TEST_CASE("spectrum is complete and ordered; basis orthonormal") {
  std::mt19937_64 rng(2);
  const HalluSpace s = halluspace(set_from(oracle::random_matrix(rng, 12, 7)), 5);
  CHECK(s.spectrum.size() == 7);
  for (std::size_t i = 1; i < s.spectrum.size(); ++i) CHECK(s.spectrum[i] <= s.spectrum[i - 1]);
  for (double x : s.spectrum) CHECK(x >= 0.0);
  const Matrix b = s.basis_matrix();
  CHECK((b.transpose() * b - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(s.top_singular_values().size() == 5);
}

TEST_CASE("basis agrees with a Jacobi eigendecomposition of V^T V") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> sv{9.0, 7.0, 5.0, 3.5, 2.0, 1.0, 0.5, 0.25};
    const oracle::Mat v = with_spectrum(rng, 8, 16, sv);
    const auto [values, vectors] = oracle::jacobi_eigen(oracle::matmul(oracle::transpose(v), v));
    for (std::size_t k : {1u, 3u, 8u}) {
      const HalluSpace s = halluspace(set_from(v), k);
      CHECK(oracle::max_principal_sine(oracle::leading_columns(vectors, k), basis_of(s)) <= 1e-6);
      for (std::size_t i = 0; i < k; ++i) CHECK(s.spectrum[i] == doctest::Approx(std::sqrt(values[i])).epsilon(1e-9));
    }
  }
}

TEST_CASE("planted rank-1 direction is recovered") {
  std::mt19937_64 rng(4);
  const oracle::Mat r = oracle::random_orthonormal(rng, 32, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  oracle::Mat rows = oracle::zeros(64, 32);
  for (auto& row : rows) {
    const double c = 1.0 + std::abs(n(rng));
    for (std::size_t j = 0; j < 32; ++j) row[j] = c * r[j][0] + 1e-2 * c * n(rng) / std::sqrt(32.0);
  }
  const HalluSpace s = halluspace(set_from(rows), 1);
  double cos = 0.0;
  for (std::size_t j = 0; j < 32; ++j) cos += s.basis.at(j, 0) * r[j][0];
  CHECK(std::abs(cos) >= 0.999);
}

TEST_CASE("rotation equivariance") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const oracle::Mat v = with_spectrum(rng, 10, 12, {8.0, 6.0, 4.0, 2.0, 1.0});
    const oracle::Mat q = oracle::random_orthonormal(rng, 12, 12);
    const HalluSpace a = halluspace(set_from(v), 3);
    const HalluSpace b = halluspace(set_from(oracle::matmul(v, q)), 3);
    const oracle::Mat rotated = oracle::matmul(oracle::transpose(q), basis_of(a));
    CHECK(oracle::max_principal_sine(rotated, basis_of(b)) <= 1e-6);
  }
}

TEST_CASE("projector properties") {
  std::mt19937_64 rng(6);
  for (std::size_t k : {1u, 4u, 8u}) {
    const oracle::Mat s = oracle::random_orthonormal(rng, 32, k);
    Matrix basis(32, static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < k; ++j) basis(i, j) = s[i][j];
    const Matrix p = projector(basis);
    CHECK((p - p.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((p * p - p).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(std::abs(p.trace() - (32.0 - static_cast<double>(k))) <= 1e-6);
    CHECK((p * basis).colwise().norm().maxCoeff() <= 1e-6);
    // Complement action on a vector orthogonal to the basis.
    Vector x = Vector::Random(32);
    x -= basis * (basis.transpose() * x);
    CHECK((p * x - x).cwiseAbs().maxCoeff() <= 1e-6);
  }
  Matrix last = Matrix::Zero(5, 1);
  last(4, 0) = 1.0;
  Matrix expected = Matrix::Identity(5, 5);
  expected(4, 4) = 0.0;
  CHECK(projector(last) == expected);
  const oracle::Mat full = oracle::random_orthonormal(rng, 6, 6);
  Matrix fb(6, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) fb(i, j) = full[i][j];
  CHECK(projector(fb).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("halluspace is deterministic and flags degenerate gaps") {
  std::mt19937_64 rng(7);
  const auto v = set_from(oracle::random_matrix(rng, 9, 6));
  CHECK(halluspace(v, 3).basis.bit_equal(halluspace(v, 3).basis));
  CHECK(halluspace(v, 3).warnings.empty());

  // Two equal singular values: the rank-1 subspace is not unique.
  const auto tied = set_from({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}});
  CHECK_FALSE(halluspace(tied, 1).warnings.empty());
}
