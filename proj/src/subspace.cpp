#include "vce/subspace.hpp"

#include <cmath>
#include <stdexcept>

namespace vce::subspace {

Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("tensor '" + t.name() + "' is not a matrix");
  Matrix m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
  return m;
}

Tensor to_tensor(const Matrix& m, std::string name) {
  Tensor t(std::move(name), {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(m(r, c));
  return t;
}

Matrix HalluSpace::basis_matrix() const { return to_matrix(basis); }

std::vector<double> editing_vector(const Tensor& states_pos, const Tensor& states_neg, std::span<const double> weights) {
  if (states_pos.rank() != 2 || states_pos.shape() != states_neg.shape())
    throw std::invalid_argument("editing_vector: hidden-state matrices must be N x D with equal shapes");
  const std::size_t n = states_pos.dim(0), d = states_pos.dim(1);
  if (weights.size() != n)
    throw std::invalid_argument("editing_vector: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(n) + " rows");
  if (n == 0) throw std::invalid_argument("editing_vector: need at least one row");
  std::vector<double> v(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto pos = states_pos.row(i), neg = states_neg.row(i);
    for (std::size_t j = 0; j < d; ++j)
      v[j] += weights[i] * (static_cast<double>(neg[j]) - static_cast<double>(pos[j]));
  }
  for (double& x : v) x /= static_cast<double>(n);
  return v;
}

EditingVectorSet assemble_prior_matrix(const std::vector<std::vector<double>>& vectors, std::size_t layer) {
  if (vectors.empty()) throw std::invalid_argument("assemble_prior_matrix: no vectors");
  const std::size_t d = vectors.front().size();
  EditingVectorSet out{layer, Tensor("layer" + std::to_string(layer) + ".V", {vectors.size(), d})};
  for (std::size_t r = 0; r < vectors.size(); ++r) {
    if (vectors[r].size() != d)
      throw std::invalid_argument("assemble_prior_matrix: vector " + std::to_string(r) + " has length " +
                                  std::to_string(vectors[r].size()) + ", expected " + std::to_string(d));
    for (std::size_t c = 0; c < d; ++c) {
      if (!std::isfinite(vectors[r][c]))
        throw std::invalid_argument("assemble_prior_matrix: non-finite entry in vector " + std::to_string(r));
      out.matrix.at(r, c) = static_cast<float>(vectors[r][c]);
    }
  }
  return out;
}

void canonicalize_signs(Matrix& basis) {
  for (Eigen::Index c = 0; c < basis.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < basis.rows(); ++r)
      if (std::abs(basis(r, c)) > std::abs(basis(best, c))) best = r;
    if (basis(best, c) < 0.0) basis.col(c) = -basis.col(c);
  }
}

HalluSpace halluspace(const EditingVectorSet& vectors, std::size_t k) {
  const std::size_t m = vectors.rows(), d = vectors.dim();
  if (k < 1 || k > std::min(m, d))
    throw std::out_of_range("halluspace: rank " + std::to_string(k) + " outside [1, min(M, D) = " +
                            std::to_string(std::min(m, d)) + "]");
  for (float x : vectors.matrix.data())
    if (!std::isfinite(x)) throw std::invalid_argument("halluspace: non-finite editing vector entry");

  const Matrix v = to_matrix(vectors.matrix);
  Eigen::JacobiSVD<Matrix> svd(v, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sigma = svd.singularValues();
  Matrix basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(k));
  canonicalize_signs(basis);

  HalluSpace out;
  out.layer = vectors.layer;
  out.basis = to_tensor(basis, "layer" + std::to_string(vectors.layer) + ".S");
  out.spectrum.assign(sigma.data(), sigma.data() + sigma.size());
  if (k < out.spectrum.size()) {
    const double gap = out.spectrum[k - 1] - out.spectrum[k];
    if (gap <= 1e-9 * std::max(out.spectrum.front(), 1e-300))
      out.warnings.push_back("layer " + std::to_string(vectors.layer) + ": degenerate spectrum at rank " +
                             std::to_string(k) + " (sigma_k == sigma_k+1); subspace is not unique");
  }
  return out;
}

Matrix projector(const Matrix& basis) {
  const Eigen::Index d = basis.rows();
  Matrix p = Matrix::Identity(d, d);
  // Entry-wise so that p(i, j) and p(j, i) use the same operation order.
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < basis.cols(); ++c) s += basis(i, c) * basis(j, c);
      p(i, j) -= s;
    }
  return p;
}

Matrix projector(const HalluSpace& space) { return projector(space.basis_matrix()); }

}  // namespace vce::subspace
