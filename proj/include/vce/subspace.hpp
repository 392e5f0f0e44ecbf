#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vce/tensor.hpp"

namespace vce::subspace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr std::size_t kDefaultRank = 4;

/// Stacked editing vectors for one layer, one row per contrastive pair.
struct EditingVectorSet {
  std::size_t layer = 0;
  Tensor matrix;  // M x D

  std::size_t rows() const { return matrix.dim(0); }
  std::size_t dim() const { return matrix.dim(1); }
};

/// Top-k right singular basis of an EditingVectorSet.
struct HalluSpace {
  std::size_t layer = 0;
  Tensor basis;                 // D x k, orthonormal columns
  std::vector<double> spectrum;  // all min(M, D) singular values, non-increasing
  std::vector<std::string> warnings;

  std::size_t dim() const { return basis.dim(0); }
  std::size_t rank() const { return basis.dim(1); }
  Matrix basis_matrix() const;
  std::vector<double> top_singular_values() const {
    return {spectrum.begin(), spectrum.begin() + static_cast<std::ptrdiff_t>(rank())};
  }
};

/// v = (1/N) sum_i w_i (h_neg_i - h_pos_i), summed in index order.
/// states_pos and states_neg are N x D; weights has N entries, N >= 1.
std::vector<double> editing_vector(const Tensor& states_pos, const Tensor& states_neg, std::span<const double> weights);

EditingVectorSet assemble_prior_matrix(const std::vector<std::vector<double>>& vectors, std::size_t layer);

/// Thin SVD V = U diag(sigma) S^T in double precision; keeps the k leading
/// right singular vectors. Each column is flipped so that its largest-magnitude
/// entry (lowest index on ties) is positive. Requires 1 <= k <= min(M, D).
HalluSpace halluspace(const EditingVectorSet& vectors, std::size_t k);

/// I - S S^T (D x D).
Matrix projector(const HalluSpace& space);
Matrix projector(const Matrix& basis);

/// Applies the sign convention in place.
void canonicalize_signs(Matrix& basis);

Matrix to_matrix(const Tensor& t);
Tensor to_tensor(const Matrix& m, std::string name);

}  // namespace vce::subspace
