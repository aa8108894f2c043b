#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <memory>
#include <string>
#include <vector>

#include "ngfield/errors.hpp"
#include "ngfield/rng.hpp"

namespace ngfield {

using SpMat = Eigen::SparseMatrix<double>;                      // column-major
using SpMatRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;

// Symmetric sparse matrix. Symmetry is enforced by construction: builders
// accept only the upper triangle (or mirror it), so coeff(i,j) == coeff(j,i)
// always holds and entries that are exactly zero are never stored.
class SparseSym {
 public:
  SparseSym() = default;

  // Build from upper-triangle triplets (i <= j required); duplicates accumulate.
  static SparseSym from_triplets(int order, const std::vector<Triplet>& upper);

  // Build from a square matrix that is symmetric up to roundoff (e.g. a
  // K·D·K product); the upper triangle is taken as the truth and mirrored.
  static SparseSym from_symmetric(const SpMat& m);

  static SparseSym diagonal(const Eigen::VectorXd& d);
  static SparseSym identity(int order);

  int order() const { return static_cast<int>(full_.rows()); }
  std::int64_t stored_upper() const;
  double coeff(int i, int j) const { return full_.coeff(i, j); }
  const SpMat& full() const { return full_; }  // both triangles, compressed
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  std::vector<Triplet> upper_triplets() const;

 private:
  explicit SparseSym(SpMat full) : full_(std::move(full)) {}
  SpMat full_;
};

namespace detail {
struct LltImpl;
}

// Sparse Cholesky factorization P·A·Pᵀ = L·Lᵀ with a fill-reducing (AMD)
// permutation. Copyable handle; the factor itself is immutable.
class CholFactor {
 public:
  int order() const;
  double log_det() const;
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
  SpMat lower() const;        // L, in permuted coordinates
  Eigen::VectorXi perm() const;  // sigma: (P·A·Pᵀ)(sigma(i), sigma(j)) = A(i,j)

 private:
  friend CholFactor chol_factor(const SparseSym&);
  friend class CholWorkspace;
  friend Eigen::VectorXd sample_gaussian(const CholFactor&, const Eigen::VectorXd&, RngStream&);
  friend SparseSym selected_inverse(const CholFactor&);
  std::shared_ptr<const detail::LltImpl> impl_;
};

CholFactor chol_factor(const SparseSym& m);
Eigen::VectorXd solve(const CholFactor& f, const Eigen::VectorXd& rhs);
double log_det(const CholFactor& f);

// Draw from N(mean, A⁻¹) where A is the factored matrix (precision
// parameterization): backsolve a standard-normal vector through Lᵀ.
Eigen::VectorXd sample_gaussian(const CholFactor& f, const Eigen::VectorXd& mean, RngStream& rng);

// Entries of A⁻¹ on the sparsity pattern of L+Lᵀ (a superset of A's
// pattern), by the Takahashi recursion on the factor.
SparseSym selected_inverse(const CholFactor& f);

// Refactorization helper for sampling loops: reuses the symbolic analysis
// while the sparsity pattern is unchanged. The returned factor shares state
// with the workspace and is valid only until the next refactorize call.
class CholWorkspace {
 public:
  CholWorkspace();
  ~CholWorkspace();
  CholWorkspace(CholWorkspace&&) noexcept;
  CholWorkspace& operator=(CholWorkspace&&) noexcept;
  CholFactor refactorize(const SparseSym& m);

 private:
  std::shared_ptr<detail::LltImpl> impl_;
  std::vector<int> pattern_;  // outer then inner indices of the analyzed matrix
};

// Matrix Market coordinate format (symmetric, 1-based), for debugging.
void write_matrix_market(const std::string& path, const SparseSym& m);
SparseSym read_matrix_market(const std::string& path);

}  // namespace ngfield
