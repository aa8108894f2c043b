#include "ngfield/sparse.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ngfield {

namespace {

// Mirror the upper triangle of `upper` (strictly validated elsewhere) into a
// full symmetric matrix, dropping entries that are exactly zero.
SpMat mirror_upper(int order, const std::vector<Triplet>& upper) {
  std::vector<Triplet> both;
  both.reserve(2 * upper.size());
  for (const auto& t : upper) {
    both.emplace_back(t.row(), t.col(), t.value());
    if (t.row() != t.col()) both.emplace_back(t.col(), t.row(), t.value());
  }
  SpMat full(order, order);
  full.setFromTriplets(both.begin(), both.end());  // duplicates accumulate
  full.prune(0.0, 0.0);
  full.makeCompressed();
  return full;
}

}  // namespace

SparseSym SparseSym::from_triplets(int order, const std::vector<Triplet>& upper) {
  if (order < 0) throw DimensionMismatch("sparse matrix order must be non-negative");
  for (const auto& t : upper) {
    if (t.row() < 0 || t.col() >= order || t.col() < 0 || t.row() >= order)
      throw DimensionMismatch("triplet index out of range");
    if (t.row() > t.col())
      throw DimensionMismatch("triplets must lie in the upper triangle (row <= col)");
  }
  return SparseSym(mirror_upper(order, upper));
}

SparseSym SparseSym::from_symmetric(const SpMat& m) {
  if (m.rows() != m.cols()) throw DimensionMismatch("matrix must be square");
  // Arithmetic products are symmetric only up to roundoff; keep the upper
  // triangle as the single source of truth.
  std::vector<Triplet> upper;
  upper.reserve(static_cast<std::size_t>(m.nonZeros()) / 2 + m.rows());
  for (int k = 0; k < m.outerSize(); ++k)
    for (SpMat::InnerIterator it(m, k); it; ++it)
      if (it.row() <= it.col()) upper.emplace_back(it.row(), it.col(), it.value());
  return SparseSym(mirror_upper(static_cast<int>(m.rows()), upper));
}

SparseSym SparseSym::diagonal(const Eigen::VectorXd& d) {
  std::vector<Triplet> upper;
  upper.reserve(static_cast<std::size_t>(d.size()));
  for (int i = 0; i < d.size(); ++i) upper.emplace_back(i, i, d[i]);
  return SparseSym(mirror_upper(static_cast<int>(d.size()), upper));
}

SparseSym SparseSym::identity(int order) {
  return diagonal(Eigen::VectorXd::Ones(order));
}

std::int64_t SparseSym::stored_upper() const {
  std::int64_t n = 0;
  for (int k = 0; k < full_.outerSize(); ++k)
    for (SpMat::InnerIterator it(full_, k); it; ++it)
      if (it.row() <= it.col()) ++n;
  return n;
}

Eigen::VectorXd SparseSym::apply(const Eigen::VectorXd& v) const {
  if (v.size() != full_.rows()) throw DimensionMismatch("vector length does not match matrix order");
  return full_ * v;
}

std::vector<Triplet> SparseSym::upper_triplets() const {
  std::vector<Triplet> upper;
  upper.reserve(static_cast<std::size_t>(stored_upper()));
  for (int k = 0; k < full_.outerSize(); ++k)
    for (SpMat::InnerIterator it(full_, k); it; ++it)
      if (it.row() <= it.col()) upper.emplace_back(it.row(), it.col(), it.value());
  return upper;
}

namespace detail {

struct LltImpl {
  Eigen::SimplicialLLT<SpMat, Eigen::Lower> llt;
  int order = 0;
  double logdet = 0.0;

  void analyze(const SpMat& full) {
    order = static_cast<int>(full.rows());
    llt.analyzePattern(full);
  }

  void factorize(const SpMat& full) {
    llt.factorize(full);
    finish();
  }

  void compute(const SpMat& full) {
    order = static_cast<int>(full.rows());
    llt.compute(full);
    finish();
  }

  void finish() {
    if (llt.info() != Eigen::Success)
      throw NotPositiveDefinite("sparse Cholesky factorization failed: matrix is not positive definite");
    const SpMat& L = llt.matrixL().nestedExpression();
    double acc = 0.0;
    for (int j = 0; j < L.outerSize(); ++j) {
      SpMat::InnerIterator it(L, j);  // first stored entry in a lower CSC column is the diagonal
      const double d = (it && it.row() == j) ? it.value() : 0.0;
      if (!(d > 1e-150))
        throw NotPositiveDefinite("sparse Cholesky factorization failed: non-positive pivot");
      acc += std::log(d);
    }
    logdet = 2.0 * acc;
  }
};

}  // namespace detail

int CholFactor::order() const { return impl_->order; }
double CholFactor::log_det() const { return impl_->logdet; }

Eigen::VectorXd CholFactor::solve(const Eigen::VectorXd& rhs) const {
  if (rhs.size() != impl_->order) throw DimensionMismatch("rhs length does not match factored order");
  return impl_->llt.solve(rhs);
}

SpMat CholFactor::lower() const { return impl_->llt.matrixL().nestedExpression(); }

Eigen::VectorXi CholFactor::perm() const { return impl_->llt.permutationP().indices(); }

CholFactor chol_factor(const SparseSym& m) {
  auto impl = std::make_shared<detail::LltImpl>();
  impl->compute(m.full());
  CholFactor f;
  f.impl_ = std::move(impl);
  return f;
}

Eigen::VectorXd solve(const CholFactor& f, const Eigen::VectorXd& rhs) { return f.solve(rhs); }
double log_det(const CholFactor& f) { return f.log_det(); }

Eigen::VectorXd sample_gaussian(const CholFactor& f, const Eigen::VectorXd& mean, RngStream& rng) {
  const int n = f.impl_->order;
  if (mean.size() != n) throw DimensionMismatch("mean length does not match factored order");
  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) z[i] = rng.normal();
  // z lives in permuted coordinates: cov(U⁻¹z) = (LLᵀ)⁻¹; map back with Pᵀ.
  f.impl_->llt.matrixU().solveInPlace(z);
  return f.impl_->llt.permutationPinv() * z + mean;
}

SparseSym selected_inverse(const CholFactor& f) {
  const SpMat L = f.lower();  // compressed CSC, rows sorted within columns
  const int n = static_cast<int>(L.rows());
  const int* outer = L.outerIndexPtr();
  const int* inner = L.innerIndexPtr();
  const double* lval = L.valuePtr();

  // Z holds entries of (P·A·Pᵀ)⁻¹ on the pattern of L (lower triangle).
  std::vector<double> zval(static_cast<std::size_t>(L.nonZeros()), 0.0);

  auto z_at = [&](int r, int c) -> double {
    // binary search row r within column c
    const int* lo = inner + outer[c];
    const int* hi = inner + outer[c + 1];
    const int* pos = std::lower_bound(lo, hi, r);
    if (pos == hi || *pos != r)
      throw PatternNotCovered("selected inverse: entry outside factor pattern");
    return zval[static_cast<std::size_t>(pos - inner)];
  };

  for (int j = n - 1; j >= 0; --j) {
    const int beg = outer[j];
    const int end = outer[j + 1];
    const double dj = lval[beg];  // diagonal entry L(j,j)
    // rows descending so that entries of this column below i are ready
    for (int q = end - 1; q >= beg; --q) {
      const int i = inner[q];
      double acc = 0.0;
      for (int s = beg + 1; s < end; ++s) {  // k > j in column j
        const int k = inner[s];
        // Z(k, i): for i == j these are the column-j entries already filled
        // in this pass (rows descend), otherwise they live in columns > j
        // finished earlier; the filled pattern always covers them.
        acc += lval[s] * z_at(std::max(k, i), std::min(k, i));
      }
      if (i == j)
        zval[static_cast<std::size_t>(q)] = 1.0 / (dj * dj) - acc / dj;
      else
        zval[static_cast<std::size_t>(q)] = -acc / dj;
    }
  }

  // Un-permute: A⁻¹(i,j) = Z(sigma(i), sigma(j)) with sigma = perm().
  const Eigen::VectorXi sigma = f.perm();
  Eigen::VectorXi sigma_inv(n);
  for (int i = 0; i < n; ++i) sigma_inv[sigma[i]] = i;
  std::vector<Triplet> upper;
  upper.reserve(static_cast<std::size_t>(L.nonZeros()));
  for (int j = 0; j < n; ++j) {
    for (int q = outer[j]; q < outer[j + 1]; ++q) {
      const int i = inner[q];
      const int oi = sigma_inv[i];
      const int oj = sigma_inv[j];
      upper.emplace_back(std::min(oi, oj), std::max(oi, oj), zval[static_cast<std::size_t>(q)]);
    }
  }
  return SparseSym::from_triplets(n, upper);
}

CholWorkspace::CholWorkspace() : impl_(std::make_shared<detail::LltImpl>()) {}
CholWorkspace::~CholWorkspace() = default;
CholWorkspace::CholWorkspace(CholWorkspace&&) noexcept = default;
CholWorkspace& CholWorkspace::operator=(CholWorkspace&&) noexcept = default;

CholFactor CholWorkspace::refactorize(const SparseSym& m) {
  const SpMat& full = m.full();
  const int n = static_cast<int>(full.rows());
  const std::int64_t nnz = full.nonZeros();
  std::vector<int> pattern;
  pattern.reserve(static_cast<std::size_t>(n) + 1 + static_cast<std::size_t>(nnz));
  pattern.insert(pattern.end(), full.outerIndexPtr(), full.outerIndexPtr() + n + 1);
  pattern.insert(pattern.end(), full.innerIndexPtr(), full.innerIndexPtr() + nnz);
  if (pattern != pattern_) {
    impl_->analyze(full);
    pattern_ = std::move(pattern);
  }
  impl_->factorize(full);
  CholFactor f;
  f.impl_ = impl_;
  return f;
}

void write_matrix_market(const std::string& path, const SparseSym& m) {
  std::ofstream out(path);
  if (!out) throw MalformedMatrixFile("cannot open " + path + " for writing");
  const auto upper = m.upper_triplets();
  out << "%%MatrixMarket matrix coordinate real symmetric\n";
  out << m.order() << ' ' << m.order() << ' ' << upper.size() << '\n';
  char buf[64];
  for (const auto& t : upper) {
    // symmetric Matrix Market stores the lower triangle, 1-based
    std::snprintf(buf, sizeof buf, "%.17g", t.value());
    out << (t.col() + 1) << ' ' << (t.row() + 1) << ' ' << buf << '\n';
  }
  if (!out) throw MalformedMatrixFile("write failed for " + path);
}

SparseSym read_matrix_market(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MalformedMatrixFile("cannot open " + path);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw MalformedMatrixFile(path + ": empty file");
  ++lineno;
  {
    std::istringstream hs(line);
    std::string banner, object, fmt, field, sym;
    hs >> banner >> object >> fmt >> field >> sym;
    if (banner != "%%MatrixMarket" || object != "matrix" || fmt != "coordinate" ||
        field != "real" || sym != "symmetric")
      throw MalformedMatrixFile(path + ": expected a coordinate real symmetric header");
  }
  long rows = -1, cols = -1, nnz = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line[0] == '%') continue;  // comments
    std::istringstream ss(line);
    if (!(ss >> rows >> cols >> nnz))
      throw MalformedMatrixFile(path + ": bad size line at line " + std::to_string(lineno));
    break;
  }
  if (rows < 0 || rows != cols || nnz < 0)
    throw MalformedMatrixFile(path + ": invalid dimensions");
  std::vector<Triplet> upper;
  upper.reserve(static_cast<std::size_t>(nnz));
  long seen = 0;
  while (seen < nnz) {
    if (!std::getline(in, line))
      throw MalformedMatrixFile(path + ": expected " + std::to_string(nnz) + " entries, got " +
                                std::to_string(seen));
    ++lineno;
    if (line.empty() || line[0] == '%') continue;
    std::istringstream ss(line);
    long i = 0, j = 0;
    double v = 0.0;
    if (!(ss >> i >> j >> v))
      throw MalformedMatrixFile(path + ": bad entry at line " + std::to_string(lineno));
    if (i < 1 || i > rows || j < 1 || j > rows)
      throw MalformedMatrixFile(path + ": index out of range at line " + std::to_string(lineno));
    const int r = static_cast<int>(std::min(i, j)) - 1;
    const int c = static_cast<int>(std::max(i, j)) - 1;
    upper.emplace_back(r, c, v);
    ++seen;
  }
  return SparseSym::from_triplets(static_cast<int>(rows), upper);
}

}  // namespace ngfield
