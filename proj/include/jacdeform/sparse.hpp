#pragma once

#include <Eigen/Core>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "jacdeform/errors.hpp"

namespace jacdeform {

using DenseMatrix = Eigen::MatrixXd;

struct Triplet {
  Eigen::Index row;
  Eigen::Index col;
  double value;
};

// Compressed sparse row matrix. Column indices are sorted and unique per row.
class SparseMatrix {
 public:
  SparseMatrix() : row_offsets_(1, 0) {}
  SparseMatrix(Eigen::Index rows, Eigen::Index cols)
      : rows_(rows), cols_(cols), row_offsets_(static_cast<std::size_t>(rows) + 1, 0) {}

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  std::size_t nonzeros() const { return values_.size(); }

  const std::vector<Eigen::Index>& row_offsets() const { return row_offsets_; }
  const std::vector<Eigen::Index>& col_indices() const { return col_indices_; }
  const std::vector<double>& values() const { return values_; }

  // Value at (i, j); zero when not stored.
  double coeff(Eigen::Index i, Eigen::Index j) const {
    const auto begin = col_indices_.begin() + row_offsets_[i];
    const auto end = col_indices_.begin() + row_offsets_[i + 1];
    const auto it = std::lower_bound(begin, end, j);
    return (it != end && *it == j) ? values_[static_cast<std::size_t>(it - col_indices_.begin())] : 0.0;
  }

  DenseMatrix to_dense() const {
    DenseMatrix d = DenseMatrix::Zero(rows_, cols_);
    for (Eigen::Index i = 0; i < rows_; ++i)
      for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k)
        d(i, col_indices_[k]) += values_[k];
    return d;
  }

  Eigen::SparseMatrix<double> to_eigen() const {
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(values_.size());
    for (Eigen::Index i = 0; i < rows_; ++i)
      for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k)
        t.emplace_back(i, col_indices_[k], values_[k]);
    Eigen::SparseMatrix<double> out(rows_, cols_);
    out.setFromTriplets(t.begin(), t.end());
    return out;
  }

  SparseMatrix transpose() const {
    SparseMatrix out(cols_, rows_);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(cols_) + 1, 0);
    for (Eigen::Index c : col_indices_) ++counts[c + 1];
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    out.row_offsets_ = counts;
    out.col_indices_.resize(values_.size());
    out.values_.resize(values_.size());
    std::vector<Eigen::Index> fill(counts.begin(), counts.end() - 1);
    // Row-major traversal writes each output row in increasing column order.
    for (Eigen::Index i = 0; i < rows_; ++i)
      for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
        const Eigen::Index dst = fill[col_indices_[k]]++;
        out.col_indices_[dst] = i;
        out.values_[dst] = values_[k];
      }
    return out;
  }

  // Multiplies row i by scale[i].
  SparseMatrix scale_rows(const Eigen::VectorXd& scale) const {
    if (scale.size() != rows_) throw InvalidArgumentError("scale_rows: dimension mismatch");
    SparseMatrix out = *this;
    for (Eigen::Index i = 0; i < rows_; ++i)
      for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) out.values_[k] *= scale[i];
    return out;
  }

  // Drops row and column `index` from a square matrix.
  SparseMatrix remove_row_col(Eigen::Index index) const;

  bool is_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  double max_asymmetry() const {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < rows_; ++i)
      for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k)
        worst = std::max(worst, std::abs(values_[k] - coeff(col_indices_[k], i)));
    return worst;
  }

  friend SparseMatrix from_triplets(Eigen::Index rows, Eigen::Index cols, std::vector<Triplet> entries);
  friend SparseMatrix multiply(const SparseMatrix& a, const SparseMatrix& b);

 private:
  Eigen::Index rows_ = 0;
  Eigen::Index cols_ = 0;
  std::vector<Eigen::Index> row_offsets_;
  std::vector<Eigen::Index> col_indices_;
  std::vector<double> values_;
};

// Builds a CSR matrix; duplicate (i, j) entries are summed.
inline SparseMatrix from_triplets(Eigen::Index rows, Eigen::Index cols, std::vector<Triplet> entries) {
  for (const auto& t : entries)
    if (t.row < 0 || t.row >= rows || t.col < 0 || t.col >= cols)
      throw InvalidArgumentError("triplet (" + std::to_string(t.row) + ", " + std::to_string(t.col) +
                                 ") out of range for " + std::to_string(rows) + "x" + std::to_string(cols));
  std::stable_sort(entries.begin(), entries.end(), [](const Triplet& a, const Triplet& b) {
    return std::tie(a.row, a.col) < std::tie(b.row, b.col);
  });
  SparseMatrix out(rows, cols);
  for (std::size_t k = 0; k < entries.size();) {
    const auto r = entries[k].row, c = entries[k].col;
    double sum = 0.0;
    for (; k < entries.size() && entries[k].row == r && entries[k].col == c; ++k) sum += entries[k].value;
    out.col_indices_.push_back(c);
    out.values_.push_back(sum);
    ++out.row_offsets_[r + 1];
  }
  std::partial_sum(out.row_offsets_.begin(), out.row_offsets_.end(), out.row_offsets_.begin());
  return out;
}

inline SparseMatrix identity_matrix(Eigen::Index n) {
  std::vector<Triplet> t;
  for (Eigen::Index i = 0; i < n; ++i) t.push_back({i, i, 1.0});
  return from_triplets(n, n, std::move(t));
}

inline SparseMatrix diagonal_matrix(const Eigen::VectorXd& d) {
  std::vector<Triplet> t;
  for (Eigen::Index i = 0; i < d.size(); ++i) t.push_back({i, i, d[i]});
  return from_triplets(d.size(), d.size(), std::move(t));
}

// Sparse-sparse product (row-wise accumulation with a dense scatter row).
inline SparseMatrix multiply(const SparseMatrix& a, const SparseMatrix& b) {
  if (a.cols() != b.rows())
    throw InvalidArgumentError("multiply: inner dimensions " + std::to_string(a.cols()) + " and " +
                               std::to_string(b.rows()) + " disagree");
  SparseMatrix out(a.rows(), b.cols());
  std::vector<double> acc(static_cast<std::size_t>(b.cols()), 0.0);
  std::vector<char> used(static_cast<std::size_t>(b.cols()), 0);
  std::vector<Eigen::Index> pattern;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    pattern.clear();
    for (Eigen::Index ka = a.row_offsets_[i]; ka < a.row_offsets_[i + 1]; ++ka) {
      const Eigen::Index j = a.col_indices_[ka];
      const double av = a.values_[ka];
      for (Eigen::Index kb = b.row_offsets_[j]; kb < b.row_offsets_[j + 1]; ++kb) {
        const Eigen::Index c = b.col_indices_[kb];
        if (!used[c]) {
          used[c] = 1;
          pattern.push_back(c);
        }
        acc[c] += av * b.values_[kb];
      }
    }
    std::sort(pattern.begin(), pattern.end());
    for (Eigen::Index c : pattern) {
      out.col_indices_.push_back(c);
      out.values_.push_back(acc[c]);
      acc[c] = 0.0;
      used[c] = 0;
    }
    out.row_offsets_[i + 1] = static_cast<Eigen::Index>(out.values_.size());
  }
  return out;
}

// Sparse times dense block.
inline DenseMatrix multiply(const SparseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows())
    throw InvalidArgumentError("multiply: inner dimensions " + std::to_string(a.cols()) + " and " +
                               std::to_string(b.rows()) + " disagree");
  DenseMatrix out = DenseMatrix::Zero(a.rows(), b.cols());
  const auto& off = a.row_offsets();
  const auto& col = a.col_indices();
  const auto& val = a.values();
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = off[i]; k < off[i + 1]; ++k) out.row(i) += val[k] * b.row(col[k]);
  return out;
}

inline SparseMatrix SparseMatrix::remove_row_col(Eigen::Index index) const {
  if (rows_ != cols_) throw InvalidArgumentError("remove_row_col: matrix is not square");
  std::vector<Triplet> t;
  t.reserve(values_.size());
  for (Eigen::Index i = 0; i < rows_; ++i) {
    if (i == index) continue;
    for (Eigen::Index k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      const Eigen::Index j = col_indices_[k];
      if (j == index) continue;
      t.push_back({i < index ? i : i - 1, j < index ? j : j - 1, values_[k]});
    }
  }
  return from_triplets(rows_ - 1, cols_ - 1, std::move(t));
}

// ---------------------------------------------------------------------------
// SPD solves. The direct path is a simplicial Cholesky with approximate minimum
// degree ordering; the iterative path is Jacobi-preconditioned CG.

enum class SolverKind { Cholesky, ConjugateGradient };

struct SolverOptions {
  SolverKind kind = SolverKind::Cholesky;
  double cg_tolerance = 1e-13;
  int cg_max_iterations = 0;  // 0: 10 * n
  // Pivot ratio below which the matrix is reported as not positive definite.
  double min_pivot_ratio = 1e-13;
};

class SpdFactor {
 public:
  Eigen::Index size() const { return size_; }
  SolverKind kind() const { return options_.kind; }

  // Solves A X = B column by column.
  DenseMatrix solve(const DenseMatrix& rhs) const {
    if (rhs.rows() != size_)
      throw InvalidArgumentError("solve: rhs has " + std::to_string(rhs.rows()) + " rows, factor is " +
                                 std::to_string(size_));
    if (options_.kind == SolverKind::Cholesky) {
      DenseMatrix x = llt_->solve(rhs);
      return x;
    }
    DenseMatrix x(rhs.rows(), rhs.cols());
    for (Eigen::Index c = 0; c < rhs.cols(); ++c) {
      if (rhs.col(c).squaredNorm() == 0.0) {
        x.col(c).setZero();
        continue;
      }
      x.col(c) = cg_->solve(rhs.col(c));
      if (cg_->info() != Eigen::Success)
        throw NumericalError("conjugate gradient did not converge (error " + std::to_string(cg_->error()) + ")");
    }
    return x;
  }

  friend SpdFactor cholesky(const SparseMatrix& a, const SolverOptions& options);

 private:
  using Llt = Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>>;
  using Cg = Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                                      Eigen::DiagonalPreconditioner<double>>;
  Eigen::Index size_ = 0;
  SolverOptions options_;
  std::shared_ptr<const Eigen::SparseMatrix<double>> matrix_;
  std::shared_ptr<Llt> llt_;
  std::shared_ptr<Cg> cg_;
};

inline SpdFactor cholesky(const SparseMatrix& a, const SolverOptions& options = {}) {
  if (a.rows() != a.cols()) throw InvalidArgumentError("cholesky: matrix is not square");
  if (!a.is_finite()) throw NumericalError("cholesky: matrix has non-finite entries");
  SpdFactor f;
  f.size_ = a.rows();
  f.options_ = options;
  f.matrix_ = std::make_shared<const Eigen::SparseMatrix<double>>(a.to_eigen());
  const Eigen::VectorXd diag = f.matrix_->diagonal();
  const double max_diag = diag.size() ? diag.maxCoeff() : 0.0;
  if (diag.size() && !(diag.minCoeff() > 0.0))
    throw NumericalError("matrix is not SPD: non-positive diagonal entry");

  if (options.kind == SolverKind::Cholesky) {
    f.llt_ = std::make_shared<SpdFactor::Llt>();
    f.llt_->compute(*f.matrix_);
    if (f.llt_->info() != Eigen::Success)
      throw NumericalError("matrix is not SPD: non-positive pivot during Cholesky factorization");
    // A singular PSD matrix can survive factorization with a round-off pivot.
    const Eigen::VectorXd l_diag = Eigen::SparseMatrix<double>(f.llt_->matrixL()).diagonal();
    const double min_pivot = l_diag.size() ? l_diag.cwiseAbs2().minCoeff() : 1.0;
    if (!(min_pivot > options.min_pivot_ratio * max_diag))
      throw NumericalError("matrix is not SPD: pivot " + std::to_string(min_pivot) +
                           " is negligible relative to the diagonal");
  } else {
    f.cg_ = std::make_shared<SpdFactor::Cg>();
    f.cg_->setTolerance(options.cg_tolerance);
    f.cg_->setMaxIterations(options.cg_max_iterations > 0 ? options.cg_max_iterations
                                                          : static_cast<int>(10 * a.rows() + 100));
    f.cg_->compute(*f.matrix_);
  }
  return f;
}

inline DenseMatrix solve(const SpdFactor& factor, const DenseMatrix& rhs) { return factor.solve(rhs); }

}  // namespace jacdeform
