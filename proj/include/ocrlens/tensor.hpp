#pragma once

// Dense linear algebra used across the engine: a row-major double matrix,
// products, covariance, a cyclic Jacobi eigensolver and PCA helpers.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace ocrlens {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  Matrix transposed() const;
  bool all_finite() const;

  // Appends the rows of `other`; column counts must agree.
  void append_rows(const Matrix& other);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a · bᵀ
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& target, const Matrix& addend);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);

struct EigenResult {
  std::vector<double> eigenvalues;  // non-increasing
  Matrix eigenvectors;              // column i pairs with eigenvalues[i]
  bool has_ties = false;            // some adjacent pair within 1e-10 of the spectrum scale
  int sweeps = 0;
};

// Cyclic Jacobi. Stops when the off-diagonal norm is at most 1e-12·‖m‖_F or
// after 100 sweeps. Each eigenvector is signed so its largest-magnitude entry
// is positive. Throws NonSymmetric / NonFinite / DimensionMismatch.
EigenResult symmetric_eigendecomposition(const Matrix& m);

struct Covariance {
  Matrix cov;                // d×d, exactly symmetric
  std::vector<double> mean;  // column means
};

// samples is n×d. With center set, cov = Σ (x−μ)(x−μ)ᵀ / (n−1); without it the
// second moment about the origin with the same normalisation.
Covariance covariance(const Matrix& samples, bool center = true);

struct PrincipalComponents {
  Matrix components;                    // k×d, unit-norm rows
  std::vector<double> variance_ratios;  // λ_i / trace
  std::vector<double> eigenvalues;
  double trace = 0.0;
  bool has_ties = false;
};

inline constexpr double kDegenerateTrace = 1e-12;

PrincipalComponents top_k_components(const Matrix& cov, std::size_t k);

// Modified Gram–Schmidt (two passes) over rows. A row whose residual norm
// falls below `tolerance` raises DegenerateData.
Matrix orthonormalize_rows(const Matrix& rows, double tolerance = 1e-10);

// Haar-ish random rotation from a Gaussian matrix, orthonormalised.
Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng);

// Portable standard normal (Box–Muller over mt19937_64) so seeded streams are
// identical across standard libraries.
double standard_normal(std::mt19937_64& rng);
double uniform01(std::mt19937_64& rng);

}  // namespace ocrlens
