#include "ocrlens/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "ocrlens/error.hpp"

namespace ocrlens {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

Eigen::Map<RowMajor> view(Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::DimensionMismatch,
                "matrix data length " + std::to_string(data_.size()) + " != " +
                    std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorCode::DimensionMismatch, "ragged matrix literal");
    std::copy(row.begin(), row.end(), m.row(i++).begin());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::append_rows(const Matrix& other) {
  if (empty() && rows_ == 0) cols_ = other.cols_;
  if (other.cols_ != cols_) throw Error(ErrorCode::DimensionMismatch, "append_rows column mismatch");
  data_.insert(data_.end(), other.data_.begin(), other.data_.end());
  rows_ += other.rows_;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "matmul " + std::to_string(a.rows()) + "x" +
                                                  std::to_string(a.cols()) + " by " +
                                                  std::to_string(b.rows()) + "x" +
                                                  std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  if (out.empty() || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::DimensionMismatch, "matmul_transposed");
  Matrix out(a.rows(), b.rows());
  if (out.empty() || a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

void add_in_place(Matrix& target, const Matrix& addend) {
  if (target.rows() != addend.rows() || target.cols() != addend.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "add_in_place");
  }
  auto t = target.data();
  auto a = addend.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += a[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm(const Matrix& m) { return norm(m.data()); }

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::abs(v));
  return best;
}

EigenResult symmetric_eigendecomposition(const Matrix& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n) throw Error(ErrorCode::DimensionMismatch, "eigendecomposition needs a square matrix");
  if (!m.all_finite()) throw Error(ErrorCode::NonFinite, "matrix has non-finite entries");
  const double scale_abs = max_abs(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(m(i, j) - m(j, i)) > 1e-9 * scale_abs) {
        throw Error(ErrorCode::NonSymmetric, "entries (" + std::to_string(i) + "," +
                                                 std::to_string(j) + ") differ beyond tolerance");
      }
    }
  }

  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));
  Matrix v = Matrix::identity(n);

  const double fro = frobenius_norm(a);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  int sweeps = 0;
  while (sweeps < 100 && off_norm() > 1e-12 * fro) {
    ++sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigenResult result;
  result.sweeps = sweeps;
  result.eigenvalues.resize(n);
  result.eigenvectors = Matrix(n, n);
  double spectrum_scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[i];
    result.eigenvalues[i] = a(src, src);
    spectrum_scale += std::abs(a(src, src));
    std::size_t pivot = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(v(k, src)) > std::abs(v(pivot, src))) pivot = k;
    const double sign = v(pivot, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) result.eigenvectors(k, i) = sign * v(k, src);
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (std::abs(result.eigenvalues[i] - result.eigenvalues[i + 1]) <= 1e-10 * spectrum_scale) {
      result.has_ties = true;
    }
  }
  return result;
}

Covariance covariance(const Matrix& samples, bool center) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  if (n < 2) throw Error(ErrorCode::TooFewSamples, "covariance needs at least 2 samples, got " + std::to_string(n));
  if (d < 1) throw Error(ErrorCode::DimensionMismatch, "covariance needs at least one column");

  Covariance out;
  out.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = samples.row(r);
    for (std::size_t c = 0; c < d; ++c) out.mean[c] += row[c];
  }
  for (double& m : out.mean) m /= static_cast<double>(n);

  Matrix centered = samples;
  if (center) {
    for (std::size_t r = 0; r < n; ++r) {
      auto row = centered.row(r);
      for (std::size_t c = 0; c < d; ++c) row[c] -= out.mean[c];
    }
  }
  Matrix cov(d, d);
  view(cov).noalias() = view(centered).transpose() * view(centered);
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      const double value = 0.5 * (cov(i, j) + cov(j, i)) * inv;
      cov(i, j) = value;
      cov(j, i) = value;
    }
  }
  out.cov = std::move(cov);
  return out;
}

PrincipalComponents top_k_components(const Matrix& cov, std::size_t k) {
  const std::size_t d = cov.rows();
  if (cov.cols() != d) throw Error(ErrorCode::DimensionMismatch, "covariance must be square");
  if (k < 1 || k > d) {
    throw Error(ErrorCode::KOutOfRange, "k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov(i, i);
  if (!(trace > kDegenerateTrace)) {
    throw Error(ErrorCode::DegenerateData, "covariance trace " + std::to_string(trace) + " carries no signal");
  }
  EigenResult eig = symmetric_eigendecomposition(cov);

  PrincipalComponents out;
  out.trace = trace;
  out.has_ties = eig.has_ties;
  out.components = Matrix(k, d);
  out.eigenvalues.assign(eig.eigenvalues.begin(), eig.eigenvalues.begin() + static_cast<std::ptrdiff_t>(k));
  out.variance_ratios.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < d; ++c) out.components(i, c) = eig.eigenvectors(c, i);
    out.variance_ratios[i] = std::clamp(eig.eigenvalues[i] / trace, 0.0, 1.0);
  }
  return out;
}

Matrix orthonormalize_rows(const Matrix& rows, double tolerance) {
  Matrix out = rows;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto ri = out.row(i);
    const double original = norm(ri);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        auto rj = out.row(j);
        const double proj = dot(ri, rj);
        for (std::size_t c = 0; c < ri.size(); ++c) ri[c] -= proj * rj[c];
      }
    }
    const double len = norm(ri);
    if (!(len > tolerance) || !(len > tolerance * original)) {
      throw Error(ErrorCode::DegenerateData, "row " + std::to_string(i) + " is linearly dependent");
    }
    for (double& x : ri) x /= len;
  }
  return out;
}

Matrix random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  Matrix g(n, n);
  for (double& x : g.data()) x = standard_normal(rng);
  return orthonormalize_rows(g, 1e-10);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace ocrlens
