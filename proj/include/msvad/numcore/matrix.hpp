#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

/// Dense row-major matrix of doubles. Plain value type; shape errors throw.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative dims");
  }

  static Matrix filled(int r, int c, double v) {
    Matrix m(r, c);
    std::fill(m.d.begin(), m.d.end(), v);
    return m;
  }

  bool empty() const { return d.empty(); }
  std::size_t size() const { return d.size(); }

  double& at(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }

  double* row_ptr(int r) { return d.data() + static_cast<std::size_t>(r) * cols; }
  const double* row_ptr(int r) const { return d.data() + static_cast<std::size_t>(r) * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : d)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace detail {
using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EigenRowMajor>;
using MapC = Eigen::Map<const EigenRowMajor>;

inline MapC emap(const Matrix& m) { return MapC(m.d.data(), m.rows, m.cols); }
inline MapM emap(Matrix& m) { return MapM(m.d.data(), m.rows, m.cols); }
}  // namespace detail

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

/// C = A * B
inline Matrix mm(const Matrix& a, const Matrix& b) {
  check_shape(a.cols == b.rows, "mm");
  Matrix c(a.rows, b.cols);
  detail::emap(c).noalias() = detail::emap(a) * detail::emap(b);
  return c;
}

/// C = A * B^T
inline Matrix mm_nt(const Matrix& a, const Matrix& b) {
  check_shape(a.cols == b.cols, "mm_nt");
  Matrix c(a.rows, b.rows);
  detail::emap(c).noalias() = detail::emap(a) * detail::emap(b).transpose();
  return c;
}

/// C = A^T * B
inline Matrix mm_tn(const Matrix& a, const Matrix& b) {
  check_shape(a.rows == b.rows, "mm_tn");
  Matrix c(a.cols, b.cols);
  detail::emap(c).noalias() = detail::emap(a).transpose() * detail::emap(b);
  return c;
}

/// C += A * B
inline void mm_acc(Matrix& c, const Matrix& a, const Matrix& b) {
  check_shape(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols, "mm_acc");
  detail::emap(c).noalias() += detail::emap(a) * detail::emap(b);
}

/// C += A * B^T
inline void mm_nt_acc(Matrix& c, const Matrix& a, const Matrix& b) {
  check_shape(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows, "mm_nt_acc");
  detail::emap(c).noalias() += detail::emap(a) * detail::emap(b).transpose();
}

/// C += A^T * B
inline void mm_tn_acc(Matrix& c, const Matrix& a, const Matrix& b) {
  check_shape(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "mm_tn_acc");
  detail::emap(c).noalias() += detail::emap(a).transpose() * detail::emap(b);
}

inline void axpy(Matrix& y, double alpha, const Matrix& x) {
  check_shape(y.same_shape(x), "axpy");
  for (std::size_t i = 0; i < y.d.size(); ++i) y.d[i] += alpha * x.d[i];
}

}  // namespace msvad
