#include "fips/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fips {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("DenseMatrix: buffer length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("DenseMatrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool DenseMatrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

DenseMatrix DenseMatrix::col_block(std::size_t begin, std::size_t count) const {
  if (begin + count > cols_) throw ShapeError("col_block: range exceeds " + shape_str(*this));
  DenseMatrix out(rows_, count);
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin), count,
                out.data_.begin() + static_cast<std::ptrdiff_t>(r * count));
  }
  return out;
}

DenseMatrix DenseMatrix::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) throw ShapeError("row_block: range exceeds " + shape_str(*this));
  std::vector<double> buf(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                          data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols_));
  return DenseMatrix(count, cols_, std::move(buf));
}

void DenseMatrix::set_col_block(std::size_t begin, const DenseMatrix& block) {
  if (block.rows_ != rows_ || begin + block.cols_ > cols_) {
    throw ShapeError("set_col_block: " + shape_str(block) + " does not fit " + shape_str(*this));
  }
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(block.data_.begin() + static_cast<std::ptrdiff_t>(r * block.cols_), block.cols_,
                data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin));
  }
}

void DenseMatrix::set_row_block(std::size_t begin, const DenseMatrix& block) {
  if (block.cols_ != cols_ || begin + block.rows_ > rows_) {
    throw ShapeError("set_row_block: " + shape_str(block) + " does not fit " + shape_str(*this));
  }
  std::copy(block.data_.begin(), block.data_.end(),
            data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_));
}

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(DenseMatrix a, double s) { return a *= s; }

std::string shape_str(const DenseMatrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  DenseMatrix c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto crow = c.row(i);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a(i, kk);
      if (aik == 0.0) continue;
      auto brow = b.row(kk);
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a) + "^T x " + shape_str(b));
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  DenseMatrix c(n, m);
  for (std::size_t kk = 0; kk < k; ++kk) {
    auto arow = a.row(kk);
    auto brow = b.row(kk);
    for (std::size_t i = 0; i < n; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < m; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  DenseMatrix c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c(i, j) = acc;
    }
  }
  return c;
}

DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

double frobenius_norm(const DenseMatrix& m) {
  double acc = 0.0;
  for (double x : m.data()) acc += x * x;
  return std::sqrt(acc);
}

double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "frobenius_distance");
  double acc = 0.0;
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da[i] - db[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

double frobenius_mse(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "frobenius_mse");
  if (a.empty()) return 0.0;
  double acc = 0.0;
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da[i] - db[i];
    acc += d * d;
  }
  return acc / static_cast<double>(da.size());
}

DenseMatrix hconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("hconcat: row count mismatch");
    cols += p.cols();
  }
  DenseMatrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    out.set_col_block(off, p);
    off += p.cols();
  }
  return out;
}

DenseMatrix vconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vconcat: column count mismatch");
    rows += p.rows();
  }
  DenseMatrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    out.set_row_block(off, p);
    off += p.rows();
  }
  return out;
}

DenseMatrix SvdResult::reconstruct() const {
  DenseMatrix scaled = u;
  for (std::size_t r = 0; r < scaled.rows(); ++r)
    for (std::size_t c = 0; c < scaled.cols(); ++c) scaled(r, c) *= singular_values[c];
  return matmul(scaled, v_t);
}

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Modified Gram-Schmidt over `vecs` in order; vectors that collapse are
// replaced by canonical basis vectors orthogonalized against the rest.
void orthonormalize(std::vector<Vec>& vecs) {
  if (vecs.empty()) return;
  const std::size_t len = vecs.front().size();
  std::size_t next_canonical = 0;
  for (std::size_t j = 0; j < vecs.size(); ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double proj = dot(vecs[i], vecs[j]);
        for (std::size_t t = 0; t < len; ++t) vecs[j][t] -= proj * vecs[i][t];
      }
    }
    double nrm = std::sqrt(dot(vecs[j], vecs[j]));
    while (nrm < 1e-8) {
      if (next_canonical >= len) throw ConvergenceError("orthonormalize: basis exhausted", nrm);
      std::fill(vecs[j].begin(), vecs[j].end(), 0.0);
      vecs[j][next_canonical++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < j; ++i) {
          const double proj = dot(vecs[i], vecs[j]);
          for (std::size_t t = 0; t < len; ++t) vecs[j][t] -= proj * vecs[i][t];
        }
      }
      nrm = std::sqrt(dot(vecs[j], vecs[j]));
    }
    for (auto& x : vecs[j]) x /= nrm;
  }
}

}  // namespace

SvdResult truncated_svd(const DenseMatrix& m, std::size_t rank, const SvdOptions& opts) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (rank < 1 || rank > std::min(rows, cols)) {
    throw ShapeError("truncated_svd: rank " + std::to_string(rank) + " out of range for " +
                     shape_str(m));
  }
  // Work on the columns of a tall matrix B (len x n, n <= len). Each
  // working vector is one column of B, stored contiguously.
  const bool wide = rows <= cols;
  const std::size_t n = wide ? rows : cols;
  const std::size_t len = wide ? cols : rows;
  std::vector<Vec> work(n, Vec(len));
  if (wide) {
    for (std::size_t j = 0; j < n; ++j) {
      auto r = m.row(j);
      std::copy(r.begin(), r.end(), work[j].begin());
    }
  } else {
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < n; ++j) work[j][i] = m(i, j);
  }
  std::vector<Vec> rot(n, Vec(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) rot[j][j] = 1.0;

  const double fro = frobenius_norm(m);
  const double fro2 = fro * fro;
  double residual = 0.0;
  bool converged = fro2 == 0.0;
  for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
    double off2 = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& wp = work[p];
        auto& wq = work[q];
        const double app = dot(wp, wp);
        const double aqq = dot(wq, wq);
        const double apq = dot(wp, wq);
        off2 += apq * apq;
        if (apq == 0.0 || std::abs(apq) <= opts.tolerance * std::sqrt(app * aqq)) continue;
        rotated = true;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < len; ++i) {
          const double xp = wp[i], xq = wq[i];
          wp[i] = c * xp - s * xq;
          wq[i] = s * xp + c * xq;
        }
        auto& rp = rot[p];
        auto& rq = rot[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = rp[i], xq = rq[i];
          rp[i] = c * xp - s * xq;
          rq[i] = s * xp + c * xq;
        }
      }
    }
    residual = std::sqrt(off2) / fro2;
    converged = !rotated || residual < opts.tolerance * 1e-3;
  }
  if (!converged) {
    throw ConvergenceError("truncated_svd: no convergence after " +
                               std::to_string(opts.max_sweeps) + " sweeps",
                           residual);
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(work[j], work[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  // Columns of B·R normalized give one side; R gives the other.
  std::vector<Vec> long_side(n), short_side(n);
  std::vector<double> sorted_sigma(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    sorted_sigma[k] = sigma[j];
    long_side[k] = work[j];
    if (sigma[j] > 0.0)
      for (auto& x : long_side[k]) x /= sigma[j];
    short_side[k] = rot[j];
  }
  orthonormalize(long_side);

  SvdResult out;
  out.singular_values.assign(sorted_sigma.begin(), sorted_sigma.begin() + static_cast<std::ptrdiff_t>(rank));
  out.u = DenseMatrix(rows, rank);
  out.v_t = DenseMatrix(rank, cols);
  // wide:  m = R Σ Lᵀ  -> u = R, v_t = Lᵀ
  // tall:  m = L Σ Rᵀ  -> u = L, v_t = Rᵀ
  const auto& left = wide ? short_side : long_side;
  const auto& right = wide ? long_side : short_side;
  for (std::size_t k = 0; k < rank; ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < rows; ++i)
      if (std::abs(left[k][i]) > std::abs(left[k][arg])) arg = i;
    const double sign = left[k][arg] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = sign * left[k][i];
    for (std::size_t i = 0; i < cols; ++i) out.v_t(k, i) = sign * right[k][i];
  }
  return out;
}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  return dist(engine_);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(engine_);
}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

DenseMatrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  if (stddev < 0.0) throw std::invalid_argument("gaussian_matrix: negative stddev");
  DenseMatrix m(rows, cols);
  if (stddev == 0.0) return m;
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : m.data()) x = dist(rng.engine());
  return m;
}

DenseMatrix random_orthonormal(Rng& rng, std::size_t n, std::size_t k) {
  if (k > n) throw ShapeError("random_orthonormal: k > n");
  std::vector<Vec> cols(k, Vec(n));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& c : cols)
    for (auto& x : c) x = dist(rng.engine());
  orthonormalize(cols);
  DenseMatrix q(n, k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) q(i, j) = cols[j][i];
  return q;
}

}  // namespace fips
