#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fips {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

// Row-major matrix of doubles. The buffer always holds rows * cols entries.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& buffer() const noexcept { return data_; }

  bool all_finite() const noexcept;

  // Columns [begin, begin + count) as a new matrix.
  DenseMatrix col_block(std::size_t begin, std::size_t count) const;
  // Rows [begin, begin + count) as a new matrix.
  DenseMatrix row_block(std::size_t begin, std::size_t count) const;
  void set_col_block(std::size_t begin, const DenseMatrix& block);
  void set_row_block(std::size_t begin, const DenseMatrix& block);

  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double s);

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(DenseMatrix a, double s);

// a * b with a fixed i-k-j accumulation order.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// aᵀ * b without materializing the transpose.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
// a * bᵀ without materializing the transpose.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& m);

double frobenius_norm(const DenseMatrix& m);
double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b);
// Mean over all entries of (a - b)^2.
double frobenius_mse(const DenseMatrix& a, const DenseMatrix& b);

// Horizontal / vertical concatenation.
DenseMatrix hconcat(std::span<const DenseMatrix> parts);
DenseMatrix vconcat(std::span<const DenseMatrix> parts);

struct SvdResult {
  DenseMatrix u;                        // d x r, orthonormal columns
  std::vector<double> singular_values;  // length r, nonincreasing
  DenseMatrix v_t;                      // r x m, orthonormal rows

  DenseMatrix reconstruct() const;
};

struct SvdOptions {
  int max_sweeps = 200;
  double tolerance = 1e-12;  // relative to ||m||_F
};

// Top-`rank` singular triples via one-sided Jacobi on the smaller dimension.
// Sign convention: the largest-magnitude entry of every left singular vector
// is positive.
SvdResult truncated_svd(const DenseMatrix& m, std::size_t rank, const SvdOptions& opts = {});

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  std::size_t index(std::size_t n);
  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

DenseMatrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev);
// He initialization: std = sqrt(2 / fan_in).
inline double kaiming_std(std::size_t fan_in) {
  return fan_in == 0 ? 0.0 : std::sqrt(2.0 / static_cast<double>(fan_in));
}

// n x k matrix with orthonormal columns (k <= n), Gram-Schmidt on a Gaussian draw.
DenseMatrix random_orthonormal(Rng& rng, std::size_t n, std::size_t k);

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what);
std::string shape_str(const DenseMatrix& m);

}  // namespace fips
