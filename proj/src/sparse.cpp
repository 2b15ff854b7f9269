#include "fips/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace fips {

std::size_t Bitmask::popcount() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

double Bitmask::density() const noexcept {
  return bits_.empty() ? 0.0 : static_cast<double>(popcount()) / static_cast<double>(bits_.size());
}

MaskedMatrix::MaskedMatrix(DenseMatrix values)
    : values_(std::move(values)), mask_(Bitmask::full_like(values_)) {}

MaskedMatrix::MaskedMatrix(DenseMatrix values, Bitmask mask)
    : values_(std::move(values)), mask_(std::move(mask)) {
  if (mask_.rows() != values_.rows() || mask_.cols() != values_.cols()) {
    throw ShapeError("MaskedMatrix: mask shape does not match values " + shape_str(values_));
  }
  enforce();
}

void MaskedMatrix::set_mask(Bitmask mask) {
  if (mask.rows() != values_.rows() || mask.cols() != values_.cols()) {
    throw ShapeError("MaskedMatrix::set_mask: shape mismatch with " + shape_str(values_));
  }
  mask_ = std::move(mask);
  enforce();
}

void MaskedMatrix::set_values(DenseMatrix values) {
  require_same_shape(values, values_, "MaskedMatrix::set_values");
  values_ = std::move(values);
  enforce();
}

void MaskedMatrix::enforce() {
  auto v = values_.data();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!mask_[i]) v[i] = 0.0;
}

MaskedMatrix apply_mask(MaskedMatrix m) {
  m.enforce();
  return m;
}

std::size_t kept_count(double density, std::size_t total) {
  // The 1e-9 slack absorbs round-off in densities computed as 1 - sparsity.
  const double raw = std::ceil(density * static_cast<double>(total) - 1e-9);
  if (raw <= 0.0) return 0;
  return std::min(total, static_cast<std::size_t>(raw));
}

namespace {

void check_density(double density) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw std::invalid_argument("density must lie in (0, 1], got " + std::to_string(density));
  }
}

}  // namespace

Bitmask topk_mask_local(const DenseMatrix& values, double density) {
  check_density(density);
  const std::size_t total = values.size();
  const std::size_t keep = kept_count(density, total);
  Bitmask mask(values.rows(), values.cols());
  if (keep == total) return Bitmask(values.rows(), values.cols(), true);
  auto v = values.data();
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(v[a]), mb = std::abs(v[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), before);
  for (std::size_t k = 0; k < keep; ++k) mask.set(idx[k], true);
  return mask;
}

std::vector<Bitmask> topk_mask_global(std::span<const DenseMatrix> matrices, double density) {
  check_density(density);
  if (matrices.empty()) throw std::invalid_argument("topk_mask_global: empty matrix list");
  struct Entry {
    double mag;
    std::uint32_t matrix;
    std::size_t flat;
  };
  std::vector<Entry> pool;
  std::size_t total = 0;
  for (const auto& m : matrices) total += m.size();
  pool.reserve(total);
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    auto v = matrices[i].data();
    for (std::size_t f = 0; f < v.size(); ++f)
      pool.push_back({std::abs(v[f]), static_cast<std::uint32_t>(i), f});
  }
  const std::size_t keep = kept_count(density, total);
  auto before = [](const Entry& a, const Entry& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (a.matrix != b.matrix) return a.matrix < b.matrix;
    return a.flat < b.flat;
  };
  if (keep < total) {
    std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), before);
  }
  std::vector<Bitmask> masks;
  masks.reserve(matrices.size());
  for (const auto& m : matrices) masks.emplace_back(m.rows(), m.cols());
  for (std::size_t k = 0; k < keep; ++k) masks[pool[k].matrix].set(pool[k].flat, true);
  return masks;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[at + b]) << (8 * b);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_bitmask(const Bitmask& mask) {
  std::vector<std::uint8_t> out;
  const std::size_t n = mask.size();
  out.reserve(8 + (n + 7) / 8);
  put_u32(out, static_cast<std::uint32_t>(mask.rows()));
  put_u32(out, static_cast<std::uint32_t>(mask.cols()));
  out.resize(8 + (n + 7) / 8, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) out[8 + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

Bitmask deserialize_bitmask(std::span<const std::uint8_t> bytes, std::size_t* consumed) {
  if (bytes.size() < 8) throw FormatError(FormatError::Kind::Truncated, "bitmask: missing shape header");
  const std::size_t rows = get_u32(bytes, 0), cols = get_u32(bytes, 4);
  const std::size_t n = rows * cols;
  const std::size_t need = 8 + (n + 7) / 8;
  if (bytes.size() < need) {
    throw FormatError(FormatError::Kind::Truncated,
                      "bitmask: need " + std::to_string(need) + " bytes, have " + std::to_string(bytes.size()));
  }
  Bitmask mask(rows, cols);
  for (std::size_t i = 0; i < n; ++i) mask.set(i, (bytes[8 + i / 8] >> (i % 8)) & 1u);
  if (consumed) *consumed = need;
  return mask;
}

}  // namespace fips
