#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fips/linalg.hpp"

namespace fips {

// Boolean matrix, one byte per entry in memory; packed to bits on disk.
class Bitmask {
 public:
  Bitmask() = default;
  Bitmask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  static Bitmask full_like(const DenseMatrix& m) { return Bitmask(m.rows(), m.cols(), true); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool operator[](std::size_t flat) const { return bits_[flat] != 0; }
  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t flat, bool on) { bits_[flat] = on ? 1 : 0; }
  void set(std::size_t r, std::size_t c, bool on) { set(r * cols_ + c, on); }

  std::size_t popcount() const noexcept;
  double density() const noexcept;

  friend bool operator==(const Bitmask&, const Bitmask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed };
  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Dense values plus an activity mask. Inactive entries hold exactly 0.
class MaskedMatrix {
 public:
  MaskedMatrix() = default;
  explicit MaskedMatrix(DenseMatrix values);
  MaskedMatrix(DenseMatrix values, Bitmask mask);

  const DenseMatrix& values() const noexcept { return values_; }
  const Bitmask& mask() const noexcept { return mask_; }
  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t cols() const noexcept { return values_.cols(); }

  double density() const noexcept { return mask_.density(); }
  std::size_t active_count() const noexcept { return mask_.popcount(); }

  // Replaces the mask and zeroes every newly inactive entry.
  void set_mask(Bitmask mask);
  // Replaces the values; inactive entries are zeroed.
  void set_values(DenseMatrix values);
  // Mutable access for optimizers. Callers must re-establish the invariant
  // via enforce() if they write to inactive positions.
  DenseMatrix& mutable_values() noexcept { return values_; }
  void enforce();

  friend bool operator==(const MaskedMatrix&, const MaskedMatrix&) = default;

 private:
  DenseMatrix values_;
  Bitmask mask_;
};

MaskedMatrix apply_mask(MaskedMatrix m);

// Keeps ceil(density * size) entries of largest magnitude; ties go to the
// lowest row-major index.
Bitmask topk_mask_local(const DenseMatrix& values, double density);

// One magnitude ranking pooled over every entry of every matrix. Ties go to
// the lower matrix index, then the lower row-major index.
std::vector<Bitmask> topk_mask_global(std::span<const DenseMatrix> matrices, double density);

// ceil(density * total), clamped to [0, total]; exact for densities that are
// a representable fraction of total.
std::size_t kept_count(double density, std::size_t total);

// Layout: u32 rows, u32 cols (little-endian), then ceil(rows*cols/8) bytes,
// bit k of byte b is row-major entry 8b + k.
std::vector<std::uint8_t> serialize_bitmask(const Bitmask& mask);
// Reads one mask from the front of `bytes`; `consumed` receives the byte count.
Bitmask deserialize_bitmask(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);

}  // namespace fips
