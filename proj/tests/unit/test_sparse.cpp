#include <doctest.h>

#include <random>

#include "../oracles.hpp"
#include "fips/sparse.hpp"

using namespace fips;

namespace {

Bitmask random_mask(std::mt19937_64& gen, std::size_t r, std::size_t c, double p = 0.5) {
  std::bernoulli_distribution on(p);
  Bitmask m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, on(gen));
  return m;
}

std::size_t nonzeros(const DenseMatrix& m) {
  std::size_t n = 0;
  for (double x : m.data()) n += x != 0.0;
  return n;
}

std::vector<std::size_t> kept(const Bitmask& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("apply_mask: full, empty and random masks") {
  std::mt19937_64 gen(21);
  const DenseMatrix v = oracle::random_matrix(gen, 6, 9);

  const MaskedMatrix full = apply_mask(MaskedMatrix(v, Bitmask::full_like(v)));
  CHECK(full.values() == v);

  const MaskedMatrix empty = apply_mask(MaskedMatrix(v, Bitmask(6, 9, false)));
  CHECK(nonzeros(empty.values()) == 0);
  CHECK(empty.density() == 0.0);

  const Bitmask mask = random_mask(gen, 6, 9);
  const MaskedMatrix m = apply_mask(MaskedMatrix(v, mask));
  CHECK(nonzeros(m.values()) == mask.popcount());
  CHECK(apply_mask(m) == m);
}

TEST_CASE("MaskedMatrix: inactive entries stay zero after mutation") {
  std::mt19937_64 gen(22);
  MaskedMatrix m(oracle::random_matrix(gen, 4, 5));
  CHECK(m.density() == 1.0);
  const Bitmask mask = random_mask(gen, 4, 5);
  m.set_mask(mask);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) CHECK(m.values().data()[i] == 0.0);
  m.set_values(oracle::random_matrix(gen, 4, 5));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) CHECK(m.values().data()[i] == 0.0);
  m.mutable_values().data()[0] = 7.0;
  m.enforce();
  CHECK(m.values().data()[0] == (mask[0] ? 7.0 : 0.0));
  CHECK_THROWS_AS(m.set_mask(Bitmask(5, 4)), ShapeError);
}

TEST_CASE("topk_mask_local: hand cases") {
  const Bitmask m = topk_mask_local(DenseMatrix{{3, -1}, {0.5, 2}}, 0.5);
  CHECK(kept(m) == std::vector<std::size_t>{0, 3});

  const Bitmask tie = topk_mask_local(DenseMatrix{{1, 1}, {1, 1}}, 0.25);
  CHECK(kept(tie) == std::vector<std::size_t>{0});

  CHECK_THROWS_AS(topk_mask_local(DenseMatrix{{1}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(topk_mask_local(DenseMatrix{{1}}, 1.5), std::invalid_argument);
}

TEST_CASE("topk_mask_local: full sort oracle on 32x32") {
  std::mt19937_64 gen(23);
  const DenseMatrix v = oracle::random_matrix(gen, 32, 32);
  const Bitmask m = topk_mask_local(v, 0.1);
  CHECK(m.popcount() == oracle::ceil_count(0.1, 1024));
  CHECK(kept(m) == oracle::full_sort_topk(v.data(), oracle::ceil_count(0.1, 1024)));
  double min_kept = 1e300, max_dropped = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m[i]) min_kept = std::min(min_kept, std::abs(v.data()[i]));
    else max_dropped = std::max(max_dropped, std::abs(v.data()[i]));
  }
  CHECK(min_kept >= max_dropped);
}

TEST_CASE("property: top-k count, density 1 and ties with quantized values") {
  std::mt19937_64 gen(24);
  std::uniform_int_distribution<int> q(-3, 3);
  std::uniform_real_distribution<double> dens(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    DenseMatrix v(1 + trial % 7, 1 + trial % 11);
    for (auto& x : v.data()) x = q(gen);
    const double d = dens(gen);
    const Bitmask m = topk_mask_local(v, d);
    CHECK(m.popcount() == oracle::ceil_count(d, v.size()));
    CHECK(kept(m) == oracle::full_sort_topk(v.data(), oracle::ceil_count(d, v.size())));
    CHECK(topk_mask_local(v, 1.0) == Bitmask::full_like(v));
  }
  CHECK(kept_count(0.25, 8) == 2);
  CHECK(kept_count(0.1, 1024) == 103);
  CHECK(kept_count(1.0, 17) == 17);
}

TEST_CASE("topk_mask_global: hand cases and pooled-sort oracle") {
  const DenseMatrix big{{10, 10}, {10, 10}}, small{{1, 1}, {1, 1}};
  const DenseMatrix pair[] = {big, small};
  const auto masks = topk_mask_global(pair, 0.5);
  CHECK(masks[0].popcount() == 4);
  CHECK(masks[1].popcount() == 0);

  std::mt19937_64 gen(25);
  const DenseMatrix a = oracle::random_matrix(gen, 5, 6);
  const DenseMatrix same[] = {a, a};
  const auto twins = topk_mask_global(same, 0.3);
  CHECK(twins[0] == twins[1]);

  const DenseMatrix triple[] = {oracle::random_matrix(gen, 4, 7), oracle::random_matrix(gen, 3, 3, 2.0),
                                oracle::random_matrix(gen, 6, 2, 0.5)};
  std::vector<double> pooled;
  for (const auto& m : triple) pooled.insert(pooled.end(), m.data().begin(), m.data().end());
  const std::size_t k = oracle::ceil_count(0.4, pooled.size());
  const auto want = oracle::full_sort_topk(pooled, k);
  const auto got = topk_mask_global(triple, 0.4);
  std::vector<std::size_t> flat;
  std::size_t offset = 0;
  for (const auto& m : got) {
    for (std::size_t i : kept(m)) flat.push_back(offset + i);
    offset += m.size();
  }
  CHECK(flat == want);

  CHECK_THROWS_AS(topk_mask_global(std::span<const DenseMatrix>{}, 0.5), std::invalid_argument);
}

TEST_CASE("property: global and local masks coincide for one matrix") {
  std::mt19937_64 gen(26);
  for (int trial = 0; trial < 20; ++trial) {
    const DenseMatrix v = oracle::random_matrix(gen, 3 + trial % 5, 4 + trial % 3);
    const double d = 0.05 + 0.045 * trial;
    const DenseMatrix one[] = {v};
    CHECK(topk_mask_global(one, d)[0] == topk_mask_local(v, d));
  }
}

TEST_CASE("bitmask serialization: layout and round trip") {
  Bitmask alt(2, 4);
  for (std::size_t i = 0; i < 8; i += 2) alt.set(i, true);
  const auto bytes = serialize_bitmask(alt);
  REQUIRE(bytes.size() == 9);
  CHECK(bytes[0] == 2);
  CHECK(bytes[4] == 4);
  CHECK(bytes[8] == 0b01010101);

  CHECK(serialize_bitmask(Bitmask(0, 0)).size() == 8);

  std::mt19937_64 gen(27);
  const Bitmask m = random_mask(gen, 13, 7);
  const auto buf = serialize_bitmask(m);
  CHECK(buf.size() == 8 + (13 * 7 + 7) / 8);
  std::size_t used = 0;
  CHECK(deserialize_bitmask(buf, &used) == m);
  CHECK(used == buf.size());

  const std::span<const std::uint8_t> cut(buf.data(), buf.size() - 1);
  CHECK_THROWS_AS(deserialize_bitmask(cut), FormatError);
  CHECK_THROWS_AS(deserialize_bitmask(std::span<const std::uint8_t>(buf.data(), 5)), FormatError);
}
