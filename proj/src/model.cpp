#include "fips/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace fips {

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

double gelu(double z, Activation act) {
  if (act == Activation::GeluErf) return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2));
  const double inner = kSqrt2OverPi * (z + kGeluCubic * z * z * z);
  return 0.5 * z * (1.0 + std::tanh(inner));
}

double gelu_derivative(double z, Activation act) {
  if (act == Activation::GeluErf) {
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2)) + z * pdf;
  }
  const double inner = kSqrt2OverPi * (z + kGeluCubic * z * z * z);
  const double th = std::tanh(inner);
  const double dinner = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * z * z);
  return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner;
}

void MlpModule::validate() const {
  if (w_fc2.rows() != p() || w_fc2.cols() != d()) {
    throw ShapeError("MlpModule: fc1 " + shape_str(w_fc1) + " and fc2 " + shape_str(w_fc2) + " disagree");
  }
  if (b1.size() != p() || b2.size() != d()) throw ShapeError("MlpModule: bias lengths must be p and d");
  for (double b : b1)
    if (!std::isfinite(b)) throw std::invalid_argument("MlpModule: non-finite bias");
  for (double b : b2)
    if (!std::isfinite(b)) throw std::invalid_argument("MlpModule: non-finite bias");
}

DenseMatrix mlp_forward(const MlpModule& module, const DenseMatrix& x, Activation act) {
  if (x.cols() != module.d()) {
    throw ShapeError("mlp_forward: input " + shape_str(x) + " vs fc1 " + shape_str(module.w_fc1));
  }
  DenseMatrix h = matmul(x, module.w_fc1);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto row = h.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = gelu(row[c] + module.b1[c], act);
  }
  DenseMatrix y = matmul(h, module.w_fc2);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += module.b2[c];
  }
  return y;
}

void ToyModel::validate() const {
  if (blocks.empty()) throw std::invalid_argument("ToyModel: no blocks");
  for (const auto& b : blocks) {
    b.validate();
    if (b.d() != d()) throw ShapeError("ToyModel: blocks must share d");
  }
  if (head && head->rows() != d()) throw ShapeError("ToyModel: head rows must equal d");
}

DenseMatrix ToyModel::forward(const DenseMatrix& x) const {
  DenseMatrix h = x;
  for (const auto& b : blocks) h += mlp_forward(b, h, activation);
  return head ? matmul(h, *head) : h;
}

std::vector<FcPair> ToyModel::fc_pairs() const {
  std::vector<FcPair> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back({b.w_fc1, b.w_fc2});
  return out;
}

std::string to_string(const Spectrum& s) {
  std::ostringstream os;
  switch (s.kind) {
    case SpectrumKind::Flat: os << "flat"; break;
    case SpectrumKind::Decaying: os << "decaying:" << s.gamma; break;
    case SpectrumKind::SharedSubspace: os << "shared:" << s.k; break;
  }
  return os.str();
}

Spectrum parse_spectrum(const std::string& s) {
  const auto colon = s.find(':');
  const std::string head = s.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
  if (head == "flat" && arg.empty()) return Spectrum::flat();
  try {
    std::size_t pos = 0;
    if (head == "decaying") {
      const double g = std::stod(arg, &pos);
      if (pos == arg.size()) return Spectrum::decaying(g);
    } else if (head == "shared") {
      const long long k = std::stoll(arg, &pos);
      if (pos == arg.size() && k > 0) return Spectrum::shared_subspace(static_cast<std::size_t>(k));
    }
  } catch (const std::logic_error&) {
  }
  throw std::invalid_argument("invalid spectrum '" + s + "' (expected flat, decaying:<gamma> or shared:<k>)");
}

namespace {

void rescale(DenseMatrix& w, double target_sq_norm) {
  const double n = frobenius_norm(w);
  if (n > 0.0) w *= std::sqrt(target_sq_norm) / n;
}

// d x p matrix with prescribed singular values.
DenseMatrix with_spectrum(Rng& rng, std::size_t d, std::size_t p, const std::vector<double>& sigma) {
  const std::size_t r = sigma.size();
  DenseMatrix q1 = random_orthonormal(rng, d, r);
  const DenseMatrix q2 = random_orthonormal(rng, p, r);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < r; ++j) q1(i, j) *= sigma[j];
  return matmul_nt(q1, q2);
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double stddev) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

}  // namespace

ToyModel gen_toy_model(std::uint64_t seed, std::size_t d, std::size_t p, std::size_t n_blocks,
                       const Spectrum& spectrum) {
  if (d < 1 || p < 1 || n_blocks < 1) throw std::invalid_argument("gen_toy_model: d, p and blocks must be >= 1");
  if (spectrum.kind == SpectrumKind::Decaying && !(spectrum.gamma > 0.0 && spectrum.gamma < 1.0)) {
    throw std::invalid_argument("gen_toy_model: decaying gamma must lie in (0, 1)");
  }
  if (spectrum.kind == SpectrumKind::SharedSubspace && (spectrum.k < 1 || spectrum.k > std::min(d, p))) {
    throw std::invalid_argument("gen_toy_model: shared subspace k must lie in [1, min(d, p)]");
  }
  Rng rng(seed);
  ToyModel model;
  const std::size_t r = std::min(d, p);
  std::vector<double> sigma(r, 1.0);
  if (spectrum.kind == SpectrumKind::Decaying)
    for (std::size_t j = 0; j < r; ++j) sigma[j] = std::pow(spectrum.gamma, static_cast<double>(j));

  DenseMatrix basis;
  if (spectrum.kind == SpectrumKind::SharedSubspace) basis = random_orthonormal(rng, d, spectrum.k);

  auto draw = [&]() {
    if (spectrum.kind == SpectrumKind::SharedSubspace) {
      return matmul(basis, gaussian_matrix(rng, spectrum.k, p, 1.0));
    }
    return with_spectrum(rng, d, p, sigma);
  };

  for (std::size_t b = 0; b < n_blocks; ++b) {
    MlpModule m;
    m.w_fc1 = draw();
    rescale(m.w_fc1, static_cast<double>(p));
    DenseMatrix fc2t = draw();
    rescale(fc2t, static_cast<double>(d));
    m.w_fc2 = transpose(fc2t);
    m.b1 = random_vector(rng, p, 0.01);
    m.b2 = random_vector(rng, d, 0.01);
    model.blocks.push_back(std::move(m));
  }
  return model;
}

DenseMatrix make_calibration_inputs(std::uint64_t seed, std::size_t num_batches, std::size_t batch_size, std::size_t d) {
  Rng rng(seed);
  return gaussian_matrix(rng, num_batches * batch_size, d, 1.0);
}

CalibrationSet collect_calibration(const ToyModel& model, const DenseMatrix& inputs, std::size_t batch_size) {
  model.validate();
  if (inputs.cols() != model.d()) throw ShapeError("collect_calibration: inputs must have width d");
  if (batch_size == 0) throw std::invalid_argument("collect_calibration: batch size must be positive");
  CalibrationSet calib;
  calib.batch_size = batch_size;
  calib.num_batches = (inputs.rows() + batch_size - 1) / batch_size;
  DenseMatrix x = inputs;
  for (const auto& b : model.blocks) {
    DenseMatrix h = matmul(x, b.w_fc1);
    for (std::size_t r = 0; r < h.rows(); ++r) {
      auto row = h.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = gelu(row[c] + b.b1[c], model.activation);
    }
    DenseMatrix y = matmul(h, b.w_fc2);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += b.b2[c];
    }
    calib.inputs_per_block.push_back(x);
    calib.hidden_per_block.push_back(std::move(h));
    x += y;
    calib.outputs_per_block.push_back(std::move(y));
  }
  return calib;
}

std::pair<std::size_t, std::size_t> CompressedModel::locate(std::size_t block) const {
  std::size_t at = 0;
  for (std::size_t g = 0; g < layout.group_sizes.size(); ++g) {
    if (block < at + layout.group_sizes[g]) return {g, block - at};
    at += layout.group_sizes[g];
  }
  throw std::out_of_range("CompressedModel: block " + std::to_string(block) + " out of range");
}

MlpModule CompressedModel::block_module(std::size_t block) const {
  const auto [g, j] = locate(block);
  MlpModule m;
  m.w_fc1 = reconstruct(groups[g], 2 * j);
  m.w_fc2 = reconstruct(groups[g], 2 * j + 1);
  m.b1 = b1[block];
  m.b2 = b2[block];
  return m;
}

ToyModel CompressedModel::materialize() const {
  ToyModel model;
  model.activation = activation;
  model.head = head;
  for (std::size_t b = 0; b < n_blocks(); ++b) model.blocks.push_back(block_module(b));
  return model;
}

DenseMatrix CompressedModel::forward(const DenseMatrix& x) const { return materialize().forward(x); }

std::size_t CompressedModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.parameter_count();
  return n;
}

std::vector<MaskedMatrix*> CompressedModel::all_factors() {
  std::vector<MaskedMatrix*> out;
  for (auto& g : groups)
    for (auto& f : g.factors) out.push_back(&f);
  return out;
}

void CompressedModel::validate() const {
  if (layout.group_sizes.size() != groups.size()) throw std::invalid_argument("CompressedModel: group count mismatch");
  if (layout.total() != n_blocks() || b2.size() != n_blocks()) {
    throw std::invalid_argument("CompressedModel: layout does not cover the blocks");
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    groups[g].validate();
    if (groups[g].size() != 2 * layout.group_sizes[g]) {
      throw std::invalid_argument("CompressedModel: group " + std::to_string(g) + " must hold two layers per block");
    }
    if (groups[g].d() != d || groups[g].p() != p) throw ShapeError("CompressedModel: group shape mismatch");
  }
  for (std::size_t b = 0; b < n_blocks(); ++b) {
    if (b1[b].size() != p || b2[b].size() != d) throw ShapeError("CompressedModel: bias length mismatch");
  }
}

CompressedModel compress_init(const ToyModel& model, const GroupLayout& layout, std::size_t rank,
                              const SharedInitOptions& opts) {
  std::vector<std::size_t> ranks(layout.group_sizes.size(), rank);
  return compress_init(model, layout, ranks, opts);
}

CompressedModel compress_init(const ToyModel& model, const GroupLayout& layout, std::span<const std::size_t> ranks,
                              const SharedInitOptions& opts) {
  model.validate();
  if (layout.total() != model.n_blocks()) throw std::invalid_argument("compress_init: layout does not match model");
  if (ranks.size() != layout.group_sizes.size()) throw std::invalid_argument("compress_init: one rank per group");
  CompressedModel out;
  out.d = model.d();
  out.p = model.p();
  out.activation = model.activation;
  out.layout = layout;
  out.head = model.head;
  const auto pairs = model.fc_pairs();
  const auto offsets = layout.offsets();
  for (std::size_t g = 0; g < layout.group_sizes.size(); ++g) {
    const auto members = std::span(pairs).subspan(offsets[g], layout.group_sizes[g]);
    const LayerStack stack = LayerStack::from_modules(members, offsets[g]);
    SharedInitOptions group_opts = opts;
    group_opts.growth.seed = opts.growth.seed + g;
    out.groups.push_back(shared_init(stack, ranks[g], group_opts));
  }
  for (const auto& b : model.blocks) {
    out.b1.push_back(b.b1);
    out.b2.push_back(b.b2);
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// FPSH encoding

TensorRecord TensorRecord::matrix(std::string name, const DenseMatrix& m) {
  TensorRecord r;
  r.name = std::move(name);
  r.dims = {m.rows(), m.cols()};
  r.values = m.buffer();
  return r;
}

TensorRecord TensorRecord::vector(std::string name, const std::vector<double>& v) {
  TensorRecord r;
  r.name = std::move(name);
  r.dims = {v.size()};
  r.values = v;
  return r;
}

TensorRecord TensorRecord::bitmask(std::string name, const Bitmask& m) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = DType::Mask;
  r.dims = {m.rows(), m.cols()};
  r.mask = m;
  return r;
}

DenseMatrix TensorRecord::as_matrix() const {
  if (dtype == DType::Mask) throw FormatError(FormatError::Kind::Malformed, name + ": expected numeric tensor");
  if (dims.size() == 2) return DenseMatrix(dims[0], dims[1], values);
  if (dims.size() == 1) return DenseMatrix(1, dims[0], values);
  throw FormatError(FormatError::Kind::Malformed, name + ": expected rank 1 or 2");
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int b = 0; b < n; ++b) out_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(at_, n);
    at_ += n;
    return s;
  }
  std::span<const std::uint8_t> rest() const { return in_.subspan(at_); }
  void skip(std::size_t n) { need(n); at_ += n; }
  bool done() const { return at_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - at_ < n) {
      throw FormatError(FormatError::Kind::Truncated, "FPSH: truncated at byte " + std::to_string(at_));
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int b = 0; b < n; ++b) v |= static_cast<std::uint64_t>(in_[at_ + b]) << (8 * b);
    at_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t at_ = 0;
};

constexpr char kMagic[4] = {'F', 'P', 'S', 'H'};

}  // namespace

std::vector<std::uint8_t> encode_fpsh(const std::vector<TensorRecord>& records) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kFpshVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(r.name.data()), r.name.size()});
    w.u8(static_cast<std::uint8_t>(r.dtype));
    w.u8(static_cast<std::uint8_t>(r.dims.size()));
    for (auto d : r.dims) w.u64(d);
    switch (r.dtype) {
      case DType::F64:
        for (double v : r.values) w.f64(v);
        break;
      case DType::F32:
        for (double v : r.values) w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        break;
      case DType::Mask:
        w.bytes(serialize_bitmask(r.mask));
        break;
    }
  }
  return w.take();
}

std::vector<TensorRecord> decode_fpsh(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatError::Kind::Truncated, "FPSH: file shorter than magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(FormatError::Kind::BadMagic, "FPSH: bad magic");
  Reader r(bytes.subspan(4));
  const std::uint16_t version = r.u16();
  if (version != kFpshVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "FPSH: version " + std::to_string(version) + ", expected " + std::to_string(kFpshVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<TensorRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    const std::uint32_t name_len = r.u32();
    const auto name = r.take(name_len);
    t.name.assign(name.begin(), name.end());
    const std::uint8_t tag = r.u8();
    if (tag < 1 || tag > 3) throw FormatError(FormatError::Kind::Malformed, "FPSH: unknown dtype " + std::to_string(tag));
    t.dtype = static_cast<DType>(tag);
    const std::uint8_t rank = r.u8();
    std::uint64_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u64());
      numel *= t.dims.back();
    }
    if (t.dtype == DType::Mask) {
      if (rank != 2) throw FormatError(FormatError::Kind::Malformed, t.name + ": mask must be rank 2");
      std::size_t used = 0;
      t.mask = deserialize_bitmask(r.rest(), &used);
      r.skip(used);
      if (t.mask.rows() != t.dims[0] || t.mask.cols() != t.dims[1]) {
        throw FormatError(FormatError::Kind::Malformed, t.name + ": mask header disagrees with dims");
      }
    } else {
      const std::size_t width = t.dtype == DType::F64 ? 8 : 4;
      if (numel > r.rest().size() / width) {
        throw FormatError(FormatError::Kind::Truncated, t.name + ": payload truncated");
      }
      t.values.resize(numel);
      for (auto& v : t.values) v = t.dtype == DType::F64 ? r.f64() : static_cast<double>(r.f32());
    }
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(FormatError::Kind::Malformed, "FPSH: trailing bytes after last record");
  return out;
}

namespace {

std::string block_key(std::size_t b, const char* leaf) { return "block." + std::to_string(b) + "." + leaf; }
std::string group_key(std::size_t g, const std::string& leaf) { return "group." + std::to_string(g) + "." + leaf; }

std::vector<double> as_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

std::size_t as_size(double x, const std::string& what) {
  if (!(x >= 0.0) || x != std::floor(x)) throw FormatError(FormatError::Kind::Malformed, what + ": not a count");
  return static_cast<std::size_t>(x);
}

class RecordIndex {
 public:
  explicit RecordIndex(const std::vector<TensorRecord>& records) {
    for (const auto& r : records) by_name_.emplace(r.name, &r);
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const TensorRecord& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw FormatError(FormatError::Kind::Malformed, "FPSH: missing tensor " + name);
    return *it->second;
  }
  DenseMatrix matrix(const std::string& name) const { return at(name).as_matrix(); }
  const std::vector<double>& values(const std::string& name) const { return at(name).values; }

 private:
  std::map<std::string, const TensorRecord*> by_name_;
};

}  // namespace

std::vector<TensorRecord> to_records(const ToyModel& model) {
  model.validate();
  std::vector<TensorRecord> out;
  out.push_back(TensorRecord::vector("toy.config", {static_cast<double>(model.d()), static_cast<double>(model.p()),
                                                    static_cast<double>(model.n_blocks()),
                                                    static_cast<double>(model.activation)}));
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    const auto& m = model.blocks[b];
    out.push_back(TensorRecord::matrix(block_key(b, "fc1.weight"), m.w_fc1));
    out.push_back(TensorRecord::vector(block_key(b, "fc1.bias"), m.b1));
    out.push_back(TensorRecord::matrix(block_key(b, "fc2.weight"), m.w_fc2));
    out.push_back(TensorRecord::vector(block_key(b, "fc2.bias"), m.b2));
  }
  if (model.head) out.push_back(TensorRecord::matrix("head.weight", *model.head));
  return out;
}

std::vector<TensorRecord> to_records(const CompressedModel& model) {
  model.validate();
  std::vector<TensorRecord> out;
  out.push_back(TensorRecord::vector(
      "compressed.config", {static_cast<double>(model.d), static_cast<double>(model.p),
                            static_cast<double>(model.n_blocks()), static_cast<double>(model.activation),
                            static_cast<double>(model.groups.size())}));
  out.push_back(TensorRecord::vector("layout.group_sizes", as_doubles(model.layout.group_sizes)));
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    out.push_back(TensorRecord::vector(block_key(b, "fc1.bias"), model.b1[b]));
    out.push_back(TensorRecord::vector(block_key(b, "fc2.bias"), model.b2[b]));
  }
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const auto& grp = model.groups[g];
    std::vector<double> transposed(grp.transposed.begin(), grp.transposed.end());
    out.push_back(TensorRecord::vector(group_key(g, "tau"), {grp.tau}));
    out.push_back(TensorRecord::vector(group_key(g, "member_ids"), as_doubles(grp.member_ids)));
    out.push_back(TensorRecord::vector(group_key(g, "transposed"), transposed));
    out.push_back(TensorRecord::matrix(group_key(g, "u"), grp.u));
    for (std::size_t i = 0; i < grp.size(); ++i) {
      const std::string f = "factor." + std::to_string(i);
      out.push_back(TensorRecord::matrix(group_key(g, f + ".values"), grp.factors[i].values()));
      out.push_back(TensorRecord::bitmask(group_key(g, f + ".mask"), grp.factors[i].mask()));
      if (grp.has_scaling()) out.push_back(TensorRecord::vector(group_key(g, "scaling." + std::to_string(i)), grp.scaling[i]));
    }
  }
  if (model.head) out.push_back(TensorRecord::matrix("head.weight", *model.head));
  return out;
}

AnyModel from_records(const std::vector<TensorRecord>& records) {
  const RecordIndex idx(records);
  auto activation_of = [](double v) {
    if (v != 0.0 && v != 1.0) throw FormatError(FormatError::Kind::Malformed, "FPSH: unknown activation");
    return static_cast<Activation>(static_cast<std::uint8_t>(v));
  };
  if (idx.has("toy.config")) {
    const auto& cfg = idx.values("toy.config");
    if (cfg.size() != 4) throw FormatError(FormatError::Kind::Malformed, "toy.config: expected 4 entries");
    ToyModel model;
    model.activation = activation_of(cfg[3]);
    const std::size_t n = as_size(cfg[2], "toy.config");
    for (std::size_t b = 0; b < n; ++b) {
      MlpModule m;
      m.w_fc1 = idx.matrix(block_key(b, "fc1.weight"));
      m.b1 = idx.values(block_key(b, "fc1.bias"));
      m.w_fc2 = idx.matrix(block_key(b, "fc2.weight"));
      m.b2 = idx.values(block_key(b, "fc2.bias"));
      model.blocks.push_back(std::move(m));
    }
    if (idx.has("head.weight")) model.head = idx.matrix("head.weight");
    model.validate();
    return model;
  }
  if (idx.has("compressed.config")) {
    const auto& cfg = idx.values("compressed.config");
    if (cfg.size() != 5) throw FormatError(FormatError::Kind::Malformed, "compressed.config: expected 5 entries");
    CompressedModel model;
    model.d = as_size(cfg[0], "d");
    model.p = as_size(cfg[1], "p");
    const std::size_t n_blocks = as_size(cfg[2], "blocks");
    model.activation = activation_of(cfg[3]);
    const std::size_t n_groups = as_size(cfg[4], "groups");
    for (double g : idx.values("layout.group_sizes")) model.layout.group_sizes.push_back(as_size(g, "group size"));
    for (std::size_t b = 0; b < n_blocks; ++b) {
      model.b1.push_back(idx.values(block_key(b, "fc1.bias")));
      model.b2.push_back(idx.values(block_key(b, "fc2.bias")));
    }
    for (std::size_t g = 0; g < n_groups; ++g) {
      SharedGroup grp;
      grp.tau = idx.values(group_key(g, "tau")).at(0);
      for (double id : idx.values(group_key(g, "member_ids"))) grp.member_ids.push_back(as_size(id, "member id"));
      for (double t : idx.values(group_key(g, "transposed"))) grp.transposed.push_back(t != 0.0);
      grp.u = idx.matrix(group_key(g, "u"));
      for (std::size_t i = 0; i < grp.member_ids.size(); ++i) {
        const std::string f = "factor." + std::to_string(i);
        grp.factors.emplace_back(idx.matrix(group_key(g, f + ".values")), idx.at(group_key(g, f + ".mask")).mask);
        const std::string s = group_key(g, "scaling." + std::to_string(i));
        if (idx.has(s)) grp.scaling.push_back(idx.values(s));
      }
      model.groups.push_back(std::move(grp));
    }
    if (idx.has("head.weight")) model.head = idx.matrix("head.weight");
    model.validate();
    return model;
  }
  throw FormatError(FormatError::Kind::Malformed, "FPSH: no toy.config or compressed.config record");
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void save_model(const std::filesystem::path& path, const ToyModel& model) {
  write_file_bytes(path, encode_fpsh(to_records(model)));
}

void save_model(const std::filesystem::path& path, const CompressedModel& model) {
  write_file_bytes(path, encode_fpsh(to_records(model)));
}

AnyModel load_model(const std::filesystem::path& path) { return from_records(decode_fpsh(read_file_bytes(path))); }

}  // namespace fips
