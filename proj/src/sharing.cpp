#include "fips/sharing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fips {

void LayerStack::push(const DenseMatrix& w, std::size_t id) {
  const bool tall = w.rows() > w.cols();
  DenseMatrix oriented = tall ? transpose(w) : w;
  if (layers.empty()) {
    d = oriented.rows();
    p = oriented.cols();
  } else if (oriented.rows() != d || oriented.cols() != p) {
    throw ShapeError("LayerStack: layer " + shape_str(w) + " does not match d=" + std::to_string(d) +
                     " p=" + std::to_string(p));
  }
  layers.push_back(std::move(oriented));
  transposed.push_back(tall);
  ids.push_back(id);
}

LayerStack LayerStack::from_modules(std::span<const FcPair> modules, std::size_t first_module) {
  LayerStack stack;
  for (std::size_t m = 0; m < modules.size(); ++m) {
    const auto& mod = modules[m];
    if (mod.fc1.rows() != mod.fc2.cols() || mod.fc1.cols() != mod.fc2.rows()) {
      throw ShapeError("LayerStack: fc1 " + shape_str(mod.fc1) + " and fc2 " + shape_str(mod.fc2) +
                       " are not transposes in shape");
    }
    // Square layers are never flagged by push(); fc2 is always transposed.
    stack.layers.push_back(mod.fc1);
    stack.transposed.push_back(false);
    stack.ids.push_back(2 * (first_module + m));
    stack.layers.push_back(transpose(mod.fc2));
    stack.transposed.push_back(true);
    stack.ids.push_back(2 * (first_module + m) + 1);
    if (m == 0) {
      stack.d = mod.fc1.rows();
      stack.p = mod.fc1.cols();
    }
  }
  stack.validate();
  return stack;
}

void LayerStack::validate() const {
  if (layers.empty()) throw ShapeError("LayerStack: no layers");
  if (transposed.size() != layers.size() || ids.size() != layers.size()) {
    throw ShapeError("LayerStack: metadata length mismatch");
  }
  for (const auto& l : layers) {
    if (l.rows() != d || l.cols() != p) throw ShapeError("LayerStack: layers must share (d, p)");
  }
}

std::size_t SharedGroup::parameter_count() const {
  std::size_t n = u.size();
  for (const auto& f : factors) n += f.active_count();
  return n;
}

void SharedGroup::validate() const {
  for (const auto& f : factors) {
    if (f.rows() != u.cols()) throw ShapeError("SharedGroup: factor rows must equal rank");
    if (f.cols() != p()) throw ShapeError("SharedGroup: factors must share p");
  }
  if (transposed.size() != factors.size() || member_ids.size() != factors.size()) {
    throw ShapeError("SharedGroup: metadata length mismatch");
  }
  if (!scaling.empty()) {
    if (scaling.size() != factors.size()) throw ShapeError("SharedGroup: one scaling vector per layer");
    for (const auto& s : scaling) {
      if (s.size() != p()) throw ShapeError("SharedGroup: scaling vector length must equal p");
      for (double x : s)
        if (!(x > 0.0)) throw std::invalid_argument("SharedGroup: scaling entries must be positive");
    }
  }
}

DenseMatrix reconstruct_oriented(const SharedGroup& group, std::size_t i) {
  if (i >= group.size()) {
    throw std::out_of_range("reconstruct: layer " + std::to_string(i) + " of " + std::to_string(group.size()));
  }
  DenseMatrix w = matmul(group.u, group.factors[i].values());
  if (group.has_scaling()) {
    const auto& s = group.scaling[i];
    for (std::size_t r = 0; r < w.rows(); ++r) {
      auto row = w.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] *= s[c];
    }
  }
  return w;
}

DenseMatrix reconstruct(const SharedGroup& group, std::size_t i) {
  DenseMatrix w = reconstruct_oriented(group, i);
  return group.transposed[i] ? transpose(w) : w;
}

std::string to_string(ConcatStrategy s) {
  switch (s) {
    case ConcatStrategy::I: return "I";
    case ConcatStrategy::II: return "II";
    case ConcatStrategy::III: return "III";
    case ConcatStrategy::IV: return "IV";
  }
  return "?";
}

ConcatStrategy parse_concat_strategy(const std::string& s) {
  if (s == "I" || s == "1") return ConcatStrategy::I;
  if (s == "II" || s == "2") return ConcatStrategy::II;
  if (s == "III" || s == "3") return ConcatStrategy::III;
  if (s == "IV" || s == "4") return ConcatStrategy::IV;
  throw std::invalid_argument("unknown concat strategy '" + s + "'");
}

ConcatResult concat_strategy(ConcatStrategy strategy, std::span<const FcPair> modules) {
  if (modules.empty()) throw ShapeError("concat_strategy: no modules");
  const std::size_t d = modules.front().fc1.rows(), p = modules.front().fc1.cols();
  std::vector<DenseMatrix> fc1, fc2t;
  for (const auto& m : modules) {
    if (m.fc1.rows() != d || m.fc1.cols() != p || m.fc2.rows() != p || m.fc2.cols() != d) {
      throw ShapeError("concat_strategy: module shapes differ from fc1 " + std::to_string(d) + "x" +
                       std::to_string(p));
    }
    fc1.push_back(m.fc1);
    fc2t.push_back(transpose(m.fc2));
  }
  ConcatResult out{strategy, {}, d, p, modules.size()};
  switch (strategy) {
    case ConcatStrategy::I: {
      std::vector<DenseMatrix> all;
      for (std::size_t m = 0; m < modules.size(); ++m) {
        all.push_back(fc1[m]);
        all.push_back(fc2t[m]);
      }
      out.matrix = hconcat(all);
      break;
    }
    case ConcatStrategy::II: {
      std::vector<DenseMatrix> rows;
      for (std::size_t m = 0; m < modules.size(); ++m) {
        const DenseMatrix pair[] = {fc1[m], fc2t[m]};
        rows.push_back(hconcat(pair));
      }
      out.matrix = vconcat(rows);
      break;
    }
    case ConcatStrategy::III: {
      const DenseMatrix rows[] = {hconcat(fc1), hconcat(fc2t)};
      out.matrix = vconcat(rows);
      break;
    }
    case ConcatStrategy::IV: {
      std::vector<DenseMatrix> all;
      for (std::size_t m = 0; m < modules.size(); ++m) {
        all.push_back(fc1[m]);
        all.push_back(fc2t[m]);
      }
      out.matrix = vconcat(all);
      break;
    }
  }
  return out;
}

std::vector<FcPair> slice_strategy(const ConcatResult& concat) { return slice_strategy(concat, concat.matrix); }

std::vector<FcPair> slice_strategy(const ConcatResult& layout, const DenseMatrix& w) {
  require_same_shape(w, layout.matrix, "slice_strategy");
  const std::size_t d = layout.d, p = layout.p, n = layout.n_modules;
  std::vector<FcPair> out(n);
  for (std::size_t m = 0; m < n; ++m) {
    DenseMatrix a, bt;
    switch (layout.strategy) {
      case ConcatStrategy::I:
        a = w.col_block(2 * m * p, p);
        bt = w.col_block((2 * m + 1) * p, p);
        break;
      case ConcatStrategy::II: {
        DenseMatrix rows = w.row_block(m * d, d);
        a = rows.col_block(0, p);
        bt = rows.col_block(p, p);
        break;
      }
      case ConcatStrategy::III:
        a = w.row_block(0, d).col_block(m * p, p);
        bt = w.row_block(d, d).col_block(m * p, p);
        break;
      case ConcatStrategy::IV:
        a = w.row_block(2 * m * d, d);
        bt = w.row_block((2 * m + 1) * d, d);
        break;
    }
    out[m] = FcPair{std::move(a), transpose(bt)};
  }
  return out;
}

std::size_t GroupLayout::total() const noexcept {
  return std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0});
}

std::vector<std::size_t> GroupLayout::offsets() const {
  std::vector<std::size_t> out;
  std::size_t at = 0;
  for (auto g : group_sizes) {
    out.push_back(at);
    at += g;
  }
  return out;
}

GroupLayout group_layout_deit12() { return GroupLayout{{4, 4, 4}}; }

GroupLayout group_layout_swin(std::span<const std::size_t> stages) {
  constexpr std::size_t kMaxGroup = 6;
  GroupLayout layout;
  for (auto n : stages) {
    if (n == 0) throw std::invalid_argument("group_layout_swin: empty stage");
    const std::size_t groups = (n + kMaxGroup - 1) / kMaxGroup;
    for (std::size_t g = 0; g < groups; ++g) {
      layout.group_sizes.push_back(n / groups + (g < n % groups ? 1 : 0));
    }
  }
  return layout;
}

GroupLayout group_layout_custom(std::vector<std::size_t> sizes, std::size_t n_blocks) {
  GroupLayout layout{std::move(sizes)};
  if (layout.group_sizes.empty()) throw std::invalid_argument("group layout: no groups");
  for (auto g : layout.group_sizes)
    if (g == 0) throw std::invalid_argument("group layout: group sizes must be positive");
  if (layout.total() != n_blocks) {
    throw std::invalid_argument("group layout: sizes sum to " + std::to_string(layout.total()) + ", model has " +
                                std::to_string(n_blocks) + " blocks");
  }
  return layout;
}

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    const long long v = std::stoll(item, &pos);
    if (pos != item.size() || v <= 0) throw std::invalid_argument("bad group size '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace

GroupLayout parse_group_layout(const std::string& spec, std::size_t n_blocks) {
  GroupLayout layout;
  if (spec == "deit12") {
    layout = group_layout_deit12();
  } else if (spec.rfind("swin:", 0) == 0) {
    const auto stages = parse_size_list(spec.substr(5));
    layout = group_layout_swin(stages);
  } else if (spec.rfind("uniform:", 0) == 0) {
    const auto g = parse_size_list(spec.substr(8));
    if (g.size() != 1) throw std::invalid_argument("uniform:<g> takes one size");
    for (std::size_t left = n_blocks; left > 0;) {
      const std::size_t take = std::min(left, g[0]);
      layout.group_sizes.push_back(take);
      left -= take;
    }
  } else {
    layout.group_sizes = parse_size_list(spec);
  }
  return group_layout_custom(std::move(layout.group_sizes), n_blocks);
}

std::string to_string(GrowthStrategy g) {
  switch (g) {
    case GrowthStrategy::RandomGrowth: return "random";
    case GrowthStrategy::NeuronSplitting: return "splitting";
    case GrowthStrategy::Hybrid: return "hybrid";
  }
  return "?";
}

GrowthStrategy parse_growth_strategy(const std::string& s) {
  if (s == "random") return GrowthStrategy::RandomGrowth;
  if (s == "splitting" || s == "split") return GrowthStrategy::NeuronSplitting;
  if (s == "hybrid") return GrowthStrategy::Hybrid;
  throw std::invalid_argument("unknown growth strategy '" + s + "'");
}

GrownFactors grow_basis(const DenseMatrix& u, const DenseMatrix& v, std::size_t k, const GrowthOptions& opts) {
  if (u.cols() != v.rows()) throw ShapeError("grow_basis: u " + shape_str(u) + " and v " + shape_str(v));
  const std::size_t r = u.cols(), d = u.rows(), m = v.cols();
  if (k < 1) throw std::invalid_argument("grow_basis: k must be >= 1");
  if (opts.strategy != GrowthStrategy::RandomGrowth && k > r) {
    throw std::invalid_argument("grow_basis: k=" + std::to_string(k) + " exceeds the " + std::to_string(r) +
                                " existing neurons");
  }
  if (opts.strategy == GrowthStrategy::Hybrid && !(opts.tau > 0.0)) {
    throw std::invalid_argument("grow_basis: tau must be positive");
  }

  std::vector<double> norms(r);
  for (std::size_t j = 0; j < r; ++j) {
    double acc = 0.0;
    for (double x : v.row(j)) acc += x * x;
    norms[j] = acc;
  }
  std::vector<std::size_t> top(r);
  std::iota(top.begin(), top.end(), 0);
  std::stable_sort(top.begin(), top.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  GrownFactors out{DenseMatrix(d, r + k), DenseMatrix(r + k, m)};
  out.u.set_col_block(0, u);
  out.v.set_row_block(0, v);

  switch (opts.strategy) {
    case GrowthStrategy::RandomGrowth: {
      Rng rng(opts.seed);
      const double stddev = opts.random_std.value_or(kaiming_std(r + k));
      out.v.set_row_block(r, gaussian_matrix(rng, k, m, stddev));
      break;
    }
    case GrowthStrategy::NeuronSplitting:
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t src = top[t];
        for (std::size_t i = 0; i < d; ++i) out.u(i, r + t) = u(i, src);
        for (std::size_t c = 0; c < m; ++c) {
          const double half = 0.5 * v(src, c);
          out.v(src, c) = half;
          out.v(r + t, c) = half;
        }
      }
      break;
    case GrowthStrategy::Hybrid:
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t src = top[t];
        for (std::size_t c = 0; c < m; ++c) out.v(r + t, c) = v(src, c) / opts.tau;
      }
      break;
  }
  return out;
}

SharedGroup shared_init(const LayerStack& stack, std::size_t rank, const SharedInitOptions& opts) {
  stack.validate();
  if (rank < 1) throw ShapeError("shared_init: rank must be >= 1");
  const std::size_t n = stack.size(), d = stack.d, p = stack.p;

  SharedGroup group;
  group.member_ids = stack.ids;
  group.transposed = stack.transposed;
  group.tau = opts.growth.tau;

  std::vector<DenseMatrix> inputs = stack.layers;
  if (opts.use_scaling) {
    group.scaling.assign(n, std::vector<double>(p, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
      auto& w = inputs[i];
      for (std::size_t c = 0; c < p; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < d; ++r) acc += w(r, c) * w(r, c);
        const double nrm = std::sqrt(acc);
        if (nrm > 0.0) {
          group.scaling[i][c] = nrm;
          for (std::size_t r = 0; r < d; ++r) w(r, c) /= nrm;
        }
      }
    }
  }

  const DenseMatrix ws = hconcat(inputs);
  const std::size_t svd_max = std::min(d, n * p);
  if (rank > svd_max && !opts.allow_growth) {
    throw ShapeError("shared_init: rank " + std::to_string(rank) + " exceeds " + std::to_string(svd_max) +
                     " and growth is disabled");
  }
  const SvdResult svd = truncated_svd(ws, std::min(rank, svd_max));
  DenseMatrix u = svd.u;
  DenseMatrix v = svd.v_t;
  for (std::size_t j = 0; j < v.rows(); ++j)
    for (double& x : v.row(j)) x *= svd.singular_values[j];
  if (rank > svd_max) {
    auto grown = grow_basis(u, v, rank - svd_max, opts.growth);
    u = std::move(grown.u);
    v = std::move(grown.v);
  }
  group.u = std::move(u);
  group.factors.reserve(n);
  for (std::size_t i = 0; i < n; ++i) group.factors.emplace_back(v.col_block(i * p, p));
  group.validate();
  return group;
}

double stack_mse(const LayerStack& stack, const SharedGroup& group) {
  if (stack.size() != group.size()) throw ShapeError("stack_mse: layer count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < stack.size(); ++i) acc += frobenius_mse(reconstruct_oriented(group, i), stack.layers[i]);
  return acc / static_cast<double>(stack.size());
}

namespace {

LayerStack join(const LayerStack& a, const LayerStack& b) {
  LayerStack out = a;
  for (std::size_t i = 0; i < b.size(); ++i) {
    out.layers.push_back(b.layers[i]);
    out.transposed.push_back(b.transposed[i]);
    out.ids.push_back(b.ids[i]);
  }
  out.validate();
  return out;
}

double slice_mse(const LayerStack& joined, const SharedGroup& group, std::size_t begin, std::size_t count) {
  double acc = 0.0;
  for (std::size_t i = begin; i < begin + count; ++i)
    acc += frobenius_mse(reconstruct_oriented(group, i), joined.layers[i]);
  return acc / static_cast<double>(count);
}

}  // namespace

PairwiseShareMse pairwise_share_mse(std::span<const LayerStack> blocks, std::size_t rank) {
  if (blocks.size() < 2) throw std::invalid_argument("pairwise_share_mse: need at least two blocks");
  const std::size_t d = blocks.front().d;
  if (rank < 1 || rank > d) {
    throw ShapeError("pairwise_share_mse: rank " + std::to_string(rank) + " outside [1, " + std::to_string(d) + "]");
  }
  const std::size_t n = blocks.size();
  SharedInitOptions dense;
  dense.allow_growth = false;

  PairwiseShareMse out;
  out.mse_solo.resize(n);
  out.mse_shared.assign(n, std::vector<double>(n, 0.0));
  out.mse_increase.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = blocks[i];
    const std::size_t r = std::min(rank, b.size() * b.p);
    out.mse_solo[i] = stack_mse(b, shared_init(b, r, dense));
    out.mse_shared[i][i] = out.mse_solo[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const LayerStack joined = join(blocks[i], blocks[j]);
      const SharedGroup g = shared_init(joined, rank, dense);
      out.mse_shared[i][j] = slice_mse(joined, g, 0, blocks[i].size());
      out.mse_shared[j][i] = slice_mse(joined, g, blocks[i].size(), blocks[j].size());
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out.mse_increase[i][j] =
          (out.mse_solo[i] - out.mse_shared[i][j] + out.mse_solo[j] - out.mse_shared[j][i]) / 2.0;
    }
  }
  return out;
}

}  // namespace fips
