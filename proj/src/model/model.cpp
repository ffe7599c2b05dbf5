#include "xane3/model/model.hpp"

#include <cmath>
#include <string>

#include "xane3/errors.hpp"

namespace xane3::model {

namespace {

constexpr int kMaxL = so3::kMaxL;

std::size_t to_index(int l) { return static_cast<std::size_t>(l); }

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

Linear make_linear(ad::ParamStore& store, std::mt19937_64& rng, const std::string& name, std::size_t in,
                   std::size_t out, bool zero = false, bool with_bias = true) {
  const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  Linear lin;
  lin.weight = store.add(name + ".w", {in, out}, uniform(rng, in * out, bound));
  if (with_bias) lin.bias = store.add(name + ".b", {1, out}, std::vector<double>(out, 0.0));
  return lin;
}

so3::IrrepsLayout layout_of(const std::array<std::size_t, 3>& m) { return so3::IrrepsLayout::hidden(m[0], m[1], m[2]); }

}  // namespace

std::vector<double> radial_basis(double d, std::size_t count, double r_cut, RadialKind kind) {
  if (!(d > 0)) throw ValueError("radial_basis: distance must be positive, got " + std::to_string(d));
  if (!(r_cut > 0)) throw ValueError("radial_basis: cutoff must be positive");
  const double cutoff = d >= r_cut ? 0.0 : 0.5 * (std::cos(M_PI * d / r_cut) + 1.0);
  std::vector<double> out(count);
  if (kind == RadialKind::Bessel) {
    const double norm = std::sqrt(2.0 / r_cut);
    for (std::size_t n = 1; n <= count; ++n) {
      const double k = static_cast<double>(n) * M_PI / r_cut;
      const double x = k * d;
      // sin(x)/d = k * sin(x)/x, with a series for small x.
      const double sinc = std::abs(x) < 1e-4 ? 1.0 - x * x / 6.0 : std::sin(x) / x;
      out[n - 1] = norm * k * sinc * cutoff;
    }
  } else {
    const double spacing = r_cut / static_cast<double>(count);
    for (std::size_t n = 1; n <= count; ++n) {
      const double t = (d - spacing * static_cast<double>(n)) / spacing;
      out[n - 1] = std::exp(-0.5 * t * t) * cutoff;
    }
  }
  return out;
}

EdgeGeometry edge_geometry(const graph::Batch& batch, const ModelConfig& config) {
  EdgeGeometry geo;
  geo.nodes = batch.atoms();
  geo.center = batch.edge_src;
  geo.neighbor = batch.edge_dst;
  const std::size_t e = batch.edges();
  std::vector<double> radial;
  radial.reserve(e * config.radial_count);
  std::vector<Eigen::Vector3d> units(e);
  for (std::size_t i = 0; i < e; ++i) {
    const auto r = radial_basis(batch.edge_len[i], config.radial_count, config.r_max, config.radial_kind);
    radial.insert(radial.end(), r.begin(), r.end());
    units[i] = batch.edge_vec[i] / batch.edge_len[i];
  }
  geo.radial = ad::Tensor::from({e, config.radial_count}, std::move(radial));
  for (int l = 0; l <= kMaxL; ++l) geo.sh[to_index(l)] = so3::sph_harm_rows(l, units);
  return geo;
}

ad::Tensor Linear::operator()(const ad::Tensor& x) const {
  auto y = ad::matmul(x, weight);
  return bias.defined() ? ad::add(y, bias) : y;
}

std::vector<TPPath> tp_paths(const std::array<std::size_t, 3>& in, const std::array<std::size_t, 3>& out) {
  std::vector<TPPath> paths;
  for (int l_out = 0; l_out <= kMaxL; ++l_out) {
    if (out[to_index(l_out)] == 0) continue;
    for (int l_in = 0; l_in <= kMaxL; ++l_in) {
      if (in[to_index(l_in)] == 0) continue;
      for (int l_f = 0; l_f <= kMaxL; ++l_f) {
        if (l_out < std::abs(l_in - l_f) || l_out > l_in + l_f) continue;
        if ((l_in + l_f + l_out) % 2 != 0) continue;
        paths.push_back({l_in, l_f, l_out});
      }
    }
  }
  return paths;
}

so3::EquivariantFeature TensorProduct::operator()(const so3::EquivariantFeature& h, const EdgeGeometry& geo) const {
  if (!(h.layout == layout_of(in))) {
    throw ShapeError("tensor product expects " + layout_of(in).str() + ", got " + h.layout.str());
  }
  if (h.atoms() != geo.nodes) throw ShapeError("tensor product: feature rows differ from graph nodes");
  const std::size_t n = geo.nodes;
  const std::size_t edges = geo.center.size();
  const std::size_t radial = geo.radial.defined() ? geo.radial.dim(1) : 0;

  std::array<ad::Tensor, 3> gathered;
  so3::EquivariantFeature out{layout_of(this->out), {}};
  for (int l_out = 0; l_out <= kMaxL; ++l_out) {
    const std::size_t m_out = this->out[to_index(l_out)];
    if (m_out == 0) continue;
    const std::size_t d_out = to_index(2 * l_out + 1);
    if (edges == 0) {
      out.blocks.push_back(ad::Tensor::zeros({n, m_out, d_out}));
      continue;
    }
    std::size_t n_paths = 0;
    for (const auto& p : paths) n_paths += p.l_out == l_out ? 1 : 0;
    std::vector<ad::Tensor> parts;
    std::size_t width = 0;
    for (const auto& p : paths) {
      if (p.l_out != l_out) continue;
      auto& hj = gathered[to_index(p.l_in)];
      if (!hj.defined()) hj = ad::gather_rows(h.block(p.l_in), geo.neighbor);
      const std::size_t m_in = in[to_index(p.l_in)];
      const auto& cg = so3::cg_real(p.l_in, p.l_f, p.l_out);
      auto x = ad::cg_contract(hj, geo.sh[to_index(p.l_f)], cg.sparse());
      parts.push_back(ad::scale(x, 1.0 / std::sqrt(static_cast<double>(m_in * n_paths))));
      width += m_in;
    }
    const auto& w = weights[to_index(l_out)];
    if (w.shape() != ad::Shape{radial * width, m_out}) {
      throw ShapeError("tensor product weight for l=" + std::to_string(l_out) + " has shape " +
                       ad::to_string(w.shape()));
    }
    auto cat = parts.size() == 1 ? parts[0] : ad::concat(parts, 1);
    auto flat = ad::reshape(cat, {edges, width * d_out});
    auto agg = ad::radial_scatter_mean(flat, geo.radial, geo.center, n);  // (n, radial, width * d_out)
    out.blocks.push_back(ad::mix_channels(ad::reshape(agg, {n, radial * width, d_out}), w));
  }
  return out;
}

so3::EquivariantFeature LayerNorm::operator()(const so3::EquivariantFeature& x) const {
  so3::EquivariantFeature out{x.layout, {}};
  for (std::size_t i = 0; i < x.layout.size(); ++i) {
    const int l = x.layout[i].l;
    const auto& b = x.blocks[i];
    if (l == 0) {
      auto centered = ad::sub(b, ad::mean_axis(b, 1));
      auto denom = ad::sqrt(ad::add_scalar(ad::var_axis(b, 1), kLayerNormEps));
      out.blocks.push_back(ad::add(ad::mul(ad::div(centered, denom), gamma[0]), beta0));
    } else {
      // The epsilon floors the RMS itself, so unit-scale inputs are scale invariant to ~1e-10.
      auto ms = ad::mean_axis(ad::mean_axis(ad::square(b), 2), 1);
      auto denom = ad::sqrt(ad::add_scalar(ms, kLayerNormEps * kLayerNormEps));
      out.blocks.push_back(ad::mul(ad::div(b, denom), gamma[to_index(l)]));
    }
  }
  return out;
}

so3::EquivariantFeature gate(const so3::EquivariantFeature& x, const std::array<std::size_t, 3>& hidden) {
  const std::size_t gates = hidden[1] + hidden[2];
  if (x.layout.multiplicity(0) != hidden[0] + gates || x.layout.multiplicity(1) != hidden[1] ||
      x.layout.multiplicity(2) != hidden[2]) {
    throw ShapeError("gate expects " + std::to_string(hidden[0]) + " features plus " + std::to_string(gates) +
                     " gate scalars, got " + x.layout.str());
  }
  const auto& s = x.block(0);
  so3::EquivariantFeature out{layout_of(hidden), {}};
  out.blocks.push_back(ad::silu(ad::narrow(s, 1, 0, hidden[0])));
  std::size_t offset = hidden[0];
  for (int l = 1; l <= kMaxL; ++l) {
    const std::size_t m = hidden[to_index(l)];
    if (m == 0) continue;
    out.blocks.push_back(ad::mul(x.block(l), ad::sigmoid(ad::narrow(s, 1, offset, m))));
    offset += m;
  }
  return out;
}

so3::EquivariantFeature GatedResidual::operator()(const so3::EquivariantFeature& prev,
                                                  const so3::EquivariantFeature& msg) const {
  if (!(prev.layout == msg.layout)) {
    throw ShapeError("gated residual layouts differ: " + prev.layout.str() + " vs " + msg.layout.str());
  }
  const std::size_t n = prev.atoms();
  const std::size_t m0 = prev.layout.multiplicity(0);
  ad::Tensor g;
  if (gated) {
    const ad::Tensor scalars[] = {ad::reshape(prev.block(0), {n, m0}), ad::reshape(msg.block(0), {n, m0})};
    g = ad::sigmoid(gate_out(ad::silu(gate_in(ad::concat(scalars, 1)))));
  }
  so3::EquivariantFeature out{prev.layout, {}};
  std::size_t offset = 0;
  for (std::size_t i = 0; i < prev.layout.size(); ++i) {
    const int l = prev.layout[i].l;
    const std::size_t m = prev.layout[i].multiplicity;
    auto self_branch = ad::mix_channels(prev.blocks[i], self[to_index(l)]);
    if (l == 0) self_branch = ad::add(self_branch, self_bias);
    if (gated) {
      auto gl = ad::reshape(ad::narrow(g, 1, offset, m), {n, m, 1});
      out.blocks.push_back(ad::add(msg.blocks[i], ad::mul(gl, ad::sub(self_branch, msg.blocks[i]))));
    } else {
      out.blocks.push_back(ad::add(self_branch, msg.blocks[i]));
    }
    offset += m;
  }
  return out;
}

PoolIndex pool_index(const graph::Batch& batch) {
  PoolIndex idx;
  idx.graphs = batch.size();
  idx.inv_absorbers.resize(idx.graphs);
  idx.inv_others.resize(idx.graphs);
  for (std::size_t g = 0; g < batch.size(); ++g) {
    const auto& m = batch.graphs[g];
    if (m.node_end <= m.node_begin) throw ValueError("graph " + std::to_string(g) + " is empty");
    if (m.absorbers.empty()) throw ValueError("graph " + std::to_string(g) + " has no absorber");
    for (auto a : m.absorbers) {
      idx.absorber_node.push_back(a);
      idx.absorber_graph.push_back(g);
    }
    idx.inv_absorbers[g] = 1.0 / static_cast<double>(m.absorbers.size());
    std::size_t others = 0;
    for (std::size_t i = m.node_begin; i < m.node_end; ++i) {
      if (std::find(m.absorbers.begin(), m.absorbers.end(), i) != m.absorbers.end()) continue;
      idx.other_node.push_back(i);
      idx.other_graph.push_back(g);
      ++others;
    }
    idx.inv_others[g] = others ? 1.0 / static_cast<double>(others) : 0.0;
  }
  return idx;
}

ad::Tensor absorber_mean(const ad::Tensor& x, const PoolIndex& idx) {
  auto summed = ad::scatter_add_rows(ad::gather_rows(x, idx.absorber_node), idx.absorber_graph, idx.graphs);
  return ad::mul(summed, ad::Tensor::from({idx.graphs, 1}, idx.inv_absorbers));
}

ad::Tensor invariant_norms(const ad::Tensor& block, const PoolIndex& idx) {
  const std::size_t m = block.dim(1);
  auto at = ad::gather_rows(block, idx.absorber_node);
  auto norms = ad::sqrt(ad::add_scalar(ad::sum_axis(ad::square(at), 2), kNormGuard));
  auto summed = ad::scatter_add_rows(ad::reshape(norms, {idx.absorber_node.size(), m}), idx.absorber_graph,
                                     idx.graphs);
  return ad::mul(summed, ad::Tensor::from({idx.graphs, 1}, idx.inv_absorbers));
}

std::pair<ad::Tensor, ad::Tensor> AttentionPool::operator()(const ad::Tensor& s, const ad::Tensor& query,
                                                           const PoolIndex& idx) const {
  const std::size_t pairs = idx.other_node.size();
  const std::size_t m0 = s.dim(1);
  if (pairs == 0) return {ad::Tensor::zeros({idx.graphs, m0}), ad::Tensor::zeros({0})};
  auto sp = ad::gather_rows(s, idx.other_node);
  const ad::Tensor joined[] = {ad::gather_rows(query, idx.other_graph), sp};
  auto scores = ad::reshape(score(ad::silu(hidden(ad::concat(joined, 1)))), {pairs});
  auto alpha = ad::masked_softmax(scores, idx.other_graph, idx.graphs, std::vector<bool>(pairs, true));
  auto ctx = ad::scatter_add_rows(ad::mul(ad::reshape(alpha, {pairs, 1}), sp), idx.other_graph, idx.graphs);
  return {ctx, alpha};
}

ad::Tensor mean_pool(const ad::Tensor& s, const PoolIndex& idx) {
  if (idx.other_node.empty()) return ad::Tensor::zeros({idx.graphs, s.dim(1)});
  auto summed = ad::scatter_add_rows(ad::gather_rows(s, idx.other_node), idx.other_graph, idx.graphs);
  return ad::mul(summed, ad::Tensor::from({idx.graphs, 1}, idx.inv_others));
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::array<std::size_t, 3> hidden{config_.hidden_m0(), config_.hidden_m1(), config_.hidden_m2()};
  const std::size_t m0 = hidden[0];
  const std::size_t q = config_.radial_count;

  embedding_ = params_.add("embedding", {kEmbeddingRows, m0}, uniform(rng, kEmbeddingRows * m0, std::sqrt(3.0)));

  for (std::size_t b = 0; b < config_.layers; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    Block block;
    block.tp.in = b == 0 ? std::array<std::size_t, 3>{m0, 0, 0} : hidden;
    block.tp.out = {m0 + hidden[1] + hidden[2], hidden[1], hidden[2]};
    block.tp.paths = tp_paths(block.tp.in, block.tp.out);
    for (int l = 0; l <= kMaxL; ++l) {
      const std::size_t m_out = block.tp.out[to_index(l)];
      if (m_out == 0) continue;
      std::size_t width = 0;
      for (const auto& p : block.tp.paths)
        if (p.l_out == l) width += block.tp.in[to_index(p.l_in)];
      // Unit variance per generated weight; path normalisation handles the fan-in.
      block.tp.weights[to_index(l)] = params_.add(prefix + ".tp.w" + std::to_string(l), {q * width, m_out},
                                                  uniform(rng, q * width * m_out, std::sqrt(3.0)));
    }
    if (config_.use_layernorm) {
      for (int l = 0; l <= kMaxL; ++l) {
        const std::size_t m = block.tp.out[to_index(l)];
        if (m == 0) continue;
        block.norm.gamma[to_index(l)] =
            params_.add(prefix + ".norm.gamma" + std::to_string(l), {1, m, 1}, std::vector<double>(m, 1.0));
      }
      block.norm.beta0 =
          params_.add(prefix + ".norm.beta0", {1, block.tp.out[0], 1}, std::vector<double>(block.tp.out[0], 0.0));
    }
    if (b > 0) {
      block.has_residual = true;
      auto& res = block.residual;
      res.gated = config_.use_gated_residual;
      for (int l = 0; l <= kMaxL; ++l) {
        const std::size_t m = hidden[to_index(l)];
        if (m == 0) continue;
        res.self[to_index(l)] = params_.add(prefix + ".res.self" + std::to_string(l), {m, m},
                                            uniform(rng, m * m, std::sqrt(3.0 / static_cast<double>(m))));
      }
      res.self_bias = params_.add(prefix + ".res.self_bias", {1, m0, 1}, std::vector<double>(m0, 0.0));
      if (res.gated) {
        res.gate_in = make_linear(params_, rng, prefix + ".res.gate_in", 2 * m0, config_.gate_hidden);
        res.gate_out = make_linear(params_, rng, prefix + ".res.gate_out", config_.gate_hidden,
                                   hidden[0] + hidden[1] + hidden[2]);
      }
    }
    blocks_.push_back(std::move(block));
  }

  if (config_.use_attention_pool) {
    attention_.hidden = make_linear(params_, rng, "attention.hidden", 2 * m0, config_.attention_hidden);
    // A shared offset on every score cancels in the softmax, so the score layer has no bias.
    attention_.score = make_linear(params_, rng, "attention.score", config_.attention_hidden, 1, false, false);
  }
  const std::size_t z = config_.readout_input();
  readout_hidden_ = make_linear(params_, rng, "readout.hidden", z, config_.readout_hidden);
  readout_out_ = make_linear(params_, rng, "readout.out", config_.readout_hidden, config_.coefficient_count(), true);
  e0_hidden_ = make_linear(params_, rng, "e0.hidden", z, config_.e0_hidden);
  e0_out_ = make_linear(params_, rng, "e0.out", config_.e0_hidden, 1);
  basis_ = spectra::add_basis_params(params_, config_.effective_basis(), config_.grid);
}

graph::AtomicGraph Model::prepare(const graph::Structure& s, std::size_t absorber) const {
  auto g = graph::build_graph(s, config_.r_max, absorber);
  if (config_.receptive_crop) g = graph::crop_to_hops(g, static_cast<int>(config_.layers));
  return g;
}

so3::EquivariantFeature Model::embed(const std::vector<int>& numbers) const {
  std::vector<std::size_t> rows(numbers.size());
  for (std::size_t i = 0; i < numbers.size(); ++i) {
    const int z = numbers[i];
    if (z < 1 || z >= static_cast<int>(kEmbeddingRows)) {
      throw ValueError("atomic number " + std::to_string(z) + " outside the embedding table [1, 118]");
    }
    rows[i] = static_cast<std::size_t>(z);
  }
  const std::size_t m0 = config_.hidden_m0();
  auto e = ad::reshape(ad::gather_rows(embedding_, rows), {numbers.size(), m0, 1});
  return {so3::IrrepsLayout::scalars(m0), {e}};
}

ForwardResult Model::forward(const graph::Batch& batch, const ForwardOptions& options) const {
  if (options.train && options.rng == nullptr) throw ValueError("training forward pass needs a random generator");
  const std::array<std::size_t, 3> hidden{config_.hidden_m0(), config_.hidden_m1(), config_.hidden_m2()};
  const std::size_t n = batch.atoms();
  const auto geo = edge_geometry(batch, config_);

  ForwardResult result;
  auto h = embed(batch.numbers);
  if (options.keep_features) result.features.push_back(h);
  for (const auto& block : blocks_) {
    auto msg = block.tp(h, geo);
    if (config_.use_layernorm) msg = block.norm(msg);
    msg = gate(msg, hidden);
    h = block.has_residual ? block.residual(h, msg) : msg;
    if (options.keep_features) result.features.push_back(h);
  }

  const auto idx = pool_index(batch);
  const auto s = ad::reshape(h.block(0), {n, hidden[0]});
  const auto s_abs = absorber_mean(s, idx);
  std::vector<ad::Tensor> parts{s_abs};
  if (config_.use_attention_pool) {
    auto [ctx, alpha] = attention_(s, s_abs, idx);
    parts.push_back(ctx);
    result.attention = alpha;
  } else {
    parts.push_back(mean_pool(s, idx));
  }
  for (int l = 1; l <= kMaxL; ++l)
    if (hidden[to_index(l)] > 0) parts.push_back(invariant_norms(h.block(l), idx));
  result.z = ad::concat(parts, 1);

  auto act = ad::silu(readout_hidden_(result.z));
  if (options.train && config_.dropout > 0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 - config_.dropout;
    std::vector<double> mask(act.numel());
    for (auto& v : mask) v = u(*options.rng) < keep ? 1.0 / keep : 0.0;
    act = ad::mul(act, ad::Tensor::from(act.shape(), std::move(mask)));
  }
  result.coefficients = readout_out_(act);
  const auto design = spectra::eval_basis(basis_, config_.effective_basis(), config_.grid);
  result.spectrum = spectra::reconstruct(result.coefficients, design);
  result.e0 = e0_head(ad::detach(result.z));
  return result;
}

ad::Tensor Model::e0_head(const ad::Tensor& z) const { return e0_out_(ad::silu(e0_hidden_(z))); }

std::vector<std::pair<std::string, std::size_t>> Model::parameter_report() const {
  std::vector<std::pair<std::string, std::size_t>> report;
  for (const auto& e : params_.entries()) {
    const std::string group = e.name.substr(0, e.name.find('.'));
    if (report.empty() || report.back().first != group) report.emplace_back(group, 0);
    report.back().second += e.tensor.numel();
  }
  return report;
}

bool Model::is_basis_parameter(const std::string& name) { return name.rfind("basis.", 0) == 0; }

}  // namespace xane3::model
