#include "dgik/model.hpp"

#include "dgik/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

namespace dgik {

using diff::Matrix;
using diff::Parameter;
using diff::Tape;
using diff::Tensor;

namespace {

Matrix uniform_init(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Parameter weight(const std::string& name, int in, int out, int fan_in, std::mt19937_64& rng, double gain = 1.0) {
  return Parameter(name, uniform_init(in, out, gain / std::sqrt(static_cast<double>(fan_in)), rng));
}

Parameter bias(const std::string& name, int out) { return Parameter(name, Matrix::Zero(1, out)); }

Linear make_linear(const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 1.0) {
  return Linear{weight(name + ".w", in, out, in, rng, gain), bias(name + ".b", out)};
}

void push(std::vector<Parameter*>& out, Linear& l) {
  out.push_back(&l.w);
  out.push_back(&l.b);
}

std::vector<Parameter*> layer_parameters(MessageLayer& l, Architecture arch) {
  std::vector<Parameter*> out{&l.edge_src, &l.edge_dst, &l.edge_attr};
  out.push_back(&l.edge_b1);
  push(out, l.edge2);
  if (arch == Architecture::Egnn) {
    push(out, l.coord1);
    out.push_back(&l.coord2);
  }
  out.push_back(&l.node_h);
  out.push_back(&l.node_m);
  out.push_back(&l.node_b1);
  push(out, l.node2);
  return out;
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw Error(ErrorCode::NonFinite, what + ": non-finite network output");
}

}  // namespace

std::string to_string(Architecture arch) { return arch == Architecture::Egnn ? "egnn" : "mpnn"; }

Architecture architecture_from_string(const std::string& name) {
  if (name == "egnn") return Architecture::Egnn;
  if (name == "mpnn") return Architecture::Mpnn;
  throw Error(ErrorCode::InvalidArgument, "unknown architecture '" + name + "' (expected egnn or mpnn)");
}

void ModelConfig::validate() const {
  if (latent_dim < 1 || hidden_dim < 1 || layers < 0 || components < 1)
    throw Error(ErrorCode::InvalidArgument,
                "model config: latent_dim, hidden_dim, components must be >= 1 and layers >= 0");
  if (!(coord_eps >= 0.0)) throw Error(ErrorCode::InvalidArgument, "model config: coord_eps must be >= 0");
}

GraphBatch make_batch(std::span<const DgGraph* const> graphs) {
  GraphBatch b;
  b.graphs = static_cast<int>(graphs.size());
  b.offsets.push_back(0);
  int edges = 0;
  for (const DgGraph* g : graphs) {
    const int n = g->vertex_count();
    b.offsets.push_back(b.offsets.back() + n);
    edges += n * (n - 1);
  }
  const int n_total = b.offsets.back();
  b.roles = Matrix::Zero(n_total, 3);
  b.positions = Matrix::Zero(n_total, 3);
  b.anchor = Matrix::Zero(n_total, 3);
  b.inv_degree = Matrix::Zero(n_total, 1);
  b.edge_attr = Matrix::Zero(edges, 2);
  b.src.reserve(static_cast<std::size_t>(edges));
  b.dst.reserve(static_cast<std::size_t>(edges));

  int e = 0;
  for (int k = 0; k < b.graphs; ++k) {
    const DgGraph& g = *graphs[static_cast<std::size_t>(k)];
    const int n = g.vertex_count();
    const int off = b.offsets[static_cast<std::size_t>(k)];
    if (g.positions.rows() != n)
      throw Error(ErrorCode::DimensionMismatch, "make_batch: graph positions do not match its vertex count");
    Matrix table = Matrix::Zero(n, n);
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> has = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(n, n);
    for (const Edge& ed : g.edges) {
      table(ed.u, ed.v) = table(ed.v, ed.u) = ed.distance;
      has(ed.u, ed.v) = has(ed.v, ed.u) = 1;
    }
    const int o = g.layout().o();
    const bool anchored = g.known.size() == static_cast<std::size_t>(n) && g.known[static_cast<std::size_t>(o)];
    for (int i = 0; i < n; ++i) {
      const auto oh = one_hot(g.roles[static_cast<std::size_t>(i)]);
      for (int c = 0; c < 3; ++c) b.roles(off + i, c) = oh[static_cast<std::size_t>(c)];
      if (anchored) b.anchor.row(off + i) = g.positions.row(o);
      // Unknown vertices start at o, i.e. at zero in the anchored frame.
      if (g.known[static_cast<std::size_t>(i)])
        b.positions.row(off + i) = g.positions.row(i);
      else
        b.positions.row(off + i) = b.anchor.row(off + i);
      b.inv_degree(off + i, 0) = n > 1 ? 1.0 / (n - 1) : 0.0;
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        b.src.push_back(off + i);
        b.dst.push_back(off + j);
        if (has(i, j)) {
          b.edge_attr(e, 0) = table(i, j);
          b.edge_attr(e, 1) = 1.0;
        }
        ++e;
      }
    }
  }
  return b;
}

GraphBatch make_batch(const DgGraph& graph) {
  const DgGraph* p = &graph;
  return make_batch(std::span<const DgGraph* const>(&p, 1));
}

GraphBatch repeat_batch(const DgGraph& graph, int copies) {
  std::vector<const DgGraph*> gs(static_cast<std::size_t>(copies), &graph);
  return make_batch(gs);
}

Tensor Linear::operator()(Tape& t, const Tensor& x) const {
  return diff::linear(x, t.parameter(const_cast<Parameter&>(w)), t.parameter(const_cast<Parameter&>(b)));
}

LayerStack make_layer_stack(const std::string& prefix, Architecture arch, int hidden, int count, double coord_eps,
                            std::mt19937_64& rng) {
  LayerStack s;
  s.arch = arch;
  s.coord_eps = coord_eps;
  const int H = hidden;
  for (int k = 0; k < count; ++k) {
    const std::string p = prefix + ".layer" + std::to_string(k) + ".";
    const int edge_fan = 2 * H + (arch == Architecture::Egnn ? 1 : 0) + 2;
    MessageLayer l;
    l.edge_src = weight(p + "edge_src", H, H, edge_fan, rng);
    l.edge_dst = weight(p + "edge_dst", H, H, edge_fan, rng);
    // Edge scalars: [‖x_i − x_j‖² (EGNN only), known distance, known flag].
    l.edge_attr = weight(p + "edge_attr", arch == Architecture::Egnn ? 3 : 2, H, edge_fan, rng);
    l.edge_b1 = bias(p + "edge_b1", H);
    l.edge2 = make_linear(p + "edge2", H, H, rng);
    if (arch == Architecture::Egnn) {
      l.coord1 = make_linear(p + "coord1", H, H, rng);
      // Small initial gate keeps early coordinate updates near zero.
      l.coord2 = weight(p + "coord2", H, 1, H, rng, 1e-3);
    }
    l.node_h = weight(p + "node_h", H, H, 2 * H, rng);
    l.node_m = weight(p + "node_m", H, H, 2 * H, rng);
    l.node_b1 = bias(p + "node_b1", H);
    l.node2 = make_linear(p + "node2", H, H, rng);
    s.layers.push_back(std::move(l));
  }
  return s;
}

NodeState egnn_forward(Tape& tape, const LayerStack& stack, NodeState in, const GraphBatch& batch,
                       bool update_last_coords) {
  using namespace diff;
  auto P = [&](const Parameter& p) { return tape.parameter(const_cast<Parameter&>(p)); };
  const Index n = batch.nodes();
  if (stack.layers.empty()) return in;
  const Tensor attr = tape.constant(batch.edge_attr);
  const Tensor inv_deg = tape.constant(batch.inv_degree);
  Tensor h = in.h, x = in.x;
  for (std::size_t k = 0; k < stack.layers.size(); ++k) {
    const MessageLayer& L = stack.layers[k];
    const bool egnn = stack.arch == Architecture::Egnn;
    // First edge linear split into per-node halves before gathering.
    Tensor pre = add(gather_rows(matmul(h, P(L.edge_src)), batch.src), gather_rows(matmul(h, P(L.edge_dst)), batch.dst));
    Tensor rel, d2, edge_in = attr;
    if (egnn) {
      rel = sub(gather_rows(x, batch.src), gather_rows(x, batch.dst));
      d2 = row_sum(square(rel));
      const std::vector<Tensor> parts{d2, attr};
      edge_in = concat_cols(parts);
    }
    pre = add(pre, linear(edge_in, P(L.edge_attr), P(L.edge_b1)));
    const Tensor m = silu(L.edge2(tape, silu(pre)));

    if (egnn && (update_last_coords || k + 1 < stack.layers.size())) {
      const Tensor gate = matmul(silu(L.coord1(tape, m)), P(L.coord2));
      const Tensor scaled = div(gate, add_scalar(sqrt(d2), stack.coord_eps));
      const Tensor moved = scatter_add_rows(row_scale(rel, scaled), batch.src, n);
      x = add(x, row_scale(moved, inv_deg));
    }

    const Tensor agg = row_scale(scatter_add_rows(m, batch.src, n), inv_deg);
    const Tensor hidden = silu(add(linear(h, P(L.node_h), P(L.node_b1)), matmul(agg, P(L.node_m))));
    h = add(h, L.node2(tape, hidden));
  }
  return {h, x};
}

GraphNetwork::GraphNetwork(const std::string& name, const ModelConfig& cfg, int in_features, std::mt19937_64& rng)
    : arch_(cfg.arch) {
  const int in = in_features + (arch_ == Architecture::Mpnn ? 3 : 0);
  embed_ = make_linear(name + ".embed", in, cfg.hidden_dim, rng);
  stack_ = make_layer_stack(name, cfg.arch, cfg.hidden_dim, cfg.layers, cfg.coord_eps, rng);
  if (arch_ == Architecture::Mpnn) coord_readout_ = make_linear(name + ".coord_out", cfg.hidden_dim, 3, rng);
}

NodeState GraphNetwork::forward(Tape& tape, const Tensor& features, const Matrix& positions, const GraphBatch& batch,
                                bool need_coords) const {
  const Matrix anchored = positions - batch.anchor;
  Tensor feats = features;
  if (arch_ == Architecture::Mpnn) {
    const std::vector<Tensor> parts{features, tape.constant(anchored)};
    feats = diff::concat_cols(parts);
  }
  NodeState s{embed_(tape, feats), tape.constant(anchored)};
  s = egnn_forward(tape, stack_, s, batch, need_coords);
  if (need_coords) {
    if (arch_ == Architecture::Mpnn) s.x = coord_readout_(tape, s.h);
    s.x = diff::add(s.x, tape.constant(batch.anchor));
  }
  return s;
}

std::vector<Parameter*> GraphNetwork::parameters() {
  std::vector<Parameter*> out;
  push(out, embed_);
  for (MessageLayer& l : stack_.layers)
    for (Parameter* p : layer_parameters(l, arch_)) out.push_back(p);
  if (arch_ == Architecture::Mpnn) push(out, coord_readout_);
  return out;
}

CvaeModel::CvaeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int H = cfg.hidden_dim, L = cfg.latent_dim, K = cfg.components;
  encoder_ = std::make_unique<GraphNetwork>("encoder", cfg, 3, rng);
  prior_ = std::make_unique<GraphNetwork>("prior", cfg, 3, rng);
  decoder_ = std::make_unique<GraphNetwork>("decoder", cfg, 3 + L, rng);
  enc_mu_ = std::make_unique<Linear>(make_linear("encoder.mu", H, L, rng));
  enc_sigma_ = std::make_unique<Linear>(make_linear("encoder.log_sigma", H, L, rng, 0.1));
  prior_mu_ = std::make_unique<Linear>(make_linear("prior.mu", H, K * L, rng));
  prior_sigma_ = std::make_unique<Linear>(make_linear("prior.log_sigma", H, K * L, rng, 0.1));
  prior_logits_ = std::make_unique<Linear>(make_linear("prior.logits", H, K, rng, 0.1));
}

std::vector<Parameter*> CvaeModel::parameters() {
  std::vector<Parameter*> out = encoder_->parameters();
  push(out, *enc_mu_);
  push(out, *enc_sigma_);
  for (Parameter* p : prior_->parameters()) out.push_back(p);
  push(out, *prior_mu_);
  push(out, *prior_sigma_);
  push(out, *prior_logits_);
  for (Parameter* p : decoder_->parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> CvaeModel::parameters() const {
  auto ps = const_cast<CvaeModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

CvaeModel::Posterior CvaeModel::encode(Tape& tape, const GraphBatch& complete) const {
  const auto s = encoder_->forward(tape, tape.constant(complete.roles), complete.positions, complete, false);
  return {(*enc_mu_)(tape, s.h), (*enc_sigma_)(tape, s.h)};
}

CvaeModel::Prior CvaeModel::prior(Tape& tape, const GraphBatch& partial) const {
  const auto s = prior_->forward(tape, tape.constant(partial.roles), partial.positions, partial, false);
  return {(*prior_mu_)(tape, s.h), (*prior_sigma_)(tape, s.h), diff::log_softmax((*prior_logits_)(tape, s.h))};
}

Tensor CvaeModel::decode(Tape& tape, const GraphBatch& partial, const Tensor& z) const {
  if (z.rows() != partial.nodes() || z.cols() != cfg_.latent_dim)
    throw Error(ErrorCode::ShapeMismatch, "decode: latent shape " + diff::to_string(z.shape()) + " expected [" +
                                              std::to_string(partial.nodes()) + ", " +
                                              std::to_string(cfg_.latent_dim) + "]");
  const std::vector<Tensor> parts{tape.constant(partial.roles), z};
  return decoder_->forward(tape, diff::concat_cols(parts), partial.positions, partial, true).x;
}

GaussianNodeParams encode(const CvaeModel& model, const DgGraph& complete) {
  Tape tape(false);
  const auto out = model.encode(tape, make_batch(complete));
  GaussianNodeParams p{out.mu.value(), out.log_sigma.value().array().exp()};
  require_finite(p.mu, "encode");
  require_finite(p.sigma, "encode");
  return p;
}

GmmNodeParams prior(const CvaeModel& model, const DgGraph& partial) {
  Tape tape(false);
  const auto out = model.prior(tape, make_batch(partial));
  GmmNodeParams p;
  p.components = model.config().components;
  p.mu = out.mu.value();
  p.sigma = out.log_sigma.value().array().exp();
  p.weights = out.log_weights.value().array().exp();
  require_finite(p.mu, "prior");
  require_finite(p.sigma, "prior");
  require_finite(p.weights, "prior");
  return p;
}

Points decode(const CvaeModel& model, const DgGraph& partial, const Matrix& z) {
  Tape tape(false);
  const Matrix out = model.decode(tape, make_batch(partial), tape.constant(z)).value();
  require_finite(out, "decode");
  return Points(out);
}

Matrix sample_latent(const GmmNodeParams& p, std::mt19937_64& rng) {
  const int K = p.components, L = p.latent_dim();
  const Eigen::Index n = p.mu.rows();
  Matrix z(n, L);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = u(rng);
    int k = 0;
    double c = p.weights(i, 0);
    while (k + 1 < K && r >= c) c += p.weights(i, ++k);
    for (int l = 0; l < L; ++l) z(i, l) = p.mu(i, k * L + l) + p.sigma(i, k * L + l) * normal(rng);
  }
  return z;
}

std::vector<SampleResult> sample_solutions(const CvaeModel& model, const IkProblem& problem, int count,
                                           std::uint64_t seed, const SampleOptions& options) {
  std::vector<SampleResult> results;
  if (count <= 0) return results;
  results.reserve(static_cast<std::size_t>(count));
  const DgGraph& partial = problem.partial_graph;
  const GmmNodeParams gp = prior(model, partial);
  const int n = partial.vertex_count();
  const int chunk = std::max(1, options.chunk);
  const ReconstructionOptions rec_opts{options.divergence_tolerance, problem.goal};

  for (int start = 0; start < count; start += chunk) {
    const int c = std::min(chunk, count - start);
    Matrix z(static_cast<Eigen::Index>(c) * n, model.config().latent_dim);
    for (int i = 0; i < c; ++i) {
      std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(start + i))));
      z.middleRows(static_cast<Eigen::Index>(i) * n, n) = sample_latent(gp, rng);
    }
    Tape tape(false);
    const GraphBatch batch = repeat_batch(partial, c);
    const Matrix pos = model.decode(tape, batch, tape.constant(std::move(z))).value();
    for (int i = 0; i < c; ++i) {
      SampleResult r;
      r.graph = partial;
      r.graph.positions = pos.middleRows(static_cast<Eigen::Index>(i) * n, n);
      r.graph.known.assign(static_cast<std::size_t>(n), 1);
      r.graph.edges.clear();
      for (int u = 0; u < n; ++u)
        for (int v = u + 1; v < n; ++v)
          r.graph.edges.push_back({u, v, (r.graph.positions.row(u) - r.graph.positions.row(v)).norm()});
      if (!r.graph.positions.allFinite()) {
        r.q = Configuration{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(problem.chain.dof()))};
        r.status = ReconstructionStatus::Diverged;
      } else {
        const Reconstruction rec = points_to_config(problem.chain, r.graph.positions, rec_opts);
        r.q = rec.q;
        r.status = rec.status;
      }
      results.push_back(std::move(r));
    }
  }
  return results;
}

namespace {
constexpr char kMagic[8] = {'D', 'G', 'I', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const CvaeModel& model, const CheckpointMeta& meta) {
  const ModelConfig& c = model.config();
  nlohmann::json header;
  header["config"] = {{"arch", to_string(c.arch)},       {"latent_dim", c.latent_dim},
                      {"hidden_dim", c.hidden_dim},       {"layers", c.layers},
                      {"components", c.components},       {"coord_eps", c.coord_eps}};
  header["meta"] = {{"seed", meta.seed}, {"dataset_hash", meta.dataset_hash}, {"epochs", meta.epochs}};
  header["params"] = nlohmann::json::array();
  const auto params = model.parameters();
  for (const Parameter* p : params)
    header["params"].push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Parameter* p : params)
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
  if (!out) throw Error(ErrorCode::Io, "failed writing checkpoint '" + path + "'");
}

CvaeModel load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint '" + path + "'");
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::string(magic, 8) != std::string(kMagic, 8))
    throw Error(ErrorCode::Parse, "'" + path + "' is not a checkpoint");
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::Parse, "'" + path + "': unsupported checkpoint version " + std::to_string(version));
  if (len > (1u << 26)) throw Error(ErrorCode::Parse, "'" + path + "': corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error(ErrorCode::Parse, "'" + path + "': truncated checkpoint header");

  ModelConfig cfg;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    const auto& c = header.at("config");
    cfg.arch = architecture_from_string(c.at("arch").get<std::string>());
    cfg.latent_dim = c.at("latent_dim").get<int>();
    cfg.hidden_dim = c.at("hidden_dim").get<int>();
    cfg.layers = c.at("layers").get<int>();
    cfg.components = c.at("components").get<int>();
    cfg.coord_eps = c.at("coord_eps").get<double>();
    if (meta) {
      const auto& m = header.at("meta");
      meta->seed = m.at("seed").get<std::uint64_t>();
      meta->dataset_hash = m.at("dataset_hash").get<std::string>();
      meta->epochs = m.at("epochs").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, "'" + path + "': bad checkpoint header: " + e.what());
  }
  CvaeModel model(cfg, 0);
  auto params = model.parameters();
  const auto& listed = header.at("params");
  if (listed.size() != params.size())
    throw Error(ErrorCode::Parse, "'" + path + "': parameter count does not match the configuration");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    const auto& d = listed[k];
    if (d.at("name").get<std::string>() != p.name || d.at("rows").get<Eigen::Index>() != p.value.rows() ||
        d.at("cols").get<Eigen::Index>() != p.value.cols())
      throw Error(ErrorCode::Parse, "'" + path + "': parameter '" + d.at("name").get<std::string>() +
                                        "' does not match the configuration");
    in.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
    p.zero_grad();
  }
  if (!in) throw Error(ErrorCode::Parse, "'" + path + "': truncated parameter data");
  return model;
}

}  // namespace dgik
