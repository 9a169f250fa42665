#pragma once

// Conditional VAE over distance-geometry point sets: an encoder q(z|G) on
// complete graphs, a Gaussian-mixture prior p(z|G̃) and a decoder p(G|G̃,z)
// on partial graphs. All three are message-passing networks over the fully
// connected vertex set of each graph; known edge weights enter the messages
// as edge attributes.

#include "dgik/diff.hpp"
#include "dgik/distgeo.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dgik {

enum class Architecture { Egnn, Mpnn };

std::string to_string(Architecture arch);
/// Accepts "egnn" or "mpnn"; throws InvalidArgument otherwise.
Architecture architecture_from_string(const std::string& name);

struct ModelConfig {
  Architecture arch = Architecture::Egnn;
  int latent_dim = 64;
  int hidden_dim = 64;
  int layers = 5;
  int components = 16;
  /// Added to the relative distance when normalizing coordinate updates.
  double coord_eps = 1e-8;

  void validate() const;
};

/// Several graphs packed as one disjoint union with fully connected
/// directed edges inside each graph.
struct GraphBatch {
  int graphs = 0;
  std::vector<int> offsets;      ///< graphs + 1 node offsets
  diff::Matrix roles;            ///< n×3 one-hot
  diff::Matrix positions;        ///< n×3, unknown vertices placed at o
  diff::Matrix anchor;           ///< n×3, position of each graph's base vertex o
  std::vector<int> src, dst;     ///< directed pairs i ≠ j within a graph
  diff::Matrix edge_attr;        ///< E×2: (known distance or 0, known flag)
  diff::Matrix inv_degree;       ///< n×1: 1 / (graph size − 1)

  int nodes() const { return offsets.empty() ? 0 : offsets.back(); }
  int edge_count() const { return static_cast<int>(src.size()); }
};

GraphBatch make_batch(std::span<const DgGraph* const> graphs);
GraphBatch make_batch(const DgGraph& graph);
/// Same graph repeated `copies` times.
GraphBatch repeat_batch(const DgGraph& graph, int copies);

struct Linear {
  diff::Parameter w;
  diff::Parameter b;

  diff::Tensor operator()(diff::Tape& t, const diff::Tensor& x) const;
};

/// One message-passing layer. For EGNN the message also sees ‖x_i − x_j‖²
/// and a scalar gate moves x_i along (x_i − x_j); the plain variant has no
/// coordinate channel.
struct MessageLayer {
  diff::Parameter edge_src, edge_dst, edge_attr, edge_b1;
  Linear edge2;
  Linear coord1;
  diff::Parameter coord2;
  diff::Parameter node_h, node_m, node_b1;
  Linear node2;
};

struct LayerStack {
  Architecture arch = Architecture::Egnn;
  double coord_eps = 1e-8;
  std::vector<MessageLayer> layers;
};

struct NodeState {
  diff::Tensor h;
  diff::Tensor x;
};

/// Applies the layers in order. With an empty stack the inputs are returned
/// unchanged. `update_last_coords` false skips the final coordinate update
/// when only h is consumed.
NodeState egnn_forward(diff::Tape& tape, const LayerStack& stack, NodeState in, const GraphBatch& batch,
                       bool update_last_coords = true);

/// Builds a stack of `count` layers of width `hidden`.
LayerStack make_layer_stack(const std::string& prefix, Architecture arch, int hidden, int count, double coord_eps,
                            std::mt19937_64& rng);

/// Embedding + layer stack + optional coordinate readout (plain variant).
class GraphNetwork {
 public:
  GraphNetwork(const std::string& name, const ModelConfig& cfg, int in_features, std::mt19937_64& rng);

  /// `features` n×in_features invariant input; positions are taken from the
  /// batch (anchored at o before the network, restored afterwards).
  NodeState forward(diff::Tape& tape, const diff::Tensor& features, const diff::Matrix& positions,
                    const GraphBatch& batch, bool need_coords) const;

  std::vector<diff::Parameter*> parameters();
  LayerStack& stack() { return stack_; }
  const LayerStack& stack() const { return stack_; }

 private:
  Architecture arch_;
  Linear embed_;
  LayerStack stack_;
  Linear coord_readout_;  // plain variant only
};

struct GaussianNodeParams {
  diff::Matrix mu;     ///< N×L
  diff::Matrix sigma;  ///< N×L, > 0
};

struct GmmNodeParams {
  int components = 0;
  diff::Matrix mu;       ///< N×(K·L), component k in columns [kL, (k+1)L)
  diff::Matrix sigma;    ///< N×(K·L)
  diff::Matrix weights;  ///< N×K, rows sum to 1

  int latent_dim() const { return components == 0 ? 0 : static_cast<int>(mu.cols()) / components; }
};

class CvaeModel {
 public:
  CvaeModel(const ModelConfig& cfg, std::uint64_t seed);
  CvaeModel(const CvaeModel&) = delete;
  CvaeModel& operator=(const CvaeModel&) = delete;
  CvaeModel(CvaeModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  /// Every learnable tensor, in a stable order with unique names.
  std::vector<diff::Parameter*> parameters();
  std::vector<const diff::Parameter*> parameters() const;

  struct Posterior {
    diff::Tensor mu, log_sigma;  // n×L
  };
  struct Prior {
    diff::Tensor mu, log_sigma;  // n×KL
    diff::Tensor log_weights;    // n×K
  };

  Posterior encode(diff::Tape& tape, const GraphBatch& complete) const;
  Prior prior(diff::Tape& tape, const GraphBatch& partial) const;
  /// Position means, n×3.
  diff::Tensor decode(diff::Tape& tape, const GraphBatch& partial, const diff::Tensor& z) const;

 private:
  ModelConfig cfg_;
  std::unique_ptr<GraphNetwork> encoder_, prior_, decoder_;
  std::unique_ptr<Linear> enc_mu_, enc_sigma_, prior_mu_, prior_sigma_, prior_logits_;
};

/// Single-graph conveniences; throw NonFinite on non-finite outputs.
GaussianNodeParams encode(const CvaeModel& model, const DgGraph& complete);
GmmNodeParams prior(const CvaeModel& model, const DgGraph& partial);
Points decode(const CvaeModel& model, const DgGraph& partial, const diff::Matrix& z);

/// Ancestral draw of one latent graph: component by inverse CDF on the
/// weights, then a diagonal Gaussian.
diff::Matrix sample_latent(const GmmNodeParams& p, std::mt19937_64& rng);

struct SampleOptions {
  /// Graphs decoded per forward pass; small chunks keep edge tensors in cache.
  int chunk = 8;
  double divergence_tolerance = 0.05;
};

struct SampleResult {
  Configuration q;
  DgGraph graph;  ///< decoded complete point set
  ReconstructionStatus status = ReconstructionStatus::Ok;
};

/// Draws `count` solutions. Sample i uses its own stream seeded from
/// (seed, i), so results do not depend on chunking.
std::vector<SampleResult> sample_solutions(const CvaeModel& model, const IkProblem& problem, int count,
                                           std::uint64_t seed, const SampleOptions& options = {});

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string dataset_hash;
  int epochs = 0;
};

void save_checkpoint(const std::string& path, const CvaeModel& model, const CheckpointMeta& meta);
CvaeModel load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace dgik
