#include "dgik/error.hpp"
#include "dgik/model.hpp"
#include "dgik/robot_io.hpp"
#include "model_fixtures.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace dgik {
namespace {

using diff::Matrix;
using diff::Tape;
using testing::apply_rigid;
using testing::random_orthogonal;
using testing::robot_path;
using testing::transform_graph;

ModelConfig small_config(Architecture arch = Architecture::Egnn) {
  ModelConfig c;
  c.arch = arch;
  c.hidden_dim = 12;
  c.latent_dim = 6;
  c.layers = 3;
  c.components = 3;
  return c;
}

struct Fixture {
  KinematicChain chain = load_chain(robot_path("toy6"));
  Configuration q = sample_configuration(chain, std::uint64_t{17});
  DgGraph partial = assemble_partial_graph(chain, end_effector_pose(chain, q));
  DgGraph complete = complete_graph_from_config(chain, q);
};

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

TEST(GraphBatch, FullyConnectedWithKnownEdgeAttributes) {
  Fixture f;
  const GraphBatch b = make_batch(f.partial);
  const int n = f.partial.vertex_count();
  EXPECT_EQ(b.nodes(), n);
  EXPECT_EQ(b.edge_count(), n * (n - 1));
  int known_edges = 0;
  for (int e = 0; e < b.edge_count(); ++e) known_edges += b.edge_attr(e, 1) > 0.5 ? 1 : 0;
  EXPECT_EQ(known_edges, 2 * static_cast<int>(f.partial.edges.size()));
  for (int i = 0; i < n; ++i) {
    EXPECT_NEAR(b.roles.row(i).sum(), 1.0, 0.0);
    EXPECT_DOUBLE_EQ(b.inv_degree(i, 0), 1.0 / (n - 1));
  }
}

TEST(GraphBatch, DisjointUnionOffsets) {
  Fixture f;
  const GraphBatch b = repeat_batch(f.partial, 3);
  const int n = f.partial.vertex_count();
  EXPECT_EQ(b.graphs, 3);
  EXPECT_EQ(b.offsets, (std::vector<int>{0, n, 2 * n, 3 * n}));
  for (int e = 0; e < b.edge_count(); ++e) EXPECT_EQ(b.src[e] / n, b.dst[e] / n);
}

TEST(LayerStack, ZeroLayersIsIdentity) {
  Fixture f;
  std::mt19937_64 rng(1);
  const LayerStack empty = make_layer_stack("s", Architecture::Egnn, 8, 0, 1e-8, rng);
  const GraphBatch b = make_batch(f.partial);
  Tape tape(false);
  const Matrix h = random_matrix(b.nodes(), 8, 2);
  const auto out = egnn_forward(tape, empty, {tape.constant(h), tape.constant(b.positions)}, b);
  EXPECT_EQ(out.h.value(), h);
  EXPECT_EQ(out.x.value(), b.positions);
}

TEST(LayerStack, NodePermutationEquivariance) {
  Fixture f;
  std::mt19937_64 rng(3);
  const LayerStack stack = make_layer_stack("s", Architecture::Egnn, 8, 2, 1e-8, rng);
  const GraphBatch b = make_batch(f.complete);
  const int n = b.nodes();
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  // Permuted batch: new node i is old node perm[i].
  std::vector<int> inv(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  GraphBatch p = b;
  for (int i = 0; i < n; ++i) {
    p.roles.row(i) = b.roles.row(perm[static_cast<std::size_t>(i)]);
    p.positions.row(i) = b.positions.row(perm[static_cast<std::size_t>(i)]);
    p.anchor.row(i) = b.anchor.row(perm[static_cast<std::size_t>(i)]);
  }
  for (int e = 0; e < b.edge_count(); ++e) {
    p.src[static_cast<std::size_t>(e)] = inv[static_cast<std::size_t>(b.src[static_cast<std::size_t>(e)])];
    p.dst[static_cast<std::size_t>(e)] = inv[static_cast<std::size_t>(b.dst[static_cast<std::size_t>(e)])];
  }
  const Matrix h = random_matrix(n, 8, 4);
  Matrix hp(n, 8);
  for (int i = 0; i < n; ++i) hp.row(i) = h.row(perm[static_cast<std::size_t>(i)]);
  Tape tape(false);
  const auto a = egnn_forward(tape, stack, {tape.constant(h), tape.constant(b.positions)}, b);
  const auto c = egnn_forward(tape, stack, {tape.constant(hp), tape.constant(p.positions)}, p);
  for (int i = 0; i < n; ++i) {
    EXPECT_LT((c.h.value().row(i) - a.h.value().row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((c.x.value().row(i) - a.x.value().row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CvaeModel, DecoderIsEuclideanEquivariant) {
  Fixture f;
  const CvaeModel model(small_config(), 5);
  const Matrix z = random_matrix(f.partial.vertex_count(), model.config().latent_dim, 6);
  const Points base = decode(model, f.partial, z);
  const GmmNodeParams pr = prior(model, f.partial);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst_x = 0.0, worst_inv = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Eigen::Matrix3d A = random_orthogonal(rng, t % 2 == 1);
    const Eigen::Vector3d shift(n(rng), n(rng), n(rng));
    const DgGraph moved = transform_graph(f.partial, A, shift);
    const Points out = decode(model, moved, z);
    worst_x = std::max(worst_x, (out - apply_rigid(base, A, shift)).cwiseAbs().maxCoeff());
    const GmmNodeParams pm = prior(model, moved);
    worst_inv = std::max({worst_inv, (pm.mu - pr.mu).cwiseAbs().maxCoeff(), (pm.sigma - pr.sigma).cwiseAbs().maxCoeff(),
                          (pm.weights - pr.weights).cwiseAbs().maxCoeff()});
  }
  EXPECT_LT(worst_x, 1e-8);
  EXPECT_LT(worst_inv, 1e-8);
}

TEST(CvaeModel, EncoderIsInvariant) {
  Fixture f;
  const CvaeModel model(small_config(), 8);
  const GaussianNodeParams base = encode(model, f.complete);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    const DgGraph moved = transform_graph(f.complete, random_orthogonal(rng, t % 2 == 0), Eigen::Vector3d(0.3, -1.0, 2.0));
    const GaussianNodeParams e = encode(model, moved);
    EXPECT_LT((e.mu - base.mu).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((e.sigma - base.sigma).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(CvaeModel, PlainVariantIsOnlyTranslationEquivariant) {
  Fixture f;
  const CvaeModel model(small_config(Architecture::Mpnn), 10);
  const Matrix z = random_matrix(f.partial.vertex_count(), model.config().latent_dim, 11);
  const Points base = decode(model, f.partial, z);
  const Eigen::Vector3d shift(0.5, -0.2, 1.0);
  const Points moved = decode(model, transform_graph(f.partial, Eigen::Matrix3d::Identity(), shift), z);
  EXPECT_LT((moved - apply_rigid(base, Eigen::Matrix3d::Identity(), shift)).cwiseAbs().maxCoeff(), 1e-10);
  std::mt19937_64 rng(12);
  const Eigen::Matrix3d A = random_orthogonal(rng, false);
  const Points rotated = decode(model, transform_graph(f.partial, A, Eigen::Vector3d::Zero()), z);
  EXPECT_GT((rotated - apply_rigid(base, A, Eigen::Vector3d::Zero())).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CvaeModel, PriorParametersAreValid) {
  Fixture f;
  const CvaeModel model(small_config(), 13);
  const GmmNodeParams p = prior(model, f.partial);
  EXPECT_EQ(p.components, 3);
  EXPECT_EQ(p.latent_dim(), 6);
  EXPECT_GT(p.sigma.minCoeff(), 0.0);
  EXPECT_GE(p.weights.minCoeff(), 0.0);
  for (Eigen::Index i = 0; i < p.weights.rows(); ++i) EXPECT_NEAR(p.weights.row(i).sum(), 1.0, 1e-12);
  const GaussianNodeParams e = encode(model, f.complete);
  EXPECT_GT(e.sigma.minCoeff(), 0.0);
}

TEST(CvaeModel, SameSeedSameModel) {
  Fixture f;
  const CvaeModel a(small_config(), 21), b(small_config(), 21), c(small_config(), 22);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    any_diff = any_diff || pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(any_diff);
  const Matrix z = random_matrix(f.partial.vertex_count(), 6, 1);
  EXPECT_EQ(decode(a, f.partial, z), decode(b, f.partial, z));
}

TEST(CvaeModel, ParameterNamesAreUnique) {
  const CvaeModel model(small_config(), 1);
  std::set<std::string> names;
  for (const auto* p : model.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
}

TEST(CvaeModel, DecodeRejectsWrongLatentShape) {
  Fixture f;
  const CvaeModel model(small_config(), 1);
  EXPECT_THROW(decode(model, f.partial, Matrix::Zero(f.partial.vertex_count(), 5)), Error);
  EXPECT_THROW(architecture_from_string("gcn"), Error);
}

TEST(CvaeModel, ElboGradientsMatchFiniteDifferences) {
  const auto chain = testing::random_generic_chain(3, 44);
  ModelConfig cfg = small_config();
  cfg.components = 2;
  cfg.latent_dim = 8;
  cfg.hidden_dim = 8;
  CvaeModel model(cfg, 3);
  std::vector<DatasetRecord> recs;
  for (std::uint64_t s = 0; s < 2; ++s) recs.push_back(make_record(chain, 0, sample_configuration(chain, s)));
  const auto cmp = testing::elbo_gradient_check(model, recs, {0.7, 1});
  EXPECT_GT(cmp.entries, 100u);
  EXPECT_LT(cmp.global_rel, 1e-4);
  EXPECT_LT(cmp.worst_param_rel, 1e-3) << cmp.worst_param << " |g| " << cmp.worst_param_norm;
}

TEST(Sampling, CountsAndChunkInvariance) {
  Fixture f;
  const CvaeModel model(small_config(), 31);
  const IkProblem problem(f.chain, end_effector_pose(f.chain, f.q));
  EXPECT_TRUE(sample_solutions(model, problem, 0, 1).empty());
  const auto a = sample_solutions(model, problem, 32, 5, {64, 0.05});
  const auto b = sample_solutions(model, problem, 32, 5, {5, 0.05});
  ASSERT_EQ(a.size(), 32u);
  ASSERT_EQ(b.size(), 32u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].q.size(), f.chain.dof());
    EXPECT_EQ(a[i].graph.positions, b[i].graph.positions);
    EXPECT_EQ(a[i].status, b[i].status);
  }
  const auto c = sample_solutions(model, problem, 32, 6);
  EXPECT_NE(a[0].graph.positions, c[0].graph.positions);
}

TEST(Sampling, LatentDrawFollowsWeights) {
  GmmNodeParams p;
  p.components = 2;
  p.mu = Matrix(1, 2);
  p.mu << -5.0, 5.0;
  p.sigma = Matrix::Constant(1, 2, 1e-3);
  p.weights = Matrix(1, 2);
  p.weights << 0.25, 0.75;
  std::mt19937_64 rng(1);
  int high = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) high += sample_latent(p, rng)(0, 0) > 0 ? 1 : 0;
  const double se = std::sqrt(0.25 * 0.75 / n);
  EXPECT_NEAR(static_cast<double>(high) / n, 0.75, 4 * se);
}

TEST(Checkpoint, RoundTrip) {
  Fixture f;
  const CvaeModel model(small_config(Architecture::Mpnn), 41);
  const auto path = (std::filesystem::temp_directory_path() / "dgik_test_model.ckpt").string();
  save_checkpoint(path, model, {99, "abc", 7});
  CheckpointMeta meta;
  const CvaeModel loaded = load_checkpoint(path, &meta);
  EXPECT_EQ(meta.seed, 99u);
  EXPECT_EQ(meta.dataset_hash, "abc");
  EXPECT_EQ(meta.epochs, 7);
  EXPECT_EQ(loaded.config().arch, Architecture::Mpnn);
  EXPECT_EQ(loaded.config().hidden_dim, 12);
  const auto pa = model.parameters(), pb = loaded.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ErrorsNameThePath) {
  try {
    load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Io);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/model.ckpt"), std::string::npos);
  }
  const auto path = (std::filesystem::temp_directory_path() / "dgik_bad.ckpt").string();
  std::ofstream(path) << "not a checkpoint";
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Parse);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace dgik
