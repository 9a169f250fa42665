#include "dgik/distgeo.hpp"
#include "dgik/error.hpp"
#include "dgik/robot_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

namespace dgik {
namespace {

using testing::random_generic_chain;

double edge_weight(const DgGraph& g, int u, int v) {
  auto d = g.distance(u, v);
  EXPECT_TRUE(d.has_value()) << u << "-" << v;
  return d.value_or(-1.0);
}

TEST(StructureGraph, VertexCountAndUnitPairs) {
  for (int dof = 1; dof <= 7; ++dof) {
    const auto chain = random_generic_chain(dof, static_cast<std::uint64_t>(dof));
    const auto g = build_structure_graph(chain);
    EXPECT_EQ(g.vertex_count(), 2 * (dof + 1));
    for (int j = 0; j <= dof; ++j) EXPECT_NEAR(edge_weight(g, 2 * j, 2 * j + 1), 1.0, 1e-12);
    for (const Edge& e : g.edges) {
      EXPECT_LT(e.u, e.v);
      EXPECT_GE(e.distance, 0.0);
    }
    EXPECT_EQ(g.known_count(), 0);
  }
}

TEST(StructureGraph, WeightsInvariantToConfiguration) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto chain = random_generic_chain(3 + trial % 5, 50 + trial);
    const auto s = build_structure_graph(chain);
    const auto a = complete_graph_from_config(chain, sample_configuration(chain, rng));
    const auto b = complete_graph_from_config(chain, sample_configuration(chain, rng));
    for (const Edge& e : s.edges) {
      EXPECT_NEAR(edge_weight(a, e.u, e.v), e.distance, 1e-9);
      EXPECT_NEAR(edge_weight(b, e.u, e.v), e.distance, 1e-9);
    }
  }
}

TEST(BaseFrame, FourBaseVerticesWithUnitFrame) {
  const auto chain = load_chain(testing::robot_path("panda"));
  const auto g = attach_base_frame(build_structure_graph(chain));
  const auto layout = g.layout();
  int base = 0;
  for (VertexRole r : g.roles) base += r == VertexRole::Base;
  EXPECT_EQ(base, 4);
  std::vector<double> d;
  const auto b = layout.base();
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) d.push_back(edge_weight(g, b[i], b[j]));
  std::sort(d.begin(), d.end());
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d[i], 1.0, 1e-12);
  for (int i = 3; i < 6; ++i) EXPECT_NEAR(d[i], std::sqrt(2.0), 1e-12);
  for (int v : b) {
    EXPECT_TRUE(g.known[v]);
    EXPECT_EQ(one_hot(g.roles[v]), (std::array<double, 3>{1.0, 0.0, 0.0}));
  }
}

TEST(BaseFrame, AttachTwiceThrows) {
  const auto g = attach_base_frame(build_structure_graph(random_generic_chain(4, 2)));
  EXPECT_THROW(attach_base_frame(g), Error);
}

TEST(Goal, IdentityGoalCoincidesWithBase) {
  // Base joint at the origin about z, last axis along the tool z.
  const auto chain = load_chain(testing::robot_path("planar_3r"));
  const auto g = assemble_partial_graph(chain, RigidTransform::identity());
  const auto L = g.layout();
  EXPECT_NEAR(edge_weight(g, L.ee_point(), L.o()), 0.0, 1e-12);
  EXPECT_NEAR(edge_weight(g, L.ee_point(), L.x()), 1.0, 1e-12);
  EXPECT_NEAR(edge_weight(g, L.ee_offset(), L.o()), 1.0, 1e-12);
  EXPECT_NEAR(edge_weight(g, L.ee_offset(), L.x()), std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(edge_weight(g, L.ee_offset(), L.z()), 0.0, 1e-12);
}

TEST(Goal, TranslatedGoalDistanceToOrigin) {
  const auto chain = load_chain(testing::robot_path("toy6"));
  RigidTransform goal;
  goal.translation = Eigen::Vector3d(0.3, -0.2, 0.5);
  const auto g = assemble_partial_graph(chain, goal);
  EXPECT_NEAR(edge_weight(g, g.layout().ee_point(), g.layout().o()), goal.translation.norm(), 1e-12);
}

TEST(Goal, EightGoalEdgesRealized) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto chain = random_generic_chain(6, 300 + trial);
    RigidTransform goal{testing::random_rotation(rng), Eigen::Vector3d::Random()};
    const auto g = assemble_partial_graph(chain, goal);
    const auto L = g.layout();
    for (int e : {L.ee_point(), L.ee_offset()})
      for (int b : L.base()) {
        const double d = edge_weight(g, e, b);
        EXPECT_NEAR((g.positions.row(e) - g.positions.row(b)).norm(), d, 1e-12);
      }
    EXPECT_LT(g.max_edge_violation(), 1e-12);
  }
}

TEST(PartialGraph, VertexAccounting) {
  const auto chain = load_chain(testing::robot_path("ur10"));
  const auto g = assemble_partial_graph(chain, end_effector_pose(chain, sample_configuration(chain, 1)));
  EXPECT_EQ(g.vertex_count(), 16);
  EXPECT_EQ(g.known_count(), 6);
  std::map<VertexRole, int> roles;
  for (int v = 0; v < g.vertex_count(); ++v) {
    roles[g.roles[v]]++;
    if (!g.known[v]) {
      EXPECT_EQ(g.positions.row(v), Eigen::RowVector3d::Zero());
    }
    // Known exactly when base or end effector.
    EXPECT_EQ(g.known[v] != 0, g.roles[v] != VertexRole::General);
  }
  EXPECT_EQ(roles[VertexRole::Base], 4);
  EXPECT_EQ(roles[VertexRole::EndEffector], 2);
  EXPECT_EQ(roles[VertexRole::General], 10);
}

TEST(CompleteGraph, RealizesAllEdgesAndMatchesPartial) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto chain = random_generic_chain(3 + trial % 5, 700 + trial, trial % 2 == 0);
    const auto q = sample_configuration(chain, rng);
    const auto full = complete_graph_from_config(chain, q);
    ASSERT_TRUE(full.is_complete());
    EXPECT_LT(full.max_edge_violation(), 1e-9);
    const auto partial = assemble_partial_graph(chain, end_effector_pose(chain, q));
    for (const Edge& e : partial.edges) EXPECT_NEAR(edge_weight(full, e.u, e.v), e.distance, 1e-9);
    for (int v = 0; v < partial.vertex_count(); ++v) {
      if (partial.known[v]) EXPECT_LT((partial.positions.row(v) - full.positions.row(v)).norm(), 1e-9);
    }
  }
}

TEST(Reconstruction, RoundTripRecoversConfiguration) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    const auto chain = random_generic_chain(3 + trial % 5, 1000 + trial, trial % 3 != 0);
    const auto q = sample_configuration(chain, rng);
    const auto full = complete_graph_from_config(chain, q);
    const auto rec = points_to_config(chain, full.positions, {.goal = full.goal});
    ASSERT_TRUE(rec.ok()) << trial;
    for (int j = 0; j < static_cast<int>(chain.dof()); ++j)
      EXPECT_LT(std::abs(wrap_angle(rec.q.angles[j] - q.angles[j])), 1e-6) << trial << " joint " << j;
    const auto e = pose_error(end_effector_pose(chain, rec.q), end_effector_pose(chain, q));
    EXPECT_LT(e.position, 1e-8);
  }
}

TEST(Reconstruction, BundledRobotsRoundTrip) {
  std::mt19937_64 rng(5);
  for (const char* name : {"kuka_iiwa", "lwa4d", "lwa4p", "panda", "ur10", "planar_2r", "toy4", "toy6"}) {
    const auto chain = load_chain(testing::robot_path(name));
    for (int i = 0; i < 50; ++i) {
      const auto q = sample_configuration(chain, rng);
      const auto full = complete_graph_from_config(chain, q);
      const auto rec = points_to_config(chain, full.positions, {.goal = full.goal});
      ASSERT_TRUE(rec.ok()) << name;
      const auto e = pose_error(end_effector_pose(chain, rec.q), end_effector_pose(chain, q));
      EXPECT_LT(e.position, 1e-8) << name;
      EXPECT_LT(e.rotation, 1e-6) << name;
    }
  }
}

TEST(Reconstruction, InvariantToRigidMotionAndReflection) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto chain = random_generic_chain(6, 2000 + trial);
    const auto q = sample_configuration(chain, rng);
    const auto full = complete_graph_from_config(chain, q);
    Eigen::Matrix3d R = testing::random_rotation(rng);
    if (trial % 2) R.col(0) = -R.col(0);  // improper
    const Eigen::RowVector3d t = Eigen::RowVector3d::Random();
    Points moved = full.positions * R.transpose();
    moved.rowwise() += t;
    const auto a = points_to_config(chain, full.positions, {.goal = full.goal});
    const auto b = points_to_config(chain, moved, {.goal = full.goal});
    ASSERT_TRUE(b.ok());
    EXPECT_EQ(b.reflected, trial % 2 == 1);
    for (int j = 0; j < 6; ++j) EXPECT_LT(std::abs(wrap_angle(a.q.angles[j] - b.q.angles[j])), 1e-8);
  }
}

TEST(Reconstruction, NoisyVertexDiverges) {
  const auto chain = load_chain(testing::robot_path("toy6"));
  const auto full = complete_graph_from_config(chain, sample_configuration(chain, 4));
  Points p = full.positions;
  p.row(6) += Eigen::RowVector3d(0.5, 0.0, 0.0);
  const auto rec = points_to_config(chain, p, {.goal = full.goal});
  EXPECT_EQ(rec.status, ReconstructionStatus::Diverged);
  EXPECT_GT(rec.max_structure_error, 0.05);
}

TEST(Reconstruction, WrongRowCountThrows) {
  const auto chain = load_chain(testing::robot_path("toy4"));
  EXPECT_THROW(points_to_config(chain, Points::Zero(5, 3)), Error);
}

}  // namespace
}  // namespace dgik
