#pragma once

#include "dgik/kinematics.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace dgik {

enum class VertexRole : std::uint8_t { Base = 0, General = 1, EndEffector = 2 };

std::array<double, 3> one_hot(VertexRole role);

/// Point matrix, one row per vertex.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct Edge {
  int u = 0;
  int v = 0;
  double distance = 0.0;  ///< meters
};

/// Vertex indices for a chain with `dof` joints. Every joint axis and the
/// end-effector frame contribute an (on-axis, unit-offset) pair, base to tip;
/// the two extra base-frame vertices x, y come last.
///
///   0, 1          base joint pair (o, z)
///   2j, 2j+1      joint j pair (0-based j < dof)
///   2dof, 2dof+1  end-effector pair
///   2dof+2        x
///   2dof+3        y
struct VertexLayout {
  int dof = 0;

  int axis_point(int j) const { return 2 * j; }
  int axis_offset(int j) const { return 2 * j + 1; }
  int ee_point() const { return 2 * dof; }
  int ee_offset() const { return 2 * dof + 1; }
  int o() const { return 0; }
  int z() const { return 1; }
  int x() const { return 2 * dof + 2; }
  int y() const { return 2 * dof + 3; }
  int structure_count() const { return 2 * (dof + 1); }
  int count() const { return 2 * dof + 4; }
  std::array<int, 4> base() const { return {o(), x(), y(), z()}; }
};

/// Distance-weighted graph over points in the canonical graph frame: origin at
/// the base joint's on-axis point, z along the base joint axis.
struct DgGraph {
  int dof = 0;
  std::vector<VertexRole> roles;
  Points positions;               ///< zero rows for unknown vertices
  std::vector<std::uint8_t> known;
  std::vector<Edge> edges;        ///< unordered pairs, u < v, no self loops
  bool has_base_frame = false;
  bool has_goal = false;
  std::optional<RigidTransform> goal;  ///< end-effector pose in the robot base frame

  /// Maps the canonical graph frame into the robot base frame.
  RigidTransform graph_to_base;
  /// Direction of the end-effector pair expressed in the tool frame (the last
  /// joint axis).
  Eigen::Vector3d ee_axis = Eigen::Vector3d::UnitZ();

  int vertex_count() const { return static_cast<int>(roles.size()); }
  int known_count() const;
  VertexLayout layout() const { return {dof}; }

  /// Max |‖p_u − p_v‖ − d_uv| over edges whose endpoints are both known.
  double max_edge_violation() const;
  /// Every vertex pair present and every vertex known.
  bool is_complete() const;
  /// Edge weight lookup; nullopt when the pair is not an edge.
  std::optional<double> distance(int u, int v) const;
};

struct IkProblem {
  KinematicChain chain;
  RigidTransform goal;
  DgGraph partial_graph;

  IkProblem(KinematicChain c, const RigidTransform& g);
};

/// Transform taking canonical graph coordinates into the robot base frame.
RigidTransform canonical_base_frame(const KinematicChain& chain);

/// Structure points for configuration `q` in canonical coordinates, indexed
/// by VertexLayout (including x, y rows).
Points chain_points(const KinematicChain& chain, const Configuration& q);

DgGraph build_structure_graph(const KinematicChain& chain);
DgGraph attach_base_frame(DgGraph g);
DgGraph attach_goal(DgGraph g, const RigidTransform& goal);
DgGraph assemble_partial_graph(const KinematicChain& chain, const RigidTransform& goal);
DgGraph complete_graph_from_config(const KinematicChain& chain, const Configuration& q,
                                   bool goal_from_fk = true);

struct ReconstructionOptions {
  /// Structure-distance deviation (m) beyond which the point set is treated
  /// as unrealizable.
  double divergence_tolerance = 0.05;
  /// Goal used to fix the final joint when its rotation moves no vertex.
  std::optional<RigidTransform> goal;
};

enum class ReconstructionStatus { Ok, Diverged };

struct Reconstruction {
  ReconstructionStatus status = ReconstructionStatus::Ok;
  Configuration q;
  double max_structure_error = 0.0;  ///< m, after base alignment
  bool reflected = false;

  bool ok() const { return status == ReconstructionStatus::Ok; }
};

/// Maps a point set (rows indexed like VertexLayout) back to joint angles.
Reconstruction points_to_config(const KinematicChain& chain, const Points& points,
                                const ReconstructionOptions& options = {});

/// Rigidly aligns `points` so its base vertices best match the canonical
/// frame; reflects first when an improper fit is better.
Points align_to_base(const Points& points, const VertexLayout& layout, bool* reflected = nullptr);

}  // namespace dgik
