#pragma once

// Levenberg-Marquardt refinement of joint angles toward a goal pose.

#include "dgik/kinematics.hpp"

#include <span>
#include <vector>

namespace dgik {

struct RefineOptions {
  int max_iterations = 100;
  double pos_tol = 1e-6;      ///< m
  double rot_tol = 1e-6;      ///< rad
  double damping = 1e-3;      ///< initial λ
  double rotation_weight = 1.0;  ///< m per rad in the stacked residual
  double max_damping = 1e12;  ///< give up once λ exceeds this
};

struct RefineResult {
  Configuration q_final;
  int iterations = 0;
  bool converged = false;
  double position_error = 0.0;  ///< m
  double rotation_error = 0.0;  ///< rad
  double time_ms = 0.0;
  /// ½‖r‖² at the start and after every accepted step.
  std::vector<double> objective_trace;
};

/// 6×dof geometric Jacobian of the end-effector pose (linear rows first,
/// then angular), in the base frame.
Eigen::MatrixXd geometric_jacobian(const KinematicChain& chain, const Configuration& q);

/// Stacked residual [p − p_goal; w·log(R·R_goalᵀ)].
Eigen::Matrix<double, 6, 1> pose_residual(const RigidTransform& current, const RigidTransform& goal,
                                          double rotation_weight = 1.0);

/// Projects q onto the joint limits. Joints whose interval spans a full turn
/// are wrapped instead of clamped.
Configuration project_to_limits(const KinematicChain& chain, const Configuration& q);

RefineResult refine(const KinematicChain& chain, const RigidTransform& goal, const Configuration& q_init,
                    const RefineOptions& options = {});

struct MultistartResult {
  std::size_t best = 0;  ///< index into results
  std::vector<RefineResult> results;

  const RefineResult& best_result() const { return results.at(best); }
};

/// Refines every init (in parallel when workers > 1) and picks the argmin by
/// (position error, rotation error), lowest index on ties.
MultistartResult solve_multistart(const KinematicChain& chain, const RigidTransform& goal,
                                  std::span<const Configuration> inits, const RefineOptions& options = {},
                                  int workers = 1);

}  // namespace dgik
