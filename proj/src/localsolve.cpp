#include "dgik/localsolve.hpp"

#include "dgik/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

namespace dgik {

namespace {

struct PoseAndJacobian {
  RigidTransform pose;
  Eigen::MatrixXd jacobian;
};

PoseAndJacobian pose_and_jacobian(const KinematicChain& chain, const Configuration& q) {
  const auto anchors = joint_anchor_frames(chain, q);
  const RigidTransform ee = end_effector_pose(chain, q);
  Eigen::MatrixXd J(6, static_cast<Eigen::Index>(chain.dof()));
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Eigen::Vector3d w = anchors[i].rotation * chain.joint(i).axis;
    const auto c = static_cast<Eigen::Index>(i);
    J.block<3, 1>(0, c) = w.cross(ee.translation - anchors[i].translation);
    J.block<3, 1>(3, c) = w;
  }
  return {ee, std::move(J)};
}

bool full_turn(const JointLimits& lim) { return lim.upper - lim.lower >= 2.0 * std::numbers::pi - 1e-12; }

}  // namespace

Eigen::MatrixXd geometric_jacobian(const KinematicChain& chain, const Configuration& q) {
  return pose_and_jacobian(chain, q).jacobian;
}

Eigen::Matrix<double, 6, 1> pose_residual(const RigidTransform& current, const RigidTransform& goal,
                                          double rotation_weight) {
  Eigen::Matrix<double, 6, 1> r;
  r.head<3>() = current.translation - goal.translation;
  r.tail<3>() = rotation_weight * rotation_log(current.rotation * goal.rotation.transpose());
  return r;
}

Configuration project_to_limits(const KinematicChain& chain, const Configuration& q) {
  check_dimensions(chain, q);
  Configuration out = q;
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const auto& lim = chain.joint(i).limits;
    double& a = out.angles[static_cast<Eigen::Index>(i)];
    a = full_turn(lim) ? wrap_angle(a) : std::clamp(a, lim.lower, lim.upper);
  }
  return out;
}

RefineResult refine(const KinematicChain& chain, const RigidTransform& goal, const Configuration& q_init,
                    const RefineOptions& options) {
  check_dimensions(chain, q_init);
  if (options.max_iterations < 0 || !(options.damping > 0.0) || !(options.rotation_weight > 0.0))
    throw Error(ErrorCode::InvalidArgument, "refine: max_iterations >= 0, damping > 0, rotation_weight > 0 required");
  const auto t0 = std::chrono::steady_clock::now();
  RefineResult res;
  const double w = options.rotation_weight;

  Configuration q = q_init;
  auto state = pose_and_jacobian(chain, q);
  Eigen::Matrix<double, 6, 1> r = pose_residual(state.pose, goal, w);
  double f = 0.5 * r.squaredNorm();
  res.objective_trace.push_back(f);
  double lambda = options.damping;

  auto done = [&] { return r.head<3>().norm() < options.pos_tol && r.tail<3>().norm() / w < options.rot_tol; };
  while (!done() && res.iterations < options.max_iterations && lambda <= options.max_damping) {
    ++res.iterations;
    Eigen::MatrixXd J = state.jacobian;
    J.bottomRows<3>() *= w;
    Eigen::MatrixXd A = J.transpose() * J;
    A.diagonal().array() += lambda;
    const Eigen::VectorXd g = J.transpose() * r;
    Configuration trial(q.angles - A.ldlt().solve(g));
    trial = project_to_limits(chain, trial);
    auto trial_state = pose_and_jacobian(chain, trial);
    const Eigen::Matrix<double, 6, 1> r_trial = pose_residual(trial_state.pose, goal, w);
    const double f_trial = 0.5 * r_trial.squaredNorm();
    if (std::isfinite(f_trial) && f_trial < f) {
      q = std::move(trial);
      state = std::move(trial_state);
      r = r_trial;
      f = f_trial;
      res.objective_trace.push_back(f);
      lambda = std::max(lambda * 0.1, 1e-12);
    } else {
      lambda *= 10.0;
    }
  }
  res.converged = done();
  res.q_final = std::move(q);
  res.position_error = r.head<3>().norm();
  res.rotation_error = r.tail<3>().norm() / w;
  res.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

MultistartResult solve_multistart(const KinematicChain& chain, const RigidTransform& goal,
                                  std::span<const Configuration> inits, const RefineOptions& options, int workers) {
  if (inits.empty()) throw Error(ErrorCode::InvalidArgument, "solve_multistart: no initial configurations");
  MultistartResult out;
  out.results.resize(inits.size());
  const int count = static_cast<int>(inits.size());
  workers = std::max(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto run = [&](int w) {
    try {
      for (int i = w; i < count; i += workers)
        out.results[static_cast<std::size_t>(i)] = refine(chain, goal, inits[static_cast<std::size_t>(i)], options);
    } catch (...) {
      errors[static_cast<std::size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (std::size_t i = 1; i < out.results.size(); ++i) {
    const auto& a = out.results[i];
    const auto& b = out.results[out.best];
    if (a.position_error < b.position_error ||
        (a.position_error == b.position_error && a.rotation_error < b.rotation_error))
      out.best = i;
  }
  return out;
}

}  // namespace dgik
