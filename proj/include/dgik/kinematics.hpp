#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numbers>
#include <concepts>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dgik {

/// Element of SE(3): proper rotation plus translation in meters.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_rpy(const Eigen::Vector3d& translation, const Eigen::Vector3d& rpy);
  /// Position plus unit quaternion (w, x, y, z).
  static RigidTransform from_quaternion(const Eigen::Vector3d& translation,
                                        const Eigen::Quaterniond& q);

  RigidTransform operator*(const RigidTransform& rhs) const;
  Eigen::Vector3d operator*(const Eigen::Vector3d& point) const;
  RigidTransform inverse() const;

  /// True when the rotation is orthonormal with determinant +1 to `tol`.
  bool is_valid(double tol = 1e-9) const;
};

/// Rotation matrix for `angle` radians about unit `axis`.
Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle);

/// SO(3) logarithm as a rotation vector (axis * angle).
Eigen::Vector3d rotation_log(const Eigen::Matrix3d& rotation);

/// Wraps an angle into (-pi, pi].
double wrap_angle(double angle);

struct JointLimits {
  double lower = -std::numbers::pi;
  double upper = std::numbers::pi;
};

struct Joint {
  /// Fixed transform from the parent frame to this joint's frame at zero angle.
  RigidTransform origin;
  /// Unit rotation axis in this joint's frame.
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  JointLimits limits;
};

/// Serial chain of revolute joints. The tool transform maps the last joint's
/// (rotated) frame onto the end-effector frame.
class KinematicChain {
 public:
  KinematicChain(std::string name, std::vector<Joint> joints,
                 RigidTransform tool = RigidTransform::identity());

  const std::string& name() const { return name_; }
  const std::vector<Joint>& joints() const { return joints_; }
  const Joint& joint(std::size_t i) const { return joints_.at(i); }
  const RigidTransform& tool() const { return tool_; }
  std::size_t dof() const { return joints_.size(); }

  /// Sum of all link translation lengths; an upper bound on the reach.
  double reach() const;

 private:
  std::string name_;
  std::vector<Joint> joints_;
  RigidTransform tool_;
};

struct Configuration {
  Eigen::VectorXd angles;

  Configuration() = default;
  explicit Configuration(Eigen::VectorXd a) : angles(std::move(a)) {}
  std::size_t size() const { return static_cast<std::size_t>(angles.size()); }
};

/// Cumulative frames: element i (i < dof) is joint i's frame after its
/// rotation has been applied; the last element is the end-effector pose.
std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain, const Configuration& q);

/// End-effector pose only.
RigidTransform end_effector_pose(const KinematicChain& chain, const Configuration& q);

/// Joint frames before their own rotation is applied (axis anchors). Same
/// length as dof.
std::vector<RigidTransform> joint_anchor_frames(const KinematicChain& chain,
                                                const Configuration& q);

Configuration sample_configuration(const KinematicChain& chain, std::uint64_t seed);

/// Samples from an already-seeded engine; used where many draws share one stream.
template <std::uniform_random_bit_generator Engine>
Configuration sample_configuration(const KinematicChain& chain, Engine& rng) {
  Eigen::VectorXd angles(static_cast<Eigen::Index>(chain.dof()));
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const auto& lim = chain.joint(i).limits;
    if (lim.lower == lim.upper) {
      angles[static_cast<Eigen::Index>(i)] = lim.lower;
    } else {
      std::uniform_real_distribution<double> dist(lim.lower, lim.upper);
      angles[static_cast<Eigen::Index>(i)] = dist(rng);
    }
  }
  return Configuration(std::move(angles));
}

/// Randomizes link translation magnitudes by independent uniform factors.
KinematicChain random_chain(const KinematicChain& templ, std::pair<double, double> scale_range,
                            std::uint64_t seed);

struct PoseError {
  double position = 0.0;  ///< meters
  double rotation = 0.0;  ///< degrees
};

PoseError pose_error(const RigidTransform& a, const RigidTransform& b);

/// Validates the chain invariants; throws dgik::Error describing the first
/// violation.
void validate(const KinematicChain& chain);

/// Checks that `q` matches the chain's dof; throws DimensionMismatch.
void check_dimensions(const KinematicChain& chain, const Configuration& q);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace dgik
