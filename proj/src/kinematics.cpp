#include "dgik/kinematics.hpp"

#include "dgik/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dgik {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::DimensionMismatch: return "DIMENSION_MISMATCH";
    case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::NonFinite: return "NON_FINITE";
    case ErrorCode::ReconstructionDiverged: return "RECONSTRUCTION_DIVERGED";
    case ErrorCode::Parse: return "PARSE";
    case ErrorCode::Io: return "IO";
    case ErrorCode::State: return "STATE";
  }
  return "UNKNOWN";
}

RigidTransform RigidTransform::from_rpy(const Eigen::Vector3d& translation,
                                        const Eigen::Vector3d& rpy) {
  RigidTransform t;
  // URDF convention: R = Rz(yaw) * Ry(pitch) * Rx(roll).
  t.rotation = (Eigen::AngleAxisd(rpy.z(), Eigen::Vector3d::UnitZ()) *
                Eigen::AngleAxisd(rpy.y(), Eigen::Vector3d::UnitY()) *
                Eigen::AngleAxisd(rpy.x(), Eigen::Vector3d::UnitX()))
                   .toRotationMatrix();
  t.translation = translation;
  return t;
}

RigidTransform RigidTransform::from_quaternion(const Eigen::Vector3d& translation,
                                               const Eigen::Quaterniond& q) {
  RigidTransform t;
  t.rotation = q.normalized().toRotationMatrix();
  t.translation = translation;
  return t;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Eigen::Vector3d RigidTransform::operator*(const Eigen::Vector3d& point) const {
  return rotation * point + translation;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

Eigen::Vector3d rotation_log(const Eigen::Matrix3d& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double angle = std::acos(c);
  const Eigen::Vector3d w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (angle < 1e-7) {
    // First-order expansion around the identity.
    return 0.5 * w;
  }
  if (std::numbers::pi - angle < 1e-4) {
    // Near pi the skew part vanishes; recover the axis from the symmetric part.
    const Eigen::Matrix3d B = 0.5 * (R + Eigen::Matrix3d::Identity());
    Eigen::Index k = 0;
    B.diagonal().maxCoeff(&k);
    Eigen::Vector3d axis = B.col(k) / std::sqrt(std::max(B(k, k), 1e-300));
    axis.normalize();
    if (axis.dot(w) < 0.0) axis = -axis;
    return angle * axis;
  }
  return angle / (2.0 * std::sin(angle)) * w;
}

double wrap_angle(double angle) {
  double a = std::remainder(angle, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

KinematicChain::KinematicChain(std::string name, std::vector<Joint> joints, RigidTransform tool)
    : name_(std::move(name)), joints_(std::move(joints)), tool_(std::move(tool)) {
  validate(*this);
}

double KinematicChain::reach() const {
  // The base joint offset does not contribute to how far the tool can travel.
  double r = tool_.translation.norm();
  for (std::size_t i = 1; i < joints_.size(); ++i) r += joints_[i].origin.translation.norm();
  return r;
}

void validate(const KinematicChain& chain) {
  if (chain.dof() < 1) throw Error(ErrorCode::InvalidArgument, "chain '" + chain.name() + "': dof must be >= 1");
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Joint& j = chain.joint(i);
    std::ostringstream where;
    where << "chain '" << chain.name() << "' joint " << i << ": ";
    if (std::abs(j.axis.norm() - 1.0) > 1e-12)
      throw Error(ErrorCode::InvalidArgument, where.str() + "axis is not unit length");
    if (!(j.limits.lower <= j.limits.upper))
      throw Error(ErrorCode::InvalidArgument, where.str() + "limits lower > upper");
    if (!j.origin.is_valid())
      throw Error(ErrorCode::InvalidArgument, where.str() + "origin is not a rigid transform");
  }
  if (!chain.tool().is_valid())
    throw Error(ErrorCode::InvalidArgument, "chain '" + chain.name() + "': tool is not a rigid transform");
}

void check_dimensions(const KinematicChain& chain, const Configuration& q) {
  if (q.size() != chain.dof()) {
    std::ostringstream os;
    os << "configuration has " << q.size() << " angles, chain '" << chain.name() << "' has dof "
       << chain.dof();
    throw Error(ErrorCode::DimensionMismatch, os.str());
  }
}

std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain, const Configuration& q) {
  check_dimensions(chain, q);
  std::vector<RigidTransform> frames;
  frames.reserve(chain.dof() + 1);
  RigidTransform current;
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Joint& j = chain.joint(i);
    RigidTransform rot;
    rot.rotation = axis_angle(j.axis, q.angles[static_cast<Eigen::Index>(i)]);
    current = current * j.origin * rot;
    frames.push_back(current);
  }
  frames.push_back(current * chain.tool());
  return frames;
}

RigidTransform end_effector_pose(const KinematicChain& chain, const Configuration& q) {
  return forward_kinematics(chain, q).back();
}

std::vector<RigidTransform> joint_anchor_frames(const KinematicChain& chain, const Configuration& q) {
  check_dimensions(chain, q);
  std::vector<RigidTransform> anchors;
  anchors.reserve(chain.dof());
  RigidTransform current;
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Joint& j = chain.joint(i);
    current = current * j.origin;
    anchors.push_back(current);
    RigidTransform rot;
    rot.rotation = axis_angle(j.axis, q.angles[static_cast<Eigen::Index>(i)]);
    current = current * rot;
  }
  return anchors;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Configuration sample_configuration(const KinematicChain& chain, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_configuration(chain, rng);
}

KinematicChain random_chain(const KinematicChain& templ, std::pair<double, double> scale_range,
                            std::uint64_t seed) {
  const auto [lo, hi] = scale_range;
  if (!(lo > 0.0) || !(hi > 0.0) || lo > hi)
    throw Error(ErrorCode::InvalidArgument, "scale_range must satisfy 0 < lo <= hi");
  std::mt19937_64 rng(seed);
  auto draw = [&] {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  std::vector<Joint> joints = templ.joints();
  for (Joint& j : joints) j.origin.translation *= draw();
  RigidTransform tool = templ.tool();
  tool.translation *= draw();
  return KinematicChain(templ.name(), std::move(joints), std::move(tool));
}

PoseError pose_error(const RigidTransform& a, const RigidTransform& b) {
  PoseError e;
  e.position = (a.translation - b.translation).norm();
  // Geodesic angle arccos((tr(RaᵀRb) − 1)/2), evaluated through the half angle:
  // ‖Ra − Rb‖_F = 2√2 sin(θ/2) stays accurate near 0 where arccos does not.
  const double c = std::clamp(((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0, -1.0, 1.0);
  const double half_sin = std::min((a.rotation - b.rotation).norm() / (2.0 * std::numbers::sqrt2), 1.0);
  const double half_cos = std::sqrt(std::max(0.0, (1.0 + c) / 2.0));
  e.rotation = 2.0 * std::atan2(half_sin, half_cos) * 180.0 / std::numbers::pi;
  return e;
}

}  // namespace dgik
