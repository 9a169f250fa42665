#include "dgik/error.hpp"
#include "dgik/kinematics.hpp"
#include "dgik/robot_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace dgik {
namespace {

using testing::random_generic_chain;

KinematicChain planar_2link() {
  std::vector<Joint> joints(2);
  joints[1].origin.translation = Eigen::Vector3d(1.0, 0.0, 0.0);
  RigidTransform tool;
  tool.translation = Eigen::Vector3d(1.0, 0.0, 0.0);
  return KinematicChain("planar2", joints, tool);
}

// Homogeneous-matrix oracle built from Rodrigues' formula and explicit
// elementary rotations, independent of the library's transform type.
Eigen::Matrix4d homogeneous(const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  Eigen::Matrix4d H = Eigen::Matrix4d::Identity();
  H.topLeftCorner<3, 3>() = R;
  H.topRightCorner<3, 1>() = t;
  return H;
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& k, double theta) {
  Eigen::Matrix3d K;
  K << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  return Eigen::Matrix3d::Identity() + std::sin(theta) * K + (1 - std::cos(theta)) * K * K;
}

Eigen::Matrix4d oracle_fk(const KinematicChain& chain, const Eigen::VectorXd& q) {
  Eigen::Matrix4d H = Eigen::Matrix4d::Identity();
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Joint& j = chain.joint(i);
    H = H * homogeneous(j.origin.rotation, j.origin.translation) *
        homogeneous(rodrigues(j.axis, q[static_cast<Eigen::Index>(i)]), Eigen::Vector3d::Zero());
  }
  return H * homogeneous(chain.tool().rotation, chain.tool().translation);
}

TEST(ForwardKinematics, PlanarZeroConfiguration) {
  const auto frames = forward_kinematics(planar_2link(), Configuration(Eigen::Vector2d(0.0, 0.0)));
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_TRUE(frames.back().translation.isApprox(Eigen::Vector3d(2.0, 0.0, 0.0)));
  EXPECT_TRUE(frames.back().rotation.isApprox(Eigen::Matrix3d::Identity()));
}

TEST(ForwardKinematics, PlanarQuarterTurn) {
  const auto ee = end_effector_pose(planar_2link(), Configuration(Eigen::Vector2d(M_PI / 2, 0.0)));
  EXPECT_NEAR((ee.translation - Eigen::Vector3d(0.0, 2.0, 0.0)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((ee.rotation - axis_angle(Eigen::Vector3d::UnitZ(), M_PI / 2)).norm(), 0.0, 1e-12);
}

TEST(ForwardKinematics, MatchesHomogeneousProductOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto chain = random_generic_chain(6, 100 + trial);
    const auto q = sample_configuration(chain, rng);
    const auto ee = end_effector_pose(chain, q);
    const Eigen::Matrix4d H = oracle_fk(chain, q.angles);
    EXPECT_LT((ee.rotation - H.topLeftCorner<3, 3>()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((ee.translation - H.topRightCorner<3, 1>()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ForwardKinematics, DimensionMismatchThrows) {
  try {
    forward_kinematics(planar_2link(), Configuration(Eigen::Vector3d::Zero()));
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
  }
}

TEST(ForwardKinematics, PrefixComposesWithSuffix) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto chain = random_generic_chain(7, 900 + trial);
    const auto q = sample_configuration(chain, rng);
    const int split = 1 + trial % 6;
    std::vector<Joint> head(chain.joints().begin(), chain.joints().begin() + split);
    std::vector<Joint> tail(chain.joints().begin() + split, chain.joints().end());
    const KinematicChain prefix("prefix", head);
    const KinematicChain suffix("suffix", tail, chain.tool());
    const auto whole = end_effector_pose(chain, q);
    const auto composed = end_effector_pose(prefix, Configuration(q.angles.head(split))) *
                          end_effector_pose(suffix, Configuration(q.angles.tail(7 - split)));
    EXPECT_LT((whole.translation - composed.translation).norm(), 1e-12);
    EXPECT_LT((whole.rotation - composed.rotation).norm(), 1e-12);
  }
}

TEST(RigidTransform, CompositionAndInverseStayValid) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    RigidTransform a{testing::random_rotation(rng), Eigen::Vector3d::Random()};
    RigidTransform b{testing::random_rotation(rng), Eigen::Vector3d::Random()};
    EXPECT_TRUE((a * b).is_valid());
    EXPECT_TRUE(a.inverse().is_valid());
    const auto id = a * a.inverse();
    EXPECT_LT((id.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
    EXPECT_LT(id.translation.norm(), 1e-12);
  }
}

TEST(SampleConfiguration, PointIntervalIsExact) {
  std::vector<Joint> joints(3);
  for (auto& j : joints) j.limits = {0.25, 0.25};
  const KinematicChain chain("fixed", joints);
  const auto q = sample_configuration(chain, 42);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(q.angles[i], 0.25);
}

TEST(SampleConfiguration, UniformMoments) {
  const auto chain = load_chain(testing::robot_path("kuka_iiwa"));
  std::mt19937_64 rng(2024);
  const int draws = 100000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(7);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(7);
  for (int i = 0; i < draws; ++i) {
    const auto q = sample_configuration(chain, rng);
    sum += q.angles;
    sq += q.angles.cwiseAbs2();
  }
  const double var_true = M_PI * M_PI / 3.0;
  const double sigma_mean = std::sqrt(var_true / draws);
  for (int j = 0; j < 7; ++j) {
    const double mean = sum[j] / draws;
    const double var = sq[j] / draws - mean * mean;
    EXPECT_LT(std::abs(mean), 3.0 * sigma_mean) << "joint " << j;
    EXPECT_LT(std::abs(var - var_true) / var_true, 0.05) << "joint " << j;
  }
}

TEST(SampleConfiguration, Deterministic) {
  const auto chain = random_generic_chain(7, 1);
  EXPECT_EQ(sample_configuration(chain, 77).angles, sample_configuration(chain, 77).angles);
}

TEST(RandomChain, IdentityScaling) {
  const auto templ = load_chain(testing::robot_path("panda"));
  const auto chain = random_chain(templ, {1.0, 1.0}, 9);
  for (std::size_t i = 0; i < templ.dof(); ++i) {
    EXPECT_EQ(chain.joint(i).origin.translation, templ.joint(i).origin.translation);
    EXPECT_EQ(chain.joint(i).axis, templ.joint(i).axis);
  }
  EXPECT_EQ(chain.tool().translation, templ.tool().translation);
}

TEST(RandomChain, LinkLengthsWithinForty) {
  const auto templ = load_chain(testing::robot_path("kuka_iiwa"));
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto chain = random_chain(templ, {0.6, 1.4}, seed);
    ASSERT_NO_THROW(validate(chain));
    ASSERT_EQ(chain.dof(), templ.dof());
    for (std::size_t i = 0; i < templ.dof(); ++i) {
      const double l0 = templ.joint(i).origin.translation.norm();
      const double l = chain.joint(i).origin.translation.norm();
      EXPECT_GE(l, 0.6 * l0 - 1e-12);
      EXPECT_LE(l, 1.4 * l0 + 1e-12);
      EXPECT_EQ(chain.joint(i).axis, templ.joint(i).axis);
      if (l0 > 0) {
        EXPECT_LT((chain.joint(i).origin.translation.normalized() - templ.joint(i).origin.translation.normalized()).norm(),
                  1e-12);
      }
    }
  }
}

TEST(RandomChain, RejectsNonPositiveBounds) {
  const auto templ = load_chain(testing::robot_path("ur10"));
  EXPECT_THROW(random_chain(templ, {0.0, 1.4}, 1), Error);
  EXPECT_THROW(random_chain(templ, {-0.5, 1.4}, 1), Error);
}

TEST(PoseError, Identity) {
  std::mt19937_64 rng(1);
  RigidTransform a{testing::random_rotation(rng), Eigen::Vector3d(0.1, 0.2, 0.3)};
  const auto e = pose_error(a, a);
  EXPECT_EQ(e.position, 0.0);
  EXPECT_NEAR(e.rotation, 0.0, 1e-5);
}

TEST(PoseError, ThreeFourFive) {
  RigidTransform a;
  RigidTransform b;
  b.translation = Eigen::Vector3d(0.003, 0.004, 0.0);
  EXPECT_NEAR(pose_error(a, b).position, 0.005, 1e-15);
}

TEST(PoseError, QuarterTurnAboutAnyAxis) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3d axis = Eigen::Vector3d::Random().normalized();
    RigidTransform a{testing::random_rotation(rng), Eigen::Vector3d::Zero()};
    RigidTransform b = a;
    b.rotation = a.rotation * rodrigues(axis, M_PI / 2);
    EXPECT_NEAR(pose_error(a, b).rotation, 90.0, 1e-9);
    // Symmetry.
    EXPECT_NEAR(pose_error(b, a).rotation, pose_error(a, b).rotation, 1e-12);
  }
}

TEST(RotationLog, RoundTrip) {
  std::mt19937_64 rng(4);
  for (double angle : {0.0, 1e-9, 0.3, 2.0, M_PI - 1e-6, M_PI}) {
    const Eigen::Vector3d axis = Eigen::Vector3d::Random().normalized();
    const Eigen::Vector3d w = rotation_log(rodrigues(axis, angle));
    EXPECT_LT((rodrigues(w.norm() > 0 ? w.normalized() : axis, w.norm()) - rodrigues(axis, angle)).norm(), 1e-5)
        << angle;
  }
}

TEST(WrapAngle, HalfOpenInterval) {
  EXPECT_DOUBLE_EQ(wrap_angle(M_PI), M_PI);
  EXPECT_DOUBLE_EQ(wrap_angle(-M_PI), M_PI);
  EXPECT_NEAR(wrap_angle(3 * M_PI / 2), -M_PI / 2, 1e-15);
}

TEST(RobotIo, BundledDescriptionsLoad) {
  for (const char* name : {"kuka_iiwa", "lwa4d", "lwa4p", "panda", "ur10", "planar_2r", "planar_3r", "toy4", "toy6"}) {
    SCOPED_TRACE(name);
    const auto chain = load_chain(testing::robot_path(name));
    EXPECT_EQ(chain.name(), name);
    const auto back = chain_from_json(chain_to_json(chain));
    const Eigen::VectorXd q = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(chain.dof()), -1.0, 1.0);
    const auto a = end_effector_pose(chain, Configuration(q));
    const auto b = end_effector_pose(back, Configuration(q));
    EXPECT_LT(pose_error(a, b).position, 1e-12);
  }
}

TEST(RobotIo, ErrorNamesField) {
  auto j = nlohmann::json::parse(R"({"name":"x","joints":[{"translation":[0,0,0],"axis":[0,0]}]})");
  try {
    chain_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Parse);
    EXPECT_NE(std::string(e.what()).find("axis"), std::string::npos);
  }
}

}  // namespace
}  // namespace dgik
