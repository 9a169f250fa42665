#include "dgik/robot_io.hpp"

#include "dgik/error.hpp"

#include <fstream>

namespace dgik {
namespace {

Eigen::Vector3d read_vec3(const nlohmann::json& j, const std::string& field) {
  if (!j.contains(field)) throw Error(ErrorCode::Parse, "missing field '" + field + "'");
  const auto& v = j.at(field);
  if (!v.is_array() || v.size() != 3)
    throw Error(ErrorCode::Parse, "field '" + field + "' must be an array of 3 numbers");
  Eigen::Vector3d out;
  for (int i = 0; i < 3; ++i) {
    if (!v[i].is_number()) throw Error(ErrorCode::Parse, "field '" + field + "' must hold numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

nlohmann::json vec3_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

Eigen::Vector3d rpy_of(const Eigen::Matrix3d& R) {
  // Inverse of Rz(y) Ry(p) Rx(r).
  const double pitch = std::asin(std::clamp(-R(2, 0), -1.0, 1.0));
  const double roll = std::atan2(R(2, 1), R(2, 2));
  const double yaw = std::atan2(R(1, 0), R(0, 0));
  return {roll, pitch, yaw};
}

}  // namespace

KinematicChain chain_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::Parse, "robot description must be a JSON object");
  if (!j.contains("name") || !j.at("name").is_string())
    throw Error(ErrorCode::Parse, "missing string field 'name'");
  if (!j.contains("joints") || !j.at("joints").is_array())
    throw Error(ErrorCode::Parse, "missing array field 'joints'");
  std::vector<Joint> joints;
  std::size_t index = 0;
  for (const auto& jj : j.at("joints")) {
    const std::string prefix = "joints[" + std::to_string(index++) + "].";
    try {
      Joint joint;
      joint.origin = RigidTransform::from_rpy(read_vec3(jj, "translation"),
                                              jj.contains("rotation_rpy") ? read_vec3(jj, "rotation_rpy")
                                                                          : Eigen::Vector3d::Zero());
      Eigen::Vector3d axis = read_vec3(jj, "axis");
      if (axis.norm() < 1e-9) throw Error(ErrorCode::Parse, "field 'axis' must be nonzero");
      joint.axis = axis.normalized();
      if (jj.contains("limits")) {
        const auto& lim = jj.at("limits");
        if (!lim.is_array() || lim.size() != 2 || !lim[0].is_number() || !lim[1].is_number())
          throw Error(ErrorCode::Parse, "field 'limits' must be [lo, hi]");
        joint.limits = {lim[0].get<double>(), lim[1].get<double>()};
        if (joint.limits.lower > joint.limits.upper)
          throw Error(ErrorCode::Parse, "field 'limits' has lo > hi");
      }
      joints.push_back(joint);
    } catch (const Error& e) {
      throw Error(ErrorCode::Parse, prefix + e.what());
    }
  }
  RigidTransform tool;
  if (j.contains("tool")) {
    try {
      const auto& t = j.at("tool");
      tool = RigidTransform::from_rpy(read_vec3(t, "translation"),
                                      t.contains("rotation_rpy") ? read_vec3(t, "rotation_rpy")
                                                                 : Eigen::Vector3d::Zero());
    } catch (const Error& e) {
      throw Error(ErrorCode::Parse, std::string("tool.") + e.what());
    }
  }
  try {
    return KinematicChain(j.at("name").get<std::string>(), std::move(joints), tool);
  } catch (const Error& e) {
    throw Error(ErrorCode::Parse, e.what());
  }
}

nlohmann::json chain_to_json(const KinematicChain& chain) {
  nlohmann::json j;
  j["name"] = chain.name();
  j["joints"] = nlohmann::json::array();
  for (const Joint& joint : chain.joints()) {
    j["joints"].push_back({{"translation", vec3_json(joint.origin.translation)},
                           {"rotation_rpy", vec3_json(rpy_of(joint.origin.rotation))},
                           {"axis", vec3_json(joint.axis)},
                           {"limits", {joint.limits.lower, joint.limits.upper}}});
  }
  j["tool"] = {{"translation", vec3_json(chain.tool().translation)},
               {"rotation_rpy", vec3_json(rpy_of(chain.tool().rotation))}};
  return j;
}

KinematicChain load_chain(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open robot file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
  }
  try {
    return chain_from_json(j);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void save_chain(const KinematicChain& chain, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write robot file " + path.string());
  out << chain_to_json(chain).dump(2) << '\n';
}

}  // namespace dgik
