#pragma once

#include "dgik/kinematics.hpp"

#include <json.hpp>

#include <filesystem>

namespace dgik {

/// Robot description JSON:
///   { "name": str,
///     "joints": [ { "translation": [x,y,z], "rotation_rpy": [r,p,y],
///                   "axis": [x,y,z], "limits": [lo,hi] }, ... ],
///     "tool": { "translation": [x,y,z], "rotation_rpy": [r,p,y] } }
/// `limits` and `tool` are optional. Parse errors name the offending field.
KinematicChain chain_from_json(const nlohmann::json& j);
nlohmann::json chain_to_json(const KinematicChain& chain);

KinematicChain load_chain(const std::filesystem::path& path);
void save_chain(const KinematicChain& chain, const std::filesystem::path& path);

}  // namespace dgik
