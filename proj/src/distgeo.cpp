#include "dgik/distgeo.hpp"

#include "dgik/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

namespace dgik {
namespace {

void add_edge(DgGraph& g, int u, int v, double d) {
  if (u == v) return;
  if (u > v) std::swap(u, v);
  for (const Edge& e : g.edges) {
    if (e.u == u && e.v == v) return;
  }
  g.edges.push_back({u, v, d});
}

double point_distance(const Points& p, int u, int v) { return (p.row(u) - p.row(v)).norm(); }

// Pairs within each neighbouring-axis quadruple; weights depend only on the
// link geometry.
std::vector<std::pair<int, int>> structure_pairs(int dof) {
  std::set<std::pair<int, int>> pairs;
  for (int j = 0; j < dof; ++j) {
    const int quad[4] = {2 * j, 2 * j + 1, 2 * j + 2, 2 * j + 3};
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) pairs.insert({quad[a], quad[b]});
  }
  return {pairs.begin(), pairs.end()};
}

// Optimal rotation angle about `axis` taking the expected points onto the
// observed ones, both projected on the plane normal to the axis. Returns
// nullopt when the expected points sit on the axis.
std::optional<double> dihedral(const Eigen::Vector3d& axis, const std::array<Eigen::Vector3d, 2>& expected,
                               const std::array<Eigen::Vector3d, 2>& observed) {
  double num = 0.0;
  double den = 0.0;
  double lever = 0.0;
  for (int k = 0; k < 2; ++k) {
    const Eigen::Vector3d e = expected[k] - expected[k].dot(axis) * axis;
    const Eigen::Vector3d o = observed[k] - observed[k].dot(axis) * axis;
    lever = std::max(lever, e.norm());
    num += axis.dot(e.cross(o));
    den += e.dot(o);
  }
  if (lever < 1e-9) return std::nullopt;
  return std::atan2(num, den);
}

// Angle about `axis` whose rotation best matches M in the Frobenius sense.
double best_axis_angle(const Eigen::Vector3d& axis, const Eigen::Matrix3d& M) {
  Eigen::Matrix3d K;
  K << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  const double a = (K.transpose() * M).trace();
  const double b = axis.dot(M * axis) - M.trace();
  return std::atan2(a, -b);
}

}  // namespace

std::array<double, 3> one_hot(VertexRole role) {
  std::array<double, 3> h{0.0, 0.0, 0.0};
  h[static_cast<std::size_t>(role)] = 1.0;
  return h;
}

int DgGraph::known_count() const {
  return static_cast<int>(std::count(known.begin(), known.end(), std::uint8_t{1}));
}

double DgGraph::max_edge_violation() const {
  double worst = 0.0;
  for (const Edge& e : edges) {
    if (!known[e.u] || !known[e.v]) continue;
    worst = std::max(worst, std::abs(point_distance(positions, e.u, e.v) - e.distance));
  }
  return worst;
}

bool DgGraph::is_complete() const {
  const auto n = static_cast<std::size_t>(vertex_count());
  if (edges.size() != n * (n - 1) / 2) return false;
  return std::all_of(known.begin(), known.end(), [](std::uint8_t k) { return k != 0; });
}

std::optional<double> DgGraph::distance(int u, int v) const {
  if (u > v) std::swap(u, v);
  for (const Edge& e : edges) {
    if (e.u == u && e.v == v) return e.distance;
  }
  return std::nullopt;
}

IkProblem::IkProblem(KinematicChain c, const RigidTransform& g)
    : chain(std::move(c)), goal(g), partial_graph(assemble_partial_graph(chain, goal)) {}

RigidTransform canonical_base_frame(const KinematicChain& chain) {
  const Joint& base = chain.joint(0);
  const Eigen::Vector3d e3 = (base.origin.rotation * base.axis).normalized();
  Eigen::Vector3d ref = base.origin.rotation * Eigen::Vector3d::UnitX();
  if (ref.cross(e3).norm() < 1e-6) ref = base.origin.rotation * Eigen::Vector3d::UnitY();
  const Eigen::Vector3d e1 = (ref - ref.dot(e3) * e3).normalized();
  const Eigen::Vector3d e2 = e3.cross(e1);
  RigidTransform frame;
  frame.rotation.col(0) = e1;
  frame.rotation.col(1) = e2;
  frame.rotation.col(2) = e3;
  frame.translation = base.origin.translation;
  return frame;
}

Points chain_points(const KinematicChain& chain, const Configuration& q) {
  const VertexLayout layout{static_cast<int>(chain.dof())};
  const auto anchors = joint_anchor_frames(chain, q);
  const RigidTransform ee = end_effector_pose(chain, q);
  const RigidTransform to_graph = canonical_base_frame(chain).inverse();

  Points p(layout.count(), 3);
  for (int j = 0; j < layout.dof; ++j) {
    const RigidTransform& a = anchors[static_cast<std::size_t>(j)];
    const Eigen::Vector3d axis = a.rotation * chain.joint(static_cast<std::size_t>(j)).axis;
    p.row(layout.axis_point(j)) = (to_graph * a.translation).transpose();
    p.row(layout.axis_offset(j)) = (to_graph * Eigen::Vector3d(a.translation + axis)).transpose();
  }
  // The end-effector pair runs along the last joint axis through the tool origin.
  const auto& last = anchors.back();
  const Eigen::Vector3d last_axis = last.rotation * chain.joints().back().axis;
  p.row(layout.ee_point()) = (to_graph * ee.translation).transpose();
  p.row(layout.ee_offset()) = (to_graph * Eigen::Vector3d(ee.translation + last_axis)).transpose();
  p.row(layout.x()) = Eigen::RowVector3d(1.0, 0.0, 0.0);
  p.row(layout.y()) = Eigen::RowVector3d(0.0, 1.0, 0.0);
  return p;
}

DgGraph build_structure_graph(const KinematicChain& chain) {
  const VertexLayout layout{static_cast<int>(chain.dof())};
  const Points p = chain_points(chain, Configuration(Eigen::VectorXd::Zero(layout.dof)));

  DgGraph g;
  g.dof = layout.dof;
  const int n = layout.structure_count();
  g.roles.assign(static_cast<std::size_t>(n), VertexRole::General);
  g.roles[static_cast<std::size_t>(layout.o())] = VertexRole::Base;
  g.roles[static_cast<std::size_t>(layout.z())] = VertexRole::Base;
  g.roles[static_cast<std::size_t>(layout.ee_point())] = VertexRole::EndEffector;
  g.roles[static_cast<std::size_t>(layout.ee_offset())] = VertexRole::EndEffector;
  g.positions = Points::Zero(n, 3);
  g.known.assign(static_cast<std::size_t>(n), 0);
  for (const auto& [u, v] : structure_pairs(layout.dof)) add_edge(g, u, v, point_distance(p, u, v));
  g.graph_to_base = canonical_base_frame(chain);
  g.ee_axis = chain.tool().rotation.transpose() * chain.joints().back().axis;
  return g;
}

DgGraph attach_base_frame(DgGraph g) {
  if (g.has_base_frame) throw Error(ErrorCode::State, "base frame already attached");
  const VertexLayout layout = g.layout();
  const int n = layout.count();
  g.roles.resize(static_cast<std::size_t>(n), VertexRole::Base);
  g.known.resize(static_cast<std::size_t>(n), 0);
  Points positions = Points::Zero(n, 3);
  positions.topRows(g.positions.rows()) = g.positions;
  g.positions = std::move(positions);

  g.positions.row(layout.o()) = Eigen::RowVector3d(0.0, 0.0, 0.0);
  g.positions.row(layout.x()) = Eigen::RowVector3d(1.0, 0.0, 0.0);
  g.positions.row(layout.y()) = Eigen::RowVector3d(0.0, 1.0, 0.0);
  g.positions.row(layout.z()) = Eigen::RowVector3d(0.0, 0.0, 1.0);
  for (int v : layout.base()) g.known[static_cast<std::size_t>(v)] = 1;
  const auto base = layout.base();
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) add_edge(g, base[a], base[b], point_distance(g.positions, base[a], base[b]));
  g.has_base_frame = true;
  return g;
}

DgGraph attach_goal(DgGraph g, const RigidTransform& goal) {
  if (!g.has_base_frame) throw Error(ErrorCode::State, "attach_goal requires the base frame");
  const VertexLayout layout = g.layout();
  const RigidTransform local = g.graph_to_base.inverse() * goal;
  g.positions.row(layout.ee_point()) = local.translation.transpose();
  g.positions.row(layout.ee_offset()) = (local.translation + local.rotation * g.ee_axis).transpose();
  g.known[static_cast<std::size_t>(layout.ee_point())] = 1;
  g.known[static_cast<std::size_t>(layout.ee_offset())] = 1;
  for (int e : {layout.ee_point(), layout.ee_offset()})
    for (int b : layout.base()) add_edge(g, e, b, point_distance(g.positions, e, b));
  g.has_goal = true;
  g.goal = goal;
  return g;
}

DgGraph assemble_partial_graph(const KinematicChain& chain, const RigidTransform& goal) {
  return attach_goal(attach_base_frame(build_structure_graph(chain)), goal);
}

DgGraph complete_graph_from_config(const KinematicChain& chain, const Configuration& q, bool goal_from_fk) {
  check_dimensions(chain, q);
  DgGraph g = attach_base_frame(build_structure_graph(chain));
  const int n = g.vertex_count();
  g.positions = chain_points(chain, q);
  g.known.assign(static_cast<std::size_t>(n), 1);
  g.edges.clear();
  g.edges.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v) g.edges.push_back({u, v, point_distance(g.positions, u, v)});
  g.has_goal = true;
  if (goal_from_fk) g.goal = end_effector_pose(chain, q);
  return g;
}

Points align_to_base(const Points& points, const VertexLayout& layout, bool* reflected) {
  const auto base = layout.base();
  Eigen::Matrix<double, 4, 3> target;
  target << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;

  auto fit = [&](const Points& pts, Eigen::Matrix3d& R, Eigen::Vector3d& src_c, double& proper_res,
                 double& improper_res) {
    Eigen::Matrix<double, 4, 3> src;
    for (int k = 0; k < 4; ++k) src.row(k) = pts.row(base[static_cast<std::size_t>(k)]);
    src_c = src.colwise().mean().transpose();
    const Eigen::Vector3d tgt_c = target.colwise().mean().transpose();
    const Eigen::Matrix<double, 4, 3> s = src.rowwise() - src_c.transpose();
    const Eigen::Matrix<double, 4, 3> t = target.rowwise() - tgt_c.transpose();
    const Eigen::Matrix3d H = s.transpose() * t;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d U = svd.matrixU();
    const Eigen::Matrix3d V = svd.matrixV();
    const double d = (V * U.transpose()).determinant() > 0.0 ? 1.0 : -1.0;
    const Eigen::Matrix3d proper = V * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * U.transpose();
    const Eigen::Matrix3d improper = V * Eigen::Vector3d(1.0, 1.0, -d).asDiagonal() * U.transpose();
    proper_res = (s * proper.transpose() - t).squaredNorm();
    improper_res = (s * improper.transpose() - t).squaredNorm();
    R = proper;
  };

  Eigen::Matrix3d R;
  Eigen::Vector3d c;
  double proper_res = 0.0;
  double improper_res = 0.0;
  fit(points, R, c, proper_res, improper_res);
  Points pts = points;
  bool flip = proper_res > improper_res + 1e-12;
  if (flip) {
    pts.col(0) = -pts.col(0);
    fit(pts, R, c, proper_res, improper_res);
  }
  if (reflected) *reflected = flip;
  const Eigen::RowVector3d tgt_c = target.colwise().mean();
  Points out = (pts.rowwise() - c.transpose()) * R.transpose();
  out.rowwise() += tgt_c;
  return out;
}

Reconstruction points_to_config(const KinematicChain& chain, const Points& points,
                                const ReconstructionOptions& options) {
  const VertexLayout layout{static_cast<int>(chain.dof())};
  if (points.rows() != layout.count()) {
    throw Error(ErrorCode::DimensionMismatch,
                "point set has " + std::to_string(points.rows()) + " rows, chain '" + chain.name() +
                    "' needs " + std::to_string(layout.count()));
  }
  Reconstruction result;
  if (!points.allFinite()) {
    result.status = ReconstructionStatus::Diverged;
    result.q = Configuration(Eigen::VectorXd::Zero(layout.dof));
    result.max_structure_error = std::numeric_limits<double>::infinity();
    return result;
  }
  const Points p = align_to_base(points, layout, &result.reflected);

  const Points reference = chain_points(chain, Configuration(Eigen::VectorXd::Zero(layout.dof)));
  for (const auto& [u, v] : structure_pairs(layout.dof)) {
    const double err = std::abs(point_distance(p, u, v) - point_distance(reference, u, v));
    result.max_structure_error = std::max(result.max_structure_error, err);
  }
  if (result.max_structure_error > options.divergence_tolerance) result.status = ReconstructionStatus::Diverged;

  const RigidTransform graph_to_base = canonical_base_frame(chain);
  // Frames below live in canonical graph coordinates.
  RigidTransform current = graph_to_base.inverse();
  Eigen::VectorXd q(layout.dof);
  for (int j = 0; j < layout.dof; ++j) {
    const Joint& joint = chain.joint(static_cast<std::size_t>(j));
    const RigidTransform anchor = current * joint.origin;
    std::array<Eigen::Vector3d, 2> expected;
    if (j + 1 < layout.dof) {
      const Joint& next = chain.joint(static_cast<std::size_t>(j + 1));
      expected = {next.origin.translation,
                  Eigen::Vector3d(next.origin.translation + next.origin.rotation * next.axis)};
    } else {
      expected = {chain.tool().translation, Eigen::Vector3d(chain.tool().translation + joint.axis)};
    }
    const RigidTransform inv = anchor.inverse();
    const int next_point = j + 1 < layout.dof ? layout.axis_point(j + 1) : layout.ee_point();
    const int next_offset = j + 1 < layout.dof ? layout.axis_offset(j + 1) : layout.ee_offset();
    const std::array<Eigen::Vector3d, 2> observed = {inv * Eigen::Vector3d(p.row(next_point).transpose()),
                                                     inv * Eigen::Vector3d(p.row(next_offset).transpose())};
    double angle = 0.0;
    if (auto a = dihedral(joint.axis, expected, observed)) {
      angle = *a;
    } else if (j + 1 == layout.dof) {
      // The final joint spins the end-effector pair in place; take its angle
      // from the goal orientation when one is available.
      if (options.goal) {
        const RigidTransform goal_local = graph_to_base.inverse() * *options.goal;
        const Eigen::Matrix3d M =
            anchor.rotation.transpose() * goal_local.rotation * chain.tool().rotation.transpose();
        angle = best_axis_angle(joint.axis, M);
      }
    } else {
      result.status = ReconstructionStatus::Diverged;
    }
    q[j] = wrap_angle(angle);
    RigidTransform rot;
    rot.rotation = axis_angle(joint.axis, q[j]);
    current = anchor * rot;
  }
  result.q = Configuration(std::move(q));
  return result;
}

}  // namespace dgik
