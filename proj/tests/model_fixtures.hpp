#pragma once

// Shared helpers for model, training and acceptance tests.

#include "dgik/training.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace dgik::testing {

/// Applies x ↦ A·x + t to the known vertices of a graph. A may be any
/// orthogonal matrix (reflections included); distances are unchanged.
inline DgGraph transform_graph(DgGraph g, const Eigen::Matrix3d& A, const Eigen::Vector3d& t) {
  for (int i = 0; i < g.vertex_count(); ++i)
    if (g.known[static_cast<std::size_t>(i)]) g.positions.row(i) = (A * g.positions.row(i).transpose() + t).transpose();
  return g;
}

inline Eigen::MatrixXd apply_rigid(const Eigen::MatrixXd& p, const Eigen::Matrix3d& A, const Eigen::Vector3d& t) {
  return ((p * A.transpose()).rowwise() + t.transpose()).eval();
}

/// Random orthogonal matrix; `reflect` flips the determinant to −1.
inline Eigen::Matrix3d random_orthogonal(std::mt19937_64& rng, bool reflect) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Matrix3d M;
  for (int i = 0; i < 9; ++i) M.data()[i] = n(rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(M);
  Eigen::Matrix3d Q = qr.householderQ();
  if ((Q.determinant() < 0) != reflect) Q.col(0) *= -1.0;
  return Q;
}

struct GradientComparison {
  double global_rel = 0.0;  ///< ‖a − n‖ / ‖n‖ over every checked entry
  double worst_param_rel = 0.0;
  std::string worst_param;
  double worst_param_norm = 0.0;  ///< ‖numeric‖ over the probed entries of `worst_param`
  std::size_t entries = 0;
};

/// Central differences of the batch ELBO loss with respect to model
/// parameters, compared with the tape gradient. At most `per_param` entries
/// of each parameter are probed.
inline GradientComparison elbo_gradient_check(CvaeModel& model, const std::vector<DatasetRecord>& records,
                                              const ElboOptions& opts, int per_param = 6, double h = 1e-6,
                                              std::uint64_t seed = 1) {
  std::vector<const DatasetRecord*> batch;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < records.size(); ++i) {
    batch.push_back(&records[i]);
    seeds.push_back(1000 + i);
  }
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  {
    diff::Tape tape;
    auto terms = elbo(tape, model, batch, seeds, opts);
    tape.backward(terms.loss);
  }
  auto loss_value = [&] {
    diff::Tape tape(false);
    return elbo(tape, model, batch, seeds, opts).loss.item();
  };
  std::mt19937_64 rng(seed);
  GradientComparison out;
  double diff2 = 0.0, norm2 = 0.0;
  for (auto* p : params) {
    const auto size = p->value.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(size));
    for (Eigen::Index i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_param)));
    double pd = 0.0, pn = 0.0;
    for (Eigen::Index i : idx) {
      double& x = p->value.data()[i];
      const double x0 = x;
      x = x0 + h;
      const double fp = loss_value();
      x = x0 - h;
      const double fm = loss_value();
      x = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad.size() ? p->grad.data()[i] : 0.0;
      pd += (analytic - numeric) * (analytic - numeric);
      pn += numeric * numeric;
      ++out.entries;
    }
    diff2 += pd;
    norm2 += pn;
    // Central differences of an O(10) loss carry ~1e-8 absolute round-off, so
    // the per-parameter ratio gets an absolute floor in the denominator.
    const double rel = std::sqrt(pd) / (std::sqrt(pn) + 1e-5);
    if (rel > out.worst_param_rel) {
      out.worst_param_rel = rel;
      out.worst_param = p->name;
      out.worst_param_norm = std::sqrt(pn);
    }
  }
  out.global_rel = std::sqrt(diff2 / std::max(norm2, 1e-300));
  return out;
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions.
inline double gaussian_kl(const Eigen::VectorXd& mu_q, const Eigen::VectorXd& sig_q, const Eigen::VectorXd& mu_p,
                          const Eigen::VectorXd& sig_p) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu_q.size(); ++i) {
    const double r = sig_q[i] / sig_p[i];
    const double d = (mu_q[i] - mu_p[i]) / sig_p[i];
    kl += 0.5 * (r * r + d * d - 1.0) - std::log(r);
  }
  return kl;
}

}  // namespace dgik::testing
