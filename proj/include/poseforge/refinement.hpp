#pragma once

#include "poseforge/core.hpp"
#include "poseforge/geometry.hpp"
#include "poseforge/kdtree.hpp"
#include "poseforge/registration.hpp"

#include <cmath>
#include <vector>

namespace poseforge {

/// Exponents of the three stage scores in the final product.
struct ScoreWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
};

struct IcpConfig {
  int max_iterations = 50;
  double tau_icp = 0.03;         // fraction of object diameter
  double convergence_eps = -1.0;  // meters; <= 0 selects 1e-5 * diameter
};

struct IcpResult {
  Pose pose;
  double s_icp = 0.0;
  int iterations = 0;
  std::vector<double> residual_history;  // RMS gate-clamped NN distance
};

/// Point-to-point ICP of the query cloud onto the dense target cloud.
/// Association is gated at tau: pairs farther apart are excluded from the
/// update, which keeps occluded-side query points from dragging the pose
/// when the target covers only part of the object. The recorded residual
/// clamps each closest-point distance at the gate; under this alternation
/// the residual never increases (each Kabsch step lowers the summed gated
/// terms and clamping bounds the rest), so it doubles as the convergence
/// measure. The score is the fraction of all query points within tau of
/// their nearest target point at the final pose.
inline IcpResult icp_refine(const PointMatrix& query_pts,
                            const PointMatrix& dense_target, const Pose& init,
                            const IcpConfig& cfg, double diameter) {
  const int n = static_cast<int>(query_pts.rows());
  if (n < 3 || dense_target.rows() < 3) {
    throw Error("refinement needs at least 3 points on both sides");
  }
  const double tau = cfg.tau_icp * diameter;
  const double tau2 = tau * tau;
  const double eps =
      cfg.convergence_eps > 0 ? cfg.convergence_eps : 1e-5 * diameter;
  const KdTree3 tree(dense_target);

  std::vector<Eigen::Vector3d> query(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    query[size_t(i)] = query_pts.row(i).cast<double>();
  }

  IcpResult out;
  out.pose = init;
  std::vector<Eigen::Vector3d> src, dst;
  src.reserve(size_t(n));
  dst.reserve(size_t(n));

  auto associate = [&](const Pose& pose, int& inliers_at_tau) {
    double sum2 = 0.0;
    inliers_at_tau = 0;
    src.clear();
    dst.clear();
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d p = pose.apply(query[size_t(i)]);
      const auto [idx, d2f] = tree.nearest(p.cast<float>());
      const Eigen::Vector3d t = dense_target.row(idx).cast<double>();
      const double d2 = (p - t).squaredNorm();
      if (d2 < tau2) {
        ++inliers_at_tau;
        src.push_back(query[size_t(i)]);
        dst.push_back(t);
        sum2 += d2;
      } else {
        sum2 += tau2;
      }
    }
    return std::sqrt(sum2 / double(n));
  };

  int inliers = 0;
  double rms = associate(out.pose, inliers);
  out.residual_history.push_back(rms);
  if (inliers == 0) {
    throw NoOverlapError("no query point within the ICP gate at init");
  }

  for (int it = 0; it < cfg.max_iterations; ++it) {
    if (static_cast<int>(src.size()) < 3) break;  // too few pairs to update
    Pose updated;
    try {
      updated = kabsch(src, dst);
    } catch (const DegenerateTripletError&) {
      break;  // gated pairs collapsed to a line; keep the current pose
    }
    const double next = associate(updated, inliers);
    if (inliers == 0) {
      // The update lost every pair; the previous pose stands.
      rms = associate(out.pose, inliers);
      break;
    }
    out.pose = updated;
    out.residual_history.push_back(next);
    ++out.iterations;
    if (std::abs(rms - next) < eps) {
      rms = next;
      break;
    }
    rms = next;
  }
  out.s_icp = double(inliers) / double(n);
  return out;
}

/// Feature score of Eq-5 form evaluated at the refined pose; by contract the
/// same computation score_hypothesis performs in feature-aware mode.
inline double rescore_fine(const Pose& pose,
                           const std::vector<Correspondence>& corrs,
                           const FeatureCloud& target, const FeatureCloud& query,
                           double tau) {
  return score_hypothesis(pose, corrs, target, query, tau,
                          ScoringMode::FeatureAware)
      .score;
}

/// Exponent-weighted product of the stage scores. pow(0, 0) is 1, so a zero
/// weight disables its term entirely.
inline double final_score(double s_coarse, double s_fine, double s_icp,
                          const ScoreWeights& w) {
  return std::pow(s_coarse, w.alpha) * std::pow(s_fine, w.beta) *
         std::pow(s_icp, w.gamma);
}

}  // namespace poseforge
