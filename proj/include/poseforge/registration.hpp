#pragma once

#include "poseforge/core.hpp"
#include "poseforge/geometry.hpp"
#include "poseforge/matching.hpp"
#include "poseforge/parallel.hpp"
#include "poseforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace poseforge {

enum class ScoringMode { FeatureAware, InlierRatio };

struct RansacConfig {
  int iterations = 10000;
  double tau_inlier = 0.03;        // fraction of object diameter
  double edge_ratio_tol = 0.15;    // relative edge-length disagreement
  double max_pair_distance = 1.0;  // fraction of diameter, triplet span cap
  ScoringMode scoring = ScoringMode::FeatureAware;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct CoarseResult {
  Pose pose;
  double s_coarse = 0.0;
  int inlier_count = 0;
  int iterations_valid = 0;  // iterations that produced a scored hypothesis
};

/// Keep a triplet only if all six edges (three per side) fit inside the
/// object and the matched edge lengths agree within the relative tolerance.
/// Rigid-consistent triplets always pass; mismatched ones rarely do.
inline bool prune_triplet(const Correspondence& c1, const Correspondence& c2,
                          const Correspondence& c3, const FeatureCloud& target,
                          const FeatureCloud& query, const RansacConfig& cfg,
                          double diameter) {
  const double max_len = cfg.max_pair_distance * diameter;
  const std::array<std::pair<int, int>, 3> tpairs = {
      std::pair{c1.target_idx, c2.target_idx},
      std::pair{c1.target_idx, c3.target_idx},
      std::pair{c2.target_idx, c3.target_idx}};
  const std::array<std::pair<int, int>, 3> qpairs = {
      std::pair{c1.query_idx, c2.query_idx},
      std::pair{c1.query_idx, c3.query_idx},
      std::pair{c2.query_idx, c3.query_idx}};
  for (int e = 0; e < 3; ++e) {
    const Eigen::Vector3d dt =
        (target.points.row(tpairs[size_t(e)].first) -
         target.points.row(tpairs[size_t(e)].second)).cast<double>();
    const Eigen::Vector3d dq =
        (query.points.row(qpairs[size_t(e)].first) -
         query.points.row(qpairs[size_t(e)].second)).cast<double>();
    const double lt = dt.norm(), lq = dq.norm();
    if (lt > max_len || lq > max_len) return false;
    if (std::abs(lt - lq) > cfg.edge_ratio_tol * std::max(lt, lq)) return false;
  }
  return true;
}

struct HypothesisScore {
  double score = 0.0;
  int inlier_count = 0;
  std::vector<int> inliers;  // indices into the correspondence list
};

/// Inlier test of a pose over a correspondence set, counting at most the
/// best-similarity inlier per target point (ties toward the smaller query
/// index). FeatureAware sums those inliers' cosines over the sparse target
/// size; InlierRatio counts them. Summation runs in target-index order in
/// double precision, which pins the result bit-for-bit for any input order.
inline HypothesisScore score_hypothesis(const Pose& pose,
                                        const std::vector<Correspondence>& corrs,
                                        const FeatureCloud& target,
                                        const FeatureCloud& query, double tau,
                                        ScoringMode mode) {
  if (!(tau > 0)) throw Error("inlier threshold must be positive");
  const double tau2 = tau * tau;
  struct BestRef {
    int corr = -1;
    float sim = 0.f;
    int query_idx = 0;
  };
  std::map<int, BestRef> best_per_target;
  for (size_t ci = 0; ci < corrs.size(); ++ci) {
    const Correspondence& c = corrs[ci];
    const Eigen::Vector3d q = query.points.row(c.query_idx).cast<double>();
    const Eigen::Vector3d t = target.points.row(c.target_idx).cast<double>();
    if ((pose.apply(q) - t).squaredNorm() >= tau2) continue;
    auto [it, fresh] = best_per_target.try_emplace(c.target_idx);
    BestRef& b = it->second;
    if (fresh || c.similarity > b.sim ||
        (c.similarity == b.sim && c.query_idx < b.query_idx)) {
      b = {static_cast<int>(ci), c.similarity, c.query_idx};
    }
  }
  HypothesisScore out;
  double sum = 0.0;
  for (const auto& [tgt, b] : best_per_target) {
    sum += double(corrs[size_t(b.corr)].similarity);
    out.inliers.push_back(b.corr);
    ++out.inlier_count;
  }
  const double denom = double(target.size());
  out.score = mode == ScoringMode::FeatureAware ? sum / denom
                                                : double(out.inlier_count) / denom;
  return out;
}

namespace detail {

/// Correspondences rebuilt as flat arrays, grouped by target point with each
/// group sorted by descending similarity (query index on ties). The first
/// inlier hit inside a group is therefore the group's best inlier, so the
/// scorer can skip the rest of the group and still add cosines in exactly
/// the target-ascending order score_hypothesis uses.
struct CorrSoA {
  std::vector<double> tx, ty, tz;  // target point per correspondence
  std::vector<double> qx, qy, qz;  // query point per correspondence
  std::vector<float> sim;
  std::vector<int> group_begin;    // per distinct target, plus end sentinel
  std::vector<int> target_of_group;
  std::vector<int> target_of;      // target index per correspondence

  CorrSoA(const std::vector<Correspondence>& corrs, const FeatureCloud& target,
          const FeatureCloud& query) {
    std::vector<int> order(corrs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const Correspondence& ca = corrs[size_t(a)];
      const Correspondence& cb = corrs[size_t(b)];
      if (ca.target_idx != cb.target_idx) return ca.target_idx < cb.target_idx;
      if (ca.similarity != cb.similarity) return ca.similarity > cb.similarity;
      return ca.query_idx < cb.query_idx;
    });
    const size_t m = corrs.size();
    tx.resize(m); ty.resize(m); tz.resize(m);
    qx.resize(m); qy.resize(m); qz.resize(m);
    sim.resize(m);
    target_of.resize(m);
    int last_target = -1;
    for (size_t i = 0; i < m; ++i) {
      const Correspondence& c = corrs[size_t(order[i])];
      tx[i] = target.points(c.target_idx, 0);
      ty[i] = target.points(c.target_idx, 1);
      tz[i] = target.points(c.target_idx, 2);
      qx[i] = query.points(c.query_idx, 0);
      qy[i] = query.points(c.query_idx, 1);
      qz[i] = query.points(c.query_idx, 2);
      sim[i] = c.similarity;
      target_of[i] = c.target_idx;
      if (c.target_idx != last_target) {
        group_begin.push_back(static_cast<int>(i));
        target_of_group.push_back(c.target_idx);
        last_target = c.target_idx;
      }
    }
    group_begin.push_back(static_cast<int>(m));
  }

  int groups() const { return static_cast<int>(target_of_group.size()); }
};

struct FastScore {
  double score = 0.0;
  int inliers = 0;
};

inline FastScore score_fast(const CorrSoA& soa, const Pose& pose, double tau2,
                            double denom, ScoringMode mode) {
  const Eigen::Matrix3d& r = pose.rotation;
  const double r00 = r(0, 0), r01 = r(0, 1), r02 = r(0, 2);
  const double r10 = r(1, 0), r11 = r(1, 1), r12 = r(1, 2);
  const double r20 = r(2, 0), r21 = r(2, 1), r22 = r(2, 2);
  const double px = pose.translation.x(), py = pose.translation.y(),
               pz = pose.translation.z();
  double sum = 0.0;
  int count = 0;
  const int g = soa.groups();
  for (int gi = 0; gi < g; ++gi) {
    const int begin = soa.group_begin[size_t(gi)];
    const int end = soa.group_begin[size_t(gi) + 1];
    for (int i = begin; i < end; ++i) {
      const double x = soa.qx[size_t(i)], y = soa.qy[size_t(i)],
                   z = soa.qz[size_t(i)];
      const double dx = r00 * x + r01 * y + r02 * z + px - soa.tx[size_t(i)];
      const double dy = r10 * x + r11 * y + r12 * z + py - soa.ty[size_t(i)];
      const double dz = r20 * x + r21 * y + r22 * z + pz - soa.tz[size_t(i)];
      if (dx * dx + dy * dy + dz * dz < tau2) {
        sum += double(soa.sim[size_t(i)]);
        ++count;
        break;  // best inlier of this target found; rest are weaker
      }
    }
  }
  FastScore out;
  out.inliers = count;
  out.score = mode == ScoringMode::FeatureAware ? sum / denom
                                                : double(count) / denom;
  return out;
}

}  // namespace detail

/// Coarse pose search: cfg.iterations rounds of triplet sampling, pruning,
/// three-point alignment, and hypothesis scoring. Iteration i draws from its
/// own counter-based stream, so any worker count reproduces the same result;
/// ties in score resolve toward the earlier iteration. All iterations always
/// run (fixed budget, no early termination).
inline CoarseResult ransac_register(const std::vector<Correspondence>& corrs,
                                    const FeatureCloud& target,
                                    const FeatureCloud& query,
                                    const RansacConfig& cfg, double diameter) {
  const detail::CorrSoA soa(corrs, target, query);
  const int m = static_cast<int>(corrs.size());
  if (m < 3 || soa.groups() < 3) {
    throw TooFewCorrespondencesError(
        "need at least 3 correspondences on 3 distinct target points");
  }
  const double tau = cfg.tau_inlier * diameter;
  const double tau2 = tau * tau;
  const double max_len = cfg.max_pair_distance * diameter;
  const double denom = double(target.size());

  struct IterBest {
    double score = -1.0;
    int iter = -1;
    int inliers = 0;
    Pose pose;
    int valid = 0;  // scored hypotheses in this chunk
  };
  const int workers = std::max(1, cfg.workers);
  const int chunks = std::min(workers, std::max(1, cfg.iterations));
  std::vector<IterBest> chunk_best(static_cast<size_t>(chunks));

  // Chunk index for a slot; the chunk split must match parallel_chunks.
  const int base = cfg.iterations / chunks, extra = cfg.iterations % chunks;
  std::vector<std::int64_t> chunk_of_begin(size_t(chunks) + 1, 0);
  for (int c = 0; c < chunks; ++c) {
    chunk_of_begin[size_t(c) + 1] =
        chunk_of_begin[size_t(c)] + base + (c < extra ? 1 : 0);
  }

  parallel_chunks(cfg.iterations, chunks, [&](std::int64_t b, std::int64_t e) {
    int chunk = 0;
    while (chunk_of_begin[size_t(chunk) + 1] <= b) ++chunk;
    IterBest best;
    for (std::int64_t it = b; it < e; ++it) {
      RandomStream rng(cfg.seed, std::uint64_t(it));
      // Three correspondences on distinct target points; a capped number of
      // redraws keeps the per-iteration draw count bounded.
      int c2 = -1, c3 = -1;
      const int c1 = static_cast<int>(rng.uniform_below(std::uint64_t(m)));
      for (int tries = 0; tries < 16; ++tries) {
        const int cand = static_cast<int>(rng.uniform_below(std::uint64_t(m)));
        if (soa.target_of[size_t(cand)] != soa.target_of[size_t(c1)]) {
          c2 = cand;
          break;
        }
      }
      if (c2 < 0) continue;
      for (int tries = 0; tries < 16; ++tries) {
        const int cand = static_cast<int>(rng.uniform_below(std::uint64_t(m)));
        if (soa.target_of[size_t(cand)] != soa.target_of[size_t(c1)] &&
            soa.target_of[size_t(cand)] != soa.target_of[size_t(c2)]) {
          c3 = cand;
          break;
        }
      }
      if (c3 < 0) continue;

      const std::array<int, 3> tri = {c1, c2, c3};
      bool pruned = false;
      for (int e1 = 0; e1 < 3 && !pruned; ++e1) {
        const int a = tri[size_t(e1)], bb = tri[size_t((e1 + 1) % 3)];
        const double ltx = soa.tx[size_t(a)] - soa.tx[size_t(bb)];
        const double lty = soa.ty[size_t(a)] - soa.ty[size_t(bb)];
        const double ltz = soa.tz[size_t(a)] - soa.tz[size_t(bb)];
        const double lqx = soa.qx[size_t(a)] - soa.qx[size_t(bb)];
        const double lqy = soa.qy[size_t(a)] - soa.qy[size_t(bb)];
        const double lqz = soa.qz[size_t(a)] - soa.qz[size_t(bb)];
        const double lt = std::sqrt(ltx * ltx + lty * lty + ltz * ltz);
        const double lq = std::sqrt(lqx * lqx + lqy * lqy + lqz * lqz);
        if (lt > max_len || lq > max_len ||
            std::abs(lt - lq) > cfg.edge_ratio_tol * std::max(lt, lq)) {
          pruned = true;
        }
      }
      if (pruned) continue;

      std::vector<Eigen::Vector3d> src(3), dst(3);
      for (int j = 0; j < 3; ++j) {
        const int c = tri[size_t(j)];
        src[size_t(j)] = {soa.qx[size_t(c)], soa.qy[size_t(c)], soa.qz[size_t(c)]};
        dst[size_t(j)] = {soa.tx[size_t(c)], soa.ty[size_t(c)], soa.tz[size_t(c)]};
      }
      const double area =
          0.5 * (src[1] - src[0]).cross(src[2] - src[0]).norm();
      if (area <= 1e-12) continue;
      const Pose pose = kabsch(src, dst);

      const auto fs = detail::score_fast(soa, pose, tau2, denom, cfg.scoring);
      ++best.valid;
      if (fs.score > best.score) {
        best.score = fs.score;
        best.iter = static_cast<int>(it);
        best.inliers = fs.inliers;
        best.pose = pose;
      }
    }
    chunk_best[size_t(chunk)] = best;
  });

  CoarseResult out;
  double best_score = -1.0;
  int best_iter = -1;
  bool found = false;
  for (const auto& cb : chunk_best) {
    out.iterations_valid += cb.valid;
    if (cb.iter < 0) continue;
    if (cb.score > best_score ||
        (cb.score == best_score && cb.iter < best_iter)) {
      best_score = cb.score;
      best_iter = cb.iter;
      out.pose = cb.pose;
      out.s_coarse = cb.score;
      out.inlier_count = cb.inliers;
      found = true;
    }
  }
  if (!found) {
    throw NoValidHypothesisError("every sampled triplet was pruned or degenerate");
  }
  return out;
}

}  // namespace poseforge
