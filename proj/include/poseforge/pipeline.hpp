#pragma once

#include "poseforge/core.hpp"
#include "poseforge/features.hpp"
#include "poseforge/io.hpp"
#include "poseforge/matching.hpp"
#include "poseforge/parallel.hpp"
#include "poseforge/refinement.hpp"
#include "poseforge/registration.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <map>
#include <string>
#include <vector>

namespace poseforge {

enum class TaskMode { Localization, Detection };

/// Localization assumes the instance count N is known; detection does not and
/// instead filters candidate masks by confidence.
struct ModeConfig {
  TaskMode mode = TaskMode::Localization;
  int n_instances = 1;
  int m_masks = -1;        // <= 0 selects the mode default below
  double tau_mask = 0.4;   // detection-only confidence floor
  double nms_radius = 0.05;  // fraction of object diameter

  int resolved_m() const {
    if (m_masks > 0) return m_masks;
    return mode == TaskMode::Localization ? n_instances + 1 : 100;
  }
};

/// Everything the offline stage produced for one object. The provider is the
/// target-side descriptor source and must outlive the query; it stays null
/// when every mask comes with precomputed features.
struct PreparedQuery {
  std::string object_id;
  double diameter = 0;
  FeatureCloud cloud;  // model-frame points, fused descriptors
  PcaProjection pca;
  GeoScaleConfig geo;
  DescriptorProvider* provider = nullptr;
};

struct StageConfig {
  int top_k = 10;
  int dense_count = 3000;
  int grid = 16;
  RansacConfig ransac;
  IcpConfig icp;
  ScoreWeights weights;
};

/// Indices into scene.masks retained by the per-source policy: each source's
/// masks sorted by confidence descending (ties keep input order), truncated
/// to the top M, and in detection mode stripped of confidences below
/// tau_mask. The union concatenates sources in first-appearance order and
/// never merges overlaps. A nonempty object_id drops masks labeled for other
/// objects; unlabeled masks always stay.
inline std::vector<int> select_masks(const SceneBundle& scene,
                                     const ModeConfig& cfg,
                                     const std::string& object_id = "") {
  if (cfg.mode == TaskMode::Localization) {
    if (cfg.n_instances < 1) throw Error("localization needs n_instances >= 1");
    if (cfg.resolved_m() < cfg.n_instances) {
      throw Error("m_masks must be at least n_instances");
    }
  } else if (cfg.tau_mask < 0 || cfg.tau_mask > 1) {
    throw Error("tau_mask must lie in [0, 1]");
  }

  std::vector<std::string> source_order;
  std::map<std::string, std::vector<int>> by_source;
  for (size_t i = 0; i < scene.masks.size(); ++i) {
    const CandidateMask& m = scene.masks[i];
    if (!object_id.empty() && !m.object_id.empty() && m.object_id != object_id) {
      continue;
    }
    auto it = by_source.find(m.source_id);
    if (it == by_source.end()) {
      source_order.push_back(m.source_id);
      it = by_source.emplace(m.source_id, std::vector<int>{}).first;
    }
    it->second.push_back(static_cast<int>(i));
  }

  const int m_keep = cfg.resolved_m();
  std::vector<int> out;
  for (const std::string& source : source_order) {
    std::vector<int>& group = by_source[source];
    std::stable_sort(group.begin(), group.end(), [&](int a, int b) {
      return scene.masks[size_t(a)].confidence > scene.masks[size_t(b)].confidence;
    });
    int taken = 0;
    for (int idx : group) {
      if (taken >= m_keep) break;
      if (cfg.mode == TaskMode::Detection &&
          scene.masks[size_t(idx)].confidence < cfg.tau_mask) {
        continue;
      }
      out.push_back(idx);
      ++taken;
    }
  }
  return out;
}

struct MaskSkip {
  int mask_ref = -1;
  std::string reason;
};

struct MaskEstimate {
  bool ok = false;
  ScoredPose pose;  // valid only when ok
  MaskSkip skip;    // reason set only when !ok
  double features_ms = 0, matching_ms = 0, ransac_ms = 0, icp_ms = 0;

  double total_ms() const {
    return features_ms + matching_ms + ransac_ms + icp_ms;
  }
};

/// One full pass for one candidate mask: target features (computed, or loaded
/// when the scene references a precomputed file), top-k matching, coarse
/// registration, refinement, rescoring. Recoverable per-mask failures come
/// back as a skip record; anything else propagates. The mask's confidence is
/// read only during selection and never enters any score.
inline MaskEstimate estimate_for_mask(const SceneBundle& scene, int mask_index,
                                      const PreparedQuery& query,
                                      const StageConfig& cfg) {
  if (mask_index < 0 || mask_index >= static_cast<int>(scene.masks.size())) {
    throw OutOfBoundsError("mask index outside scene");
  }
  MaskEstimate out;
  out.skip.mask_ref = mask_index;
  const CandidateMask& mask = scene.masks[size_t(mask_index)];

  using Clock = std::chrono::steady_clock;
  auto elapsed_ms = [](Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  try {
    auto t0 = Clock::now();
    TargetFeatures target;
    const bool precomputed =
        size_t(mask_index) < scene.target_feature_files.size() &&
        !scene.target_feature_files[size_t(mask_index)].empty();
    if (precomputed) {
      target.sparse = load_feature_cloud(
          scene.target_feature_files[size_t(mask_index)], query.cloud.dim());
      target.dense = to_point_matrix(detail::dense_masked_points(
          scene.depth, scene.intrinsics, mask, cfg.dense_count));
    } else {
      if (!query.provider) {
        throw Error("prepared query has no descriptor provider and mask " +
                    std::to_string(mask_index) + " has no feature file");
      }
      target = build_target_features(scene.depth, scene.intrinsics, mask,
                                     query.diameter, *query.provider, query.geo,
                                     query.pca, cfg.dense_count, cfg.grid);
    }
    out.features_ms = elapsed_ms(t0);

    t0 = Clock::now();
    const std::vector<Correspondence> corrs =
        topk_correspondences(target.sparse, query.cloud, cfg.top_k);
    out.matching_ms = elapsed_ms(t0);

    t0 = Clock::now();
    const CoarseResult coarse =
        ransac_register(corrs, target.sparse, query.cloud, cfg.ransac,
                        query.diameter);
    out.ransac_ms = elapsed_ms(t0);

    t0 = Clock::now();
    const IcpResult icp = icp_refine(query.cloud.points, target.dense,
                                     coarse.pose, cfg.icp, query.diameter);
    const double tau_abs = cfg.ransac.tau_inlier * query.diameter;
    const double s_fine =
        rescore_fine(icp.pose, corrs, target.sparse, query.cloud, tau_abs);
    out.icp_ms = elapsed_ms(t0);

    out.pose.pose = icp.pose;
    out.pose.s_coarse = coarse.s_coarse;
    out.pose.s_fine = s_fine;
    out.pose.s_icp = icp.s_icp;
    out.pose.s_final =
        final_score(coarse.s_coarse, s_fine, icp.s_icp, cfg.weights);
    out.pose.mask_ref = mask_index;
    out.ok = true;
  } catch (const EmptyMaskError& e) {
    out.skip.reason = e.what();
  } catch (const NoValidDepthError& e) {
    out.skip.reason = e.what();
  } catch (const TooFewCorrespondencesError& e) {
    out.skip.reason = e.what();
  } catch (const NoValidHypothesisError& e) {
    out.skip.reason = e.what();
  } catch (const NoOverlapError& e) {
    out.skip.reason = e.what();
  }
  return out;
}

/// Greedy duplicate removal: repeatedly keep the best remaining pose and
/// suppress every pose whose translation lies strictly within radius of it.
/// Ties on the score fall back to the lower mask index so the result does not
/// depend on input order.
inline std::vector<ScoredPose> nms_translation(std::vector<ScoredPose> poses,
                                               double radius) {
  std::sort(poses.begin(), poses.end(),
            [](const ScoredPose& a, const ScoredPose& b) {
              if (a.s_final != b.s_final) return a.s_final > b.s_final;
              return a.mask_ref < b.mask_ref;
            });
  std::vector<char> dead(poses.size(), 0);
  std::vector<ScoredPose> kept;
  for (size_t i = 0; i < poses.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(poses[i]);
    for (size_t j = i + 1; j < poses.size(); ++j) {
      if (dead[j]) continue;
      if ((poses[i].pose.translation - poses[j].pose.translation).norm() <
          radius) {
        dead[j] = 1;
      }
    }
  }
  return kept;
}

struct StageTimings {
  double features_ms = 0, matching_ms = 0, ransac_ms = 0, icp_ms = 0;
  double wall_ms = 0;
};

struct EstimateResult {
  std::string object_id;
  std::vector<ScoredPose> poses;        // s_final descending, post NMS
  std::vector<double> pose_times_ms;    // per surviving pose, aligned
  std::vector<MaskSkip> skipped;
  StageTimings timings;                 // per-stage sums over all masks
  int shortfall = 0;  // localization: instances NMS could not supply
};

/// Full per-object scene pass: mask selection, per-mask estimation over a
/// worker pool, NMS in translation, mode-dependent final ranking. Output is
/// identical for any worker count; masks are reduced in slot order and each
/// stage is individually deterministic.
inline EstimateResult run_scene(const SceneBundle& scene,
                                const PreparedQuery& query,
                                const ModeConfig& mode, const StageConfig& cfg,
                                int workers = 1) {
  const auto t_start = std::chrono::steady_clock::now();
  EstimateResult out;
  out.object_id = query.object_id;
  const std::vector<int> picked = select_masks(scene, mode, query.object_id);

  std::vector<MaskEstimate> estimates(picked.size());
  const int64_t n = static_cast<int64_t>(picked.size());
  const int pool = std::max(1, workers);
  if (pool == 1 || n <= 1) {
    // Serial over masks: give the per-mask coarse stage the whole budget.
    StageConfig local = cfg;
    local.ransac.workers = std::max(cfg.ransac.workers, pool);
    for (int64_t i = 0; i < n; ++i) {
      estimates[size_t(i)] =
          estimate_for_mask(scene, picked[size_t(i)], query, local);
    }
  } else {
    StageConfig local = cfg;
    local.ransac.workers = 1;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    parallel_chunks(n, pool, [&](int64_t begin, int64_t end) {
      for (int64_t i = begin; i < end; ++i) {
        try {
          estimates[size_t(i)] =
              estimate_for_mask(scene, picked[size_t(i)], query, local);
        } catch (...) {
          errors[size_t(i)] = std::current_exception();
        }
      }
    });
    for (const auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }

  std::vector<ScoredPose> candidates;
  std::map<int, double> time_of_mask;
  for (const MaskEstimate& est : estimates) {
    out.timings.features_ms += est.features_ms;
    out.timings.matching_ms += est.matching_ms;
    out.timings.ransac_ms += est.ransac_ms;
    out.timings.icp_ms += est.icp_ms;
    if (est.ok) {
      candidates.push_back(est.pose);
      time_of_mask[est.pose.mask_ref] = est.total_ms();
    } else {
      out.skipped.push_back(est.skip);
    }
  }

  out.poses = nms_translation(std::move(candidates),
                              mode.nms_radius * query.diameter);
  if (mode.mode == TaskMode::Localization) {
    if (static_cast<int>(out.poses.size()) > mode.n_instances) {
      out.poses.resize(size_t(mode.n_instances));
    }
    out.shortfall = mode.n_instances - static_cast<int>(out.poses.size());
  }
  for (const ScoredPose& p : out.poses) {
    out.pose_times_ms.push_back(time_of_mask[p.mask_ref]);
  }
  out.timings.wall_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t_start)
                            .count();
  return out;
}

inline std::vector<EstimateResult> run_scene(
    const SceneBundle& scene, const std::vector<PreparedQuery>& queries,
    const ModeConfig& mode, const StageConfig& cfg, int workers = 1) {
  std::vector<EstimateResult> out;
  out.reserve(queries.size());
  for (const PreparedQuery& q : queries) {
    out.push_back(run_scene(scene, q, mode, cfg, workers));
  }
  return out;
}

}  // namespace poseforge
