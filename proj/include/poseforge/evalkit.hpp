#pragma once

#include "poseforge/core.hpp"
#include "poseforge/geometry.hpp"
#include "poseforge/io.hpp"
#include "poseforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

namespace poseforge {

// ---------------------------------------------------------------------------
// Synthetic meshes
// ---------------------------------------------------------------------------

namespace detail {

inline ObjectModel model_from_parts(std::vector<Eigen::Vector3d> verts,
                                    std::vector<std::array<std::uint32_t, 3>> tris) {
  ObjectModel m;
  m.vertices = std::move(verts);
  m.triangles = std::move(tris);
  // Enforce outward winding so sampled face normals point away from the
  // interior; synthetic shapes here are star-shaped around the centroid.
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& v : m.vertices) centroid += v;
  centroid /= double(m.vertices.size());
  for (auto& t : m.triangles) {
    const Eigen::Vector3d a = m.vertices[t[0]];
    const Eigen::Vector3d n =
        (m.vertices[t[1]] - a).cross(m.vertices[t[2]] - a);
    const Eigen::Vector3d mid =
        (a + m.vertices[t[1]] + m.vertices[t[2]]) / 3.0 - centroid;
    if (n.dot(mid) < 0) std::swap(t[1], t[2]);
  }
  m.diameter = compute_diameter(m.vertices);
  return m;
}

}  // namespace detail

inline ObjectModel make_icosphere(int subdivisions, double radius) {
  const auto base = detail::icosphere_mesh(subdivisions);
  std::vector<Eigen::Vector3d> verts;
  verts.reserve(base.verts.size());
  for (const auto& v : base.verts) verts.push_back(radius * v);
  std::vector<std::array<std::uint32_t, 3>> tris;
  tris.reserve(base.faces.size());
  for (const auto& f : base.faces) {
    tris.push_back({std::uint32_t(f[0]), std::uint32_t(f[1]), std::uint32_t(f[2])});
  }
  return detail::model_from_parts(std::move(verts), std::move(tris));
}

inline ObjectModel make_box(double sx, double sy, double sz) {
  const double x = sx / 2, y = sy / 2, z = sz / 2;
  std::vector<Eigen::Vector3d> verts = {
      {-x, -y, -z}, {x, -y, -z}, {x, y, -z}, {-x, y, -z},
      {-x, -y, z},  {x, -y, z},  {x, y, z},  {-x, y, z}};
  std::vector<std::array<std::uint32_t, 3>> tris = {
      {0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
      {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
  return detail::model_from_parts(std::move(verts), std::move(tris));
}

/// Flat rectangle in the xy plane, subdivided so surface sampling and
/// splatting get enough triangles to work with.
inline ObjectModel make_plane(double sx, double sy, int cells = 8) {
  std::vector<Eigen::Vector3d> verts;
  std::vector<std::array<std::uint32_t, 3>> tris;
  for (int j = 0; j <= cells; ++j) {
    for (int i = 0; i <= cells; ++i) {
      verts.emplace_back(sx * (double(i) / cells - 0.5),
                         sy * (double(j) / cells - 0.5), 0.0);
    }
  }
  auto at = [&](int i, int j) { return std::uint32_t(j * (cells + 1) + i); };
  for (int j = 0; j < cells; ++j) {
    for (int i = 0; i < cells; ++i) {
      tris.push_back({at(i, j), at(i + 1, j), at(i + 1, j + 1)});
      tris.push_back({at(i, j), at(i + 1, j + 1), at(i, j + 1)});
    }
  }
  ObjectModel m;
  m.vertices = std::move(verts);
  m.triangles = std::move(tris);
  m.diameter = compute_diameter(m.vertices);
  return m;
}

/// Asymmetric smooth solid: an icosphere whose radius is modulated by a few
/// random low-frequency cosine waves. Generic enough that no accidental
/// symmetry survives, which the pose tests rely on.
inline ObjectModel make_blob(std::uint64_t seed, double base_radius,
                             double amplitude = 0.25, int subdivisions = 3) {
  const auto base = detail::icosphere_mesh(subdivisions);
  RandomStream rng(seed, 0x810Bu);
  const int waves = 6;
  std::vector<Eigen::Vector3d> omega(waves);
  std::vector<double> phase(waves), amp(waves);
  for (int w = 0; w < waves; ++w) {
    omega[size_t(w)] = Eigen::Vector3d(rng.gaussian(), rng.gaussian(),
                                       rng.gaussian()) * 2.0;
    phase[size_t(w)] = rng.next_double() * 2.0 * M_PI;
    amp[size_t(w)] = amplitude / waves * (0.5 + rng.next_double());
  }
  std::vector<Eigen::Vector3d> verts;
  verts.reserve(base.verts.size());
  for (const auto& v : base.verts) {
    double r = 1.0;
    for (int w = 0; w < waves; ++w) {
      r += amp[size_t(w)] * std::cos(omega[size_t(w)].dot(v) + phase[size_t(w)]);
    }
    verts.push_back(base_radius * r * v);
  }
  std::vector<std::array<std::uint32_t, 3>> tris;
  tris.reserve(base.faces.size());
  for (const auto& f : base.faces) {
    tris.push_back({std::uint32_t(f[0]), std::uint32_t(f[1]), std::uint32_t(f[2])});
  }
  return detail::model_from_parts(std::move(verts), std::move(tris));
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

struct SynthSceneSpec {
  const ObjectModel* model = nullptr;
  std::string object_id;
  std::vector<Pose> gt_poses;  // camera-from-model, one per instance
  double occlusion_fraction = 0.0;
  double depth_noise_sigma = 0.0;  // meters
  double outlier_mask_fraction = 0.0;
  CameraIntrinsics camera;
  std::uint64_t seed = 0;
  std::string source_id = "synthetic";
};

struct SynthScene {
  SceneBundle scene;
  std::vector<GroundTruthEntry> gt;
};

namespace detail {

/// Triangles sharing at least one vertex with each triangle, self included.
inline std::vector<std::vector<int>> triangle_adjacency(const ObjectModel& m) {
  std::vector<std::vector<int>> of_vertex(m.vertices.size());
  for (size_t t = 0; t < m.triangles.size(); ++t) {
    for (auto v : m.triangles[t]) {
      of_vertex[v].push_back(static_cast<int>(t));
    }
  }
  std::vector<std::vector<int>> out(m.triangles.size());
  for (size_t t = 0; t < m.triangles.size(); ++t) {
    std::vector<int>& nbrs = out[t];
    for (auto v : m.triangles[t]) {
      nbrs.insert(nbrs.end(), of_vertex[v].begin(), of_vertex[v].end());
    }
    std::sort(nbrs.begin(), nbrs.end());
    nbrs.erase(std::unique(nbrs.begin(), nbrs.end()), nbrs.end());
  }
  return out;
}

}  // namespace detail

/// Renders instances into a shared depth buffer and emits per-instance masks
/// plus ground truth. Depth is exact at every covered pixel: a dense surface
/// splat proposes candidate triangles per pixel, then the pixel-center ray is
/// intersected with those candidates and their neighbors, nearest hit wins.
/// Gaussian noise and mask erosion are applied afterwards, deterministically.
inline SynthScene generate_scene(const SynthSceneSpec& spec) {
  if (!spec.model || spec.gt_poses.empty()) {
    throw Error("scene spec needs a model and at least one pose");
  }
  const ObjectModel& model = *spec.model;
  const CameraIntrinsics& K = spec.camera;
  if (!K.valid()) throw Error("scene spec has invalid intrinsics");
  const int n_inst = static_cast<int>(spec.gt_poses.size());

  // Visibility pre-checks per instance.
  for (int inst = 0; inst < n_inst; ++inst) {
    const Pose& pose = spec.gt_poses[size_t(inst)];
    double min_u = 1e18, max_u = -1e18, min_v = 1e18, max_v = -1e18;
    for (const auto& v : model.vertices) {
      const Eigen::Vector3d p = pose.apply(v);
      if (!(p.z() > 1e-9)) {
        throw InstanceOutOfFrameError("instance reaches behind the camera");
      }
      const Eigen::Vector2d px = project(K, p);
      min_u = std::min(min_u, px.x());
      max_u = std::max(max_u, px.x());
      min_v = std::min(min_v, px.y());
      max_v = std::max(max_v, px.y());
    }
    if (max_u < 0 || min_u >= K.width || max_v < 0 || min_v >= K.height) {
      throw InstanceOutOfFrameError("instance projects outside the image");
    }
  }

  const auto adjacency = detail::triangle_adjacency(model);

  // Stage 1: propose candidate (instance, triangle) pairs per pixel from a
  // dense splat of surface samples.
  struct Candidate {
    float depth;
    std::int32_t inst;
    std::int32_t tri;
  };
  const int kMaxCand = 4;
  std::vector<Candidate> cands(size_t(K.width) * K.height * kMaxCand,
                               {0.f, -1, -1});
  std::vector<std::uint8_t> cand_count(size_t(K.width) * K.height, 0);

  RandomStream splat_rng(spec.seed, 0x5917Au);
  for (int inst = 0; inst < n_inst; ++inst) {
    const Pose& pose = spec.gt_poses[size_t(inst)];
    // Sample density tied to the projected size so small renders stay cheap.
    double zmin = 1e18;
    for (const auto& v : model.vertices) {
      zmin = std::min(zmin, pose.apply(v).z());
    }
    const double px_per_m = K.fx / zmin;
    const double projected_px =
        0.5 * mesh_area(model) * px_per_m * px_per_m;
    const int samples = static_cast<int>(
        std::min(200000.0, std::max(8000.0, 4.0 * projected_px)));
    const SurfaceSamples surf = sample_mesh_uniform(model, samples, splat_rng);
    for (size_t s = 0; s < surf.points.size(); ++s) {
      const Eigen::Vector3d p = pose.apply(surf.points[s]);
      if (!(p.z() > 0)) continue;
      const int px = static_cast<int>(std::floor(K.fx * p.x() / p.z() + K.cx));
      const int py = static_cast<int>(std::floor(K.fy * p.y() / p.z() + K.cy));
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int x = px + dx, y = py + dy;
          if (x < 0 || x >= K.width || y < 0 || y >= K.height) continue;
          const size_t at = size_t(y) * K.width + x;
          Candidate* slot = &cands[at * kMaxCand];
          const auto tri = surf.triangle[s];
          bool seen = false;
          for (int c = 0; c < cand_count[at]; ++c) {
            if (slot[c].inst == inst && slot[c].tri == tri) {
              seen = true;
              break;
            }
          }
          if (seen) continue;
          if (cand_count[at] < kMaxCand) {
            slot[cand_count[at]++] = {float(p.z()), inst, tri};
          } else {
            // Replace the farthest candidate if this one is nearer.
            int worst = 0;
            for (int c = 1; c < kMaxCand; ++c) {
              if (slot[c].depth > slot[worst].depth) worst = c;
            }
            if (p.z() < slot[worst].depth) {
              slot[worst] = {float(p.z()), inst, tri};
            }
          }
        }
      }
    }
  }

  // Stage 2: exact pixel-center ray casts against proposed triangles.
  SynthScene out;
  out.scene.scene_id = "synthetic";
  out.scene.intrinsics = K;
  out.scene.depth_scale = 1e-4;
  out.scene.depth = DepthImage(K.width, K.height);
  std::vector<std::int32_t> owner(size_t(K.width) * K.height, -1);

  std::vector<Pose> inv_poses;
  inv_poses.reserve(size_t(n_inst));
  for (const auto& p : spec.gt_poses) inv_poses.push_back(p.inverse());

  for (int y = 0; y < K.height; ++y) {
    for (int x = 0; x < K.width; ++x) {
      const size_t at = size_t(y) * K.width + x;
      if (!cand_count[at]) continue;
      const Eigen::Vector3d dir((x + 0.5 - K.cx) / K.fx,
                                (y + 0.5 - K.cy) / K.fy, 1.0);
      double best_t = -1;
      int best_inst = -1;
      for (int c = 0; c < cand_count[at]; ++c) {
        const Candidate& cand = cands[at * kMaxCand + size_t(c)];
        const Pose& inv = inv_poses[size_t(cand.inst)];
        const Eigen::Vector3d o = inv.translation;
        const Eigen::Vector3d d = inv.rotation * dir;
        for (int tri : adjacency[size_t(cand.tri)]) {
          const auto& tv = model.triangles[size_t(tri)];
          const double t =
              ray_triangle(o, d, model.vertices[tv[0]], model.vertices[tv[1]],
                           model.vertices[tv[2]]);
          if (t > 0 && (best_t < 0 || t < best_t)) {
            best_t = t;
            best_inst = cand.inst;
          }
        }
      }
      if (best_t > 0) {
        // The ray was parameterized with dir.z = 1, so t is the depth.
        out.scene.depth.at(x, y) = static_cast<float>(best_t);
        owner[at] = best_inst;
      }
    }
  }

  // Per-instance true masks from pixel ownership.
  std::vector<CandidateMask> masks;
  for (int inst = 0; inst < n_inst; ++inst) {
    CandidateMask mask(K.width, K.height);
    mask.source_id = spec.source_id;
    mask.object_id = spec.object_id;
    mask.confidence = 1.0 - spec.occlusion_fraction;
    std::int64_t area = 0;
    for (size_t i = 0; i < owner.size(); ++i) {
      if (owner[i] == inst) {
        mask.bitmap[i] = 1;
        ++area;
      }
    }
    if (area == 0) {
      throw InstanceOutOfFrameError("instance is entirely hidden");
    }
    masks.push_back(std::move(mask));
  }

  // Directional occlusion bite: drop exactly the requested fraction of each
  // mask, eaten from one side along a random direction.
  if (spec.occlusion_fraction > 0) {
    for (int inst = 0; inst < n_inst; ++inst) {
      RandomStream rng(spec.seed, 0xB17Eu + std::uint64_t(inst));
      const double ang = rng.next_double() * 2.0 * M_PI;
      const double dx = std::cos(ang), dy = std::sin(ang);
      CandidateMask& mask = masks[size_t(inst)];
      std::vector<std::pair<double, size_t>> order;
      for (size_t i = 0; i < mask.bitmap.size(); ++i) {
        if (!mask.bitmap[i]) continue;
        const double px = double(i % size_t(K.width));
        const double py = double(i / size_t(K.width));
        order.push_back({px * dx + py * dy, i});
      }
      std::sort(order.begin(), order.end());
      const size_t bite =
          size_t(std::llround(spec.occlusion_fraction * double(order.size())));
      for (size_t b = 0; b < bite; ++b) mask.bitmap[order[b].second] = 0;
    }
  }

  // Low-confidence background rectangles posing as the object.
  const int n_outliers =
      static_cast<int>(std::llround(spec.outlier_mask_fraction * n_inst));
  RandomStream orng(spec.seed, 0xBAD0u);
  for (int i = 0; i < n_outliers; ++i) {
    CandidateMask mask(K.width, K.height);
    mask.source_id = spec.source_id;
    mask.object_id = spec.object_id;
    mask.confidence = orng.uniform(0.15, 0.35);
    const int w = std::max(8, static_cast<int>(orng.uniform(0.10, 0.25) * K.width));
    const int h = std::max(8, static_cast<int>(orng.uniform(0.10, 0.25) * K.height));
    const int x0 = static_cast<int>(orng.uniform_below(std::uint64_t(
        std::max(1, K.width - w))));
    const int y0 = static_cast<int>(orng.uniform_below(std::uint64_t(
        std::max(1, K.height - h))));
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) mask.set(x, y, true);
    }
    masks.push_back(std::move(mask));
  }

  if (spec.depth_noise_sigma > 0) {
    RandomStream nrng(spec.seed, 0xA015Eu);
    for (auto& v : out.scene.depth.values) {
      if (v > 0) {
        v = std::max(1e-6, double(v) + spec.depth_noise_sigma * nrng.gaussian());
      }
    }
  }

  out.scene.masks = std::move(masks);
  out.scene.target_feature_files.assign(out.scene.masks.size(), "");
  for (int inst = 0; inst < n_inst; ++inst) {
    out.gt.push_back({spec.object_id, spec.gt_poses[size_t(inst)]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pose-error metrics
// ---------------------------------------------------------------------------

/// Maximum surface distance, minimized over the model's symmetry transforms.
inline double mssd(const Pose& est, const Pose& gt, const ObjectModel& model) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& sym : model.symmetries) {
    const Pose gts = gt.compose(sym);
    double worst = 0;
    for (const auto& v : model.vertices) {
      worst = std::max(worst, (est.apply(v) - gts.apply(v)).squaredNorm());
      if (worst >= best) break;  // cannot beat the current symmetry branch
    }
    best = std::min(best, worst);
  }
  return std::sqrt(best);
}

/// Maximum reprojection distance in pixels, minimized over symmetries. Every
/// vertex must project in front of the camera under both poses.
inline double mspd(const Pose& est, const Pose& gt, const ObjectModel& model,
                   const CameraIntrinsics& K) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& sym : model.symmetries) {
    const Pose gts = gt.compose(sym);
    double worst = 0;
    for (const auto& v : model.vertices) {
      const Eigen::Vector2d pe = project(K, est.apply(v));
      const Eigen::Vector2d pg = project(K, gts.apply(v));
      worst = std::max(worst, (pe - pg).squaredNorm());
    }
    best = std::min(best, worst);
  }
  return std::sqrt(best);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

inline std::vector<double> default_mssd_thresholds(double diameter) {
  std::vector<double> out;
  for (int i = 1; i <= 10; ++i) out.push_back(0.05 * i * diameter);
  return out;
}

inline std::vector<double> default_mspd_thresholds() {
  std::vector<double> out;
  for (int i = 1; i <= 10; ++i) out.push_back(5.0 * i);
  return out;
}

/// Mean over thresholds of the fraction of errors strictly below each.
inline double average_recall(const std::vector<double>& errors,
                             const std::vector<double>& thresholds) {
  if (errors.empty() || thresholds.empty()) return 0.0;
  double acc = 0;
  for (double thr : thresholds) {
    int hits = 0;
    for (double e : errors) hits += e < thr;
    acc += double(hits) / double(errors.size());
  }
  return acc / double(thresholds.size());
}

/// Predictions and ground truths of one (scene, object) pair: a score per
/// prediction and the pose-error matrix against every ground truth.
struct DetectionSet {
  std::vector<double> scores;
  std::vector<std::vector<double>> errors;  // [prediction][ground truth]
};

/// Precision of score-ranked greedy matching, averaged over thresholds. At
/// each threshold, predictions in descending score order claim the smallest-
/// error unmatched ground truth below the threshold; precision is matched
/// over total predictions.
inline double average_precision(const std::vector<DetectionSet>& sets,
                                const std::vector<double>& thresholds) {
  if (thresholds.empty()) return 0.0;
  struct Ref {
    double score;
    int set;
    int pred;
  };
  std::vector<Ref> order;
  std::int64_t total_preds = 0;
  for (size_t s = 0; s < sets.size(); ++s) {
    for (size_t p = 0; p < sets[s].scores.size(); ++p) {
      order.push_back({sets[s].scores[p], int(s), int(p)});
      ++total_preds;
    }
  }
  if (total_preds == 0) return 0.0;
  std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.set != b.set) return a.set < b.set;
    return a.pred < b.pred;
  });
  double acc = 0;
  for (double thr : thresholds) {
    std::int64_t tp = 0;
    std::vector<std::vector<char>> used(sets.size());
    for (size_t s = 0; s < sets.size(); ++s) {
      const size_t gts = sets[s].errors.empty() ? 0 : sets[s].errors[0].size();
      used[s].assign(gts, 0);
    }
    for (const Ref& r : order) {
      const auto& errs = sets[size_t(r.set)].errors[size_t(r.pred)];
      int best_gt = -1;
      double best_err = thr;
      for (size_t g = 0; g < errs.size(); ++g) {
        if (used[size_t(r.set)][g]) continue;
        if (errs[g] < best_err) {
          best_err = errs[g];
          best_gt = int(g);
        }
      }
      if (best_gt >= 0) {
        used[size_t(r.set)][size_t(best_gt)] = 1;
        ++tp;
      }
    }
    acc += double(tp) / double(total_preds);
  }
  return acc / double(thresholds.size());
}

}  // namespace poseforge
