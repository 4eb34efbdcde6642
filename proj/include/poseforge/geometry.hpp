#pragma once

#include "poseforge/core.hpp"
#include "poseforge/kdtree.hpp"
#include "poseforge/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <utility>
#include <vector>

namespace poseforge {

// ---------------------------------------------------------------------------
// Pinhole projection
// ---------------------------------------------------------------------------

/// Forward pinhole map. The point must be in front of the camera (z > 0).
inline Eigen::Vector2d project(const CameraIntrinsics& K,
                               const Eigen::Vector3d& p) {
  if (!(p.z() > 0.0)) throw BehindCameraError("projection requires z > 0");
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

struct BackprojectResult {
  std::vector<Eigen::Vector3d> points;  // one per kept pixel
  std::vector<int> kept;                // input indices with valid depth
  std::vector<int> dropped;             // input indices with depth 0
};

/// Lifts pixel coordinates through the depth image. Depth is read at the
/// containing pixel (floor of the continuous coordinate); the ray direction
/// uses the continuous coordinate itself. Zero-depth pixels are dropped and
/// reported, out-of-bounds pixels are an error.
inline BackprojectResult backproject(const DepthImage& depth,
                                     const CameraIntrinsics& K,
                                     const std::vector<Eigen::Vector2d>& pixels) {
  BackprojectResult out;
  out.points.reserve(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) {
    const double u = pixels[i].x(), v = pixels[i].y();
    const int px = static_cast<int>(std::floor(u));
    const int py = static_cast<int>(std::floor(v));
    if (!depth.in_bounds(px, py)) {
      throw OutOfBoundsError("pixel outside depth image");
    }
    const double d = depth.at(px, py);
    if (d <= 0.0) {
      out.dropped.push_back(static_cast<int>(i));
      continue;
    }
    out.points.emplace_back((u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d);
    out.kept.push_back(static_cast<int>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mesh sampling
// ---------------------------------------------------------------------------

struct SurfaceSamples {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3d> normals;  // face normals of the source triangle
  std::vector<int> triangle;             // source triangle index
};

inline Eigen::Vector3d triangle_normal(const ObjectModel& m, int tri) {
  const auto& t = m.triangles[size_t(tri)];
  const Eigen::Vector3d a = m.vertices[t[0]];
  const Eigen::Vector3d n =
      (m.vertices[t[1]] - a).cross(m.vertices[t[2]] - a);
  const double len = n.norm();
  return len > 0 ? Eigen::Vector3d(n / len) : Eigen::Vector3d(0, 0, 1);
}

inline double mesh_area(const ObjectModel& m) {
  double area = 0;
  for (const auto& t : m.triangles) {
    const Eigen::Vector3d a = m.vertices[t[0]];
    area += 0.5 * (m.vertices[t[1]] - a).cross(m.vertices[t[2]] - a).norm();
  }
  return area;
}

/// Area-weighted uniform surface sampling.
inline SurfaceSamples sample_mesh_uniform(const ObjectModel& model, int count,
                                          RandomStream& rng) {
  std::vector<double> cum(model.triangles.size());
  double total = 0;
  for (size_t i = 0; i < model.triangles.size(); ++i) {
    const auto& t = model.triangles[i];
    const Eigen::Vector3d a = model.vertices[t[0]];
    total += 0.5 * (model.vertices[t[1]] - a).cross(model.vertices[t[2]] - a).norm();
    cum[i] = total;
  }
  if (!(total > 0)) throw DegenerateMeshError("mesh surface area is zero");
  SurfaceSamples out;
  out.points.reserve(size_t(count));
  out.normals.reserve(size_t(count));
  out.triangle.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    const double r = rng.next_double() * total;
    const size_t tri =
        size_t(std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
    const size_t ti = std::min(tri, cum.size() - 1);
    const auto& t = model.triangles[ti];
    double u = rng.next_double(), v = rng.next_double();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Eigen::Vector3d a = model.vertices[t[0]];
    out.points.push_back(a + u * (model.vertices[t[1]] - a) +
                         v * (model.vertices[t[2]] - a));
    out.normals.push_back(triangle_normal(model, static_cast<int>(ti)));
    out.triangle.push_back(static_cast<int>(ti));
  }
  return out;
}

struct PoissonResult {
  SurfaceSamples samples;    // exactly target_count points
  SurfaceSamples presample;  // the dense pool the result was drawn from
};

/// Blue-noise surface sampling by weighted sample elimination over a dense
/// area-weighted pool. Hits the target count exactly and is deterministic
/// for a fixed seed.
inline PoissonResult poisson_disk_sample_detailed(const ObjectModel& model,
                                                  int target_count,
                                                  std::uint64_t seed) {
  if (target_count <= 0) throw Error("target_count must be positive");
  RandomStream rng(seed, 0);
  const int pool_size = std::max(5 * target_count, target_count + 200);
  PoissonResult out;
  out.presample = sample_mesh_uniform(model, pool_size, rng);
  const auto& pool = out.presample;
  const int m = static_cast<int>(pool.points.size());
  if (m <= target_count) {
    out.samples = pool;
    return out;
  }

  const double area = mesh_area(model);
  const double r_max =
      std::sqrt(area / (2.0 * std::sqrt(3.0) * double(target_count)));
  const double r2 = 2.0 * r_max;

  PointMatrix pts_f(m, 3);
  for (int i = 0; i < m; ++i) pts_f.row(i) = pool.points[size_t(i)].cast<float>();
  KdTree3 tree(pts_f);

  // Weight of a sample is the sum of falloff contributions of its neighbors;
  // eliminating the heaviest sample first flattens local density.
  std::vector<std::vector<std::pair<int, double>>> nbrs(static_cast<size_t>(m));
  std::vector<double> weight(size_t(m), 0.0);
  for (int i = 0; i < m; ++i) {
    const Eigen::Vector3f q = pts_f.row(i);
    for (int j : tree.radius_indices(q, float(r2))) {
      if (j == i) continue;
      const double d = (pool.points[size_t(i)] - pool.points[size_t(j)]).norm();
      const double x = std::max(0.0, 1.0 - d / r2);
      const double w = std::pow(x, 8);
      nbrs[size_t(i)].push_back({j, w});
      weight[size_t(i)] += w;
    }
  }

  std::set<std::pair<double, int>> heap;
  for (int i = 0; i < m; ++i) heap.insert({weight[size_t(i)], i});
  std::vector<char> removed(size_t(m), 0);
  int remaining = m;
  while (remaining > target_count) {
    const auto top = *heap.rbegin();
    heap.erase(std::prev(heap.end()));
    const int i = top.second;
    removed[size_t(i)] = 1;
    --remaining;
    for (const auto& [j, w] : nbrs[size_t(i)]) {
      if (removed[size_t(j)]) continue;
      heap.erase({weight[size_t(j)], j});
      weight[size_t(j)] -= w;
      heap.insert({weight[size_t(j)], j});
    }
  }

  for (int i = 0; i < m; ++i) {
    if (removed[size_t(i)]) continue;
    out.samples.points.push_back(pool.points[size_t(i)]);
    out.samples.normals.push_back(pool.normals[size_t(i)]);
    out.samples.triangle.push_back(pool.triangle[size_t(i)]);
  }
  return out;
}

inline SurfaceSamples poisson_disk_sample(const ObjectModel& model,
                                          int target_count,
                                          std::uint64_t seed) {
  return poisson_disk_sample_detailed(model, target_count, seed).samples;
}

// ---------------------------------------------------------------------------
// Template viewpoints
// ---------------------------------------------------------------------------

/// Camera pose (camera-from-world) plus intrinsics for one template view.
struct Viewpoint {
  Pose pose;
  CameraIntrinsics intrinsics;
};

/// Square template camera with a 60 degree vertical field of view.
inline CameraIntrinsics template_intrinsics(int size = 480) {
  CameraIntrinsics K;
  K.width = K.height = size;
  K.fy = K.fx = 0.5 * size / std::tan(0.5 * 60.0 * M_PI / 180.0);
  K.cx = K.cy = 0.5 * size;
  return K;
}

namespace detail {

struct IcosphereMesh {
  std::vector<Eigen::Vector3d> verts;  // unit sphere
  std::vector<std::array<int, 3>> faces;
};

inline IcosphereMesh icosphere_mesh(int subdivisions) {
  const double phi = 0.5 * (1.0 + std::sqrt(5.0));
  IcosphereMesh m;
  m.verts = {{-1, phi, 0}, {1, phi, 0},   {-1, -phi, 0}, {1, -phi, 0},
             {0, -1, phi}, {0, 1, phi},   {0, -1, -phi}, {0, 1, -phi},
             {phi, 0, -1}, {phi, 0, 1},   {-phi, 0, -1}, {-phi, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (auto& v : m.verts) v.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      m.verts.push_back((m.verts[size_t(a)] + m.verts[size_t(b)]).normalized());
      const int idx = static_cast<int>(m.verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    m.faces = std::move(next);
  }
  return m;
}

inline std::vector<Eigen::Vector3d> icosphere_directions(int subdivisions) {
  return icosphere_mesh(subdivisions).verts;
}

inline std::vector<Eigen::Vector3d> uniform_directions(int count) {
  if (count == 4) {
    const double s = 1.0 / std::sqrt(3.0);
    return {{s, s, s}, {s, -s, -s}, {-s, s, -s}, {-s, -s, s}};
  }
  int level = 0;
  auto level_count = [](int l) {
    int n = 12;
    for (int i = 0; i < l; ++i) n = 4 * n - 6;  // 12, 42, 162, 642, ...
    return n;
  };
  while (level_count(level) < count) ++level;
  auto dirs = icosphere_directions(level);
  std::sort(dirs.begin(), dirs.end(),
            [](const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
              if (a.z() != b.z()) return a.z() < b.z();
              if (a.y() != b.y()) return a.y() < b.y();
              return a.x() < b.x();
            });
  if (static_cast<int>(dirs.size()) == count) return dirs;
  // Farthest-point subsample keeps the subset approximately uniform.
  std::vector<int> chosen = {0};
  std::vector<double> mind(dirs.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < count) {
    const auto& last = dirs[size_t(chosen.back())];
    int best = -1;
    double best_d = -1;
    for (size_t i = 0; i < dirs.size(); ++i) {
      mind[i] = std::min(mind[i], (dirs[i] - last).squaredNorm());
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = static_cast<int>(i);
      }
    }
    chosen.push_back(best);
  }
  std::vector<Eigen::Vector3d> out;
  out.reserve(size_t(count));
  for (int i : chosen) out.push_back(dirs[size_t(i)]);
  return out;
}

}  // namespace detail

/// Camera centered at radius*dir looking at the origin, +z forward.
inline Pose look_at_origin(const Eigen::Vector3d& dir, double radius) {
  const Eigen::Vector3d z = -dir.normalized();
  Eigen::Vector3d up(0, 0, 1);
  if (std::abs(z.z()) > 0.999) up = Eigen::Vector3d(1, 0, 0);
  const Eigen::Vector3d x = up.cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Pose p;
  p.rotation.row(0) = x;
  p.rotation.row(1) = y;
  p.rotation.row(2) = z;
  p.translation = -(p.rotation * (radius * dir.normalized()));
  return p;
}

/// Viewpoints on a sphere around the origin, approximately uniform
/// (icosphere vertices; other counts by farthest-point subsampling).
inline std::vector<Viewpoint> sample_template_viewpoints(
    int count, double radius, const CameraIntrinsics& K = template_intrinsics()) {
  if (count < 4) throw Error("need at least 4 viewpoints");
  const auto dirs = detail::uniform_directions(count);
  std::vector<Viewpoint> views;
  views.reserve(dirs.size());
  for (const auto& d : dirs) {
    views.push_back({look_at_origin(d, radius), K});
  }
  return views;
}

// ---------------------------------------------------------------------------
// Visibility
// ---------------------------------------------------------------------------

/// Z-buffer built by splatting points with a square footprint.
inline DepthImage splat_depth_buffer(const std::vector<Eigen::Vector3d>& cam_pts,
                                     const CameraIntrinsics& K, int splat_px) {
  DepthImage buf(K.width, K.height);
  const int r = splat_px / 2;
  for (const auto& p : cam_pts) {
    if (!(p.z() > 0)) continue;
    const double u = K.fx * p.x() / p.z() + K.cx;
    const double v = K.fy * p.y() / p.z() + K.cy;
    const int px = static_cast<int>(std::floor(u));
    const int py = static_cast<int>(std::floor(v));
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int x = px + dx, y = py + dy;
        if (!buf.in_bounds(x, y)) continue;
        float& z = buf.at(x, y);
        if (z == 0.f || p.z() < z) z = static_cast<float>(p.z());
      }
    }
  }
  return buf;
}

/// Per-point visibility flags, one byte per (point, view) pair, row-major by
/// point. A point is visible in a view when its projected depth is within
/// depth_tol of the splat z-buffer at its pixel.
inline std::vector<std::uint8_t> visibility_flags(
    const std::vector<Eigen::Vector3d>& points,
    const std::vector<Viewpoint>& views, double depth_tol, int splat_px) {
  const size_t n = points.size(), nv = views.size();
  std::vector<std::uint8_t> flags(n * nv, 0);
  std::vector<Eigen::Vector3d> cam_pts(n);
  for (size_t vi = 0; vi < nv; ++vi) {
    const auto& view = views[vi];
    for (size_t i = 0; i < n; ++i) cam_pts[i] = view.pose.apply(points[i]);
    const DepthImage buf = splat_depth_buffer(cam_pts, view.intrinsics, splat_px);
    for (size_t i = 0; i < n; ++i) {
      const auto& p = cam_pts[i];
      if (!(p.z() > 0)) continue;
      const int px = static_cast<int>(
          std::floor(view.intrinsics.fx * p.x() / p.z() + view.intrinsics.cx));
      const int py = static_cast<int>(
          std::floor(view.intrinsics.fy * p.y() / p.z() + view.intrinsics.cy));
      if (!buf.in_bounds(px, py)) continue;
      const float z = buf.at(px, py);
      if (z > 0.f && p.z() <= z + depth_tol) flags[i * nv + vi] = 1;
    }
  }
  return flags;
}

/// Indices (ascending) of points visible in at least min_views views. The
/// depth tolerance is 1% of the model diameter.
inline std::vector<int> visibility_filter(
    const std::vector<Eigen::Vector3d>& points, double diameter,
    const std::vector<Viewpoint>& views, int min_views, int splat_px = 3) {
  const auto flags = visibility_flags(points, views, 0.01 * diameter, splat_px);
  const size_t nv = views.size();
  std::vector<int> kept;
  for (size_t i = 0; i < points.size(); ++i) {
    int count = 0;
    for (size_t vi = 0; vi < nv; ++vi) count += flags[i * nv + vi];
    if (count >= min_views) kept.push_back(static_cast<int>(i));
  }
  if (kept.empty()) {
    throw EmptyResultError("no point visible in the required number of views");
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Patch grid
// ---------------------------------------------------------------------------

/// Centers of a grid x grid patch lattice over the smallest axis-aligned
/// square enclosing the mask, keeping only centers whose pixel is masked.
/// Centers landing in the same pixel collapse to one entry at that pixel's
/// center, so the result never exceeds the mask's pixel set.
inline std::vector<Eigen::Vector2d> grid_patch_centers(const CandidateMask& mask,
                                                       int grid) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      x0 = std::min(x0, x); x1 = std::max(x1, x);
      y0 = std::min(y0, y); y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) throw EmptyMaskError("mask has no pixels set");
  const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  const int side = std::max(bw, bh);
  const double sx0 = x0 - 0.5 * (side - bw);
  const double sy0 = y0 - 0.5 * (side - bh);
  std::vector<Eigen::Vector2d> centers;
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) {
      const double u = sx0 + (j + 0.5) * side / double(grid);
      const double v = sy0 + (i + 0.5) * side / double(grid);
      const int px = static_cast<int>(std::floor(u));
      const int py = static_cast<int>(std::floor(v));
      if (!mask.width || px < 0 || px >= mask.width || py < 0 ||
          py >= mask.height || !mask.at(px, py)) {
        continue;
      }
      if (seen.insert({py, px}).second) {
        centers.emplace_back(px + 0.5, py + 0.5);
      }
    }
  }
  if (centers.empty()) throw EmptyMaskError("no grid center falls on the mask");
  return centers;
}

// ---------------------------------------------------------------------------
// Rigid alignment
// ---------------------------------------------------------------------------

/// Least-squares rigid transform src -> dst (Kabsch). Proper rotation is
/// enforced by the SVD sign correction. Source points must span a plane.
inline Pose kabsch(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst) {
  const size_t n = src.size();
  if (n < 3 || dst.size() != n) {
    throw DegenerateTripletError("kabsch needs >= 3 paired points");
  }
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < n; ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= double(n);
  cd /= double(n);
  if (n == 3) {
    const double area =
        0.5 * (src[1] - src[0]).cross(src[2] - src[0]).norm();
    if (area <= 1e-12) throw DegenerateTripletError("collinear source triplet");
  } else {
    Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
    for (size_t i = 0; i < n; ++i) {
      const Eigen::Vector3d d = src[i] - cs;
      scatter += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
    if (eig.eigenvalues()(1) <= 1e-24) {
      throw DegenerateTripletError("source points are collinear");
    }
  }
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < n; ++i) {
    h += (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1 : 1;
  Pose out;
  out.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  out.translation = cd - out.rotation * cs;
  return out;
}

// ---------------------------------------------------------------------------
// Ray casting
// ---------------------------------------------------------------------------

/// Moller-Trumbore ray/triangle test. Returns the hit distance along dir, or
/// a negative value on miss. dir need not be unit length.
inline double ray_triangle(const Eigen::Vector3d& orig,
                           const Eigen::Vector3d& dir,
                           const Eigen::Vector3d& v0,
                           const Eigen::Vector3d& v1,
                           const Eigen::Vector3d& v2) {
  const Eigen::Vector3d e1 = v1 - v0, e2 = v2 - v0;
  const Eigen::Vector3d pvec = dir.cross(e2);
  const double det = e1.dot(pvec);
  if (std::abs(det) < 1e-14) return -1;
  const double inv = 1.0 / det;
  const Eigen::Vector3d tvec = orig - v0;
  const double u = tvec.dot(pvec) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return -1;
  const Eigen::Vector3d qvec = tvec.cross(e1);
  const double v = dir.dot(qvec) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return -1;
  const double t = e2.dot(qvec) * inv;
  return t > 1e-12 ? t : -1;
}

/// Nearest intersection of a ray with a mesh under a rigid pose (mesh-frame
/// model, camera-frame ray). Returns distance along dir or -1.
inline double ray_mesh_nearest(const Eigen::Vector3d& orig,
                               const Eigen::Vector3d& dir,
                               const ObjectModel& model, const Pose& pose) {
  // Transform the ray into the model frame once instead of every vertex out.
  const Pose inv = pose.inverse();
  const Eigen::Vector3d o = inv.apply(orig);
  const Eigen::Vector3d d = inv.rotation * dir;
  double best = -1;
  for (const auto& t : model.triangles) {
    const double hit = ray_triangle(o, d, model.vertices[t[0]],
                                    model.vertices[t[1]], model.vertices[t[2]]);
    if (hit > 0 && (best < 0 || hit < best)) best = hit;
  }
  return best;
}

}  // namespace poseforge
