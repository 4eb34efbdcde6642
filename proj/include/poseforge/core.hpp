#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace poseforge {

/// Row-major float storage shared by feature clouds and descriptor batches.
/// Matches the on-disk layout so serialization is a plain memory copy.
using PointMatrix = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;
using DescriptorMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define POSEFORGE_DEFINE_ERROR(name)          \
  class name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  };

POSEFORGE_DEFINE_ERROR(DegenerateMeshError)
POSEFORGE_DEFINE_ERROR(DegenerateTripletError)
POSEFORGE_DEFINE_ERROR(EmptyResultError)
POSEFORGE_DEFINE_ERROR(EmptyMaskError)
POSEFORGE_DEFINE_ERROR(OutOfBoundsError)
POSEFORGE_DEFINE_ERROR(ZeroVectorError)
POSEFORGE_DEFINE_ERROR(DimMismatchError)
POSEFORGE_DEFINE_ERROR(FileMissingError)
POSEFORGE_DEFINE_ERROR(IndexMismatchError)
POSEFORGE_DEFINE_ERROR(BadMagicError)
POSEFORGE_DEFINE_ERROR(TruncatedFileError)
POSEFORGE_DEFINE_ERROR(NoValidDepthError)
POSEFORGE_DEFINE_ERROR(TooFewCorrespondencesError)
POSEFORGE_DEFINE_ERROR(NoValidHypothesisError)
POSEFORGE_DEFINE_ERROR(NoOverlapError)
POSEFORGE_DEFINE_ERROR(BehindCameraError)
POSEFORGE_DEFINE_ERROR(InstanceOutOfFrameError)
POSEFORGE_DEFINE_ERROR(IoError)

#undef POSEFORGE_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Pose
// ---------------------------------------------------------------------------

/// Rigid transform: p_out = rotation * p + translation. Rotation must be a
/// proper rotation (orthonormal, det +1); translation is in meters.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return Pose{}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  /// this ∘ other: applies `other` first.
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  Pose inverse() const {
    Pose out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }
};

enum class PoseValidity { Valid, NotARotation, Reflection };

/// Checks orthonormality (max |R^T R - I| < 1e-6) and det(R) = +1 (± 1e-6).
inline PoseValidity validate_pose(const Pose& p) {
  const Eigen::Matrix3d gram = p.rotation.transpose() * p.rotation;
  const double ortho_err =
      (gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!std::isfinite(ortho_err) || ortho_err >= 1e-6) {
    return PoseValidity::NotARotation;
  }
  const double det = p.rotation.determinant();
  if (std::abs(det - 1.0) < 1e-6) return PoseValidity::Valid;
  if (det < 0.0) return PoseValidity::Reflection;
  return PoseValidity::NotARotation;
}

inline bool is_valid_pose(const Pose& p) {
  return validate_pose(p) == PoseValidity::Valid;
}

/// Angle (radians) of the relative rotation between two poses.
inline double rotation_angle_between(const Eigen::Matrix3d& a,
                                     const Eigen::Matrix3d& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
  return std::acos(std::min(1.0, std::max(-1.0, c)));
}

// ---------------------------------------------------------------------------
// Camera and images
// ---------------------------------------------------------------------------

/// Pinhole parameters in pixels. Projection: u = fx*x/z + cx, v = fy*y/z + cy.
struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 &&
           cx < width && cy >= 0 && cy < height;
  }
};

/// Per-pixel range along the optical axis, meters. 0 marks invalid depth.
struct DepthImage {
  int width = 0, height = 0;
  std::vector<float> values;  // row-major, size width*height

  DepthImage() = default;
  DepthImage(int w, int h) : width(w), height(h), values(size_t(w) * h, 0.f) {}

  float at(int x, int y) const { return values[size_t(y) * width + x]; }
  float& at(int x, int y) { return values[size_t(y) * width + x]; }
  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }
};

/// Binary instance segmentation hypothesis from one segmentation source.
struct CandidateMask {
  int width = 0, height = 0;
  std::vector<std::uint8_t> bitmap;  // row-major, nonzero = inside
  double confidence = 0.0;           // in [0,1]
  std::string source_id;
  std::string object_id;

  CandidateMask() = default;
  CandidateMask(int w, int h) : width(w), height(h), bitmap(size_t(w) * h, 0) {}

  bool at(int x, int y) const { return bitmap[size_t(y) * width + x] != 0; }
  void set(int x, int y, bool v) { bitmap[size_t(y) * width + x] = v ? 1 : 0; }
  std::int64_t area() const {
    std::int64_t n = 0;
    for (auto b : bitmap) n += (b != 0);
    return n;
  }
};

// ---------------------------------------------------------------------------
// Object model
// ---------------------------------------------------------------------------

/// Triangle mesh with its diameter (max pairwise vertex distance) and the
/// discrete symmetry transforms used by symmetry-aware metrics. The identity
/// is always part of `symmetries`.
struct ObjectModel {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  double diameter = 0.0;
  std::vector<Pose> symmetries{Pose::identity()};
};

/// Exact max pairwise vertex distance, O(V^2).
inline double compute_diameter(const std::vector<Eigen::Vector3d>& vertices) {
  double best2 = 0.0;
  const size_t n = vertices.size();
  for (size_t i = 0; i + 1 < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      best2 = std::max(best2, (vertices[i] - vertices[j]).squaredNorm());
    }
  }
  return std::sqrt(best2);
}

inline void validate_object_model(const ObjectModel& m) {
  if (m.vertices.empty()) throw Error("object model has no vertices");
  for (const auto& t : m.triangles) {
    for (auto idx : t) {
      if (idx >= m.vertices.size()) {
        throw Error("triangle index out of range");
      }
    }
  }
  const double d = compute_diameter(m.vertices);
  if (!(m.diameter > 0) || std::abs(d - m.diameter) > 1e-9 * std::max(1.0, d)) {
    throw Error("stored diameter does not match vertex geometry");
  }
  bool has_identity = false;
  for (const auto& s : m.symmetries) {
    if ((s.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
            1e-9 &&
        s.translation.cwiseAbs().maxCoeff() < 1e-9) {
      has_identity = true;
    }
    if (!is_valid_pose(s)) throw Error("symmetry transform is not rigid");
  }
  if (!has_identity) throw Error("symmetry set is missing the identity");
}

// ---------------------------------------------------------------------------
// Feature cloud
// ---------------------------------------------------------------------------

/// 3D points, each carrying a descriptor row. Fused descriptors concatenate a
/// unit-norm projected visual half and a unit-norm geometric half, so each
/// full row has norm sqrt(2).
struct FeatureCloud {
  PointMatrix points;            // N x 3, meters
  DescriptorMatrix descriptors;  // N x D

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(descriptors.cols()); }
};

/// Half-norm check for fused descriptors: both halves within tol of unit norm.
inline bool check_fused_half_norms(const FeatureCloud& fc, double tol = 1e-5) {
  const int d = fc.dim();
  if (d % 2 != 0 || fc.size() == 0) return false;
  const int h = d / 2;
  for (int i = 0; i < fc.size(); ++i) {
    const double n0 = fc.descriptors.row(i).head(h).norm();
    const double n1 = fc.descriptors.row(i).tail(h).norm();
    if (std::abs(n0 - 1.0) > tol || std::abs(n1 - 1.0) > tol) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Scored pose
// ---------------------------------------------------------------------------

/// Pose candidate with its score tuple. s_final is the exponent-weighted
/// product of the three stage scores.
struct ScoredPose {
  Pose pose;
  double s_coarse = 0.0;
  double s_fine = 0.0;
  double s_icp = 0.0;
  double s_final = 0.0;
  int mask_ref = -1;  // index of the originating candidate mask
};

}  // namespace poseforge
