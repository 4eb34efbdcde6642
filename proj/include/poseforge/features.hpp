#pragma once

#include "poseforge/core.hpp"
#include "poseforge/geometry.hpp"
#include "poseforge/kdtree.hpp"
#include "poseforge/rng.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace poseforge {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline PointMatrix to_point_matrix(const std::vector<Eigen::Vector3d>& pts) {
  PointMatrix m(static_cast<int>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i) {
    m.row(static_cast<int>(i)) = pts[i].cast<float>();
  }
  return m;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Linear projection fitted on query visual descriptors and reused for the
/// target side. Rows of `basis` beyond `effective_rank` are zero when the
/// training set could not support the full output dimension.
struct PcaProjection {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;  // d_out x d_vis, rows orthonormal up to the rank
  int d_out = 0;
  int effective_rank = 0;

  bool rank_deficient() const { return effective_rank < d_out; }

  Eigen::VectorXf project(const Eigen::VectorXf& x) const {
    if (x.size() != mean.size()) {
      throw DimMismatchError("projection input has wrong dimension");
    }
    const Eigen::VectorXd centered = x.cast<double>() - mean;
    return (basis * centered).cast<float>();
  }
};

/// Principal directions of the rows, by descending eigenvalue of the sample
/// covariance. Sign convention: the first entry of each basis row larger than
/// 1e-12 in magnitude is positive. If the data has fewer than d_out
/// significant directions the remaining rows are zero and effective_rank
/// records how many are real.
inline PcaProjection fit_pca(const DescriptorMatrix& rows, int d_out) {
  const int m = static_cast<int>(rows.rows());
  const int d = static_cast<int>(rows.cols());
  if (m < 1 || d < 1 || d_out < 1) throw Error("fit_pca needs data");
  if (d_out > d) throw DimMismatchError("d_out exceeds input dimension");
  PcaProjection out;
  out.d_out = d_out;
  const Eigen::MatrixXd x = rows.cast<double>();
  out.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / std::max(1, m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd evals = eig.eigenvalues();  // ascending
  const double lead = std::max(evals(d - 1), 0.0);
  out.basis = Eigen::MatrixXd::Zero(d_out, d);
  out.effective_rank = 0;
  for (int r = 0; r < d_out; ++r) {
    const int src = d - 1 - r;
    if (evals(src) <= std::max(1e-12 * lead, 1e-300)) break;
    Eigen::VectorXd dir = eig.eigenvectors().col(src);
    for (int j = 0; j < d; ++j) {
      if (std::abs(dir(j)) > 1e-12) {
        if (dir(j) < 0) dir = -dir;
        break;
      }
    }
    out.basis.row(r) = dir;
    ++out.effective_rank;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Concatenates the unit-normalized PCA projection of the visual descriptor
/// with the unit-normalized geometric descriptor. Output dimension is twice
/// the geometric dimension; each half carries norm 1.
inline Eigen::VectorXf fuse(const Eigen::VectorXf& f_vis,
                            const Eigen::VectorXf& f_geo,
                            const PcaProjection& pca) {
  if (pca.d_out != f_geo.size()) {
    throw DimMismatchError("projection output must match geometric dimension");
  }
  const Eigen::VectorXf vis = pca.project(f_vis);
  const double nv = vis.cast<double>().norm();
  const double ng = f_geo.cast<double>().norm();
  if (nv < 1e-12 || ng < 1e-12) {
    throw ZeroVectorError("descriptor half has near-zero norm");
  }
  Eigen::VectorXf out(2 * f_geo.size());
  out.head(f_geo.size()) = (vis.cast<double>() / nv).cast<float>();
  out.tail(f_geo.size()) = (f_geo.cast<double>() / ng).cast<float>();
  return out;
}

// ---------------------------------------------------------------------------
// Descriptor providers
// ---------------------------------------------------------------------------

/// Neighborhood scales for the geometric channel, as fractions of the object
/// diameter. Per-scale descriptors are concatenated before normalization.
struct GeoScaleConfig {
  std::vector<double> radii{0.30, 0.40};
  std::vector<int> dims{32, 32};

  int total_dim() const {
    int t = 0;
    for (int d : dims) t += d;
    return t;
  }
};

struct DescriptorProviderSpec {
  std::string kind;  // "file", "synthetic-geometric", or "oracle"
  std::map<std::string, std::string> params;
};

/// Points to describe, plus the context needed by the different provider
/// kinds: `indices` key rows for file-backed descriptors, `support` and its
/// tree give handcrafted descriptors a neighborhood to look at.
struct DescriptorRequest {
  const std::vector<Eigen::Vector3d>* points = nullptr;
  const std::vector<int>* indices = nullptr;  // identity of each point
  double scale_hint = 0;                      // object diameter, meters
  const std::vector<Eigen::Vector3d>* support = nullptr;
  const KdTree3* support_tree = nullptr;
  const Viewpoint* view = nullptr;  // set only for per-view visual batches
};

class DescriptorProvider {
 public:
  virtual ~DescriptorProvider() = default;

  virtual int visual_dim() const = 0;

  /// Whether visual descriptors change with the viewpoint. When false the
  /// query builder computes them once instead of once per view.
  virtual bool view_dependent() const { return false; }

  virtual DescriptorMatrix visual(const DescriptorRequest& req) = 0;

  virtual DescriptorMatrix geometric(const DescriptorRequest& req,
                                     double radius, int dim) = 0;

  /// Multi-scale geometric descriptor; the default concatenates one call per
  /// configured scale. File-backed providers override this to return stored
  /// rows directly.
  virtual DescriptorMatrix geometric_multi(const DescriptorRequest& req,
                                           const GeoScaleConfig& geo,
                                           double diameter) {
    if (geo.radii.size() != geo.dims.size() || geo.radii.empty()) {
      throw Error("geometric scale config is malformed");
    }
    const int n = static_cast<int>(req.points->size());
    DescriptorMatrix out(n, geo.total_dim());
    int col = 0;
    for (size_t s = 0; s < geo.radii.size(); ++s) {
      const DescriptorMatrix part =
          geometric(req, geo.radii[s] * diameter, geo.dims[s]);
      out.middleCols(col, geo.dims[s]) = part;
      col += geo.dims[s];
    }
    return out;
  }
};

namespace detail {

inline double param_double(const std::map<std::string, std::string>& params,
                           const std::string& key, double fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : std::stod(it->second);
}

inline std::uint64_t param_u64(const std::map<std::string, std::string>& params,
                               const std::string& key, std::uint64_t fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : std::stoull(it->second);
}

inline std::optional<Pose> param_pose(
    const std::map<std::string, std::string>& params, const std::string& key) {
  auto it = params.find(key);
  if (it == params.end()) return std::nullopt;
  std::vector<double> vals;
  std::string tok;
  for (char c : it->second + ",") {
    if (c == ',') {
      if (!tok.empty()) vals.push_back(std::stod(tok));
      tok.clear();
    } else {
      tok += c;
    }
  }
  if (vals.size() != 12) {
    throw Error(key + " needs 12 comma-separated values (R row-major, then t)");
  }
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = vals[size_t(3 * r + c)];
  }
  p.translation = Eigen::Vector3d(vals[9], vals[10], vals[11]);
  if (!is_valid_pose(p)) throw Error(key + " is not a rigid transform");
  return p;
}

}  // namespace detail

/// Test-only descriptors: a fixed random-Fourier encoding of model-frame
/// position. Nearby surface points get high cosine similarity, far points do
/// not, and the map is injective, which makes ground-truth correspondences
/// recoverable without any learned model. `model_from_input` lets scene-frame
/// points be encoded in the model frame so both sides of a match agree.
class OracleProvider : public DescriptorProvider {
 public:
  explicit OracleProvider(const DescriptorProviderSpec& spec)
      : dim_(static_cast<int>(detail::param_u64(spec.params, "dim", 96))),
        seed_(detail::param_u64(spec.params, "seed", 0)),
        model_from_input_(detail::param_pose(spec.params, "model_from_input")) {}

  int visual_dim() const override { return dim_; }

  void set_model_from_input(const Pose& p) { model_from_input_ = p; }

  DescriptorMatrix visual(const DescriptorRequest& req) override {
    return encode(req, 0x766973u, dim_, 0.2 * req.scale_hint);
  }

  DescriptorMatrix geometric(const DescriptorRequest& req, double radius,
                             int dim) override {
    const std::uint64_t channel =
        0x67656Fu ^ std::bit_cast<std::uint64_t>(radius);
    return encode(req, channel, dim, radius);
  }

 private:
  DescriptorMatrix encode(const DescriptorRequest& req, std::uint64_t channel,
                          int dim, double bandwidth) {
    if (!(bandwidth > 0)) throw Error("oracle provider needs a scale hint");
    RandomStream rng(seed_, channel);
    std::vector<Eigen::Vector3d> omega(static_cast<size_t>(dim));
    std::vector<double> phase(static_cast<size_t>(dim));
    for (int j = 0; j < dim; ++j) {
      omega[size_t(j)] = Eigen::Vector3d(rng.gaussian(), rng.gaussian(),
                                         rng.gaussian()) /
                         bandwidth;
      phase[size_t(j)] = rng.next_double() * 2.0 * M_PI;
    }
    const int n = static_cast<int>(req.points->size());
    DescriptorMatrix out(n, dim);
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d p = (*req.points)[size_t(i)];
      if (model_from_input_) p = model_from_input_->apply(p);
      for (int j = 0; j < dim; ++j) {
        out(i, j) = static_cast<float>(
            std::cos(omega[size_t(j)].dot(p) + phase[size_t(j)]));
      }
    }
    return out;
  }

  int dim_;
  std::uint64_t seed_;
  std::optional<Pose> model_from_input_;
};

/// Handcrafted local-shape descriptors: soft-binned histograms of neighbor
/// direction angle (against a locally fitted normal) by neighbor distance.
/// All quantities are defined relative to the neighborhood itself, so the
/// descriptor is invariant under rigid motion of the whole cloud. The visual
/// channel is the same construction at larger radii, concatenated, standing
/// in for an image-patch descriptor.
class SyntheticGeometricProvider : public DescriptorProvider {
 public:
  explicit SyntheticGeometricProvider(const DescriptorProviderSpec& spec)
      : visual_dim_(static_cast<int>(
            detail::param_u64(spec.params, "visual_dim", 96))) {
    if (visual_dim_ % kBins != 0) {
      throw Error("visual_dim must be a multiple of 32");
    }
  }

  int visual_dim() const override { return visual_dim_; }

  DescriptorMatrix visual(const DescriptorRequest& req) override {
    if (!req.support || !req.support_tree) {
      throw Error("synthetic visual descriptors need a support cloud");
    }
    const int scales = visual_dim_ / kBins;
    const int n = static_cast<int>(req.points->size());
    DescriptorMatrix out(n, visual_dim_);
    for (int s = 0; s < scales; ++s) {
      const double radius = (0.45 + 0.15 * s) * req.scale_hint;
      out.middleCols(s * kBins, kBins) = histograms(req, radius, kBins);
    }
    return out;
  }

  DescriptorMatrix geometric(const DescriptorRequest& req, double radius,
                             int dim) override {
    if (!req.support || !req.support_tree) {
      throw Error("synthetic geometric descriptors need a support cloud");
    }
    return histograms(req, radius, dim);
  }

 private:
  static constexpr int kBins = 32;        // 8 angle bins x 4 distance bins
  static constexpr int kAngleBins = 8;
  static constexpr int kDistBins = 4;

  DescriptorMatrix histograms(const DescriptorRequest& req, double radius,
                              int dim) {
    if (dim != kBins) {
      throw DimMismatchError("synthetic descriptors are 32-dimensional");
    }
    const int n = static_cast<int>(req.points->size());
    DescriptorMatrix out(n, dim);
    for (int i = 0; i < n; ++i) {
      out.row(i) = one_histogram((*req.points)[size_t(i)], *req.support,
                                 *req.support_tree, radius);
    }
    return out;
  }

  static Eigen::RowVectorXf one_histogram(
      const Eigen::Vector3d& p, const std::vector<Eigen::Vector3d>& support,
      const KdTree3& tree, double radius) {
    const auto idx = tree.radius_indices(p.cast<float>(), float(radius));
    std::vector<Eigen::Vector3d> nbrs;
    nbrs.reserve(idx.size());
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (int j : idx) {
      const Eigen::Vector3d& q = support[size_t(j)];
      if ((q - p).norm() < 1e-9) continue;  // skip the point itself
      nbrs.push_back(q);
      centroid += q;
    }
    Eigen::RowVectorXf hist = Eigen::RowVectorXf::Zero(kBins);
    if (nbrs.size() < 3) {
      // Too little context for a frame; emit a flat unit vector so fusion
      // still works and such points simply carry no discriminative signal.
      hist.setConstant(1.f / std::sqrt(float(kBins)));
      return hist;
    }
    centroid /= double(nbrs.size());
    Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
    for (const auto& q : nbrs) {
      const Eigen::Vector3d d = q - centroid;
      scatter += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
    Eigen::Vector3d normal = eig.eigenvectors().col(0);
    // Orient away from the local centroid; outward for convex neighborhoods.
    if (normal.dot(p - centroid) < 0) normal = -normal;
    for (const auto& q : nbrs) {
      const Eigen::Vector3d d = q - p;
      const double dist = d.norm();
      const double c = std::min(1.0, std::max(-1.0, normal.dot(d) / dist));
      // Fractional bin coordinates; triangular soft assignment to the two
      // nearest bins along each axis keeps the histogram smooth under noise.
      const double ab = std::acos(c) / M_PI * kAngleBins - 0.5;
      const double db = dist / radius * kDistBins - 0.5;
      const int a0 = static_cast<int>(std::floor(ab));
      const int d0 = static_cast<int>(std::floor(db));
      const double aw = ab - a0, dw = db - d0;
      const double w = 1.0 - dist / radius;
      for (int da = 0; da <= 1; ++da) {
        const int a = std::min(kAngleBins - 1, std::max(0, a0 + da));
        const double wa = da == 0 ? 1.0 - aw : aw;
        for (int dd = 0; dd <= 1; ++dd) {
          const int dbin = std::min(kDistBins - 1, std::max(0, d0 + dd));
          const double wd = dd == 0 ? 1.0 - dw : dw;
          hist(a * kDistBins + dbin) += static_cast<float>(w * wa * wd);
        }
      }
    }
    const float norm = hist.norm();
    if (norm > 1e-12f) {
      hist /= norm;
    } else {
      hist.setConstant(1.f / std::sqrt(float(kBins)));
    }
    return hist;
  }

  int visual_dim_;
};

// Forward declarations; definitions follow the file format section.
class FileProvider;
inline std::unique_ptr<DescriptorProvider> make_provider(
    const DescriptorProviderSpec& spec);

// ---------------------------------------------------------------------------
// Feature-cloud file format
// ---------------------------------------------------------------------------

namespace detail {

inline void write_exact(std::ofstream& f, const void* data, size_t bytes) {
  f.write(static_cast<const char*>(data), std::streamsize(bytes));
}

inline void read_exact(std::ifstream& f, void* data, size_t bytes,
                       const char* what) {
  f.read(static_cast<char*>(data), std::streamsize(bytes));
  if (static_cast<size_t>(f.gcount()) != bytes) {
    throw TruncatedFileError(std::string("unexpected end of file reading ") +
                             what);
  }
}

}  // namespace detail

/// Binary layout: magic "FCL1", u32 count, u32 dim, count x 3 f32 positions,
/// count x dim f32 descriptors. Little-endian, no padding.
inline void save_feature_cloud(const FeatureCloud& fc, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const std::uint32_t n = static_cast<std::uint32_t>(fc.size());
  const std::uint32_t d = static_cast<std::uint32_t>(fc.dim());
  detail::write_exact(f, "FCL1", 4);
  detail::write_exact(f, &n, 4);
  detail::write_exact(f, &d, 4);
  detail::write_exact(f, fc.points.data(), size_t(n) * 3 * sizeof(float));
  detail::write_exact(f, fc.descriptors.data(), size_t(n) * d * sizeof(float));
  if (!f) throw IoError("write failed for " + path);
}

inline FeatureCloud load_feature_cloud(const std::string& path,
                                       int expected_dim = -1) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FileMissingError("cannot open " + path);
  const auto file_size = static_cast<std::uint64_t>(f.tellg());
  f.seekg(0);
  char magic[4];
  detail::read_exact(f, magic, 4, "magic");
  if (std::memcmp(magic, "FCL1", 4) != 0) {
    throw BadMagicError(path + " is not a feature-cloud file");
  }
  std::uint32_t n = 0, d = 0;
  detail::read_exact(f, &n, 4, "count");
  detail::read_exact(f, &d, 4, "dim");
  if (n < 1 || d < 1) throw TruncatedFileError(path + " has an empty payload");
  if (expected_dim >= 0 && int(d) != expected_dim) {
    throw DimMismatchError(path + " has dim " + std::to_string(d) +
                           ", expected " + std::to_string(expected_dim));
  }
  const std::uint64_t expect = 12ull + std::uint64_t(n) * (12ull + 4ull * d);
  if (file_size < expect) {
    throw TruncatedFileError(path + " is shorter than its header promises");
  }
  if (file_size > expect) {
    throw IoError(path + " has trailing bytes past the payload");
  }
  FeatureCloud fc;
  fc.points.resize(int(n), 3);
  fc.descriptors.resize(int(n), int(d));
  detail::read_exact(f, fc.points.data(), size_t(n) * 12, "positions");
  detail::read_exact(f, fc.descriptors.data(), size_t(n) * d * 4,
                     "descriptors");
  return fc;
}

/// Sidecar for the query-fitted projection: magic "PCA1", u32 d_out, u32
/// d_vis, u32 effective_rank, f64 mean, f64 basis row-major.
inline void save_pca_projection(const PcaProjection& pca,
                                const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const std::uint32_t d_out = static_cast<std::uint32_t>(pca.d_out);
  const std::uint32_t d_vis = static_cast<std::uint32_t>(pca.mean.size());
  const std::uint32_t rank = static_cast<std::uint32_t>(pca.effective_rank);
  detail::write_exact(f, "PCA1", 4);
  detail::write_exact(f, &d_out, 4);
  detail::write_exact(f, &d_vis, 4);
  detail::write_exact(f, &rank, 4);
  detail::write_exact(f, pca.mean.data(), size_t(d_vis) * 8);
  // Row-major on disk; the in-memory basis is Eigen column-major.
  for (int r = 0; r < pca.d_out; ++r) {
    const Eigen::VectorXd row = pca.basis.row(r);
    detail::write_exact(f, row.data(), size_t(d_vis) * 8);
  }
  if (!f) throw IoError("write failed for " + path);
}

inline PcaProjection load_pca_projection(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open " + path);
  char magic[4];
  detail::read_exact(f, magic, 4, "magic");
  if (std::memcmp(magic, "PCA1", 4) != 0) {
    throw BadMagicError(path + " is not a projection file");
  }
  std::uint32_t d_out = 0, d_vis = 0, rank = 0;
  detail::read_exact(f, &d_out, 4, "d_out");
  detail::read_exact(f, &d_vis, 4, "d_vis");
  detail::read_exact(f, &rank, 4, "rank");
  if (d_out < 1 || d_vis < d_out || rank > d_out) {
    throw TruncatedFileError(path + " has an inconsistent header");
  }
  PcaProjection pca;
  pca.d_out = int(d_out);
  pca.effective_rank = int(rank);
  pca.mean.resize(int(d_vis));
  detail::read_exact(f, pca.mean.data(), size_t(d_vis) * 8, "mean");
  pca.basis.resize(int(d_out), int(d_vis));
  std::vector<double> row(static_cast<size_t>(d_vis));
  for (std::uint32_t r = 0; r < d_out; ++r) {
    detail::read_exact(f, row.data(), size_t(d_vis) * 8, "basis");
    for (std::uint32_t c = 0; c < d_vis; ++c) {
      pca.basis(int(r), int(c)) = row[size_t(c)];
    }
  }
  return pca;
}

// ---------------------------------------------------------------------------
// File-backed provider
// ---------------------------------------------------------------------------

/// Reads precomputed descriptors from feature-cloud files, keyed by point
/// index. This is the seam where external neural encoders plug in: their
/// output is dumped once, then consumed here.
class FileProvider : public DescriptorProvider {
 public:
  explicit FileProvider(const DescriptorProviderSpec& spec) {
    auto it = spec.params.find("visual");
    if (it != spec.params.end()) visual_path_ = it->second;
    it = spec.params.find("geometric");
    if (it != spec.params.end()) geometric_path_ = it->second;
  }

  int visual_dim() const override {
    FileProvider* self = const_cast<FileProvider*>(this);
    self->ensure(self->visual_, self->visual_path_, "visual");
    return self->visual_->dim();
  }

  DescriptorMatrix visual(const DescriptorRequest& req) override {
    ensure(visual_, visual_path_, "visual");
    return rows(*visual_, req);
  }

  DescriptorMatrix geometric(const DescriptorRequest&, double, int) override {
    throw Error("file-backed descriptors are stored at fused scale; "
                "single-scale queries are not available");
  }

  DescriptorMatrix geometric_multi(const DescriptorRequest& req,
                                   const GeoScaleConfig& geo,
                                   double) override {
    ensure(geometric_, geometric_path_, "geometric");
    if (geometric_->dim() != geo.total_dim()) {
      throw DimMismatchError("stored geometric descriptors have dim " +
                             std::to_string(geometric_->dim()) + ", expected " +
                             std::to_string(geo.total_dim()));
    }
    return rows(*geometric_, req);
  }

 private:
  void ensure(std::optional<FeatureCloud>& slot, const std::string& path,
              const char* channel) {
    // Batch calls may come from several workers; the first one loads.
    std::lock_guard<std::mutex> lock(load_mutex_);
    if (slot) return;
    if (path.empty()) {
      throw FileMissingError(std::string("file provider has no ") + channel +
                             " path parameter");
    }
    slot = load_feature_cloud(path);
  }

  static DescriptorMatrix rows(const FeatureCloud& fc,
                               const DescriptorRequest& req) {
    if (!req.indices) throw Error("file provider needs point indices");
    const int n = static_cast<int>(req.indices->size());
    DescriptorMatrix out(n, fc.dim());
    for (int i = 0; i < n; ++i) {
      const int idx = (*req.indices)[size_t(i)];
      if (idx < 0 || idx >= fc.size()) {
        throw IndexMismatchError(
            "descriptor file has " + std::to_string(fc.size()) +
            " rows but row " + std::to_string(idx) + " was requested");
      }
      out.row(i) = fc.descriptors.row(idx);
    }
    return out;
  }

  std::string visual_path_, geometric_path_;
  std::optional<FeatureCloud> visual_, geometric_;
  std::mutex load_mutex_;
};

inline std::unique_ptr<DescriptorProvider> make_provider(
    const DescriptorProviderSpec& spec) {
  if (spec.kind == "oracle") return std::make_unique<OracleProvider>(spec);
  if (spec.kind == "synthetic-geometric") {
    return std::make_unique<SyntheticGeometricProvider>(spec);
  }
  if (spec.kind == "file") return std::make_unique<FileProvider>(spec);
  throw Error("unknown descriptor provider kind: " + spec.kind);
}

// ---------------------------------------------------------------------------
// Query-side feature building
// ---------------------------------------------------------------------------

struct QueryFeatures {
  FeatureCloud cloud;  // model-frame points with fused descriptors
  PcaProjection pca;   // fitted on this query's visual descriptors
};

/// Offline query path: blue-noise surface samples, visibility filtering over
/// the template views, per-view visual aggregation, multi-scale geometric
/// descriptors over the dense presample pool, PCA fit, fusion.
inline QueryFeatures build_query_features(const ObjectModel& model,
                                          DescriptorProvider& provider,
                                          const GeoScaleConfig& geo,
                                          const std::vector<Viewpoint>& views,
                                          int min_views, int n_points,
                                          std::uint64_t seed,
                                          int splat_px = 3) {
  const PoissonResult sampled =
      poisson_disk_sample_detailed(model, n_points, seed);
  const auto& pts = sampled.samples.points;
  const size_t nv = views.size();
  const auto flags =
      visibility_flags(pts, views, 0.01 * model.diameter, splat_px);

  std::vector<int> kept;
  for (size_t i = 0; i < pts.size(); ++i) {
    int count = 0;
    for (size_t vi = 0; vi < nv; ++vi) count += flags[i * nv + vi];
    if (count >= min_views) kept.push_back(static_cast<int>(i));
  }
  if (kept.empty()) {
    throw EmptyResultError("no sampled point visible in enough views");
  }

  std::vector<Eigen::Vector3d> kept_pts, kept_normals;
  kept_pts.reserve(kept.size());
  kept_normals.reserve(kept.size());
  for (int i : kept) {
    kept_pts.push_back(pts[size_t(i)]);
    kept_normals.push_back(sampled.samples.normals[size_t(i)]);
  }

  const KdTree3 support_tree(to_point_matrix(sampled.presample.points));

  DescriptorRequest req;
  req.points = &kept_pts;
  req.indices = &kept;
  req.scale_hint = model.diameter;
  req.support = &sampled.presample.points;
  req.support_tree = &support_tree;

  DescriptorMatrix vis;
  if (!provider.view_dependent()) {
    vis = provider.visual(req);
  } else {
    // Per-view descriptors blended by how frontally each view sees the
    // point; views the point is invisible in contribute nothing.
    const int n = static_cast<int>(kept_pts.size());
    vis = DescriptorMatrix::Zero(n, provider.visual_dim());
    Eigen::VectorXd wsum = Eigen::VectorXd::Zero(n);
    DescriptorMatrix unweighted = DescriptorMatrix::Zero(n, provider.visual_dim());
    Eigen::VectorXd viscount = Eigen::VectorXd::Zero(n);
    for (size_t vi = 0; vi < nv; ++vi) {
      DescriptorRequest view_req = req;
      view_req.view = &views[vi];
      const DescriptorMatrix per_view = provider.visual(view_req);
      const Eigen::Vector3d cam_center =
          views[vi].pose.inverse().translation;
      for (int i = 0; i < n; ++i) {
        if (!flags[size_t(kept[size_t(i)]) * nv + vi]) continue;
        const Eigen::Vector3d to_cam =
            (cam_center - kept_pts[size_t(i)]).normalized();
        const double w =
            std::max(0.0, kept_normals[size_t(i)].dot(to_cam));
        vis.row(i) += (w * per_view.row(i).cast<double>()).cast<float>();
        wsum(i) += w;
        unweighted.row(i) += per_view.row(i);
        viscount(i) += 1;
      }
    }
    for (int i = 0; i < n; ++i) {
      if (wsum(i) > 1e-12) {
        vis.row(i) /= static_cast<float>(wsum(i));
      } else if (viscount(i) > 0) {
        vis.row(i) = unweighted.row(i) / static_cast<float>(viscount(i));
      }
    }
  }

  const DescriptorMatrix geom =
      provider.geometric_multi(req, geo, model.diameter);

  QueryFeatures out;
  out.pca = fit_pca(vis, geo.total_dim());
  out.cloud.points = to_point_matrix(kept_pts);
  out.cloud.descriptors.resize(static_cast<int>(kept_pts.size()),
                               2 * geo.total_dim());
  for (int i = 0; i < static_cast<int>(kept_pts.size()); ++i) {
    out.cloud.descriptors.row(i) =
        fuse(vis.row(i), geom.row(i), out.pca).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Target-side feature building
// ---------------------------------------------------------------------------

struct TargetFeatures {
  FeatureCloud sparse;  // camera-frame patch points with fused descriptors
  PointMatrix dense;    // camera-frame cloud for refinement
  std::vector<int> center_indices;  // surviving patch-center rows
};

namespace detail {

/// Backprojected cloud of all valid masked pixels, uniformly subsampled to
/// dense_count when larger. The subsample seed is fixed: the dense cloud is
/// part of the deterministic pipeline state, not a tunable source of
/// randomness.
inline std::vector<Eigen::Vector3d> dense_masked_points(
    const DepthImage& depth, const CameraIntrinsics& K,
    const CandidateMask& mask, int dense_count) {
  std::vector<Eigen::Vector2d> dense_pixels;
  for (int y = 0; y < depth.height; ++y) {
    for (int x = 0; x < depth.width; ++x) {
      if (mask.at(x, y) && depth.at(x, y) > 0) {
        dense_pixels.emplace_back(x + 0.5, y + 0.5);
      }
    }
  }
  if (dense_pixels.empty()) {
    throw NoValidDepthError("mask covers no valid depth");
  }
  if (static_cast<int>(dense_pixels.size()) > dense_count) {
    RandomStream rng(0xD15E5EEDull, 0);
    std::vector<int> pick(dense_pixels.size());
    for (size_t i = 0; i < pick.size(); ++i) pick[i] = static_cast<int>(i);
    for (int i = 0; i < dense_count; ++i) {
      const int j = i + static_cast<int>(rng.uniform_below(pick.size() - size_t(i)));
      std::swap(pick[size_t(i)], pick[size_t(j)]);
    }
    pick.resize(size_t(dense_count));
    std::sort(pick.begin(), pick.end());
    std::vector<Eigen::Vector2d> chosen;
    chosen.reserve(pick.size());
    for (int i : pick) chosen.push_back(dense_pixels[size_t(i)]);
    dense_pixels = std::move(chosen);
  }
  return backproject(depth, K, dense_pixels).points;
}

}  // namespace detail

/// Online target path for one candidate mask: patch-grid centers, depth
/// backprojection, dense masked cloud (subsampled to dense_count), geometric
/// descriptors against the dense cloud, fusion with the query-fitted PCA.
inline TargetFeatures build_target_features(
    const DepthImage& depth, const CameraIntrinsics& K,
    const CandidateMask& mask, double model_diameter,
    DescriptorProvider& provider, const GeoScaleConfig& geo,
    const PcaProjection& pca, int dense_count, int grid = 16) {
  if (mask.width != depth.width || mask.height != depth.height) {
    throw DimMismatchError("mask and depth dimensions differ");
  }
  const auto centers = grid_patch_centers(mask, grid);
  const auto sparse_bp = backproject(depth, K, centers);
  if (sparse_bp.points.empty()) {
    throw NoValidDepthError("no patch center has valid depth");
  }

  const std::vector<Eigen::Vector3d> dense_points =
      detail::dense_masked_points(depth, K, mask, dense_count);

  TargetFeatures out;
  out.center_indices = sparse_bp.kept;
  out.dense = to_point_matrix(dense_points);
  const KdTree3 dense_tree(out.dense);

  DescriptorRequest req;
  req.points = &sparse_bp.points;
  req.indices = &out.center_indices;
  req.scale_hint = model_diameter;
  req.support = &dense_points;
  req.support_tree = &dense_tree;

  const DescriptorMatrix vis = provider.visual(req);
  const DescriptorMatrix geom =
      provider.geometric_multi(req, geo, model_diameter);

  out.sparse.points = to_point_matrix(sparse_bp.points);
  out.sparse.descriptors.resize(static_cast<int>(sparse_bp.points.size()),
                                2 * geo.total_dim());
  for (int i = 0; i < static_cast<int>(sparse_bp.points.size()); ++i) {
    out.sparse.descriptors.row(i) =
        fuse(vis.row(i), geom.row(i), pca).transpose();
  }
  return out;
}

}  // namespace poseforge
