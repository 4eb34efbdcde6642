#pragma once

#include "poseforge/core.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace poseforge {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Scene container
// ---------------------------------------------------------------------------

/// Everything loaded for one test image: depth, intrinsics, and the candidate
/// masks from all segmentation sources in directory order. When target
/// descriptors were precomputed, target_feature_files[i] names the file for
/// masks[i] (empty string otherwise).
struct SceneBundle {
  std::string scene_id;
  DepthImage depth;
  CameraIntrinsics intrinsics;
  double depth_scale = 1e-3;  // stored integer -> meters
  std::vector<CandidateMask> masks;
  std::vector<std::string> target_feature_files;
};

struct GroundTruthEntry {
  std::string object_id;
  Pose pose;
};

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

namespace detail {

inline int pgm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (c == EOF) return 0;
  do {
    tok += static_cast<char>(c);
  } while ((c = in.get()) != EOF && !std::isspace(c));
  return 1;
}

}  // namespace detail

struct GrayImage {
  int width = 0, height = 0, maxval = 0;
  std::vector<std::uint16_t> values;  // row-major
};

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open " + path);
  std::string tok;
  if (!detail::pgm_next_token(f, tok) || (tok != "P5" && tok != "P2")) {
    throw BadMagicError(path + " is not a PGM file");
  }
  const bool binary = tok == "P5";
  GrayImage img;
  std::string w, h, mv;
  if (!detail::pgm_next_token(f, w) || !detail::pgm_next_token(f, h) ||
      !detail::pgm_next_token(f, mv)) {
    throw TruncatedFileError(path + " has an incomplete header");
  }
  img.width = std::stoi(w);
  img.height = std::stoi(h);
  img.maxval = std::stoi(mv);
  if (img.width < 1 || img.height < 1 || img.maxval < 1 || img.maxval > 65535) {
    throw IoError(path + " has an invalid PGM header");
  }
  const size_t n = size_t(img.width) * size_t(img.height);
  img.values.resize(n);
  if (binary) {
    // Header ends with exactly one whitespace byte before the raster.
    const int bytes = img.maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * size_t(bytes));
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (static_cast<size_t>(f.gcount()) != raw.size()) {
      throw TruncatedFileError(path + " raster is short");
    }
    for (size_t i = 0; i < n; ++i) {
      img.values[i] = bytes == 2
                          ? std::uint16_t((raw[2 * i] << 8) | raw[2 * i + 1])
                          : raw[i];
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      if (!detail::pgm_next_token(f, tok)) {
        throw TruncatedFileError(path + " raster is short");
      }
      img.values[i] = static_cast<std::uint16_t>(std::stoi(tok));
    }
  }
  return img;
}

inline void write_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "P5\n" << img.width << " " << img.height << "\n" << img.maxval << "\n";
  const size_t n = size_t(img.width) * size_t(img.height);
  if (img.maxval > 255) {
    std::vector<unsigned char> raw(2 * n);
    for (size_t i = 0; i < n; ++i) {
      raw[2 * i] = static_cast<unsigned char>(img.values[i] >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(img.values[i] & 0xFF);
    }
    f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  } else {
    std::vector<unsigned char> raw(n);
    for (size_t i = 0; i < n; ++i) raw[i] = static_cast<unsigned char>(img.values[i]);
    f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  }
  if (!f) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// PNG, 16-bit grayscale only
// ---------------------------------------------------------------------------

namespace detail {

inline void png_put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
  png_put_u32(out, static_cast<std::uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc =
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  png_put_u32(out, static_cast<std::uint32_t>(crc));
}

inline std::uint32_t png_get_u32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

}  // namespace detail

inline void write_png16(const GrayImage& img, const std::string& path) {
  const size_t row_bytes = size_t(img.width) * 2;
  std::vector<unsigned char> raw((row_bytes + 1) * size_t(img.height));
  size_t at = 0;
  for (int y = 0; y < img.height; ++y) {
    raw[at++] = 0;  // filter: none
    for (int x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.values[size_t(y) * img.width + x];
      raw[at++] = static_cast<unsigned char>(v >> 8);
      raw[at++] = static_cast<unsigned char>(v & 0xFF);
    }
  }
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw IoError("deflate failed for " + path);
  }
  comp.resize(comp_size);

  std::vector<unsigned char> out = {137, 'P', 'N', 'G', 13, 10, 26, 10};
  std::vector<unsigned char> ihdr;
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(16);  // bit depth
  ihdr.push_back(0);   // grayscale
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", comp);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw IoError("write failed for " + path);
}

inline GrayImage read_png16(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  static const unsigned char sig[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
  if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0) {
    throw BadMagicError(path + " is not a PNG file");
  }
  GrayImage img;
  std::vector<unsigned char> idat;
  size_t at = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (at + 8 <= buf.size() && !saw_iend) {
    const std::uint32_t len = detail::png_get_u32(&buf[at]);
    if (at + 12 + len > buf.size()) {
      throw TruncatedFileError(path + " ends inside a chunk");
    }
    const char* type = reinterpret_cast<const char*>(&buf[at + 4]);
    const unsigned char* data = &buf[at + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError(path + " has a malformed IHDR");
      img.width = static_cast<int>(detail::png_get_u32(data));
      img.height = static_cast<int>(detail::png_get_u32(data + 4));
      if (data[8] != 16 || data[9] != 0 || data[12] != 0) {
        throw IoError(path + ": only non-interlaced 16-bit grayscale is supported");
      }
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    at += 12 + len;
  }
  if (!saw_ihdr || idat.empty()) {
    throw TruncatedFileError(path + " is missing image chunks");
  }
  const size_t row_bytes = size_t(img.width) * 2;
  std::vector<unsigned char> raw((row_bytes + 1) * size_t(img.height));
  uLongf raw_size = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_size, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_size != raw.size()) {
    throw IoError(path + " has a corrupt image stream");
  }
  img.maxval = 65535;
  img.values.resize(size_t(img.width) * size_t(img.height));
  // Undo per-row filtering; two bytes per pixel.
  std::vector<unsigned char> prev(row_bytes, 0);
  std::vector<unsigned char> cur(row_bytes);
  for (int y = 0; y < img.height; ++y) {
    const unsigned char* src = &raw[size_t(y) * (row_bytes + 1)];
    const int filter = src[0];
    ++src;
    for (size_t x = 0; x < row_bytes; ++x) {
      const int a = x >= 2 ? cur[x - 2] : 0;
      const int b = prev[x];
      const int c = x >= 2 ? prev[x - 2] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw IoError(path + " uses an unknown PNG filter");
      }
      cur[x] = static_cast<unsigned char>(v & 0xFF);
    }
    for (int x = 0; x < img.width; ++x) {
      img.values[size_t(y) * img.width + x] =
          std::uint16_t((cur[size_t(2 * x)] << 8) | cur[size_t(2 * x) + 1]);
    }
    std::swap(prev, cur);
  }
  return img;
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

namespace detail {

struct PlyProperty {
  std::string name;
  std::string type;        // scalar type, or the index type for lists
  std::string count_type;  // nonempty marks a list property
};

inline size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" ||
      t == "float" || t == "float32") {
    return 4;
  }
  if (t == "double" || t == "float64") return 8;
  throw IoError("unknown PLY type: " + t);
}

inline double ply_read_scalar(std::ifstream& f, const std::string& t) {
  unsigned char raw[8];
  const size_t n = ply_type_size(t);
  f.read(reinterpret_cast<char*>(raw), std::streamsize(n));
  if (static_cast<size_t>(f.gcount()) != n) {
    throw TruncatedFileError("PLY payload is short");
  }
  if (t == "float" || t == "float32") {
    float v;
    std::memcpy(&v, raw, 4);
    return v;
  }
  if (t == "double" || t == "float64") {
    double v;
    std::memcpy(&v, raw, 8);
    return v;
  }
  std::int64_t v = 0;
  const bool is_signed = t[0] == 'c' || t[0] == 's' || t[0] == 'i';
  std::memcpy(&v, raw, n);
  if (is_signed && n < 8 && (v & (std::int64_t(1) << (8 * n - 1)))) {
    v -= std::int64_t(1) << (8 * n);
  }
  return static_cast<double>(v);
}

}  // namespace detail

struct Mesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
};

/// ASCII or binary_little_endian PLY. Only vertex positions and face index
/// lists are used; everything else is skipped. Faces with more than three
/// vertices are split into a fan.
inline Mesh read_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileMissingError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.substr(0, 3) != "ply") {
    throw BadMagicError(path + " is not a PLY file");
  }
  bool binary = false;
  struct Element {
    std::string name;
    size_t count = 0;
    std::vector<detail::PlyProperty> props;
  };
  std::vector<Element> elements;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string kind;
      ss >> kind;
      if (kind == "binary_little_endian") {
        binary = true;
      } else if (kind != "ascii") {
        throw IoError(path + ": unsupported PLY format " + kind);
      }
    } else if (word == "element") {
      Element e;
      ss >> e.name >> e.count;
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw IoError(path + ": property before element");
      detail::PlyProperty p;
      std::string t;
      ss >> t;
      if (t == "list") {
        ss >> p.count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ss >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (word == "end_header") {
      break;
    } else {
      throw IoError(path + ": unexpected header line: " + line);
    }
  }

  Mesh mesh;
  auto add_face = [&](const std::vector<std::uint32_t>& poly) {
    for (size_t i = 2; i < poly.size(); ++i) {
      mesh.triangles.push_back({poly[0], poly[i - 1], poly[i]});
    }
  };
  for (const auto& elem : elements) {
    const bool is_vertex = elem.name == "vertex";
    const bool is_face = elem.name == "face";
    for (size_t i = 0; i < elem.count; ++i) {
      double x = 0, y = 0, z = 0;
      std::vector<std::uint32_t> poly;
      for (const auto& p : elem.props) {
        if (!p.count_type.empty()) {
          double count;
          if (binary) {
            count = detail::ply_read_scalar(f, p.count_type);
          } else {
            f >> count;
          }
          poly.clear();
          for (int j = 0; j < static_cast<int>(count); ++j) {
            double v;
            if (binary) {
              v = detail::ply_read_scalar(f, p.type);
            } else {
              f >> v;
            }
            if (is_face &&
                (p.name == "vertex_indices" || p.name == "vertex_index")) {
              poly.push_back(static_cast<std::uint32_t>(v));
            }
          }
        } else {
          double v;
          if (binary) {
            v = detail::ply_read_scalar(f, p.type);
          } else {
            f >> v;
          }
          if (is_vertex) {
            if (p.name == "x") x = v;
            if (p.name == "y") y = v;
            if (p.name == "z") z = v;
          }
        }
      }
      if (!binary && !f) throw TruncatedFileError(path + " payload is short");
      if (is_vertex) mesh.vertices.emplace_back(x, y, z);
      if (is_face && poly.size() >= 3) add_face(poly);
    }
  }
  return mesh;
}

inline void write_ply_ascii(const Mesh& mesh, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "ply\nformat ascii 1.0\n";
  f << "element vertex " << mesh.vertices.size() << "\n";
  f << "property double x\nproperty double y\nproperty double z\n";
  f << "element face " << mesh.triangles.size() << "\n";
  f << "property list uchar uint vertex_indices\n";
  f << "end_header\n";
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    f << buf;
  }
  for (const auto& t : mesh.triangles) {
    f << "3 " << t[0] << " " << t[1] << " " << t[2] << "\n";
  }
  if (!f) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Object model loading
// ---------------------------------------------------------------------------

namespace detail {

inline Pose pose_from_json(const json& j) {
  Pose p;
  const auto& r = j.at("R");
  const auto& t = j.at("t");
  if (r.size() != 9 || t.size() != 3) {
    throw IoError("pose record needs 9 rotation and 3 translation values");
  }
  for (int i = 0; i < 9; ++i) p.rotation(i / 3, i % 3) = r[size_t(i)].get<double>();
  for (int i = 0; i < 3; ++i) p.translation(i) = t[size_t(i)].get<double>();
  return p;
}

inline json pose_to_json(const Pose& p) {
  json j;
  for (int i = 0; i < 9; ++i) j["R"].push_back(p.rotation(i / 3, i % 3));
  for (int i = 0; i < 3; ++i) j["t"].push_back(p.translation(i));
  return j;
}

}  // namespace detail

/// Loads a model mesh with its metadata sidecar. The stored diameter in the
/// sidecar is a sanity check against the recomputed one; a ratio near 1000
/// marks a millimeter-unit mesh, which is converted to meters. Symmetry
/// transforms gain an identity entry when the file lists none.
inline ObjectModel load_object_model(const std::string& ply_path,
                                     const std::string& json_path = "") {
  const Mesh mesh = read_ply(ply_path);
  ObjectModel model;
  model.vertices = mesh.vertices;
  model.triangles = mesh.triangles;
  if (model.vertices.empty()) throw IoError(ply_path + " has no vertices");
  model.diameter = compute_diameter(model.vertices);
  if (!(model.diameter > 0)) {
    throw DegenerateMeshError(ply_path + " has zero extent");
  }
  model.symmetries = {Pose::identity()};
  if (json_path.empty()) return model;

  std::ifstream jf(json_path);
  if (!jf) throw FileMissingError("cannot open " + json_path);
  const json meta = json::parse(jf);
  if (meta.contains("diameter_m")) {
    const double stated = meta["diameter_m"].get<double>();
    if (!(stated > 0)) throw IoError(json_path + " has a non-positive diameter");
    const double ratio = model.diameter / stated;
    if (ratio > 900 && ratio < 1100) {
      for (auto& v : model.vertices) v *= 1e-3;
      model.diameter = compute_diameter(model.vertices);
    }
    if (std::abs(model.diameter - stated) > 0.01 * stated) {
      throw IoError(json_path + " diameter disagrees with the mesh by over 1%");
    }
  }
  if (meta.contains("symmetries")) {
    for (const auto& s : meta["symmetries"]) {
      const Pose p = detail::pose_from_json(s);
      if (!is_valid_pose(p)) {
        throw IoError(json_path + " lists a non-rigid symmetry");
      }
      const bool is_identity =
          (p.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <
              1e-9 &&
          p.translation.cwiseAbs().maxCoeff() < 1e-9;
      if (!is_identity) model.symmetries.push_back(p);
    }
  }
  return model;
}

inline void save_object_meta(const ObjectModel& model,
                             const std::string& json_path) {
  json meta;
  meta["diameter_m"] = model.diameter;
  meta["symmetries"] = json::array();
  for (const auto& s : model.symmetries) {
    meta["symmetries"].push_back(detail::pose_to_json(s));
  }
  std::ofstream f(json_path);
  if (!f) throw IoError("cannot open " + json_path + " for writing");
  f << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Scene directory
// ---------------------------------------------------------------------------

inline DepthImage depth_from_gray(const GrayImage& img, double depth_scale) {
  DepthImage d(img.width, img.height);
  for (size_t i = 0; i < img.values.size(); ++i) {
    d.values[i] = static_cast<float>(img.values[i] * depth_scale);
  }
  return d;
}

inline GrayImage depth_to_gray(const DepthImage& d, double depth_scale) {
  GrayImage img;
  img.width = d.width;
  img.height = d.height;
  img.maxval = 65535;
  img.values.resize(d.values.size());
  for (size_t i = 0; i < d.values.size(); ++i) {
    const double q = std::round(d.values[i] / depth_scale);
    img.values[i] =
        static_cast<std::uint16_t>(std::min(65535.0, std::max(0.0, q)));
  }
  return img;
}

/// Reads camera.json, the depth image, and every masks/<source>/ group in
/// sorted source order (mask order inside a group follows its meta.json).
inline SceneBundle load_scene_dir(const std::string& dir) {
  SceneBundle scene;
  scene.scene_id = fs::path(dir).filename().string();
  if (scene.scene_id.empty()) {
    scene.scene_id = fs::path(dir).parent_path().filename().string();
  }

  std::ifstream cf(dir + "/camera.json");
  if (!cf) throw FileMissingError(dir + "/camera.json is missing");
  const json cam = json::parse(cf);
  scene.intrinsics.fx = cam.at("fx").get<double>();
  scene.intrinsics.fy = cam.at("fy").get<double>();
  scene.intrinsics.cx = cam.at("cx").get<double>();
  scene.intrinsics.cy = cam.at("cy").get<double>();
  scene.intrinsics.width = cam.at("width").get<int>();
  scene.intrinsics.height = cam.at("height").get<int>();
  scene.depth_scale = cam.value("depth_scale", 1e-3);
  if (!scene.intrinsics.valid()) {
    throw IoError(dir + "/camera.json has invalid intrinsics");
  }

  GrayImage depth_img;
  if (fs::exists(dir + "/depth.png")) {
    depth_img = read_png16(dir + "/depth.png");
  } else if (fs::exists(dir + "/depth.pgm")) {
    depth_img = read_pgm(dir + "/depth.pgm");
  } else {
    throw FileMissingError(dir + " has neither depth.png nor depth.pgm");
  }
  if (depth_img.width != scene.intrinsics.width ||
      depth_img.height != scene.intrinsics.height) {
    throw DimMismatchError(dir + ": depth size disagrees with camera.json");
  }
  scene.depth = depth_from_gray(depth_img, scene.depth_scale);

  const std::string masks_root = dir + "/masks";
  if (fs::exists(masks_root)) {
    std::vector<std::string> sources;
    for (const auto& entry : fs::directory_iterator(masks_root)) {
      if (entry.is_directory()) sources.push_back(entry.path().filename().string());
    }
    std::sort(sources.begin(), sources.end());
    for (const auto& source : sources) {
      const std::string sdir = masks_root + "/" + source;
      std::ifstream mf(sdir + "/meta.json");
      if (!mf) throw FileMissingError(sdir + "/meta.json is missing");
      const json meta = json::parse(mf);
      for (const auto& rec : meta) {
        const GrayImage raw = read_pgm(sdir + "/" + rec.at("file").get<std::string>());
        if (raw.width != scene.depth.width || raw.height != scene.depth.height) {
          throw DimMismatchError(sdir + ": mask size disagrees with depth");
        }
        CandidateMask mask(raw.width, raw.height);
        for (size_t i = 0; i < raw.values.size(); ++i) {
          mask.bitmap[i] = raw.values[i] != 0;
        }
        mask.confidence = rec.at("confidence").get<double>();
        mask.object_id = rec.value("object_id", "");
        mask.source_id = source;
        if (mask.confidence < 0 || mask.confidence > 1) {
          throw IoError(sdir + ": mask confidence outside [0,1]");
        }
        scene.masks.push_back(std::move(mask));
        scene.target_feature_files.push_back(
            rec.value("features", std::string()));
      }
    }
  }
  return scene;
}

/// Writes the directory layout load_scene_dir reads back.
inline void write_scene_dir(const SceneBundle& scene, const std::string& dir) {
  fs::create_directories(dir);
  json cam;
  cam["fx"] = scene.intrinsics.fx;
  cam["fy"] = scene.intrinsics.fy;
  cam["cx"] = scene.intrinsics.cx;
  cam["cy"] = scene.intrinsics.cy;
  cam["width"] = scene.intrinsics.width;
  cam["height"] = scene.intrinsics.height;
  cam["depth_scale"] = scene.depth_scale;
  std::ofstream cf(dir + "/camera.json");
  cf << cam.dump(2) << "\n";

  write_png16(depth_to_gray(scene.depth, scene.depth_scale), dir + "/depth.png");

  // Group by source, preserving order within each group.
  std::vector<std::string> sources;
  for (const auto& m : scene.masks) {
    if (std::find(sources.begin(), sources.end(), m.source_id) == sources.end()) {
      sources.push_back(m.source_id);
    }
  }
  for (const auto& source : sources) {
    const std::string sdir = dir + "/masks/" + source;
    fs::create_directories(sdir);
    json meta = json::array();
    int idx = 0;
    for (size_t i = 0; i < scene.masks.size(); ++i) {
      const auto& m = scene.masks[i];
      if (m.source_id != source) continue;
      char name[32];
      std::snprintf(name, sizeof name, "%03d.pgm", idx++);
      GrayImage img;
      img.width = m.width;
      img.height = m.height;
      img.maxval = 255;
      img.values.resize(m.bitmap.size());
      for (size_t p = 0; p < m.bitmap.size(); ++p) {
        img.values[p] = m.bitmap[p] ? 255 : 0;
      }
      write_pgm(img, sdir + "/" + name);
      json rec;
      rec["file"] = name;
      rec["confidence"] = m.confidence;
      rec["object_id"] = m.object_id;
      if (i < scene.target_feature_files.size() &&
          !scene.target_feature_files[i].empty()) {
        rec["features"] = scene.target_feature_files[i];
      }
      meta.push_back(rec);
    }
    std::ofstream mf(sdir + "/meta.json");
    mf << meta.dump(2) << "\n";
  }
}

inline std::vector<GroundTruthEntry> load_ground_truth(const std::string& dir) {
  std::ifstream f(dir + "/gt.json");
  if (!f) throw FileMissingError(dir + "/gt.json is missing");
  const json j = json::parse(f);
  std::vector<GroundTruthEntry> out;
  for (const auto& rec : j) {
    GroundTruthEntry e;
    e.object_id = rec.at("object_id").get<std::string>();
    e.pose = detail::pose_from_json(rec);
    out.push_back(e);
  }
  return out;
}

inline void save_ground_truth(const std::vector<GroundTruthEntry>& gts,
                              const std::string& dir) {
  json j = json::array();
  for (const auto& e : gts) {
    json rec = detail::pose_to_json(e.pose);
    rec["object_id"] = e.object_id;
    j.push_back(rec);
  }
  std::ofstream f(dir + "/gt.json");
  if (!f) throw IoError("cannot write " + dir + "/gt.json");
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Pose CSV
// ---------------------------------------------------------------------------

struct PoseRow {
  std::string scene_id;
  std::string object_id;
  int mask_ref = -1;
  double score_final = 0, score_coarse = 0, score_fine = 0, score_icp = 0;
  Pose pose;
  double time_ms = 0;
};

inline const char* pose_csv_header() {
  return "scene_id,object_id,mask_ref,score_final,score_coarse,score_fine,"
         "score_icp,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,time_ms";
}

/// Floats are written with %.17g so a written pose is recovered exactly.
inline void write_pose_csv(const std::vector<PoseRow>& rows,
                           const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << pose_csv_header() << "\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    f << "," << buf;
  };
  for (const auto& r : rows) {
    f << r.scene_id << "," << r.object_id << "," << r.mask_ref;
    num(r.score_final);
    num(r.score_coarse);
    num(r.score_fine);
    num(r.score_icp);
    for (int i = 0; i < 9; ++i) num(r.pose.rotation(i / 3, i % 3));
    for (int i = 0; i < 3; ++i) num(r.pose.translation(i));
    std::snprintf(buf, sizeof buf, "%.3f", r.time_ms);
    f << "," << buf << "\n";
  }
  if (!f) throw IoError("write failed for " + path);
}

inline std::vector<PoseRow> read_pose_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileMissingError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw TruncatedFileError(path + " is empty");
  std::vector<PoseRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string tok;
    for (char c : line + ",") {
      if (c == ',') {
        cols.push_back(tok);
        tok.clear();
      } else {
        tok += c;
      }
    }
    if (cols.size() != 20) {
      throw IoError(path + " has a row with " + std::to_string(cols.size()) +
                    " columns, expected 20");
    }
    PoseRow r;
    r.scene_id = cols[0];
    r.object_id = cols[1];
    r.mask_ref = std::stoi(cols[2]);
    r.score_final = std::stod(cols[3]);
    r.score_coarse = std::stod(cols[4]);
    r.score_fine = std::stod(cols[5]);
    r.score_icp = std::stod(cols[6]);
    for (int i = 0; i < 9; ++i) {
      r.pose.rotation(i / 3, i % 3) = std::stod(cols[size_t(7 + i)]);
    }
    for (int i = 0; i < 3; ++i) {
      r.pose.translation(i) = std::stod(cols[size_t(16 + i)]);
    }
    r.time_ms = std::stod(cols[19]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace poseforge
