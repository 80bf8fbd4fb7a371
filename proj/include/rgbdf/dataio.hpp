#pragma once

#include <png.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdf/metrics.hpp"
#include "rgbdf/ops.hpp"
#include "rgbdf/random.hpp"

namespace rgbdf {

namespace fs = std::filesystem;

/// Aligned RGB-D raster. rgb: [3,H,W] in [-1,1]; depth: [1,H,W] in [-1,1], background -1.
struct RgbdImage {
  Tensor<float> rgb;
  Tensor<float> depth;

  Index height() const { return depth.dim(1); }
  Index width() const { return depth.dim(2); }

  /// Concatenated [4,H,W].
  Tensor<float> stacked() const {
    const Index hw = height() * width();
    Tensor<float> out({4, height(), width()});
    std::copy_n(rgb.data(), 3 * hw, out.data());
    std::copy_n(depth.data(), hw, out.data() + 3 * hw);
    return out;
  }

  static RgbdImage split(const Tensor<float>& rgbd) {
    if (rgbd.rank() != 3 || rgbd.dim(0) != 4) throw InvalidArgument("expected [4,H,W], got " + shape_str(rgbd.shape()));
    const Index h = rgbd.dim(1), w = rgbd.dim(2), hw = h * w;
    RgbdImage r{Tensor<float>({3, h, w}), Tensor<float>({1, h, w})};
    std::copy_n(rgbd.data(), 3 * hw, r.rgb.data());
    std::copy_n(rgbd.data() + 3 * hw, hw, r.depth.data());
    return r;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (rgb.rank() != 3 || rgb.dim(0) != 3) return {"rgb must be [3,H,W]"};
    if (depth.rank() != 3 || depth.dim(0) != 1) return {"depth must be [1,H,W]"};
    if (rgb.dim(1) != depth.dim(1) || rgb.dim(2) != depth.dim(2)) return {"rgb and depth are not aligned"};
    for (float x : depth.values())
      if (!(x >= -1.0f && x <= 1.0f)) {
        v.push_back("depth outside [-1,1]");
        break;
      }
    for (float x : rgb.values())
      if (!(x >= -1.0f && x <= 1.0f)) {
        v.push_back("rgb outside [-1,1]");
        break;
      }
    const Index hw = height() * width();
    Index disagree = 0;
    for (Index i = 0; i < hw; ++i) {
      const bool bg_d = depth[i] == -1.0f;
      const bool bg_c = rgb[i] == -1.0f && rgb[hw + i] == -1.0f && rgb[2 * hw + i] == -1.0f;
      disagree += bg_d != bg_c;
    }
    if (disagree * 100 > hw) v.push_back("rgb/depth background disagree on more than 1% of pixels");
    return v;
  }
};

// ---------------------------------------------------------------------------
// PFM

/// Single-channel little-endian PFM; rows stored bottom-up.
inline void write_pfm(std::ostream& os, const Tensor<float>& depth) {
  if (depth.rank() != 3 || depth.dim(0) != 1) throw InvalidArgument("PFM writer expects [1,H,W], got " + shape_str(depth.shape()));
  const Index h = depth.dim(1), w = depth.dim(2);
  os << "Pf\n" << w << ' ' << h << "\n-1.0\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 4);
  for (Index y = h - 1; y >= 0; --y) {
    for (Index x = 0; x < w; ++x) {
      auto bits = std::bit_cast<std::uint32_t>(depth.at(0, y, x));
      for (int b = 0; b < 4; ++b) row[static_cast<std::size_t>(x * 4 + b)] = static_cast<unsigned char>(bits >> (8 * b));
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("PFM write failed");
}

inline Tensor<float> read_pfm(std::istream& is) {
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto token = [&](const char* what) {
    while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    if (start == pos) throw FormatError(std::string("PFM: missing ") + what, start);
    return std::pair{data.substr(start, pos - start), start};
  };
  auto [magic, at0] = token("magic");
  if (magic != "Pf") throw FormatError("PFM: expected 'Pf' (single channel), got '" + magic + "'", at0);
  auto parse_dim = [&](const char* what) {
    auto [s, at] = token(what);
    Index v = 0;
    try {
      std::size_t used = 0;
      v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw FormatError(std::string("PFM: bad ") + what + " '" + s + "'", at);
    }
    if (v <= 0) throw FormatError(std::string("PFM: non-positive ") + what, at);
    return v;
  };
  const Index w = parse_dim("width"), h = parse_dim("height");
  auto [scale_s, at_s] = token("scale");
  double scale = 0.0;
  try {
    scale = std::stod(scale_s);
  } catch (const std::exception&) {
    throw FormatError("PFM: bad scale '" + scale_s + "'", at_s);
  }
  if (!(scale < 0.0)) throw FormatError("PFM: only little-endian (negative scale) supported", at_s);
  if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos])))
    throw FormatError("PFM: missing separator after scale", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w * h * 4);
  if (data.size() - pos < need)
    throw FormatError("PFM: truncated raster, need " + std::to_string(need) + " bytes", data.size());
  Tensor<float> out({1, h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
  for (Index y = h - 1; y >= 0; --y)
    for (Index x = 0; x < w; ++x, p += 4) {
      const std::uint32_t bits = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
      out.at(0, y, x) = std::bit_cast<float>(bits);
    }
  return out;
}

inline void write_pfm(const fs::path& path, const Tensor<float>& depth) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  write_pfm(f, depth);
}

inline Tensor<float> read_pfm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  return read_pfm(f);
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB) via libpng

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0f) * 127.5f), 0L, 255L));
}
inline float from_u8(std::uint8_t b) { return b / 127.5f - 1.0f; }

inline void write_png(const fs::path& path, const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw InvalidArgument("PNG writer expects [3,H,W], got " + shape_str(rgb.shape()));
  const Index h = rgb.dim(1), w = rgb.dim(2);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(h * w * 3));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) buf[static_cast<std::size_t>((y * w + x) * 3 + c)] = to_u8(rgb.at(c, y, x));
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

/// Reads any PNG as [3,H,W] normalized RGB.
inline Tensor<float> read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw FormatError("PNG " + path.string() + ": " + img.message, 0);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("PNG " + path.string() + ": " + img.message, 0);
  }
  const Index h = img.height, w = img.width;
  Tensor<float> out({3, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) out.at(c, y, x) = from_u8(buf[static_cast<std::size_t>((y * w + x) * 3 + c)]);
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

/// RGB bilinear.
inline Tensor<float> resample_rgb(const Tensor<float>& rgb, Index h, Index w) {
  if (h <= 0 || w <= 0) throw InvalidArgument("resample target must be positive");
  return ops::resize_tensor(rgb, h, w, ops::Interp::bilinear);
}

/// Depth nearest neighbour; output values are a subset of the input values.
inline Tensor<float> resample_depth(const Tensor<float>& d, Index h, Index w) {
  if (h <= 0 || w <= 0) throw InvalidArgument("resample target must be positive");
  return ops::resize_tensor(d, h, w, ops::Interp::nearest);
}

inline RgbdImage resample(const RgbdImage& x, Index h, Index w) {
  return {resample_rgb(x.rgb, h, w), resample_depth(x.depth, h, w)};
}

// ---------------------------------------------------------------------------
// Point clouds

struct PointCloud {
  bool has_rgb = false;
  std::vector<std::array<float, 6>> rows;  ///< u, v, d[, r, g, b]

  void write(std::ostream& os) const {
    os << (has_rgb ? "# u v d r g b\n" : "# u v d\n");
    os << std::setprecision(9);
    for (const auto& r : rows) {
      os << r[0] << ' ' << r[1] << ' ' << r[2];
      if (has_rgb) os << ' ' << r[3] << ' ' << r[4] << ' ' << r[5];
      os << '\n';
    }
  }

  void write(const fs::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    write(f);
  }
};

/// u = column, v = row. Background pixels (d <= -0.95) are dropped on request.
inline PointCloud to_point_cloud(const Tensor<float>& depth, const Tensor<float>* rgb, bool drop_background) {
  if (depth.rank() != 3 || depth.dim(0) != 1) throw InvalidArgument("depth must be [1,H,W]");
  const Index h = depth.dim(1), w = depth.dim(2), hw = h * w;
  if (rgb && (rgb->rank() != 3 || rgb->dim(0) != 3 || rgb->dim(1) != h || rgb->dim(2) != w))
    throw InvalidArgument("rgb not aligned with depth");
  PointCloud pc;
  pc.has_rgb = rgb != nullptr;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const float d = depth.at(0, y, x);
      if (drop_background && !(d > kMaskThreshold)) continue;
      std::array<float, 6> r{static_cast<float>(x), static_cast<float>(y), d, 0, 0, 0};
      if (rgb)
        for (int c = 0; c < 3; ++c) r[3 + c] = (*rgb)[c * hw + y * w + x];
      pc.rows.push_back(r);
    }
  return pc;
}

inline PointCloud to_point_cloud(const RgbdImage& x, bool drop_background) {
  return to_point_cloud(x.depth, &x.rgb, drop_background);
}

// ---------------------------------------------------------------------------
// Dataset layout

struct ManifestEntry {
  std::string id;
  std::string subject;
  std::string split;  ///< "train" or "test"
};

/// `<root>/manifest.tsv`: `#`-prefixed metadata, a header row, one row per sample.
struct DatasetManifest {
  fs::path root;
  Index resolution = 0;
  double near = 0.0, far = 0.0;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == tag) out.push_back(e);
    return out;
  }

  /// Subjects that appear in more than one split.
  std::vector<std::string> leaked_subjects() const {
    std::map<std::string, std::set<std::string>> splits;
    for (const auto& e : entries) splits[e.subject].insert(e.split);
    std::vector<std::string> out;
    for (const auto& [s, tags] : splits)
      if (tags.size() > 1) out.push_back(s);
    return out;
  }

  void write() const {
    std::ofstream f(root / "manifest.tsv");
    if (!f) throw IoError("cannot write manifest in " + root.string());
    f << std::setprecision(17) << "# rgbdf-manifest\t1\n# resolution\t" << resolution << "\n# near\t" << near
      << "\n# far\t" << far << "\n# seed\t" << seed << "\nid\tsubject\tsplit\n";
    for (const auto& e : entries) f << e.id << '\t' << e.subject << '\t' << e.split << '\n';
  }

  static DatasetManifest read(const fs::path& root) {
    std::ifstream f(root / "manifest.tsv");
    if (!f) throw IoError("no manifest.tsv in " + root.string());
    DatasetManifest m;
    m.root = root;
    std::string line;
    bool header = false;
    std::uint64_t offset = 0;
    while (std::getline(f, line)) {
      const std::uint64_t at = offset;
      offset += line.size() + 1;
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::istringstream ls(line);
      for (std::string c; std::getline(ls, c, '\t');) cols.push_back(c);
      if (line[0] == '#') {
        if (cols.size() != 2) throw FormatError("manifest: bad metadata line", at);
        const auto& k = cols[0];
        if (k == "# resolution") m.resolution = std::stoll(cols[1]);
        else if (k == "# near") m.near = std::stod(cols[1]);
        else if (k == "# far") m.far = std::stod(cols[1]);
        else if (k == "# seed") m.seed = std::stoull(cols[1]);
        continue;
      }
      if (!header) {
        if (cols != std::vector<std::string>{"id", "subject", "split"}) throw FormatError("manifest: bad header row", at);
        header = true;
        continue;
      }
      if (cols.size() != 3) throw FormatError("manifest: expected 3 columns", at);
      if (cols[2] != "train" && cols[2] != "test") throw FormatError("manifest: unknown split '" + cols[2] + "'", at);
      m.entries.push_back({cols[0], cols[1], cols[2]});
    }
    if (!header) throw FormatError("manifest: missing header row", offset);
    if (m.resolution <= 0) throw FormatError("manifest: missing resolution", 0);
    return m;
  }
};

inline fs::path sample_stem(const fs::path& root, const ManifestEntry& e) { return root / e.split / e.id; }

inline void write_sample(const fs::path& root, const ManifestEntry& e, const RgbdImage& x) {
  fs::create_directories(root / e.split);
  const auto stem = sample_stem(root, e);
  write_png(fs::path(stem).replace_extension(".png"), x.rgb);
  write_pfm(fs::path(stem).replace_extension(".pfm"), x.depth);
}

/// Reads `<stem>.png` + `<stem>.pfm`.
inline RgbdImage read_rgbd(const fs::path& stem) {
  RgbdImage x{read_png(fs::path(stem).replace_extension(".png")), read_pfm(fs::path(stem).replace_extension(".pfm"))};
  if (x.rgb.dim(1) != x.depth.dim(1) || x.rgb.dim(2) != x.depth.dim(2))
    throw IntegrityError("rgb and depth sizes differ for " + stem.string());
  return x;
}

inline RgbdImage read_sample(const DatasetManifest& m, const ManifestEntry& e) {
  auto x = read_rgbd(sample_stem(m.root, e));
  if (x.height() != m.resolution || x.width() != m.resolution)
    throw IntegrityError("sample " + e.id + " is " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                         ", manifest says " + std::to_string(m.resolution));
  return x;
}

// ---------------------------------------------------------------------------
// Synthetic subjects

namespace synth {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(Vec3 o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(Vec3 o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(Vec3 o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 normalized() const {
    const double n = std::sqrt(dot(*this));
    return {x / n, y / n, z / n};
  }
};

/// Ellipsoid (radii r) or capsule (segment a-b, radius r.x).
struct Primitive {
  bool capsule = false;
  Vec3 a, b, r;
  Vec3 color;
};

struct Hit {
  double t = 0;
  Vec3 normal;
};

inline std::optional<Hit> intersect(const Primitive& p, Vec3 o, Vec3 d) {
  if (!p.capsule) {
    const Vec3 oc{(o.x - p.a.x) / p.r.x, (o.y - p.a.y) / p.r.y, (o.z - p.a.z) / p.r.z};
    const Vec3 dd{d.x / p.r.x, d.y / p.r.y, d.z / p.r.z};
    const double A = dd.dot(dd), B = oc.dot(dd), C = oc.dot(oc) - 1.0;
    const double disc = B * B - A * C;
    if (disc < 0) return std::nullopt;
    const double t = (-B - std::sqrt(disc)) / A;
    if (t <= 0) return std::nullopt;
    const Vec3 q = oc + dd * t;
    return Hit{t, Vec3{q.x / p.r.x, q.y / p.r.y, q.z / p.r.z}.normalized()};
  }
  // Capsule: closest hit on the cylinder body or either end sphere.
  const double rad = p.r.x;
  const Vec3 ba = p.b - p.a, oa = o - p.a;
  const double baba = ba.dot(ba), bard = ba.dot(d), baoa = ba.dot(oa), rdoa = d.dot(oa), oaoa = oa.dot(oa);
  const double dd = d.dot(d);
  const double A = baba * dd - bard * bard;
  const double B = baba * rdoa - baoa * bard;
  const double C = baba * oaoa - baoa * baoa - rad * rad * baba;
  std::optional<Hit> best;
  const double h = B * B - A * C;
  if (h >= 0.0 && A > 1e-12) {
    const double t = (-B - std::sqrt(h)) / A;
    const double y = baoa + t * bard;
    if (t > 0 && y > 0.0 && y < baba) {
      const Vec3 pos = oa + d * t;
      best = Hit{t, (pos - ba * (y / baba)).normalized()};
    }
  }
  for (const Vec3 c : {p.a, p.b}) {
    const Vec3 oc = o - c;
    const double b2 = oc.dot(d), c2 = oc.dot(oc) - rad * rad, disc = b2 * b2 - dd * c2;
    if (disc < 0) continue;
    const double t = (-b2 - std::sqrt(disc)) / dd;
    if (t > 0 && (!best || t < best->t)) best = Hit{t, (oc + d * t).normalized()};
  }
  return best;
}

/// Subject in body coordinates (y up, feet near y = 0).
inline std::vector<Primitive> make_subject(Rng& rng) {
  auto u = [&](double lo, double hi) { return rng.uniform(lo, hi); };
  auto color = [&] { return Vec3{u(0.2, 1.0), u(0.2, 1.0), u(0.2, 1.0)}; };
  const double leg = u(0.75, 0.95), torso_h = u(0.55, 0.7), torso_w = u(0.22, 0.32), torso_d = u(0.13, 0.2);
  const double head = u(0.11, 0.15), limb = u(0.05, 0.08), arm = u(0.6, 0.75);
  const double hip_y = leg, torso_c = hip_y + torso_h * 0.5, shoulder_y = hip_y + torso_h * 0.9;
  const Vec3 skin = color(), shirt = color(), pants = color();
  std::vector<Primitive> ps;
  ps.push_back({false, {0, torso_c, 0}, {}, {torso_w, torso_h * 0.55, torso_d}, shirt});
  ps.push_back({false, {0, hip_y + torso_h + head * 0.9, 0}, {}, {head, head * 1.15, head}, skin});
  for (int side : {-1, 1}) {
    const double spread = u(0.0, 0.25), swing = u(-0.3, 0.3);
    ps.push_back({true, {side * torso_w * 0.45, hip_y, 0}, {side * (torso_w * 0.45 + leg * spread * 0.5), limb, leg * swing * 0.3},
                  {limb * 1.3, 0, 0}, pants});
    const double lift = u(0.05, 0.6);
    const Vec3 sh{side * (torso_w + limb), shoulder_y, 0};
    ps.push_back({true, sh, sh + Vec3{side * std::sin(lift) * arm, -std::cos(lift) * arm, u(-0.2, 0.2) * arm}, {limb, 0, 0}, shirt});
  }
  return ps;
}

struct Camera {
  double focal = 1.0;  ///< pixels
  double yaw = 0.0;
  Vec3 offset;  ///< subject origin in camera space
};

struct Render {
  std::vector<double> z;  ///< 0 for background
  std::vector<Vec3> rgb;
};

/// Rays are intersected in the subject frame: rotating the ray by -yaw
/// keeps t, and with a unit z step t is the camera z depth.
inline Render render(const std::vector<Primitive>& subject, const Camera& cam, Index res) {
  const double cy = std::cos(cam.yaw), sy = std::sin(cam.yaw);
  auto to_body = [&](Vec3 v) { return Vec3{cy * v.x - sy * v.z, v.y, sy * v.x + cy * v.z}; };
  const Vec3 origin = to_body(Vec3{} - cam.offset);
  const Vec3 light = to_body(Vec3{-0.4, 0.6, -1.0}.normalized());
  Render r{std::vector<double>(static_cast<std::size_t>(res * res), 0.0), std::vector<Vec3>(static_cast<std::size_t>(res * res))};
  for (Index y = 0; y < res; ++y)
    for (Index x = 0; x < res; ++x) {
      const Vec3 d = to_body({(x + 0.5 - res / 2.0) / cam.focal, -(y + 0.5 - res / 2.0) / cam.focal, 1.0});
      std::optional<Hit> best;
      const Primitive* who = nullptr;
      for (const auto& p : subject)
        if (auto h = intersect(p, origin, d); h && (!best || h->t < best->t)) {
          best = h;
          who = &p;
        }
      if (!best) continue;
      const auto i = static_cast<std::size_t>(y * res + x);
      r.z[i] = best->t;
      r.rgb[i] = who->color * (0.45 + 0.55 * std::max(0.0, best->normal.dot(light)));
    }
  return r;
}

inline std::pair<Index, Index> row_extent(const Render& r, Index res) {
  Index lo = res, hi = -1;
  for (Index y = 0; y < res; ++y)
    for (Index x = 0; x < res; ++x)
      if (r.z[static_cast<std::size_t>(y * res + x)] > 0) {
        lo = std::min(lo, y);
        hi = std::max(hi, y);
      }
  return {lo, hi};
}

}  // namespace synth

struct SyntheticOptions {
  Index count = 64;
  Index resolution = 64;
  std::uint64_t seed = 0;
  int views_per_subject = 4;
  double test_fraction = 0.2;
  double near = 1.0, far = 5.0;
  double height_fraction = 0.8;
};

/// Renders one view with the subject spanning `height_fraction` of the image.
inline RgbdImage render_synthetic_view(const std::vector<synth::Primitive>& subject, Rng& rng, const SyntheticOptions& opt) {
  using namespace synth;
  const Index res = opt.resolution;
  const double fov = rng.uniform(35.0, 50.0) * std::numbers::pi / 180.0;
  Camera cam;
  cam.focal = res / 2.0 / std::tan(fov / 2.0);
  cam.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  double top = 0, bottom = 1e9;
  for (const auto& p : subject) {
    top = std::max({top, p.a.y + (p.capsule ? p.r.x : p.r.y), p.capsule ? p.b.y + p.r.x : 0.0});
    bottom = std::min({bottom, p.a.y - (p.capsule ? p.r.x : p.r.y), p.capsule ? p.b.y - p.r.x : 1e9});
  }
  const double span = top - bottom, target = opt.height_fraction * res;
  double dist = cam.focal * span / target;
  const double lateral = rng.uniform(-0.04, 0.04) * res;
  cam.offset = {lateral * dist / cam.focal, -(bottom + span / 2.0), dist};
  Render r;
  for (int it = 0; it < 8; ++it) {
    r = render(subject, cam, res);
    const auto [lo, hi] = row_extent(r, res);
    if (hi < lo) {
      dist *= 1.2;
    } else {
      const double extent = static_cast<double>(hi - lo + 1);
      const double centre = (lo + hi + 1) / 2.0 - res / 2.0;
      if (std::abs(extent - target) <= 1.0 && std::abs(centre) <= 1.0) break;
      cam.offset.y += centre * dist / cam.focal;
      dist *= extent / target;
    }
    cam.offset.z = dist;
    cam.offset.x = lateral * dist / cam.focal;
  }
  RgbdImage img{Tensor<float>({3, res, res}, -1.0f), Tensor<float>({1, res, res}, -1.0f)};
  const Index hw = res * res;
  for (Index i = 0; i < hw; ++i) {
    const double z = r.z[static_cast<std::size_t>(i)];
    if (z <= 0) continue;
    const double dn = 1.0 - 2.0 * (z - opt.near) / (opt.far - opt.near);
    img.depth[i] = static_cast<float>(std::clamp(dn, -0.9, 1.0));
    const auto& c = r.rgb[static_cast<std::size_t>(i)];
    for (int ch = 0; ch < 3; ++ch) {
      const double v = ch == 0 ? c.x : ch == 1 ? c.y : c.z;
      // 8-bit quantization with foreground kept away from the background code.
      const auto q = std::clamp<long>(std::lround(v * 255.0), 8, 255);
      img.rgb[ch * hw + i] = from_u8(static_cast<std::uint8_t>(q));
    }
  }
  return img;
}

/// Renders `count` samples into `<root>/<split>/` and writes the manifest.
/// Consecutive groups of `views_per_subject` samples share a subject.
inline DatasetManifest generate_synthetic(const fs::path& root, const SyntheticOptions& opt) {
  if (opt.count < 1) throw InvalidArgument("synthetic count must be >= 1");
  if (opt.resolution < 8) throw InvalidArgument("synthetic resolution must be >= 8");
  if (opt.views_per_subject < 1) throw InvalidArgument("views_per_subject must be >= 1");
  DatasetManifest m;
  m.root = root;
  m.resolution = opt.resolution;
  m.near = opt.near;
  m.far = opt.far;
  m.seed = opt.seed;
  fs::create_directories(root);
  const Index subjects = (opt.count + opt.views_per_subject - 1) / opt.views_per_subject;
  const auto n_test = static_cast<Index>(std::floor(subjects * opt.test_fraction));
  for (Index i = 0; i < opt.count; ++i) {
    const Index s = i / opt.views_per_subject;
    Rng subj_rng(derive_seed(opt.seed, {0, static_cast<std::uint64_t>(s)}));
    const auto subject = synth::make_subject(subj_rng);
    Rng view_rng(derive_seed(opt.seed, {1, static_cast<std::uint64_t>(i)}));
    const auto img = render_synthetic_view(subject, view_rng, opt);
    std::ostringstream id, sid;
    id << std::setw(6) << std::setfill('0') << i;
    sid << 's' << std::setw(4) << std::setfill('0') << s;
    ManifestEntry e{id.str(), sid.str(), s >= subjects - n_test ? "test" : "train"};
    write_sample(root, e, img);
    m.entries.push_back(e);
  }
  m.write();
  return m;
}

}  // namespace rgbdf
