#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fastmvs/camera.hpp"
#include "fastmvs/depth_map.hpp"
#include "fastmvs/error.hpp"
#include "fastmvs/optim.hpp"
#include "fastmvs/tensor.hpp"

namespace fastmvs {

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view tok) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view tok) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) return std::nullopt;
  return v;
}

/// Line cursor over a text file that skips blank lines and reports 1-based
/// line numbers in errors.
class TextCursor {
 public:
  TextCursor(const std::string& text, std::string source) : source_(std::move(source)) {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(start, end - start);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines_.push_back(std::move(line));
      start = end + 1;
    }
  }

  /// Tokens of the next non-blank line; error at end of input.
  std::vector<std::string_view> next(const char* expecting) {
    while (pos_ < lines_.size()) {
      auto toks = split_ws(lines_[pos_++]);
      if (!toks.empty()) return toks;
    }
    fail(std::string("unexpected end of file, expected ") + expecting);
  }

  bool at_end() {
    while (pos_ < lines_.size() && split_ws(lines_[pos_]).empty()) ++pos_;
    return pos_ >= lines_.size();
  }

  std::size_t line() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, pos_, what); }

  std::vector<double> numbers(std::size_t count, const char* what) {
    const auto toks = next(what);
    if (toks.size() != count)
      fail(std::string(what) + ": expected " + std::to_string(count) + " values, got " +
           std::to_string(toks.size()));
    std::vector<double> out;
    for (auto t : toks) {
      const auto v = parse_double(t);
      if (!v) fail(std::string(what) + ": bad number '" + std::string(t) + "'");
      out.push_back(*v);
    }
    return out;
  }

 private:
  std::string source_;
  std::vector<std::string> lines_;
  std::size_t pos_ = 0;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Camera text files
// ---------------------------------------------------------------------------

struct CamFile {
  Pose pose;
  Intrinsics intrinsics;
  double depth_min = 0.0;
  double depth_interval = 0.0;

  /// d_max = d_min + interval * (planes - 1).
  DepthRange depth_range(std::size_t planes) const {
    require(planes >= 2, ErrorKind::Config, "need at least two depth planes");
    return DepthRange(depth_min, depth_min + depth_interval * static_cast<double>(planes - 1));
  }

  friend bool operator==(const CamFile& a, const CamFile& b) {
    return a.pose.rotation() == b.pose.rotation() && a.pose.translation() == b.pose.translation() &&
           a.intrinsics == b.intrinsics && a.depth_min == b.depth_min &&
           a.depth_interval == b.depth_interval;
  }
};

inline CamFile parse_cam(const std::string& text, const std::string& source) {
  detail::TextCursor cur(text, source);
  auto expect_word = [&](const char* word) {
    const auto toks = cur.next(word);
    if (toks.size() != 1 || toks[0] != word) cur.fail(std::string("expected '") + word + "'");
  };
  expect_word("extrinsic");
  Mat3 r;
  Vec3 t;
  for (int i = 0; i < 4; ++i) {
    const auto row = cur.numbers(4, "extrinsic row");
    if (i < 3) {
      for (int j = 0; j < 3; ++j) r(i, j) = row[j];
      t[i] = row[3];
    } else if (row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0) {
      cur.fail("last extrinsic row must be 0 0 0 1");
    }
  }
  if (!Pose::is_rotation(r)) cur.fail("extrinsic rotation is not orthonormal");
  expect_word("intrinsic");
  std::array<std::vector<double>, 3> k;
  for (auto& row : k) row = cur.numbers(3, "intrinsic row");
  if (k[0][1] != 0.0) cur.fail("nonzero skew is not supported");
  if (k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0)
    cur.fail("intrinsic matrix must be upper triangular with K[2][2] = 1");
  if (!(k[0][0] > 0.0 && k[1][1] > 0.0)) cur.fail("focal lengths must be positive");

  const auto toks = cur.next("depth line");
  if (toks.size() < 2 || toks.size() > 4) cur.fail("depth line needs 'd_min d_interval'");
  const auto dmin = detail::parse_double(toks[0]);
  const auto dint = detail::parse_double(toks[1]);
  if (!dmin || !dint) cur.fail("bad depth values");
  if (!(*dmin > 0.0 && *dint > 0.0)) cur.fail("depth min and interval must be positive");
  if (!cur.at_end()) cur.fail("trailing content");

  CamFile cam;
  cam.pose = Pose(r, t);
  cam.intrinsics = Intrinsics(k[0][0], k[1][1], k[0][2], k[1][2]);
  cam.depth_min = *dmin;
  cam.depth_interval = *dint;
  return cam;
}

inline std::string format_cam(const CamFile& cam) {
  using detail::format_double;
  std::string s = "extrinsic\n";
  const Mat3& r = cam.pose.rotation();
  const Vec3& t = cam.pose.translation();
  for (int i = 0; i < 3; ++i)
    s += format_double(r(i, 0)) + " " + format_double(r(i, 1)) + " " + format_double(r(i, 2)) + " " +
         format_double(t[i]) + "\n";
  s += "0 0 0 1\n\nintrinsic\n";
  const Intrinsics& k = cam.intrinsics;
  s += format_double(k.fx) + " 0 " + format_double(k.cx) + "\n";
  s += "0 " + format_double(k.fy) + " " + format_double(k.cy) + "\n";
  s += "0 0 1\n\n";
  s += format_double(cam.depth_min) + " " + format_double(cam.depth_interval) + "\n";
  return s;
}

inline CamFile read_cam(const std::string& path) { return parse_cam(detail::read_file_bytes(path), path); }
inline void write_cam(const std::string& path, const CamFile& cam) {
  detail::write_file_bytes(path, format_cam(cam));
}

// ---------------------------------------------------------------------------
// PFM (single channel float32)
// ---------------------------------------------------------------------------

namespace detail {

/// Reads `count` whitespace-separated header tokens; the single byte after the
/// last token is consumed as the separator.
inline std::vector<std::string> header_tokens(const std::string& bytes, std::size_t count,
                                              std::size_t& pos, const std::string& source,
                                              bool comments) {
  std::vector<std::string> toks;
  while (toks.size() < count) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (comments && pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    if (pos >= bytes.size()) throw ParseError(source, 0, "truncated header");
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    toks.push_back(bytes.substr(start, pos - start));
  }
  if (pos >= bytes.size()) throw ParseError(source, 0, "truncated header");
  ++pos;
  return toks;
}

inline std::size_t parse_dim(const std::string& tok, const std::string& source, const char* what) {
  const auto v = parse_int(tok);
  if (!v || *v <= 0 || *v > (1LL << 20)) throw ParseError(source, 0, std::string("bad ") + what + " '" + tok + "'");
  return static_cast<std::size_t>(*v);
}

}  // namespace detail

inline std::string encode_pfm(const Tensor& map) {
  require_rank(map, 2, "encode_pfm");
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::string out = "Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1\n";
  out.reserve(out.size() + 4 * h * w);
  for (std::size_t y = h; y-- > 0;)
    for (std::size_t x = 0; x < w; ++x) detail::put_le<float>(out, static_cast<float>(map(y, x)));
  return out;
}

inline Tensor decode_pfm(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  const auto toks = detail::header_tokens(bytes, 4, pos, source, false);
  if (toks[0] != "Pf") throw ParseError(source, 1, "bad PFM magic '" + toks[0] + "' (need Pf)");
  const std::size_t w = detail::parse_dim(toks[1], source, "width");
  const std::size_t h = detail::parse_dim(toks[2], source, "height");
  const auto scale = detail::parse_double(toks[3]);
  if (!scale || *scale == 0.0) throw ParseError(source, 3, "bad PFM scale '" + toks[3] + "'");
  const bool little = *scale < 0.0;
  if (bytes.size() - pos != 4 * h * w)
    throw ParseError(source, 0,
                     "PFM payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                         std::to_string(4 * h * w));
  Tensor out({h, w});
  for (std::size_t y = h; y-- > 0;)
    for (std::size_t x = 0; x < w; ++x) {
      unsigned char b[4];
      std::memcpy(b, bytes.data() + pos, 4);
      pos += 4;
      const bool swap = little != (std::endian::native == std::endian::little);
      if (swap) std::reverse(b, b + 4);
      float f;
      std::memcpy(&f, b, 4);
      out(y, x) = static_cast<double>(f);
    }
  return out;
}

inline Tensor read_pfm(const std::string& path) { return decode_pfm(detail::read_file_bytes(path), path); }
inline void write_pfm(const std::string& path, const Tensor& map) {
  detail::write_file_bytes(path, encode_pfm(map));
}

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit) for 3 x H x W images in [0, 1]
// ---------------------------------------------------------------------------

inline std::string encode_ppm(const Tensor& image) {
  require_rank(image, 3, "encode_ppm");
  require(image.dim(0) == 3, ErrorKind::Dimension, "encode_ppm: need 3 channels");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(image(c, y, x))));
  return out;
}

inline Tensor decode_ppm(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  const auto toks = detail::header_tokens(bytes, 4, pos, source, true);
  if (toks[0] != "P6") throw ParseError(source, 1, "bad PPM magic '" + toks[0] + "' (need P6)");
  const std::size_t w = detail::parse_dim(toks[1], source, "width");
  const std::size_t h = detail::parse_dim(toks[2], source, "height");
  const std::size_t maxval = detail::parse_dim(toks[3], source, "maxval");
  if (maxval > 255) throw ParseError(source, 0, "only 8-bit PPM is supported");
  if (bytes.size() - pos != 3 * h * w) throw ParseError(source, 0, "PPM payload size mismatch");
  Tensor out({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out(c, y, x) = static_cast<double>(static_cast<unsigned char>(bytes[pos++])) /
                       static_cast<double>(maxval);
  return out;
}

inline Tensor read_ppm(const std::string& path) { return decode_ppm(detail::read_file_bytes(path), path); }
inline void write_ppm(const std::string& path, const Tensor& image) {
  detail::write_file_bytes(path, encode_ppm(image));
}

// ---------------------------------------------------------------------------
// PLY (binary little-endian, float xyz + uchar rgb)
// ---------------------------------------------------------------------------

inline std::string encode_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\n"
                    "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) detail::put_le<float>(out, static_cast<float>(cloud.points[i][a]));
    for (auto c : cloud.colors[i]) out.push_back(static_cast<char>(c));
  }
  return out;
}

inline PointCloud decode_ply(const std::string& bytes, const std::string& source) {
  static const std::vector<std::string> kProps = {
      "property float x",    "property float y",      "property float z",
      "property uchar red", "property uchar green", "property uchar blue"};
  std::size_t pos = 0, line_no = 0;
  auto next_line = [&]() {
    const std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) throw ParseError(source, line_no + 1, "truncated PLY header");
    std::string line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  if (next_line() != "ply") throw ParseError(source, 1, "bad PLY magic");
  if (next_line() != "format binary_little_endian 1.0")
    throw ParseError(source, line_no, "only binary_little_endian 1.0 is supported");
  std::string line = next_line();
  while (line.rfind("comment", 0) == 0) line = next_line();
  const auto toks = detail::split_ws(line);
  if (toks.size() != 3 || toks[0] != "element" || toks[1] != "vertex")
    throw ParseError(source, line_no, "expected 'element vertex N'");
  const auto n = detail::parse_int(toks[2]);
  if (!n || *n < 0) throw ParseError(source, line_no, "bad vertex count");
  for (const auto& p : kProps)
    if (next_line() != p) throw ParseError(source, line_no, "expected '" + p + "'");
  if (next_line() != "end_header") throw ParseError(source, line_no, "expected end_header");
  const std::size_t count = static_cast<std::size_t>(*n);
  if (bytes.size() - pos != count * 15)
    throw ParseError(source, line_no, "PLY payload size mismatch");
  detail::ByteReader r(bytes.substr(pos), source);
  PointCloud cloud;
  for (std::size_t i = 0; i < count; ++i) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = static_cast<double>(r.get<float>());
    std::array<std::uint8_t, 3> c{};
    for (auto& v : c) v = r.get<std::uint8_t>();
    cloud.add(p, c);
  }
  return cloud;
}

inline PointCloud read_ply(const std::string& path) { return decode_ply(detail::read_file_bytes(path), path); }
inline void write_ply(const std::string& path, const PointCloud& cloud) {
  detail::write_file_bytes(path, encode_ply(cloud));
}

// ---------------------------------------------------------------------------
// Pair lists
// ---------------------------------------------------------------------------

struct PairEntry {
  std::size_t reference = 0;
  std::vector<std::size_t> sources;
  friend bool operator==(const PairEntry&, const PairEntry&) = default;
};

using PairList = std::vector<PairEntry>;

inline PairList parse_pairs(const std::string& text, const std::string& source) {
  detail::TextCursor cur(text, source);
  auto as_index = [&](std::string_view t) {
    const auto v = detail::parse_int(t);
    if (!v || *v < 0) cur.fail("bad view id '" + std::string(t) + "'");
    return static_cast<std::size_t>(*v);
  };
  const auto head = cur.next("pair count");
  if (head.size() != 1) cur.fail("first line must hold the pair count");
  const std::size_t count = as_index(head[0]);
  PairList out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto toks = cur.next("pair line");
    if (toks.size() < 2) cur.fail("pair line needs 'ref n src...'");
    PairEntry e;
    e.reference = as_index(toks[0]);
    const std::size_t n = as_index(toks[1]);
    if (toks.size() != n + 2) cur.fail("pair line declares " + std::to_string(n) + " sources");
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t s = as_index(toks[j + 2]);
      if (s == e.reference) cur.fail("reference view listed as its own source");
      e.sources.push_back(s);
    }
    out.push_back(std::move(e));
  }
  if (!cur.at_end()) cur.fail("more pair lines than declared");
  return out;
}

inline std::string format_pairs(const PairList& pairs) {
  std::string s = std::to_string(pairs.size()) + "\n";
  for (const auto& e : pairs) {
    s += std::to_string(e.reference) + " " + std::to_string(e.sources.size());
    for (std::size_t v : e.sources) s += " " + std::to_string(v);
    s += "\n";
  }
  return s;
}

/// Every id must name one of view_count views.
inline void validate_pairs(const PairList& pairs, std::size_t view_count) {
  for (const auto& e : pairs) {
    require(e.reference < view_count, ErrorKind::Validation,
            "pair list references missing view " + std::to_string(e.reference));
    for (std::size_t s : e.sources)
      require(s < view_count, ErrorKind::Validation, "pair list references missing view " + std::to_string(s));
  }
}

inline PairList read_pairs(const std::string& path) { return parse_pairs(detail::read_file_bytes(path), path); }
inline void write_pairs(const std::string& path, const PairList& pairs) {
  detail::write_file_bytes(path, format_pairs(pairs));
}

// ---------------------------------------------------------------------------
// Scene directories: cams/NNNNNNNN_cam.txt, images/NNNNNNNN.ppm,
// depths/NNNNNNNN.pfm (optional ground truth), pair.txt
// ---------------------------------------------------------------------------

inline std::string view_name(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%08zu", index);
  return buf;
}

struct SceneData {
  std::vector<CameraView> views;
  std::vector<std::optional<Tensor>> gt_depth;  // full resolution
  PairList pairs;
};

struct ViewBundle {
  CameraView reference;
  std::vector<CameraView> sources;
  std::optional<Tensor> gt_depth;
};

inline ViewBundle make_bundle(const SceneData& scene, const PairEntry& pair) {
  validate_pairs({pair}, scene.views.size());
  ViewBundle b;
  b.reference = scene.views[pair.reference];
  for (std::size_t s : pair.sources) b.sources.push_back(scene.views[s]);
  b.gt_depth = scene.gt_depth[pair.reference];
  return b;
}

inline SceneData load_scene(const std::filesystem::path& dir, std::size_t planes) {
  namespace fs = std::filesystem;
  SceneData scene;
  scene.pairs = read_pairs((dir / "pair.txt").string());
  std::size_t count = 0;
  while (fs::exists(dir / "cams" / (view_name(count) + "_cam.txt"))) ++count;
  require(count > 0, ErrorKind::Data, "no camera files under " + (dir / "cams").string());
  validate_pairs(scene.pairs, count);
  for (std::size_t i = 0; i < count; ++i) {
    const CamFile cam = read_cam((dir / "cams" / (view_name(i) + "_cam.txt")).string());
    CameraView v;
    v.id = view_name(i);
    v.image = read_ppm((dir / "images" / (view_name(i) + ".ppm")).string());
    v.intrinsics = cam.intrinsics;
    v.pose = cam.pose;
    v.depth_range = cam.depth_range(planes);
    scene.views.push_back(std::move(v));
    const fs::path gt = dir / "depths" / (view_name(i) + ".pfm");
    if (fs::exists(gt)) {
      Tensor d = read_pfm(gt.string());
      require(d.dim(0) == scene.views.back().height() && d.dim(1) == scene.views.back().width(),
              ErrorKind::Data, gt.string() + ": depth size differs from image size");
      scene.gt_depth.emplace_back(std::move(d));
    } else {
      scene.gt_depth.emplace_back(std::nullopt);
    }
  }
  return scene;
}

}  // namespace fastmvs
