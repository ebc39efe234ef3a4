#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/geometry.hpp"
#include "pointlap/rng.hpp"
#include "pointlap/task.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// ---------------------------------------------------------------------------
// Text formats: xyz, ascii PLY, csv
// ---------------------------------------------------------------------------

enum class CloudFormat { kXyzText, kAsciiPly, kCsv };

inline const char* cloud_format_name(CloudFormat f) {
  switch (f) {
    case CloudFormat::kXyzText: return "xyz";
    case CloudFormat::kAsciiPly: return "ply";
    case CloudFormat::kCsv: return "csv";
  }
  return "?";
}

inline CloudFormat cloud_format_from_name(const std::string& name) {
  if (name == "xyz" || name == "xyz-text" || name == "txt") return CloudFormat::kXyzText;
  if (name == "ply" || name == "ascii-ply") return CloudFormat::kAsciiPly;
  if (name == "csv") return CloudFormat::kCsv;
  throw ConfigError("unknown cloud format: " + name + " (expected xyz|ply|csv)");
}

inline CloudFormat cloud_format_from_path(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos) {
    const std::string ext = path.substr(dot + 1);
    if (ext == "xyz" || ext == "txt") return CloudFormat::kXyzText;
    if (ext == "ply") return CloudFormat::kAsciiPly;
    if (ext == "csv") return CloudFormat::kCsv;
  }
  throw ConfigError("cannot infer cloud format from path: " + path);
}

namespace io_detail {

inline double parse_number(const std::string& token, std::size_t line_no) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') {
    throw ParseError("line " + std::to_string(line_no) + ": not a number: '" + token + "'");
  }
  return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline std::vector<std::string> split_char(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  std::size_t b = s.find_last_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

// Column roles a loader understands. Anything else is skipped with a warning.
enum class Column { kX, kY, kZ, kRed, kGreen, kBlue, kNx, kNy, kNz, kLabel, kSkip };

inline Column column_from_name(const std::string& name) {
  if (name == "x") return Column::kX;
  if (name == "y") return Column::kY;
  if (name == "z") return Column::kZ;
  if (name == "red" || name == "r") return Column::kRed;
  if (name == "green" || name == "g") return Column::kGreen;
  if (name == "blue" || name == "b") return Column::kBlue;
  if (name == "nx") return Column::kNx;
  if (name == "ny") return Column::kNy;
  if (name == "nz") return Column::kNz;
  if (name == "label" || name == "class") return Column::kLabel;
  return Column::kSkip;
}

struct ColumnData {
  std::vector<double> positions;
  std::vector<double> colors;
  std::vector<double> normals;
  std::vector<int> labels;
  bool has_colors = false;
  bool has_normals = false;
  bool has_labels = false;
  bool color_bytes = false;  // colors given on the 0..255 scale

  PointCloud finish(const std::string& path) const {
    const std::size_t n = positions.size() / 3;
    if (n == 0) throw ParseError(path + ": no points (a cloud needs at least one)");
    PointCloud cloud;
    cloud.positions = Tensor::from_data({n, 3}, positions);
    std::size_t width = (has_colors ? 3 : 0) + (has_normals ? 3 : 0);
    if (width > 0) {
      std::vector<double> feat(n * width);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t c = 0;
        if (has_colors) {
          for (int j = 0; j < 3; ++j) {
            double v = colors[3 * i + j];
            if (color_bytes) v /= 255.0;
            feat[i * width + c++] = v;
          }
        }
        if (has_normals) {
          for (int j = 0; j < 3; ++j) feat[i * width + c++] = normals[3 * i + j];
        }
      }
      cloud.features = Tensor::from_data({n, width}, std::move(feat));
      cloud.color_channels = has_colors ? 3 : 0;
    }
    if (has_labels) cloud.labels = labels;
    cloud.validate();
    return cloud;
  }
};

inline void store_value(ColumnData& data, Column col, double v) {
  switch (col) {
    case Column::kX:
    case Column::kY:
    case Column::kZ:
      data.positions.push_back(v);
      break;
    case Column::kRed:
    case Column::kGreen:
    case Column::kBlue:
      data.colors.push_back(v);
      data.has_colors = true;
      break;
    case Column::kNx:
    case Column::kNy:
    case Column::kNz:
      data.normals.push_back(v);
      data.has_normals = true;
      break;
    case Column::kLabel:
      data.labels.push_back(static_cast<int>(v));
      data.has_labels = true;
      break;
    case Column::kSkip:
      break;
  }
}

}  // namespace io_detail

inline PointCloud load_cloud_xyz(std::istream& in, const std::string& path) {
  io_detail::ColumnData data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = io_detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto tokens = io_detail::split_ws(t);
    if (tokens.size() != 3 && tokens.size() != 4) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": expected 'x y z [label]', got " +
                       std::to_string(tokens.size()) + " fields");
    }
    for (int c = 0; c < 3; ++c) {
      data.positions.push_back(io_detail::parse_number(tokens[c], line_no));
    }
    if (tokens.size() == 4) {
      data.labels.push_back(static_cast<int>(io_detail::parse_number(tokens[3], line_no)));
      data.has_labels = true;
    } else if (data.has_labels) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": missing label column");
    }
  }
  return data.finish(path);
}

inline PointCloud load_cloud_ply(std::istream& in, const std::string& path) {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&](std::string& out) {
    if (!std::getline(in, out)) throw ParseError(path + ": unexpected end of header");
    ++line_no;
    out = io_detail::trim(out);
  };
  next_line(line);
  if (line != "ply") throw ParseError(path + ": not a ply file (missing 'ply' magic)");
  std::size_t vertex_count = 0;
  std::vector<io_detail::Column> columns;
  bool in_vertex_element = false;
  bool format_seen = false;
  while (true) {
    next_line(line);
    if (line == "end_header") break;
    auto tokens = io_detail::split_ws(line);
    if (tokens.empty() || tokens[0] == "comment") continue;
    if (tokens[0] == "format") {
      if (tokens.size() < 2 || tokens[1] != "ascii") {
        throw ParseError(path + ": only ascii ply is supported");
      }
      format_seen = true;
    } else if (tokens[0] == "element") {
      in_vertex_element = tokens.size() >= 3 && tokens[1] == "vertex";
      if (in_vertex_element) {
        vertex_count = static_cast<std::size_t>(
            io_detail::parse_number(tokens[2], line_no));
      }
    } else if (tokens[0] == "property" && in_vertex_element) {
      if (tokens.size() < 3) throw ParseError(path + ": line " + std::to_string(line_no) +
                                              ": malformed property");
      const std::string& name = tokens.back();
      io_detail::Column col = io_detail::column_from_name(name);
      if (col == io_detail::Column::kSkip) {
        std::cerr << "warning: " << path << ": skipping unknown ply property '" << name << "'\n";
      }
      columns.push_back(col);
    }
  }
  if (!format_seen) throw ParseError(path + ": ply header has no format line");
  io_detail::ColumnData data;
  data.color_bytes = true;  // ply colors are uchar by convention
  for (std::size_t v = 0; v < vertex_count; ++v) {
    next_line(line);
    auto tokens = io_detail::split_ws(line);
    if (tokens.size() < columns.size()) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": expected " +
                       std::to_string(columns.size()) + " values, got " +
                       std::to_string(tokens.size()));
    }
    for (std::size_t c = 0; c < columns.size(); ++c) {
      io_detail::store_value(data, columns[c], io_detail::parse_number(tokens[c], line_no));
    }
  }
  return data.finish(path);
}

inline PointCloud load_cloud_csv(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  std::size_t line_no = 1;
  std::vector<io_detail::Column> columns;
  for (auto& name : io_detail::split_char(io_detail::trim(line), ',')) {
    io_detail::Column col = io_detail::column_from_name(io_detail::trim(name));
    if (col == io_detail::Column::kSkip) {
      std::cerr << "warning: " << path << ": skipping unknown csv column '" << io_detail::trim(name)
                << "'\n";
    }
    columns.push_back(col);
  }
  io_detail::ColumnData data;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = io_detail::trim(line);
    if (t.empty()) continue;
    auto tokens = io_detail::split_char(t, ',');
    if (tokens.size() != columns.size()) {
      throw ParseError(path + ": line " + std::to_string(line_no) + ": expected " +
                       std::to_string(columns.size()) + " fields, got " +
                       std::to_string(tokens.size()));
    }
    for (std::size_t c = 0; c < columns.size(); ++c) {
      io_detail::store_value(data, columns[c], io_detail::parse_number(io_detail::trim(tokens[c]),
                                                                       line_no));
    }
  }
  return data.finish(path);
}

inline PointCloud load_cloud(const std::string& path, CloudFormat format) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  switch (format) {
    case CloudFormat::kXyzText: return load_cloud_xyz(f, path);
    case CloudFormat::kAsciiPly: return load_cloud_ply(f, path);
    case CloudFormat::kCsv: return load_cloud_csv(f, path);
  }
  throw ConfigError("unreachable format");
}

inline PointCloud load_cloud(const std::string& path) {
  return load_cloud(path, cloud_format_from_path(path));
}

// Two-stop color ramp (blue at the minimum, red at the maximum); a constant
// field maps everywhere to the minimum endpoint.
inline std::array<int, 3> color_ramp(double value, double lo, double hi) {
  double t = 0.0;
  if (hi > lo) t = (value - lo) / (hi - lo);
  t = std::min(1.0, std::max(0.0, t));
  return {static_cast<int>(std::lround(t * 255.0)), 0,
          static_cast<int>(std::lround((1.0 - t) * 255.0))};
}

struct SaveOptions {
  const std::vector<double>* scalar_field = nullptr;  // mapped to a color ramp
  std::vector<std::string> comments;
};

inline void save_cloud(const PointCloud& cloud, const std::string& path, CloudFormat format,
                       const SaveOptions& options = {}) {
  cloud.validate();
  const std::size_t n = cloud.size();
  if (options.scalar_field && options.scalar_field->size() != n) {
    throw ShapeError("scalar field length does not match point count");
  }
  if (options.scalar_field && format == CloudFormat::kXyzText) {
    throw ConfigError("xyz format has no color columns; use ply or csv for scalar fields");
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);

  char buf[80];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };

  double lo = 0.0, hi = 0.0;
  if (options.scalar_field && n > 0) {
    lo = hi = (*options.scalar_field)[0];
    for (double v : *options.scalar_field) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const bool write_colors =
      options.scalar_field != nullptr || (cloud.color_channels == 3 && cloud.features.defined());
  auto color_of = [&](std::size_t i) -> std::array<int, 3> {
    if (options.scalar_field) return color_ramp((*options.scalar_field)[i], lo, hi);
    return {static_cast<int>(std::lround(cloud.features.at(i, 0) * 255.0)),
            static_cast<int>(std::lround(cloud.features.at(i, 1) * 255.0)),
            static_cast<int>(std::lround(cloud.features.at(i, 2) * 255.0))};
  };

  switch (format) {
    case CloudFormat::kXyzText: {
      for (const auto& c : options.comments) f << "# " << c << "\n";
      for (std::size_t i = 0; i < n; ++i) {
        f << fmt(cloud.positions.at(i, 0)) << ' ' << fmt(cloud.positions.at(i, 1)) << ' '
          << fmt(cloud.positions.at(i, 2));
        if (!cloud.labels.empty()) f << ' ' << cloud.labels[i];
        f << '\n';
      }
      break;
    }
    case CloudFormat::kAsciiPly: {
      f << "ply\nformat ascii 1.0\n";
      for (const auto& c : options.comments) f << "comment " << c << "\n";
      f << "element vertex " << n << "\n";
      f << "property float x\nproperty float y\nproperty float z\n";
      if (write_colors) {
        f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
      }
      if (!cloud.labels.empty()) f << "property int label\n";
      f << "end_header\n";
      for (std::size_t i = 0; i < n; ++i) {
        f << fmt(cloud.positions.at(i, 0)) << ' ' << fmt(cloud.positions.at(i, 1)) << ' '
          << fmt(cloud.positions.at(i, 2));
        if (write_colors) {
          auto [r, g, b] = color_of(i);
          f << ' ' << r << ' ' << g << ' ' << b;
        }
        if (!cloud.labels.empty()) f << ' ' << cloud.labels[i];
        f << '\n';
      }
      break;
    }
    case CloudFormat::kCsv: {
      f << "x,y,z";
      if (write_colors) f << ",red,green,blue";
      if (!cloud.labels.empty()) f << ",label";
      f << "\n";
      for (std::size_t i = 0; i < n; ++i) {
        f << fmt(cloud.positions.at(i, 0)) << ',' << fmt(cloud.positions.at(i, 1)) << ','
          << fmt(cloud.positions.at(i, 2));
        if (write_colors) {
          if (options.scalar_field) {
            auto [r, g, b] = color_of(i);
            f << ',' << r / 255.0 << ',' << g / 255.0 << ',' << b / 255.0;
          } else {
            f << ',' << fmt(cloud.features.at(i, 0)) << ',' << fmt(cloud.features.at(i, 1)) << ','
              << fmt(cloud.features.at(i, 2));
          }
        }
        if (!cloud.labels.empty()) f << ',' << cloud.labels[i];
        f << '\n';
      }
      break;
    }
  }
  if (!f) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormalizeTransform {
  std::array<double, 3> centroid{0, 0, 0};
  double scale = 1.0;
};

// Centers a cloud on its centroid and scales so the farthest point sits at
// distance 1 from the origin.
inline PointCloud normalize_unit_ball(const PointCloud& cloud,
                                      NormalizeTransform* transform = nullptr) {
  cloud.validate();
  const std::size_t n = cloud.size();
  const double* p = cloud.positions.values().data();
  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c[a] += p[3 * i + a];
  for (int a = 0; a < 3; ++a) c[a] /= static_cast<double>(n);
  double max_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double t = p[3 * i + a] - c[a];
      d += t * t;
    }
    max_norm = std::max(max_norm, std::sqrt(d));
  }
  if (max_norm == 0.0) {
    throw DegenerateCloudError("all points coincide; cannot normalize to the unit ball");
  }
  std::vector<double> out(n * 3);
  const double inv = 1.0 / max_norm;
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) out[3 * i + a] = (p[3 * i + a] - c[a]) * inv;
  PointCloud result = cloud;
  result.positions = Tensor::from_data({n, 3}, std::move(out));
  if (transform) {
    transform->centroid = {c[0], c[1], c[2]};
    transform->scale = inv;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic shape datasets
// ---------------------------------------------------------------------------

enum class ShapeFamily { kSphere, kCube, kTorus, kCylinder, kCapsule };

inline const char* shape_name(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::kSphere: return "sphere";
    case ShapeFamily::kCube: return "cube";
    case ShapeFamily::kTorus: return "torus";
    case ShapeFamily::kCylinder: return "cylinder";
    case ShapeFamily::kCapsule: return "capsule";
  }
  return "?";
}

inline ShapeFamily shape_from_name(const std::string& s) {
  if (s == "sphere") return ShapeFamily::kSphere;
  if (s == "cube") return ShapeFamily::kCube;
  if (s == "torus") return ShapeFamily::kTorus;
  if (s == "cylinder") return ShapeFamily::kCylinder;
  if (s == "capsule") return ShapeFamily::kCapsule;
  throw ConfigError("unknown shape family: " + s);
}

struct SyntheticTaskSpec {
  Task task = Task::kClassification;
  std::vector<ShapeFamily> shapes{ShapeFamily::kSphere, ShapeFamily::kCube, ShapeFamily::kTorus};
  std::size_t points_per_cloud = 1024;
  double noise_sigma = 0.02;
  std::size_t train_count = 500;
  std::size_t test_count = 100;
  std::uint64_t seed = 7;

  void validate() const {
    if (points_per_cloud < 1) throw ConfigError("points_per_cloud must be >= 1");
    if (train_count < 1 || test_count < 1) throw ConfigError("split sizes must be >= 1");
    if (task == Task::kClassification && shapes.empty()) {
      throw ConfigError("classification needs at least one shape family");
    }
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
  }
};

// Per-cloud generation record for analytic oracles on the composite task.
struct ShapeMeta {
  ShapeFamily family = ShapeFamily::kSphere;
  double radius = 0.0;
  double height = 0.0;
  NormalizeTransform transform;
};

struct SyntheticSplit {
  std::vector<PointCloud> clouds;
  std::vector<std::vector<double>> boundary_distance;  // per point, normalized units
  std::vector<ShapeMeta> meta;
};

struct SyntheticDataset {
  SyntheticTaskSpec spec;
  std::size_t num_classes = 0;
  std::size_t num_categories = 0;
  SyntheticSplit train;
  SyntheticSplit test;
};

namespace synth_detail {

constexpr double kPi = 3.14159265358979323846;

inline void sample_sphere(Rng& rng, double* out) {
  double v[3];
  double norm = 0.0;
  do {
    norm = 0.0;
    for (int c = 0; c < 3; ++c) {
      v[c] = rng.normal();
      norm += v[c] * v[c];
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (int c = 0; c < 3; ++c) out[c] = v[c] / norm;
}

inline void sample_cube(Rng& rng, double* out) {
  const std::size_t face = rng.index(6);
  const double u = rng.uniform(-1.0, 1.0);
  const double v = rng.uniform(-1.0, 1.0);
  const int axis = static_cast<int>(face / 2);
  const double side = face % 2 == 0 ? -1.0 : 1.0;
  out[axis] = side;
  out[(axis + 1) % 3] = u;
  out[(axis + 2) % 3] = v;
}

inline void sample_torus(Rng& rng, double* out) {
  const double major = 0.7, minor = 0.3;
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  double phi = 0.0;
  // Rejection sampling keeps the surface density uniform in area.
  while (true) {
    phi = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform() < (major + minor * std::cos(phi)) / (major + minor)) break;
  }
  const double ring = major + minor * std::cos(phi);
  out[0] = ring * std::cos(theta);
  out[1] = ring * std::sin(theta);
  out[2] = minor * std::sin(phi);
}

inline void sample_cylinder(Rng& rng, double* out) {
  const double radius = 0.5, height = 1.6;
  const double side_area = 2.0 * kPi * radius * height;
  const double cap_area = kPi * radius * radius;
  const double pick = rng.uniform(0.0, side_area + 2.0 * cap_area);
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  if (pick < side_area) {
    out[0] = radius * std::cos(theta);
    out[1] = radius * std::sin(theta);
    out[2] = rng.uniform(-height / 2.0, height / 2.0);
  } else {
    const double r = radius * std::sqrt(rng.uniform());
    out[0] = r * std::cos(theta);
    out[1] = r * std::sin(theta);
    out[2] = pick < side_area + cap_area ? -height / 2.0 : height / 2.0;
  }
}

// Capsule: cylinder side from z = 0 to h plus a bottom disk, capped by a
// hemisphere of the same radius centered at (0, 0, h). Part 0 is the body,
// part 1 the cap; the part boundary is the rim circle at z = h.
inline int sample_capsule(Rng& rng, double radius, double height, double* out) {
  const double side_area = 2.0 * kPi * radius * height;
  const double disk_area = kPi * radius * radius;
  const double cap_area = 2.0 * kPi * radius * radius;
  const double pick = rng.uniform(0.0, side_area + disk_area + cap_area);
  const double theta = rng.uniform(0.0, 2.0 * kPi);
  if (pick < side_area) {
    out[0] = radius * std::cos(theta);
    out[1] = radius * std::sin(theta);
    out[2] = rng.uniform(0.0, height);
    return 0;
  }
  if (pick < side_area + disk_area) {
    const double r = radius * std::sqrt(rng.uniform());
    out[0] = r * std::cos(theta);
    out[1] = r * std::sin(theta);
    out[2] = 0.0;
    return 0;
  }
  double dir[3];
  do {
    sample_sphere(rng, dir);
  } while (dir[2] < 0.0);
  out[0] = radius * dir[0];
  out[1] = radius * dir[1];
  out[2] = height + radius * dir[2];
  return 1;
}

// Distance from a point to the capsule's part-boundary rim circle (radius r
// at z = h around the axis).
inline double rim_distance(const double* p, double radius, double height) {
  const double rho = std::hypot(p[0], p[1]);
  return std::hypot(rho - radius, p[2] - height);
}

inline PointCloud make_classification_cloud(ShapeFamily family, int label,
                                            const SyntheticTaskSpec& spec, Rng& rng) {
  const std::size_t n = spec.points_per_cloud;
  std::vector<double> pos(n * 3, 0.0);
  auto draw = [&](double* out) {
    switch (family) {
      case ShapeFamily::kSphere: sample_sphere(rng, out); break;
      case ShapeFamily::kCube: sample_cube(rng, out); break;
      case ShapeFamily::kTorus: sample_torus(rng, out); break;
      case ShapeFamily::kCylinder: sample_cylinder(rng, out); break;
      case ShapeFamily::kCapsule: sample_capsule(rng, 0.35, 0.9, out); break;
    }
  };
  // Antithetic pairs: every sample comes with its antipode, so centrally
  // symmetric families stay exactly centered and the unit-ball normalization
  // does not move them off their surface (for even point counts). The capsule
  // has no central symmetry and is sampled plainly.
  if (family == ShapeFamily::kCapsule) {
    for (std::size_t i = 0; i < n; ++i) draw(pos.data() + 3 * i);
  } else {
    for (std::size_t i = 0; i + 1 < n; i += 2) {
      draw(pos.data() + 3 * i);
      for (int c = 0; c < 3; ++c) pos[3 * (i + 1) + c] = -pos[3 * i + c];
    }
    if (n % 2 == 1) draw(pos.data() + 3 * (n - 1));
  }
  for (auto& v : pos) v += rng.normal(0.0, spec.noise_sigma);
  PointCloud cloud;
  cloud.positions = Tensor::from_data({n, 3}, std::move(pos));
  cloud.labels.assign(n, label);
  return normalize_unit_ball(cloud);
}

}  // namespace synth_detail

// Deterministic synthetic datasets: the same spec always produces bit
// identical clouds. Classification draws one shape family per cloud;
// part segmentation draws capsules with analytically known part boundaries.
inline SyntheticDataset generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  SyntheticDataset data;
  data.spec = spec;

  auto fill_split = [&](SyntheticSplit& split, std::size_t count, std::uint64_t split_tag) {
    for (std::size_t i = 0; i < count; ++i) {
      Rng rng(Rng::mix(Rng::mix(spec.seed, split_tag), i));
      if (spec.task == Task::kClassification) {
        const int label = static_cast<int>(i % spec.shapes.size());
        split.clouds.push_back(
            synth_detail::make_classification_cloud(spec.shapes[label], label, spec, rng));
      } else {
        const double radius = rng.uniform(0.25, 0.4);
        const double height = rng.uniform(0.6, 1.2);
        const std::size_t n = spec.points_per_cloud;
        std::vector<double> pos(n * 3);
        std::vector<int> labels(n);
        for (std::size_t p = 0; p < n; ++p) {
          labels[p] = synth_detail::sample_capsule(rng, radius, height, pos.data() + 3 * p);
          for (int c = 0; c < 3; ++c) pos[3 * p + c] += rng.normal(0.0, spec.noise_sigma);
        }
        PointCloud cloud;
        cloud.positions = Tensor::from_data({n, 3}, pos);
        cloud.labels = std::move(labels);
        cloud.object_class = {1.0};
        ShapeMeta meta;
        meta.family = ShapeFamily::kCapsule;
        meta.radius = radius;
        meta.height = height;
        PointCloud normalized = normalize_unit_ball(cloud, &meta.transform);
        std::vector<double> boundary(n);
        for (std::size_t p = 0; p < n; ++p) {
          boundary[p] =
              synth_detail::rim_distance(pos.data() + 3 * p, radius, height) * meta.transform.scale;
        }
        split.clouds.push_back(std::move(normalized));
        split.boundary_distance.push_back(std::move(boundary));
        split.meta.push_back(meta);
      }
    }
  };

  fill_split(data.train, spec.train_count, 0x7261696eULL);
  fill_split(data.test, spec.test_count, 0x74657374ULL);
  data.num_classes =
      spec.task == Task::kClassification ? spec.shapes.size() : 2;
  data.num_categories = spec.task == Task::kClassification ? 0 : 1;
  return data;
}

}  // namespace pointlap
