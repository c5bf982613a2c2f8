#pragma once

// Plain-text point data: .xyz points, .normals vectors, .pidx index lists.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/geometry.hpp"

namespace ngf {

namespace detail {

inline bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write '" + path + "'");
  return out;
}

inline PointMatrix read_triples(std::istream& in, const std::string& what) {
  std::vector<Vec3> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    std::istringstream fields(line);
    Vec3 p;
    if (!(fields >> p.x() >> p.y() >> p.z())) {
      throw data_error(what + ": line " + std::to_string(line_no) + " has fewer than 3 numbers");
    }
    rows.push_back(p);
  }
  PointMatrix m(static_cast<Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
  return m;
}

inline void write_triples(std::ostream& out, const PointMatrix& m, const char* format) {
  char buf[128];
  for (Index i = 0; i < m.rows(); ++i) {
    std::snprintf(buf, sizeof buf, format, m(i, 0), m(i, 1), m(i, 2));
    out << buf << '\n';
  }
}

}  // namespace detail

/// One point per line, whitespace separated; columns after the third are ignored.
inline PointMatrix read_xyz(const std::string& path) {
  auto in = detail::open_input(path);
  PointMatrix points = detail::read_triples(in, path);
  check_points(points);
  return points;
}

inline void write_xyz(const std::string& path, const PointMatrix& points) {
  auto out = detail::open_output(path);
  detail::write_triples(out, points, "%.17g %.17g %.17g");
}

inline PointMatrix read_normals(const std::string& path) {
  auto in = detail::open_input(path);
  PointMatrix normals = detail::read_triples(in, path);
  if (!normals.allFinite()) throw data_error(path + ": non-finite normal");
  return normals;
}

inline void write_normals(const std::string& path, const PointMatrix& normals) {
  auto out = detail::open_output(path);
  detail::write_triples(out, normals, "%.9f %.9f %.9f");
}

/// One point index per line.
inline std::vector<Index> read_pidx(const std::string& path) {
  auto in = detail::open_input(path);
  std::vector<Index> indices;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::blank(line)) continue;
    std::istringstream fields(line);
    long long v = -1;
    if (!(fields >> v) || v < 0) {
      throw data_error(path + ": line " + std::to_string(line_no) + " is not an index");
    }
    indices.push_back(static_cast<Index>(v));
  }
  return indices;
}

}  // namespace ngf
