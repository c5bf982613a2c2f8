#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ngf/detail/marching_cubes_tables.hpp"
#include "ngf/errors.hpp"
#include "ngf/field.hpp"
#include "ngf/geometry.hpp"

namespace ngf {

/// Rows evaluated per tape when sweeping many points through a field.
inline constexpr Index kEvalChunk = 4096;

template <typename F>
concept ValueField = requires(const F& field, const PointMatrix& points) {
  { field.values(points) } -> std::convertible_to<Eigen::VectorXd>;
};

/// f at many points, chunked; uses a value-only path when the field has one.
template <TapeField F>
Eigen::VectorXd field_values(const F& field, const PointMatrix& points) {
  Eigen::VectorXd out(points.rows());
  for (Index begin = 0; begin < points.rows(); begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, points.rows() - begin);
    const PointMatrix block = points.middleRows(begin, count);
    if constexpr (ValueField<F>) {
      out.segment(begin, count) = field.values(block);
    } else {
      out.segment(begin, count) = evaluate(field, block).values;
    }
  }
  return out;
}

/// f and grad f at many points, chunked.
template <TapeField F>
FieldSamples field_samples(const F& field, const PointMatrix& points) {
  FieldSamples out{Eigen::VectorXd(points.rows()), PointMatrix(points.rows(), 3)};
  for (Index begin = 0; begin < points.rows(); begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, points.rows() - begin);
    const FieldSamples s = evaluate(field, PointMatrix(points.middleRows(begin, count)));
    out.values.segment(begin, count) = s.values;
    out.grads.middleRows(begin, count) = s.grads;
  }
  return out;
}

struct NormalField {
  PointMatrix normals;
  /// Points whose gradient vanished; their normal was copied from the nearest valid point.
  std::vector<Index> defects;
};

/// Oriented normals at the points of a cloud: the unit field gradient in the model frame.
/// A uniform positive rescaling back to input units leaves directions unchanged.
template <TapeField F>
NormalField estimate_normals(const F& field, const PointCloud& cloud) {
  const FieldSamples s = field_samples(field, cloud.points);
  NormalField out{PointMatrix(cloud.size(), 3), {}};
  std::vector<char> valid(static_cast<std::size_t>(cloud.size()), 1);
  for (Index i = 0; i < cloud.size(); ++i) {
    const double norm = s.grads.row(i).norm();
    if (norm >= kGradientEpsilon && std::isfinite(norm)) {
      out.normals.row(i) = s.grads.row(i) / norm;
    } else {
      valid[static_cast<std::size_t>(i)] = 0;
      out.defects.push_back(i);
    }
  }
  if (out.defects.empty()) return out;
  if (out.defects.size() == static_cast<std::size_t>(cloud.size())) {
    throw GradientVanished(static_cast<std::size_t>(out.defects.front()), 0.0);
  }

  const NeighborIndex index(cloud.points);
  std::vector<Neighbor> nbrs;
  for (const Index i : out.defects) {
    for (Index k = std::min<Index>(8, cloud.size());; k = std::min(2 * k, cloud.size())) {
      index.knn(cloud.point(i), k, nbrs);
      const auto hit = std::find_if(nbrs.begin(), nbrs.end(), [&](const Neighbor& nb) {
        return valid[static_cast<std::size_t>(nb.index)] != 0;
      });
      if (hit != nbrs.end()) {
        out.normals.row(i) = out.normals.row(hit->index);
        break;
      }
    }
  }
  return out;
}

/// Moves every point `steps` times along x' = x - f(x) * unit(grad f(x)).
template <TapeField F>
PointMatrix project_points(const F& field, const PointMatrix& points, int steps) {
  if (steps < 1) throw usage_error("projection needs at least one step");
  PointMatrix out = points;
  for (Index begin = 0; begin < points.rows(); begin += kEvalChunk) {
    const Index count = std::min(kEvalChunk, points.rows() - begin);
    Tape tape;
    NodeId position = tape.constant(PointMatrix(points.middleRows(begin, count)));
    for (int i = 0; i < steps; ++i) {
      const FieldNodes f = field.record(tape, position);
      const NodeId norm = tape.row_norm(f.grad);
      const Matrix& norms = tape.value(norm);
      for (Index r = 0; r < norms.rows(); ++r) {
        if (!(norms(r, 0) >= kGradientEpsilon)) {
          throw GradientVanished(static_cast<std::size_t>(begin + r), norms(r, 0));
        }
      }
      const NodeId unit = tape.row_scale(tape.reciprocal(norm), f.grad);
      position = tape.sub(position, tape.row_scale(f.value, unit));
    }
    out.middleRows(begin, count) = tape.value(position);
  }
  return out;
}

struct TriangleMesh {
  PointMatrix vertices;  // input units
  PointMatrix normals;   // unit field gradient at each vertex
  std::vector<std::array<Index, 3>> triangles;
};

struct GridBounds {
  Vec3 lo = Vec3::Constant(-1.1);
  Vec3 hi = Vec3::Constant(1.1);
};

/// Triangulates the zero level set of a field sampled on a regular grid of
/// `resolution` cells per axis (model frame), then maps vertices to input units.
///
/// Vertices are shared between neighboring cells, so a closed level set inside the
/// bounds yields a closed mesh. Triangles face the positive side of the field.
template <TapeField F>
TriangleMesh marching_cubes(const F& field, Index resolution, const GridBounds& bounds = {},
                            const NormalizationTransform& transform = {}) {
  if (resolution < 8) throw usage_error("marching cubes resolution must be at least 8");
  if (!(bounds.hi.array() > bounds.lo.array()).all()) throw usage_error("empty grid bounds");

  const Index n = resolution + 1;  // samples per axis
  const Vec3 step = (bounds.hi - bounds.lo) / static_cast<double>(resolution);
  auto grid_point = [&](Index i, Index j, Index k) {
    return Vec3(bounds.lo.x() + static_cast<double>(i) * step.x(),
                bounds.lo.y() + static_cast<double>(j) * step.y(),
                bounds.lo.z() + static_cast<double>(k) * step.z());
  };
  auto flat = [&](Index i, Index j, Index k) { return (k * n + j) * n + i; };

  // Sample slab by slab to bound memory.
  Eigen::VectorXd values(n * n * n);
  PointMatrix slab(n * n, 3);
  for (Index k = 0; k < n; ++k) {
    for (Index j = 0; j < n; ++j) {
      for (Index i = 0; i < n; ++i) slab.row(j * n + i) = grid_point(i, j, k).transpose();
    }
    values.segment(k * n * n, n * n) = field_values(field, slab);
  }
  if (!values.allFinite()) throw numerical_error("field is non-finite on the grid");
  if ((values.array() < 0.0).all() || (values.array() >= 0.0).all()) throw EmptySurface();

  // Corner c of a cell sits at offset (kCornerX[c], kCornerY[c], kCornerZ[c]);
  // edge e joins corners kEdgeCorners[e].
  static constexpr std::array<int, 8> kCornerX = {0, 1, 1, 0, 0, 1, 1, 0};
  static constexpr std::array<int, 8> kCornerY = {0, 0, 1, 1, 0, 0, 1, 1};
  static constexpr std::array<int, 8> kCornerZ = {0, 0, 0, 0, 1, 1, 1, 1};
  static constexpr std::array<std::array<int, 2>, 12> kEdgeCorners = {{
      {0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4},
      {0, 4}, {1, 5}, {2, 6}, {3, 7}}};

  std::unordered_map<std::int64_t, Index> edge_vertex;
  std::vector<Vec3> vertices;
  std::vector<std::array<Index, 3>> triangles;

  for (Index k = 0; k < resolution; ++k) {
    for (Index j = 0; j < resolution; ++j) {
      for (Index i = 0; i < resolution; ++i) {
        std::array<double, 8> f;
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          f[c] = values(flat(i + kCornerX[c], j + kCornerY[c], k + kCornerZ[c]));
          if (f[c] < 0.0) cube |= 1 << c;
        }
        if (detail::kEdgeTable[cube] == 0) continue;

        std::array<Index, 12> local{};
        for (int e = 0; e < 12; ++e) {
          if ((detail::kEdgeTable[cube] & (1 << e)) == 0) continue;
          const int a = kEdgeCorners[e][0], b = kEdgeCorners[e][1];
          const Index ia = i + kCornerX[a], ja = j + kCornerY[a], ka = k + kCornerZ[a];
          const Index ib = i + kCornerX[b], jb = j + kCornerY[b], kb = k + kCornerZ[b];
          // Key the vertex by the grid edge (lower endpoint and axis) so cells share it.
          const Index lo_flat = std::min(flat(ia, ja, ka), flat(ib, jb, kb));
          const int axis = ia != ib ? 0 : (ja != jb ? 1 : 2);
          const std::int64_t key = static_cast<std::int64_t>(lo_flat) * 3 + axis;
          auto [it, inserted] = edge_vertex.try_emplace(key, static_cast<Index>(vertices.size()));
          if (inserted) {
            const double t = f[a] / (f[a] - f[b]);
            const Vec3 pa = grid_point(ia, ja, ka), pb = grid_point(ib, jb, kb);
            vertices.push_back(pa + t * (pb - pa));
          }
          local[e] = it->second;
        }
        const auto& tri = detail::kTriangleTable[cube];
        for (int t = 0; tri[t] != -1; t += 3) {
          // The table winds triangles towards the negative side; flip to face outwards.
          // Zero-area triangles are kept: dropping them would open the mesh.
          triangles.push_back({local[tri[t]], local[tri[t + 2]], local[tri[t + 1]]});
        }
      }
    }
  }
  if (triangles.empty()) throw EmptySurface();

  PointMatrix model_vertices(static_cast<Index>(vertices.size()), 3);
  for (std::size_t v = 0; v < vertices.size(); ++v) {
    model_vertices.row(static_cast<Index>(v)) = vertices[v].transpose();
  }
  const FieldSamples s = field_samples(field, model_vertices);

  TriangleMesh mesh;
  mesh.vertices = transform.to_input(model_vertices);
  mesh.normals.resize(model_vertices.rows(), 3);
  for (Index v = 0; v < model_vertices.rows(); ++v) {
    const double norm = s.grads.row(v).norm();
    mesh.normals.row(v) = norm >= kGradientEpsilon ? (s.grads.row(v) / norm).eval()
                                                   : Eigen::RowVector3d::Zero().eval();
  }
  mesh.triangles = std::move(triangles);
  return mesh;
}

// ---------------------------------------------------------------------------------------
// ASCII PLY: vertices with x y z nx ny nz, faces as vertex index lists.

inline void write_ply(std::ostream& out, const TriangleMesh& mesh) {
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << mesh.vertices.rows() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "property float nx\nproperty float ny\nproperty float nz\n";
  out << "element face " << mesh.triangles.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  char buf[256];
  for (Index v = 0; v < mesh.vertices.rows(); ++v) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %.9g %.9g %.9g", mesh.vertices(v, 0),
                  mesh.vertices(v, 1), mesh.vertices(v, 2), mesh.normals(v, 0),
                  mesh.normals(v, 1), mesh.normals(v, 2));
    out << buf << '\n';
  }
  for (const auto& t : mesh.triangles) out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
}

inline void write_ply(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write '" + path + "'");
  write_ply(out, mesh);
}

/// Reads the ASCII layout produced by write_ply (vertex normals optional).
inline TriangleMesh read_ply(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw data_error("not a PLY file");
  Index n_vertices = -1, n_faces = -1;
  std::vector<std::string> vertex_props;
  std::string current;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      Index count = 0;
      ls >> current >> count;
      if (current == "vertex") n_vertices = count;
      if (current == "face") n_faces = count;
    } else if (word == "property" && current == "vertex") {
      std::string type, name;
      ls >> type >> name;
      vertex_props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw data_error("only ASCII PLY is supported");
  if (n_vertices < 0 || n_faces < 0) throw data_error("PLY header lacks vertex or face counts");
  auto column = [&](const std::string& name) -> int {
    for (std::size_t c = 0; c < vertex_props.size(); ++c) {
      if (vertex_props[c] == name) return static_cast<int>(c);
    }
    return -1;
  };
  const std::array<int, 6> cols = {column("x"), column("y"), column("z"),
                                   column("nx"), column("ny"), column("nz")};
  if (cols[0] < 0 || cols[1] < 0 || cols[2] < 0) throw data_error("PLY vertices lack x y z");

  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices, 3);
  mesh.normals = PointMatrix::Zero(n_vertices, 3);
  std::vector<double> row(vertex_props.size());
  for (Index v = 0; v < n_vertices; ++v) {
    for (double& x : row) {
      if (!(in >> x)) throw data_error("PLY vertex list truncated");
    }
    for (int c = 0; c < 3; ++c) mesh.vertices(v, c) = row[static_cast<std::size_t>(cols[c])];
    for (int c = 0; c < 3; ++c) {
      if (cols[3 + c] >= 0) mesh.normals(v, c) = row[static_cast<std::size_t>(cols[3 + c])];
    }
  }
  for (Index f = 0; f < n_faces; ++f) {
    int count = 0;
    if (!(in >> count) || count != 3) throw data_error("PLY face is not a triangle");
    std::array<Index, 3> t{};
    for (Index& idx : t) {
      if (!(in >> idx) || idx < 0 || idx >= n_vertices) throw data_error("bad PLY face index");
    }
    mesh.triangles.push_back(t);
  }
  return mesh;
}

inline TriangleMesh read_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  return read_ply(in);
}

}  // namespace ngf
