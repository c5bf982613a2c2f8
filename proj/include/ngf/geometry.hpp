#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <limits>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ngf/errors.hpp"

namespace ngf {

using Index = Eigen::Index;
using Vec3 = Eigen::Vector3d;
/// N x 3 matrix, one point (or normal) per row.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Squared Euclidean distance, written out so that every caller sums in the same order.
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

/// Maps input coordinates to the normalized (unit-ball) model frame and back.
struct NormalizationTransform {
  Vec3 centroid = Vec3::Zero();
  double scale = 1.0;  // input units per model unit

  Vec3 to_model(const Vec3& p) const { return (p - centroid) / scale; }
  Vec3 to_input(const Vec3& p) const { return p * scale + centroid; }

  PointMatrix to_model(const PointMatrix& points) const {
    PointMatrix out(points.rows(), 3);
    for (Index i = 0; i < points.rows(); ++i) {
      out.row(i) = to_model(Vec3(points.row(i).transpose())).transpose();
    }
    return out;
  }

  PointMatrix to_input(const PointMatrix& points) const {
    PointMatrix out(points.rows(), 3);
    for (Index i = 0; i < points.rows(); ++i) {
      out.row(i) = to_input(Vec3(points.row(i).transpose())).transpose();
    }
    return out;
  }
};

/// Raw points with optional reference normals.
///
/// Clouds produced by normalize() live in the model frame: centroid at the origin and
/// every point inside the unit ball. `transform` maps them back to the input frame.
struct PointCloud {
  PointMatrix points;
  std::optional<PointMatrix> gt_normals;
  NormalizationTransform transform;

  Index size() const { return points.rows(); }
  Vec3 point(Index i) const { return points.row(i).transpose(); }
};

inline void check_points(const PointMatrix& points) {
  if (points.rows() == 0) throw data_error("point cloud is empty");
  if (!points.allFinite()) {
    for (Index i = 0; i < points.rows(); ++i) {
      if (!points.row(i).allFinite()) {
        throw data_error("non-finite coordinate at point " + std::to_string(i));
      }
    }
  }
}

/// Centers at the centroid and scales the farthest point onto the unit sphere.
inline PointCloud normalize(const PointMatrix& points) {
  check_points(points);
  const Index n = points.rows();
  Vec3 centroid = Vec3::Zero();
  for (Index i = 0; i < n; ++i) centroid += points.row(i).transpose();
  centroid /= static_cast<double>(n);

  double radius = 0.0;
  for (Index i = 0; i < n; ++i) {
    radius = std::max(radius, (points.row(i).transpose() - centroid).norm());
  }
  // A single distinct location has no extent; keep the scale at one.
  if (radius == 0.0) radius = 1.0;

  PointCloud cloud;
  cloud.transform = {centroid, radius};
  cloud.points = cloud.transform.to_model(points);
  return cloud;
}

inline PointCloud normalize(const PointMatrix& points, const std::optional<PointMatrix>& normals) {
  PointCloud cloud = normalize(points);
  if (normals) {
    if (normals->rows() != points.rows()) {
      throw data_error("normal count " + std::to_string(normals->rows()) +
                       " does not match point count " + std::to_string(points.rows()));
    }
    cloud.gt_normals = *normals;
  }
  return cloud;
}

struct Neighbor {
  Index index;
  double distance;
};

/// Exact k-nearest-neighbor search over a fixed point set (kd-tree).
///
/// Results are sorted by ascending distance with ties broken by the lower point index,
/// so they coincide with a brute-force scan. Immutable after construction; concurrent
/// queries are safe.
class NeighborIndex {
 public:
  explicit NeighborIndex(const PointMatrix& points, Index leaf_size = 12)
      : points_(points), leaf_size_(std::max<Index>(leaf_size, 1)) {
    check_points(points_);
    order_.resize(static_cast<std::size_t>(points_.rows()));
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<Index>(i);
    nodes_.reserve(2 * order_.size() / static_cast<std::size_t>(leaf_size_) + 1);
    build(0, static_cast<Index>(order_.size()));
  }

  Index size() const { return points_.rows(); }
  const PointMatrix& points() const { return points_; }
  Vec3 point(Index i) const { return points_.row(i).transpose(); }

  std::vector<Neighbor> knn(const Vec3& q, Index k) const {
    std::vector<Neighbor> out;
    knn(q, k, out);
    return out;
  }

  void knn(const Vec3& q, Index k, std::vector<Neighbor>& out) const {
    if (k < 1 || k > size()) {
      throw usage_error("k = " + std::to_string(k) + " outside [1, " + std::to_string(size()) +
                        "]");
    }
    Heap heap;
    search(0, q, k, heap);
    out.resize(heap.size());
    for (auto it = out.rbegin(); it != out.rend(); ++it) {
      *it = {heap.top().second, std::sqrt(heap.top().first)};
      heap.pop();
    }
  }

 private:
  struct Node {
    Index begin, end;  // range into order_
    int axis = -1;     // -1 for leaves
    double split = 0.0;
    Index left = -1, right = -1;
  };

  // Max-heap on (squared distance, index); the top is the current worst candidate.
  using Candidate = std::pair<double, Index>;
  using Heap = std::priority_queue<Candidate>;

  Index build(Index begin, Index end) {
    const Index id = static_cast<Index>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= leaf_size_) return id;

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (Index i = begin; i < end; ++i) {
      lo = lo.cwiseMin(point(order_[i]));
      hi = hi.cwiseMax(point(order_[i]));
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] == lo[axis]) return id;  // all coincident: keep as a leaf

    const Index mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](Index a, Index b) { return points_(a, axis) < points_(b, axis); });
    const double split = points_(order_[mid], axis);
    const Index left = build(begin, mid);
    const Index right = build(mid, end);
    Node& node = nodes_[static_cast<std::size_t>(id)];
    node.axis = axis;
    node.split = split;
    node.left = left;
    node.right = right;
    return id;
  }

  void search(Index id, const Vec3& q, Index k, Heap& heap) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.axis < 0) {
      for (Index i = node.begin; i < node.end; ++i) {
        const Index p = order_[i];
        const Candidate c{squared_distance(q, point(p)), p};
        if (static_cast<Index>(heap.size()) < k) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    // Left child holds coordinates <= split, right child >= split.
    const double diff = q[node.axis] - node.split;
    const Index near = diff <= 0.0 ? node.left : node.right;
    const Index far = diff <= 0.0 ? node.right : node.left;
    search(near, q, k, heap);
    // Equal distances must still be visited: a lower index may win the tie.
    if (static_cast<Index>(heap.size()) < k || diff * diff <= heap.top().first) {
      search(far, q, k, heap);
    }
  }

  PointMatrix points_;
  Index leaf_size_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

enum class ShapeKind { Sphere, Torus, Cube, Plane };

inline ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "sphere") return ShapeKind::Sphere;
  if (name == "torus") return ShapeKind::Torus;
  if (name == "cube") return ShapeKind::Cube;
  if (name == "plane") return ShapeKind::Plane;
  throw usage_error("unknown shape kind '" + std::string(name) + "'");
}

/// Analytic test shapes in their native frame (identity transform).
struct ShapeParams {
  double torus_major = 0.7;
  double torus_minor = 0.3;
  double cube_half_extent = 0.5;
  double plane_half_extent = 1.0;
};

/// Samples `n` points uniformly by area on an analytic surface, stores the outward
/// normal of each pre-noise sample as gt_normals, then adds isotropic Gaussian noise.
inline PointCloud synth_shape(ShapeKind kind, Index n, double noise_sigma, std::uint64_t seed,
                              const ShapeParams& params = {}) {
  if (n < 1) throw usage_error("synth_shape needs at least one point");
  if (!(noise_sigma >= 0.0)) throw usage_error("noise sigma must be non-negative");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  PointCloud cloud;
  cloud.points.resize(n, 3);
  PointMatrix normals(n, 3);

  for (Index i = 0; i < n; ++i) {
    Vec3 p, nrm;
    switch (kind) {
      case ShapeKind::Sphere: {
        Vec3 g;
        do {
          g = {gauss(rng), gauss(rng), gauss(rng)};
        } while (g.squaredNorm() < 1e-24);
        nrm = g.normalized();
        p = nrm;
        break;
      }
      case ShapeKind::Torus: {
        const double big = params.torus_major, small = params.torus_minor;
        double u, v;
        // Area element is proportional to (R + r cos v).
        do {
          u = 2.0 * std::numbers::pi * uniform(rng);
          v = 2.0 * std::numbers::pi * uniform(rng);
        } while (uniform(rng) * (big + small) > big + small * std::cos(v));
        const double ring = big + small * std::cos(v);
        p = {ring * std::cos(u), ring * std::sin(u), small * std::sin(v)};
        nrm = {std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v)};
        break;
      }
      case ShapeKind::Cube: {
        const double a = params.cube_half_extent;
        const auto face = static_cast<int>(uniform(rng) * 6.0) % 6;
        const int axis = face / 2;
        const double side = face % 2 == 0 ? 1.0 : -1.0;
        const double s = (2.0 * uniform(rng) - 1.0) * a;
        const double t = (2.0 * uniform(rng) - 1.0) * a;
        p = Vec3::Zero();
        nrm = Vec3::Zero();
        p[axis] = side * a;
        p[(axis + 1) % 3] = s;
        p[(axis + 2) % 3] = t;
        nrm[axis] = side;
        break;
      }
      case ShapeKind::Plane: {
        const double a = params.plane_half_extent;
        p = {(2.0 * uniform(rng) - 1.0) * a, (2.0 * uniform(rng) - 1.0) * a, 0.0};
        nrm = Vec3::UnitZ();
        break;
      }
    }
    if (noise_sigma > 0.0) {
      const Vec3 e{gauss(rng), gauss(rng), gauss(rng)};
      p += noise_sigma * e;
    }
    cloud.points.row(i) = p.transpose();
    normals.row(i) = nrm.transpose();
  }
  cloud.gt_normals = std::move(normals);
  return cloud;
}

inline PointCloud synth_shape(std::string_view kind, Index n, double noise_sigma,
                              std::uint64_t seed) {
  return synth_shape(parse_shape_kind(kind), n, noise_sigma, seed);
}

}  // namespace ngf
