#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/geometry.hpp"

namespace ngf {

struct AngleStats {
  std::vector<double> angles;  // degrees, per point
  double rmse = 0.0;
  /// (threshold in degrees, fraction of points with angle <= threshold), 1 degree apart.
  std::vector<std::pair<double, double>> pgp;
};

inline double radians_to_degrees(double r) { return r * 180.0 / std::numbers::pi; }

/// Angles between predicted and reference normals, optionally restricted to `subset`.
///
/// Oriented angles lie in [0, 180]; unoriented angles ignore the sign and lie in [0, 90].
inline AngleStats angle_errors(const PointMatrix& pred, const PointMatrix& gt, bool oriented,
                               const std::optional<std::vector<Index>>& subset = std::nullopt) {
  if (pred.rows() != gt.rows()) {
    throw data_error("normal count mismatch: " + std::to_string(pred.rows()) + " predicted vs " +
                     std::to_string(gt.rows()) + " reference");
  }
  std::vector<Index> rows;
  if (subset) {
    rows = *subset;
    for (Index i : rows) {
      if (i < 0 || i >= pred.rows()) throw data_error("evaluation index " + std::to_string(i) + " out of range");
    }
  } else {
    rows.resize(static_cast<std::size_t>(pred.rows()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  }
  if (rows.empty()) throw data_error("no normals to evaluate");

  AngleStats stats;
  stats.angles.reserve(rows.size());
  double sum_sq = 0.0;
  for (Index i : rows) {
    const Vec3 p = pred.row(i).normalized();
    const Vec3 g = gt.row(i).normalized();
    const double dot = p.dot(g);
    const double c = oriented ? std::clamp(dot, -1.0, 1.0) : std::clamp(std::abs(dot), 0.0, 1.0);
    const double angle = radians_to_degrees(std::acos(c));
    stats.angles.push_back(angle);
    sum_sq += angle * angle;
  }
  stats.rmse = std::sqrt(sum_sq / static_cast<double>(rows.size()));

  std::vector<double> sorted = stats.angles;
  std::sort(sorted.begin(), sorted.end());
  const int max_threshold = oriented ? 180 : 90;
  for (int t = 0; t <= max_threshold; ++t) {
    const auto good = std::upper_bound(sorted.begin(), sorted.end(), static_cast<double>(t)) - sorted.begin();
    stats.pgp.emplace_back(t, static_cast<double>(good) / static_cast<double>(sorted.size()));
  }
  return stats;
}

/// Fraction of points with angle <= threshold degrees.
inline double pgp_at(const AngleStats& stats, double threshold) {
  const auto good = std::count_if(stats.angles.begin(), stats.angles.end(),
                                  [&](double a) { return a <= threshold; });
  return static_cast<double>(good) / static_cast<double>(stats.angles.size());
}

inline void write_pgp_csv(const std::string& path, const AngleStats& stats) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write '" + path + "'");
  out << "threshold_deg,fraction\n";
  char buf[64];
  for (const auto& [t, f] : stats.pgp) {
    std::snprintf(buf, sizeof buf, "%g,%.6f", t, f);
    out << buf << '\n';
  }
}

struct SymmetricEigen3 {
  Vec3 values;   // ascending
  Vec3 smallest_vector;
};

/// Sign convention for reported eigenvectors: the component of largest magnitude is
/// positive (ties go to the lowest axis).
inline Vec3 canonical_sign(const Vec3& v) {
  Index axis = 0;
  for (Index i = 1; i < 3; ++i) {
    if (std::abs(v[i]) > std::abs(v[axis])) axis = i;
  }
  return v[axis] < 0.0 ? Vec3(-v) : v;
}

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues ascending.
/// Uses Eigen's QR iteration: the closed-form cubic loses ~sqrt(eps) on rank-deficient input.
inline SymmetricEigen3 symmetric_eigen3(const Eigen::Matrix3d& input) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(input);
  SymmetricEigen3 out;
  out.values = solver.eigenvalues();
  out.smallest_vector = canonical_sign(solver.eigenvectors().col(0));
  return out;
}

/// Plane-fit normals: the smallest-eigenvalue direction of each point's centered
/// k-neighborhood covariance. Unoriented; the sign follows canonical_sign().
inline PointMatrix pca_normals(const PointCloud& cloud, Index k) {
  if (k < 3) throw usage_error("PCA neighborhoods need k >= 3");
  if (k > cloud.size()) {
    throw usage_error("k = " + std::to_string(k) + " exceeds cloud size " + std::to_string(cloud.size()));
  }
  const NeighborIndex index(cloud.points);
  PointMatrix normals(cloud.size(), 3);
  std::vector<Neighbor> nbrs;
  for (Index i = 0; i < cloud.size(); ++i) {
    index.knn(cloud.point(i), k, nbrs);
    Vec3 mean = Vec3::Zero();
    for (const Neighbor& nb : nbrs) mean += index.point(nb.index);
    mean /= static_cast<double>(k);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const Neighbor& nb : nbrs) {
      const Vec3 v = index.point(nb.index) - mean;
      cov += v * v.transpose();
    }
    const SymmetricEigen3 eig = symmetric_eigen3(cov);
    // Needs two non-trivial directions to define a plane.
    if (!(eig.values[1] > 1e-12 * eig.values[2]) || !(eig.values[2] > 0.0)) {
      throw DegenerateNeighborhood(static_cast<std::size_t>(i));
    }
    normals.row(i) = eig.smallest_vector.transpose();
  }
  return normals;
}

/// Benchmark noise/density categories, in table column order.
inline const std::array<std::string, 6>& benchmark_categories() {
  static const std::array<std::string, 6> names = {"none", "0.12%", "0.6%", "1.2%", "stripe", "gradient"};
  return names;
}

struct ShapeResult {
  std::string name;
  std::string category;
  double rmse = 0.0;
};

struct BenchmarkTable {
  /// Mean shape RMSE per category; categories without shapes are absent.
  std::map<std::string, double> category_mean;
  /// Mean of the category means.
  double average = 0.0;
};

inline BenchmarkTable aggregate_benchmark(const std::vector<ShapeResult>& results) {
  const auto& names = benchmark_categories();
  std::map<std::string, std::pair<double, int>> acc;
  for (const ShapeResult& r : results) {
    if (std::find(names.begin(), names.end(), r.category) == names.end()) {
      throw data_error("unknown benchmark category '" + r.category + "' for shape " + r.name);
    }
    auto& [sum, count] = acc[r.category];
    sum += r.rmse;
    ++count;
  }
  if (acc.empty()) throw data_error("no benchmark results to aggregate");
  BenchmarkTable table;
  double sum = 0.0;
  // Column order, so the average sums categories in a fixed order.
  for (const std::string& name : names) {
    if (auto it = acc.find(name); it != acc.end()) {
      const double mean = it->second.first / it->second.second;
      table.category_mean[name] = mean;
      sum += mean;
    }
  }
  table.average = sum / static_cast<double>(table.category_mean.size());
  return table;
}

}  // namespace ngf
