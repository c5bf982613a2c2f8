#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/geometry.hpp"

namespace ngf {

struct SamplerConfig {
  Index n_query = 5000;
  Index n_surface = 2500;
  /// sigma_p is the distance from p to its ell-th nearest neighbor.
  Index ell = 25;
  std::uint64_t seed = 0;

  void validate(Index cloud_size) const {
    if (n_query < 1) throw usage_error("n_query must be at least 1");
    if (n_surface < 0 || n_surface > cloud_size) {
      throw usage_error("n_surface = " + std::to_string(n_surface) + " exceeds cloud size " +
                        std::to_string(cloud_size));
    }
    if (ell < 1 || ell >= cloud_size) {
      throw usage_error("ell = " + std::to_string(ell) + " must lie in [1, " +
                        std::to_string(cloud_size - 1) + "]");
    }
  }
};

/// Neighborhood sizes K_s for the multi-scale displacement targets.
struct ScaleSet {
  std::vector<Index> sizes{1, 4, 8};

  void validate() const {
    if (sizes.empty()) throw usage_error("scale set is empty");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 1) throw usage_error("scale sizes must be >= 1");
      if (i > 0 && sizes[i] <= sizes[i - 1]) {
        throw usage_error("scale sizes must be strictly increasing");
      }
    }
  }

  Index largest() const { return sizes.back(); }
};

/// One training batch: Gaussian queries Q around the data, surface samples G from the
/// data, their nearest data points, and per-scale neighborhood means of each query.
struct QueryBatch {
  PointMatrix queries;          // Q
  PointMatrix surface;          // G
  PointMatrix query_targets;    // nearest point of each q in P
  PointMatrix surface_targets;  // nearest point of each g in P (g itself)
  std::vector<Index> surface_indices;
  /// neighborhood_means[s].row(j): mean of the sizes[s] nearest data points of q_j.
  std::vector<PointMatrix> neighborhood_means;

  Index n_query() const { return queries.rows(); }
  Index n_surface() const { return surface.rows(); }
};

namespace detail {
inline void erase_row(PointMatrix& m, Index r) {
  m.middleRows(r, m.rows() - r - 1) = m.bottomRows(m.rows() - r - 1).eval();
  m.conservativeResize(m.rows() - 1, Eigen::NoChange);
}
}  // namespace detail

/// Removes one row of the stacked [Q; G] layout: rows below n_query() are queries.
inline void drop_row(QueryBatch& batch, Index row) {
  if (row < 0 || row >= batch.n_query() + batch.n_surface()) throw usage_error("batch row out of range");
  if (row < batch.n_query()) {
    detail::erase_row(batch.queries, row);
    detail::erase_row(batch.query_targets, row);
    for (PointMatrix& m : batch.neighborhood_means) detail::erase_row(m, row);
  } else {
    const Index r = row - batch.n_query();
    detail::erase_row(batch.surface, r);
    detail::erase_row(batch.surface_targets, r);
    batch.surface_indices.erase(batch.surface_indices.begin() + r);
  }
}

/// Distance from every point to its ell-th nearest other point.
inline Eigen::VectorXd per_point_sigma(const NeighborIndex& index, Index ell) {
  const Index n = index.size();
  if (ell < 1 || ell >= n) {
    throw usage_error("ell = " + std::to_string(ell) + " needs a cloud of more than " +
                      std::to_string(ell) + " points");
  }
  Eigen::VectorXd sigma(n);
  std::vector<Neighbor> nbrs;
  for (Index i = 0; i < n; ++i) {
    index.knn(index.point(i), ell + 1, nbrs);
    // Drop the point itself; with duplicates it may have lost the tie-break, in which
    // case the last entry is the surplus one.
    auto self = std::find_if(nbrs.begin(), nbrs.end(), [&](const Neighbor& nb) { return nb.index == i; });
    if (self != nbrs.end()) {
      nbrs.erase(self);
    } else {
      nbrs.pop_back();
    }
    sigma(i) = nbrs.back().distance;
  }
  return sigma;
}

inline Eigen::VectorXd per_point_sigma(const PointCloud& cloud, Index ell) {
  return per_point_sigma(NeighborIndex(cloud.points), ell);
}

/// Draws a batch. `sigma` is per_point_sigma(index, cfg.ell), computed once per shape.
template <typename Rng>
QueryBatch sample_batch(const NeighborIndex& index, const Eigen::VectorXd& sigma,
                        const SamplerConfig& cfg, const ScaleSet& scales, Rng& rng) {
  const Index n = index.size();
  cfg.validate(n);
  scales.validate();
  if (scales.largest() > n) throw usage_error("largest neighborhood scale exceeds cloud size");
  if (sigma.size() != n) throw usage_error("sigma length does not match the cloud");

  std::uniform_int_distribution<Index> pick(0, n - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);

  QueryBatch batch;
  batch.queries.resize(cfg.n_query, 3);
  for (Index j = 0; j < cfg.n_query; ++j) {
    const Index p = pick(rng);
    const Vec3 e{gauss(rng), gauss(rng), gauss(rng)};
    batch.queries.row(j) = (index.point(p) + sigma(p) * e).transpose();
  }

  // Partial Fisher-Yates: the first n_surface entries form a uniform subset.
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index j = 0; j < cfg.n_surface; ++j) {
    std::uniform_int_distribution<Index> rest(j, n - 1);
    std::swap(order[static_cast<std::size_t>(j)], order[static_cast<std::size_t>(rest(rng))]);
  }
  batch.surface_indices.assign(order.begin(), order.begin() + cfg.n_surface);
  batch.surface.resize(cfg.n_surface, 3);
  for (Index j = 0; j < cfg.n_surface; ++j) {
    batch.surface.row(j) = index.points().row(batch.surface_indices[static_cast<std::size_t>(j)]);
  }
  // The nearest data point of g (self included) is g itself.
  batch.surface_targets = batch.surface;

  batch.query_targets.resize(cfg.n_query, 3);
  batch.neighborhood_means.assign(scales.sizes.size(), PointMatrix(cfg.n_query, 3));
  std::vector<Neighbor> nbrs;
  for (Index j = 0; j < cfg.n_query; ++j) {
    const Vec3 q = batch.queries.row(j).transpose();
    index.knn(q, scales.largest(), nbrs);
    batch.query_targets.row(j) = index.points().row(nbrs.front().index);
    Vec3 acc = Vec3::Zero();
    std::size_t s = 0;
    for (Index k = 0; k < scales.largest(); ++k) {
      acc += index.point(nbrs[static_cast<std::size_t>(k)].index);
      if (k + 1 == scales.sizes[s]) {
        batch.neighborhood_means[s].row(j) = (acc / static_cast<double>(k + 1)).transpose();
        ++s;
      }
    }
  }
  return batch;
}

}  // namespace ngf
