#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/field.hpp"
#include "ngf/sampling.hpp"
#include "ngf/tape.hpp"

namespace ngf {

struct LossConfig {
  int steps = 2;
  double rho = 60.0;
  double lambda1 = 0.01;  // consistency
  double lambda2 = 0.1;   // movement
  double lambda3 = 10.0;  // distance regression
  /// When false the consistency term uses unit weights instead of exp(-rho |f1|).
  bool confidence_weight = true;

  void validate() const {
    if (steps < 1) throw usage_error("steps must be at least 1");
    if (!(rho > 0.0)) throw usage_error("rho must be positive");
    if (!(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0)) {
      throw usage_error("loss weights must be non-negative");
    }
  }
};

struct LossBreakdown {
  double l_v = 0.0;
  double l_con = 0.0;
  double l_d = 0.0;
  double l_reg = 0.0;
  double total = 0.0;

  static LossBreakdown combine(double l_v, double l_con, double l_d, double l_reg,
                               const LossConfig& cfg) {
    return {l_v, l_con, l_d, l_reg,
            l_v + cfg.lambda1 * l_con + cfg.lambda2 * l_d + cfg.lambda3 * l_reg};
  }
};

/// One projection step x' = x - f(x) * unit(grad f(x)).
struct MoveStep {
  NodeId position;   // before the step
  NodeId value;      // f_i, rows x 1
  NodeId grad;       // raw gradient
  NodeId unit_grad;  // grad / |grad|
};

struct MoveChain {
  std::vector<MoveStep> steps;
  NodeId final_position;
};

/// Which rows of a tape batch are queries and how each term is averaged.
///
/// Rows [0, n_query) are queries, the following n_surface rows are surface samples.
/// Terms are means over the full batch, so a chunk of it uses the full-batch counts and
/// chunk contributions add up to the batch value.
struct RowLayout {
  Index n_query = 0;
  Index n_surface = 0;
  double query_total = 0.0;
  double surface_total = 0.0;

  Index rows() const { return n_query + n_surface; }

  static RowLayout whole(Index n_query, Index n_surface) {
    return {n_query, n_surface, static_cast<double>(n_query), static_cast<double>(n_surface)};
  }

  Eigen::VectorXd all_weights() const {
    const double total = query_total + surface_total;
    return Eigen::VectorXd::Constant(rows(), total > 0.0 ? 1.0 / total : 0.0);
  }

  Eigen::VectorXd surface_weights() const {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(rows());
    if (surface_total > 0.0) w.tail(n_surface).setConstant(1.0 / surface_total);
    return w;
  }

  Eigen::VectorXd query_weights() const {
    return Eigen::VectorXd::Constant(n_query, query_total > 0.0 ? 1.0 / query_total : 0.0);
  }
};

/// Records `steps` chained projections starting at `start`. Positions after the first
/// step are differentiable functions of the parameters.
template <TapeField F>
MoveChain move_chain(Tape& tape, const F& field, NodeId start, int steps) {
  if (steps < 1) throw usage_error("move chain needs at least one step");
  MoveChain chain;
  NodeId position = start;
  for (int i = 0; i < steps; ++i) {
    const FieldNodes out = field.record(tape, position);
    const NodeId norm = tape.row_norm(out.grad);
    const Matrix& norms = tape.value(norm);
    for (Index r = 0; r < norms.rows(); ++r) {
      if (!(norms(r, 0) >= kGradientEpsilon)) {
        throw GradientVanished(static_cast<std::size_t>(r), norms(r, 0));
      }
    }
    const NodeId unit = tape.row_scale(tape.reciprocal(norm), out.grad);
    chain.steps.push_back({position, out.value, out.grad, unit});
    position = tape.sub(position, tape.row_scale(out.value, unit));
  }
  chain.final_position = position;
  return chain;
}

/// Mean squared distance between the final positions and their targets.
inline NodeId loss_d(Tape& tape, const MoveChain& chain, const PointMatrix& targets,
                     const RowLayout& rows) {
  const NodeId diff = tape.sub(chain.final_position, tape.constant(targets));
  return tape.weighted_sum(tape.row_dot(diff, diff), rows.all_weights());
}

/// mean (f_1 on G)^2 plus, for every later step, mean f_i^2 over Q and G.
inline NodeId loss_reg(Tape& tape, const MoveChain& chain, const RowLayout& rows) {
  NodeId total = tape.weighted_sum(tape.square(chain.steps[0].value), rows.surface_weights());
  for (std::size_t i = 1; i < chain.steps.size(); ++i) {
    total = tape.add(total,
                     tape.weighted_sum(tape.square(chain.steps[i].value), rows.all_weights()));
  }
  return total;
}

/// Sum over scales of the mean over queries of |f_1 * unit_grad_1 - (q - mean_s(q))|^2.
///
/// `origins` are the query positions before any movement, `means[s]` their neighborhood
/// means at scale s (both n_query x 3).
inline NodeId loss_v(Tape& tape, const MoveChain& chain, const PointMatrix& origins,
                     const std::vector<PointMatrix>& means, const RowLayout& rows) {
  const MoveStep& first = chain.steps[0];
  const NodeId disp =
      tape.slice_rows(tape.row_scale(first.value, first.unit_grad), 0, rows.n_query);
  const Eigen::VectorXd weights = rows.query_weights();
  std::optional<NodeId> total;
  for (const PointMatrix& mean : means) {
    const NodeId diff = tape.sub(disp, tape.constant(origins - mean));
    const NodeId term = tape.weighted_sum(tape.row_dot(diff, diff), weights);
    total = total ? tape.add(*total, term) : term;
  }
  if (!total) throw usage_error("loss_v needs at least one scale");
  return *total;
}

/// Confidence-weighted cosine deficit between the first-step gradient and each later one,
/// averaged over Q and G together.
inline NodeId loss_con(Tape& tape, const MoveChain& chain, double rho, const RowLayout& rows,
                       bool confidence_weight = true) {
  if (chain.steps.size() < 2) return tape.constant(Matrix::Zero(1, 1));
  const MoveStep& first = chain.steps[0];
  std::optional<NodeId> weight;
  if (confidence_weight) weight = tape.exp(tape.scale(tape.abs(first.value), -rho));
  std::optional<NodeId> total;
  for (std::size_t i = 1; i < chain.steps.size(); ++i) {
    const NodeId cosine = tape.row_dot(first.unit_grad, chain.steps[i].unit_grad);
    NodeId deficit = tape.add_scalar(tape.scale(cosine, -1.0), 1.0);
    if (weight) deficit = tape.row_scale(*weight, deficit);
    const NodeId term = tape.weighted_sum(deficit, rows.all_weights());
    total = total ? tape.add(*total, term) : term;
  }
  return *total;
}

/// Contiguous subset of a batch: queries [query_begin, query_end) and surface samples
/// [surface_begin, surface_end).
struct BatchSlice {
  Index query_begin = 0, query_end = 0;
  Index surface_begin = 0, surface_end = 0;

  static BatchSlice all(const QueryBatch& batch) {
    return {0, batch.n_query(), 0, batch.n_surface()};
  }
};

struct RecordedLoss {
  LossBreakdown terms;  // this slice's contribution
  NodeId root;
  MoveChain chain;
};

/// Records the weighted total loss for a slice of a batch.
template <TapeField F>
RecordedLoss total_loss(Tape& tape, const F& field, const QueryBatch& batch,
                        const LossConfig& cfg, const BatchSlice& slice) {
  cfg.validate();
  const Index nq = slice.query_end - slice.query_begin;
  const Index ng = slice.surface_end - slice.surface_begin;
  const RowLayout rows{nq, ng, static_cast<double>(batch.n_query()),
                       static_cast<double>(batch.n_surface())};

  PointMatrix start(nq + ng, 3), targets(nq + ng, 3);
  start << batch.queries.middleRows(slice.query_begin, nq),
      batch.surface.middleRows(slice.surface_begin, ng);
  targets << batch.query_targets.middleRows(slice.query_begin, nq),
      batch.surface_targets.middleRows(slice.surface_begin, ng);
  const PointMatrix origins = batch.queries.middleRows(slice.query_begin, nq);
  std::vector<PointMatrix> means;
  for (const PointMatrix& m : batch.neighborhood_means) {
    means.push_back(m.middleRows(slice.query_begin, nq));
  }

  RecordedLoss out;
  out.chain = move_chain(tape, field, tape.constant(start), cfg.steps);
  const NodeId lv = loss_v(tape, out.chain, origins, means, rows);
  const NodeId lcon = loss_con(tape, out.chain, cfg.rho, rows, cfg.confidence_weight);
  const NodeId ld = loss_d(tape, out.chain, targets, rows);
  const NodeId lreg = loss_reg(tape, out.chain, rows);

  out.root = tape.add(tape.add(tape.add(lv, tape.scale(lcon, cfg.lambda1)),
                               tape.scale(ld, cfg.lambda2)),
                      tape.scale(lreg, cfg.lambda3));
  out.terms = LossBreakdown::combine(tape.scalar(lv), tape.scalar(lcon), tape.scalar(ld),
                                     tape.scalar(lreg), cfg);
  return out;
}

template <TapeField F>
RecordedLoss total_loss(Tape& tape, const F& field, const QueryBatch& batch,
                        const LossConfig& cfg) {
  return total_loss(tape, field, batch, cfg, BatchSlice::all(batch));
}

}  // namespace ngf
