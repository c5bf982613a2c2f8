#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "ngf/errors.hpp"

namespace ngf {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;

/// Handle to a value recorded on a Tape.
struct NodeId {
  std::size_t index = 0;
};

/// Batched reverse-mode differentiation over row-major point batches.
///
/// Every node holds a matrix whose rows are points. The op set is the small closed
/// family the field and its losses need (affine maps, rectifiers, masks, per-row vector
/// algebra and reductions); it is not a general autodiff engine. Parameters are leaves
/// identified by an integer slot, and backward() returns the adjoint of each slot.
///
/// The rectifier mask used by mask() is recorded as a constant: a rectifier's derivative
/// is piecewise constant, so the derivative of the mask itself is zero almost everywhere.
/// At exactly zero pre-activation the rectifier derivative is taken as 0.
class Tape {
 public:
  /// Parameter adjoints indexed by slot; slots never referenced stay empty.
  using Gradients = std::vector<Matrix>;

  NodeId constant(Matrix value) { return push(Op::Constant, std::move(value), {}, false); }

  /// Leaf for a trainable tensor. Repeated calls with the same slot return the same node.
  NodeId parameter(std::size_t slot, const Matrix& value) {
    if (auto it = slots_.find(slot); it != slots_.end()) return it->second;
    NodeId id = push(Op::Parameter, value, {}, true);
    nodes_[id.index].slot = slot;
    slots_.emplace(slot, id);
    return id;
  }

  /// x * w^T + 1 b, with w (out x in) and b (1 x out).
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    Matrix v = value(x) * value(w).transpose();
    v.rowwise() += value(b).row(0);
    return push(Op::Affine, std::move(v), {x, w, b});
  }

  /// x * w, with w (out x in): maps a row adjoint of a layer output to its input.
  NodeId matmul(NodeId x, NodeId w) { return push(Op::MatMul, value(x) * value(w), {x, w}); }

  NodeId relu(NodeId z) { return push(Op::Relu, value(z).cwiseMax(0.0), {z}); }

  /// x multiplied elementwise by the rectifier mask [z > 0]; the mask is constant.
  NodeId mask(NodeId x, NodeId z) {
    Matrix v = (value(z).array() > 0.0).select(value(x).array(), 0.0).matrix();
    Node node = make(Op::Mask, std::move(v), {x, z});
    node.needs_grad = needs(x);
    return push(std::move(node));
  }

  /// Repeats a single row `rows` times.
  NodeId broadcast_rows(NodeId row, Index rows) {
    Matrix v = value(row).row(0).replicate(rows, 1);
    return push(Op::BroadcastRows, std::move(v), {row});
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    const Matrix& va = value(a);
    const Matrix& vb = value(b);
    Matrix v(va.rows(), va.cols() + vb.cols());
    v << va, vb;
    return push(Op::ConcatCols, std::move(v), {a, b});
  }

  NodeId slice_cols(NodeId x, Index start, Index count) {
    Node node = make(Op::SliceCols, value(x).middleCols(start, count), {x});
    node.offset = start;
    return push(std::move(node));
  }

  NodeId slice_rows(NodeId x, Index start, Index count) {
    Node node = make(Op::SliceRows, value(x).middleRows(start, count), {x});
    node.offset = start;
    return push(std::move(node));
  }

  NodeId add(NodeId a, NodeId b) { return push(Op::Add, value(a) + value(b), {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return push(Op::Sub, value(a) - value(b), {a, b}); }

  NodeId add_scalar(NodeId x, double c) {
    return push(Op::AddScalar, (value(x).array() + c).matrix(), {x});
  }

  NodeId scale(NodeId x, double c) {
    Node node = make(Op::Scale, value(x) * c, {x});
    node.factor = c;
    return push(std::move(node));
  }

  /// Row r of x multiplied by column(r); column is (rows x 1).
  NodeId row_scale(NodeId column, NodeId x) {
    Matrix v = (value(x).array().colwise() * value(column).col(0).array()).matrix();
    return push(Op::RowScale, std::move(v), {column, x});
  }

  /// Per-row dot product, (rows x 1).
  NodeId row_dot(NodeId a, NodeId b) {
    Matrix v = value(a).cwiseProduct(value(b)).rowwise().sum();
    return push(Op::RowDot, std::move(v), {a, b});
  }

  /// Per-row Euclidean norm, (rows x 1).
  NodeId row_norm(NodeId x) {
    Matrix v = value(x).rowwise().norm();
    return push(Op::RowNorm, std::move(v), {x});
  }

  NodeId reciprocal(NodeId x) { return push(Op::Reciprocal, value(x).cwiseInverse(), {x}); }
  NodeId exp(NodeId x) { return push(Op::Exp, value(x).array().exp().matrix(), {x}); }
  NodeId abs(NodeId x) { return push(Op::Abs, value(x).cwiseAbs(), {x}); }
  NodeId square(NodeId x) { return push(Op::Square, value(x).cwiseAbs2(), {x}); }

  /// sum_r weights(r) * column(r), as a 1 x 1 node. The weights are constants.
  NodeId weighted_sum(NodeId column, const Eigen::VectorXd& weights) {
    Matrix v(1, 1);
    v(0, 0) = value(column).col(0).dot(weights);
    Node node = make(Op::WeightedSum, std::move(v), {column});
    node.aux = weights;
    return push(std::move(node));
  }

  NodeId sum(NodeId x) {
    Matrix v(1, 1);
    v(0, 0) = value(x).sum();
    return push(Op::Sum, std::move(v), {x});
  }

  const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }
  double scalar(NodeId id) const { return value(id)(0, 0); }
  bool needs(NodeId id) const { return nodes_.at(id.index).needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse pass from a 1 x 1 root. A tape can be differentiated once.
  Gradients backward(NodeId root) {
    if (consumed_) throw usage_error("tape already consumed by a backward pass");
    if (value(root).rows() != 1 || value(root).cols() != 1) {
      throw usage_error("backward root must be a scalar, got " +
                        std::to_string(value(root).rows()) + "x" +
                        std::to_string(value(root).cols()));
    }
    consumed_ = true;

    std::vector<Matrix> adj(nodes_.size());
    adj[root.index] = Matrix::Ones(1, 1);
    std::size_t max_slot = 0;
    for (const auto& [slot, id] : slots_) max_slot = std::max(max_slot, slot + 1);
    Gradients grads(max_slot);

    for (std::size_t i = root.index + 1; i-- > 0;) {
      if (adj[i].size() == 0) continue;
      Node& node = nodes_[i];
      if (!node.needs_grad) continue;
      const Matrix& d = adj[i];
      switch (node.op) {
        case Op::Constant:
          break;
        case Op::Parameter:
          grads[node.slot] = d;
          break;
        case Op::Affine: {
          const auto [x, w, b] = inputs3(node);
          if (needs(x)) accumulate(adj, x, d * value(w));
          if (needs(w)) accumulate(adj, w, d.transpose() * value(x));
          if (needs(b)) accumulate(adj, b, d.colwise().sum());
          break;
        }
        case Op::MatMul: {
          const NodeId x = node.inputs[0], w = node.inputs[1];
          if (needs(x)) accumulate(adj, x, d * value(w).transpose());
          if (needs(w)) accumulate(adj, w, value(x).transpose() * d);
          break;
        }
        case Op::Relu: {
          const NodeId z = node.inputs[0];
          accumulate(adj, z, (value(z).array() > 0.0).select(d.array(), 0.0).matrix());
          break;
        }
        case Op::Mask: {
          const NodeId x = node.inputs[0], z = node.inputs[1];
          accumulate(adj, x, (value(z).array() > 0.0).select(d.array(), 0.0).matrix());
          break;
        }
        case Op::BroadcastRows:
          accumulate(adj, node.inputs[0], d.colwise().sum());
          break;
        case Op::ConcatCols: {
          const NodeId a = node.inputs[0], b = node.inputs[1];
          const Index ca = value(a).cols();
          if (needs(a)) accumulate(adj, a, d.leftCols(ca));
          if (needs(b)) accumulate(adj, b, d.rightCols(d.cols() - ca));
          break;
        }
        case Op::SliceCols: {
          const NodeId x = node.inputs[0];
          ensure(adj, x);
          adj[x.index].middleCols(node.offset, d.cols()) += d;
          break;
        }
        case Op::SliceRows: {
          const NodeId x = node.inputs[0];
          ensure(adj, x);
          adj[x.index].middleRows(node.offset, d.rows()) += d;
          break;
        }
        case Op::Add:
          if (needs(node.inputs[0])) accumulate(adj, node.inputs[0], d);
          if (needs(node.inputs[1])) accumulate(adj, node.inputs[1], d);
          break;
        case Op::Sub:
          if (needs(node.inputs[0])) accumulate(adj, node.inputs[0], d);
          if (needs(node.inputs[1])) accumulate(adj, node.inputs[1], -d);
          break;
        case Op::AddScalar:
          accumulate(adj, node.inputs[0], d);
          break;
        case Op::Scale:
          accumulate(adj, node.inputs[0], d * node.factor);
          break;
        case Op::RowScale: {
          const NodeId c = node.inputs[0], x = node.inputs[1];
          if (needs(c)) accumulate(adj, c, d.cwiseProduct(value(x)).rowwise().sum());
          if (needs(x)) {
            Matrix dx = (d.array().colwise() * value(c).col(0).array()).matrix();
            accumulate(adj, x, dx);
          }
          break;
        }
        case Op::RowDot: {
          const NodeId a = node.inputs[0], b = node.inputs[1];
          if (needs(a)) {
            Matrix da = (value(b).array().colwise() * d.col(0).array()).matrix();
            accumulate(adj, a, da);
          }
          if (needs(b)) {
            Matrix db = (value(a).array().colwise() * d.col(0).array()).matrix();
            accumulate(adj, b, db);
          }
          break;
        }
        case Op::RowNorm: {
          const NodeId x = node.inputs[0];
          // d|x|/dx = x / |x|; taken as 0 at x = 0.
          Eigen::ArrayXd factor =
              (node.value.col(0).array() > 0.0)
                  .select(d.col(0).array() / node.value.col(0).array(), 0.0);
          Matrix dx = (value(x).array().colwise() * factor).matrix();
          accumulate(adj, x, dx);
          break;
        }
        case Op::Reciprocal: {
          accumulate(adj, node.inputs[0],
                     (-d.array() * node.value.array().square()).matrix());
          break;
        }
        case Op::Exp:
          accumulate(adj, node.inputs[0], d.cwiseProduct(node.value));
          break;
        case Op::Abs: {
          const Matrix& x = value(node.inputs[0]);
          Matrix dx = (x.array() > 0.0)
                            .select(d.array(), (x.array() < 0.0).select(-d.array(), 0.0))
                            .matrix();
          accumulate(adj, node.inputs[0], dx);
          break;
        }
        case Op::Square:
          accumulate(adj, node.inputs[0], 2.0 * d.cwiseProduct(value(node.inputs[0])));
          break;
        case Op::WeightedSum:
          accumulate(adj, node.inputs[0], d(0, 0) * node.aux);
          break;
        case Op::Sum: {
          const Matrix& x = value(node.inputs[0]);
          accumulate(adj, node.inputs[0], Matrix::Constant(x.rows(), x.cols(), d(0, 0)));
          break;
        }
      }
      // Intermediate adjoints are dead once propagated.
      if (node.op != Op::Parameter) adj[i] = Matrix();
    }
    return grads;
  }

 private:
  enum class Op {
    Constant,
    Parameter,
    Affine,
    MatMul,
    Relu,
    Mask,
    BroadcastRows,
    ConcatCols,
    SliceCols,
    SliceRows,
    Add,
    Sub,
    AddScalar,
    Scale,
    RowScale,
    RowDot,
    RowNorm,
    Reciprocal,
    Exp,
    Abs,
    Square,
    WeightedSum,
    Sum,
  };

  struct Node {
    Op op = Op::Constant;
    Matrix value;
    std::vector<NodeId> inputs;
    bool needs_grad = false;
    std::size_t slot = 0;
    Index offset = 0;
    double factor = 0.0;
    Eigen::VectorXd aux;
  };

  Node make(Op op, Matrix value, std::vector<NodeId> inputs) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    for (NodeId in : node.inputs) node.needs_grad = node.needs_grad || needs(in);
    return node;
  }

  NodeId push(Op op, Matrix value, std::vector<NodeId> inputs) {
    return push(make(op, std::move(value), std::move(inputs)));
  }

  NodeId push(Op op, Matrix value, std::vector<NodeId> inputs, bool needs_grad) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.needs_grad = needs_grad;
    return push(std::move(node));
  }

  NodeId push(Node node) {
    if (consumed_) throw usage_error("cannot record on a consumed tape");
    nodes_.push_back(std::move(node));
    return NodeId{nodes_.size() - 1};
  }

  static std::tuple<NodeId, NodeId, NodeId> inputs3(const Node& node) {
    return {node.inputs[0], node.inputs[1], node.inputs[2]};
  }

  void ensure(std::vector<Matrix>& adj, NodeId id) const {
    Matrix& a = adj[id.index];
    if (a.size() == 0) a = Matrix::Zero(value(id).rows(), value(id).cols());
  }

  template <typename Expr>
  void accumulate(std::vector<Matrix>& adj, NodeId id, const Expr& contribution) {
    if (!needs(id)) return;
    Matrix& a = adj[id.index];
    if (a.size() == 0) {
      a = contribution;
    } else {
      a += contribution;
    }
  }

  std::vector<Node> nodes_;
  std::map<std::size_t, NodeId> slots_;
  bool consumed_ = false;
};

}  // namespace ngf
