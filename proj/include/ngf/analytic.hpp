#pragma once

// Closed-form fields with the same recording interface as FieldNetwork. They stand in for
// a trained network wherever the exact answer is known.

#include "ngf/field.hpp"
#include "ngf/tape.hpp"

namespace ngf {

/// Signed distance to a sphere: |x - center| - radius.
struct SphereField {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;

  FieldNodes record(Tape& tape, NodeId x) const {
    const Index rows = tape.value(x).rows();
    const NodeId c = tape.constant(center.transpose().replicate(rows, 1));
    const NodeId diff = tape.sub(x, c);
    const NodeId norm = tape.row_norm(diff);
    return {tape.add_scalar(norm, -radius), tape.row_scale(tape.reciprocal(norm), diff)};
  }

  Eigen::VectorXd values(const PointMatrix& points) const {
    return ((points.rowwise() - center.transpose()).rowwise().norm().array() - radius).matrix();
  }
};

/// Signed distance to the plane {x : normal . x = offset}; `normal` must be unit length.
struct PlaneField {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;

  FieldNodes record(Tape& tape, NodeId x) const {
    const Index rows = tape.value(x).rows();
    const NodeId n = tape.constant(normal.transpose().replicate(rows, 1));
    return {tape.add_scalar(tape.row_dot(x, n), -offset), n};
  }

  Eigen::VectorXd values(const PointMatrix& points) const {
    return ((points * normal).array() - offset).matrix();
  }
};

/// f(x) = value everywhere; its gradient is zero.
struct ConstantField {
  double value = 1.0;

  FieldNodes record(Tape& tape, NodeId x) const {
    const Index rows = tape.value(x).rows();
    return {tape.constant(Matrix::Constant(rows, 1, value)), tape.constant(Matrix::Zero(rows, 3))};
  }

  Eigen::VectorXd values(const PointMatrix& points) const {
    return Eigen::VectorXd::Constant(points.rows(), value);
  }
};

}  // namespace ngf
