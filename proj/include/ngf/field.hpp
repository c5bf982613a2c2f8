#pragma once

#include <Eigen/Core>

#include <array>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/geometry.hpp"
#include "ngf/tape.hpp"

namespace ngf {

/// Gradient norms below this are reported as GradientVanished.
inline constexpr double kGradientEpsilon = 1e-12;

/// Value and input-gradient nodes of a field evaluated on a batch (B x 1 and B x 3).
struct FieldNodes {
  NodeId value;
  NodeId grad;
};

/// Anything that can record f(x) and its input gradient on a tape: the trained
/// network, or an analytic stand-in used as a test oracle.
template <typename F>
concept TapeField = requires(const F& field, Tape& tape, NodeId x) {
  { field.record(tape, x) } -> std::same_as<FieldNodes>;
};

struct Layer {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
};

struct Architecture {
  Index layers = 8;
  Index width = 512;
  /// Layer whose input is the previous activation concatenated with the raw point.
  Index skip_layer = 4;
};

/// Rectifier MLP f: R^3 -> R with an optional input skip connection.
///
/// Trainable tensors are addressed by slot: 2*l is the weight of layer l, 2*l + 1 its bias.
/// skip_layer == 0 means no skip connection.
class FieldNetwork {
 public:
  std::vector<Layer> layers;
  Index skip_layer = 0;

  FieldNetwork() = default;
  FieldNetwork(std::vector<Layer> layers_in, Index skip)
      : layers(std::move(layers_in)), skip_layer(skip) {
    validate();
  }

  /// Zero-initialized network with the given shape.
  static FieldNetwork zeros(const Architecture& arch) {
    if (arch.layers < 1 || arch.width < 1) throw usage_error("network needs layers and width");
    if (arch.skip_layer < 0 || arch.skip_layer >= arch.layers) {
      throw usage_error("skip layer out of range");
    }
    std::vector<Layer> layers;
    Index in = 3;
    for (Index l = 0; l < arch.layers; ++l) {
      if (l == arch.skip_layer && l > 0) in += 3;
      const Index out = l + 1 == arch.layers ? 1 : arch.width;
      layers.push_back({Matrix::Zero(out, in), Matrix::Zero(1, out)});
      in = out;
    }
    return FieldNetwork(std::move(layers), arch.skip_layer);
  }

  std::size_t slot_count() const { return 2 * layers.size(); }

  Matrix& parameter(std::size_t slot) {
    Layer& layer = layers.at(slot / 2);
    return slot % 2 == 0 ? layer.weight : layer.bias;
  }
  const Matrix& parameter(std::size_t slot) const {
    const Layer& layer = layers.at(slot / 2);
    return slot % 2 == 0 ? layer.weight : layer.bias;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const Layer& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    for (const Layer& l : layers) {
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }

  void validate() const {
    if (layers.empty()) throw data_error("network has no layers");
    if (skip_layer < 0 || skip_layer >= static_cast<Index>(layers.size())) {
      throw data_error("skip layer index out of range");
    }
    Index in = 3;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Layer& layer = layers[l];
      if (static_cast<Index>(l) == skip_layer && l > 0) in += 3;
      if (layer.weight.cols() != in) {
        throw data_error("layer " + std::to_string(l) + " expects input width " +
                         std::to_string(in) + ", has " + std::to_string(layer.weight.cols()));
      }
      if (layer.bias.rows() != 1 || layer.bias.cols() != layer.weight.rows()) {
        throw data_error("layer " + std::to_string(l) + " bias shape mismatch");
      }
      in = layer.weight.rows();
    }
    if (in != 1) throw data_error("network output must be scalar");
  }

  /// Records f and grad f for every row of x.
  ///
  /// The gradient is the layer-wise chain rule diag(phi'(W y + b)) W, with each Jacobian
  /// product recorded as ordinary nodes, so a loss on the gradient differentiates through
  /// it in the same reverse pass. The product is accumulated from the output layer
  /// towards the input (row vector times Jacobians), which is the same product as the
  /// input-side recursion but costs one vector per point instead of three.
  FieldNodes record(Tape& tape, NodeId x) const {
    const Index rows = tape.value(x).rows();
    const std::size_t depth = layers.size();
    std::vector<NodeId> weight(depth), pre(depth);

    NodeId in = x;
    for (std::size_t l = 0; l < depth; ++l) {
      weight[l] = tape.parameter(2 * l, layers[l].weight);
      const NodeId bias = tape.parameter(2 * l + 1, layers[l].bias);
      if (is_skip(l)) in = tape.concat_cols(in, x);
      pre[l] = tape.affine(in, weight[l], bias);
      if (l + 1 < depth) in = tape.relu(pre[l]);
    }
    const NodeId value = pre[depth - 1];

    // Adjoint of the last layer's input, then walk back through the layers.
    NodeId adjoint = tape.broadcast_rows(weight[depth - 1], rows);
    std::optional<NodeId> grad;
    auto add_to_grad = [&](NodeId part) { grad = grad ? tape.add(*grad, part) : part; };
    for (std::size_t l = depth; l-- > 0;) {
      NodeId upstream = adjoint;
      if (is_skip(l)) {
        const Index hidden = tape.value(adjoint).cols() - 3;
        add_to_grad(tape.slice_cols(adjoint, hidden, 3));
        upstream = tape.slice_cols(adjoint, 0, hidden);
      }
      if (l == 0) {
        add_to_grad(upstream);
        break;
      }
      adjoint = tape.matmul(tape.mask(upstream, pre[l - 1]), weight[l - 1]);
    }
    return {value, *grad};
  }

  /// f only, without recording anything.
  Eigen::VectorXd values(const PointMatrix& points) const {
    Matrix x = points;
    Matrix in = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (is_skip(l)) {
        Matrix cat(in.rows(), in.cols() + 3);
        cat << in, x;
        in = std::move(cat);
      }
      Matrix z = in * layers[l].weight.transpose();
      z.rowwise() += layers[l].bias.row(0);
      in = l + 1 < layers.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
    }
    return in.col(0);
  }

 private:
  bool is_skip(std::size_t l) const { return skip_layer > 0 && static_cast<Index>(l) == skip_layer; }
};

/// Initialization that makes the untrained field approximate the signed distance to a
/// sphere of the given radius, with gradients pointing away from the origin.
inline FieldNetwork init_geometric(std::uint64_t seed, double radius = 0.5,
                                   const Architecture& arch = {}) {
  if (!(radius > 0.0)) throw usage_error("initial radius must be positive");
  FieldNetwork net = FieldNetwork::zeros(arch);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t depth = net.layers.size();
  for (std::size_t l = 0; l < depth; ++l) {
    Layer& layer = net.layers[l];
    const auto fan_out = static_cast<double>(layer.weight.rows());
    const auto fan_in = static_cast<double>(layer.weight.cols());
    if (l + 1 < depth) {
      // The skip input roughly doubles the squared input norm; halve the variance there
      // so activations keep the scale of |x|.
      const bool skip = net.skip_layer > 0 && static_cast<Index>(l) == net.skip_layer;
      const double std_dev = std::sqrt((skip ? 1.0 : 2.0) / fan_out);
      for (Index i = 0; i < layer.weight.size(); ++i) layer.weight(i) = std_dev * gauss(rng);
      layer.bias.setZero();
    } else {
      const double mean = std::sqrt(std::numbers::pi) / std::sqrt(fan_in);
      for (Index i = 0; i < layer.weight.size(); ++i) {
        layer.weight(i) = mean + 1e-5 * gauss(rng);
      }
      layer.bias.setConstant(-radius);
    }
  }
  return net;
}

struct EvalRecord {
  double value = 0.0;
  Vec3 grad = Vec3::Zero();
  Vec3 unit_grad = Vec3::Zero();
};

/// Values and raw gradients of a field at many points.
struct FieldSamples {
  Eigen::VectorXd values;
  PointMatrix grads;
};

template <TapeField F>
FieldSamples evaluate(const F& field, const PointMatrix& points) {
  Tape tape;
  const FieldNodes out = field.record(tape, tape.constant(points));
  return {tape.value(out.value).col(0), tape.value(out.grad)};
}

/// Unit gradients; throws GradientVanished naming the first offending row.
inline PointMatrix unit_gradients(const PointMatrix& grads) {
  PointMatrix unit(grads.rows(), 3);
  for (Index i = 0; i < grads.rows(); ++i) {
    const double norm = grads.row(i).norm();
    if (!(norm >= kGradientEpsilon)) throw GradientVanished(static_cast<std::size_t>(i), norm);
    unit.row(i) = grads.row(i) / norm;
  }
  return unit;
}

template <TapeField F>
EvalRecord eval(const F& field, const Vec3& x) {
  if (!x.allFinite()) throw usage_error("eval at a non-finite point");
  PointMatrix p(1, 3);
  p.row(0) = x.transpose();
  const FieldSamples s = evaluate(field, p);
  EvalRecord rec;
  rec.value = s.values(0);
  rec.grad = s.grads.row(0).transpose();
  rec.unit_grad = unit_gradients(s.grads).row(0).transpose();
  return rec;
}

/// Adam moments for every parameter slot.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

/// One bias-corrected Adam update. Missing (empty) gradient slots count as zero.
inline void adam_step(FieldNetwork& net, const Tape::Gradients& grads, AdamState& state,
                      double lr) {
  const std::size_t slots = net.slot_count();
  if (grads.size() > slots) throw usage_error("gradient has more slots than the network");
  for (std::size_t s = 0; s < grads.size(); ++s) {
    if (grads[s].size() == 0) continue;
    const Matrix& p = net.parameter(s);
    if (grads[s].rows() != p.rows() || grads[s].cols() != p.cols()) {
      throw usage_error("gradient shape mismatch in slot " + std::to_string(s));
    }
    if (!grads[s].allFinite()) {
      throw numerical_error("non-finite gradient in parameter slot " + std::to_string(s));
    }
  }
  if (state.first.size() != slots) {
    state.first.resize(slots);
    state.second.resize(slots);
    for (std::size_t s = 0; s < slots; ++s) {
      state.first[s] = Matrix::Zero(net.parameter(s).rows(), net.parameter(s).cols());
      state.second[s] = state.first[s];
    }
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t s = 0; s < slots; ++s) {
    Matrix& m = state.first[s];
    Matrix& v = state.second[s];
    if (s < grads.size() && grads[s].size() != 0) {
      m = state.beta1 * m + (1.0 - state.beta1) * grads[s];
      v = state.beta2 * v + (1.0 - state.beta2) * grads[s].cwiseAbs2();
    } else {
      m *= state.beta1;
      v *= state.beta2;
    }
    net.parameter(s).array() -=
        lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
  }
}

// ---------------------------------------------------------------------------------------
// Model file: little-endian binary.
//   "NGF1" | version u32 | layer count u32 |
//   per layer: rows u32, cols u32, weights f32[rows*cols] row-major, biases f32[rows] |
//   skip layer u32 | centroid f64[3] | scale f64

inline constexpr std::array<char, 4> kModelMagic = {'N', 'G', 'F', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

struct Model {
  FieldNetwork net;
  NormalizationTransform transform;
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(value);
  std::array<char, sizeof(T)> bytes;
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::array<unsigned char, sizeof(T)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw data_error("model file truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline void write_model(std::ostream& out, const Model& model) {
  const FieldNetwork& net = model.net;
  out.write(kModelMagic.data(), kModelMagic.size());
  detail::put_le(out, kModelVersion);
  detail::put_le(out, static_cast<std::uint32_t>(net.layers.size()));
  for (const Layer& layer : net.layers) {
    detail::put_le(out, static_cast<std::uint32_t>(layer.weight.rows()));
    detail::put_le(out, static_cast<std::uint32_t>(layer.weight.cols()));
    for (Index r = 0; r < layer.weight.rows(); ++r) {
      for (Index c = 0; c < layer.weight.cols(); ++c) {
        detail::put_le(out, static_cast<float>(layer.weight(r, c)));
      }
    }
    for (Index r = 0; r < layer.bias.cols(); ++r) {
      detail::put_le(out, static_cast<float>(layer.bias(0, r)));
    }
  }
  detail::put_le(out, static_cast<std::uint32_t>(net.skip_layer));
  for (int i = 0; i < 3; ++i) detail::put_le(out, model.transform.centroid[i]);
  detail::put_le(out, model.transform.scale);
}

inline Model read_model(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kModelMagic) throw data_error("not a model file (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kModelVersion) {
    throw data_error("unsupported model version " + std::to_string(version));
  }
  const auto count = detail::get_le<std::uint32_t>(in);
  if (count == 0 || count > 1024) throw data_error("implausible layer count in model file");
  std::vector<Layer> layers;
  for (std::uint32_t l = 0; l < count; ++l) {
    const auto rows = detail::get_le<std::uint32_t>(in);
    const auto cols = detail::get_le<std::uint32_t>(in);
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) {
      throw data_error("implausible layer shape in model file");
    }
    Layer layer{Matrix(rows, cols), Matrix(1, rows)};
    for (Index r = 0; r < layer.weight.rows(); ++r) {
      for (Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = detail::get_le<float>(in);
    }
    for (Index r = 0; r < layer.bias.cols(); ++r) layer.bias(0, r) = detail::get_le<float>(in);
    layers.push_back(std::move(layer));
  }
  const auto skip = detail::get_le<std::uint32_t>(in);
  Model model;
  model.net = FieldNetwork(std::move(layers), static_cast<Index>(skip));
  for (int i = 0; i < 3; ++i) model.transform.centroid[i] = detail::get_le<double>(in);
  model.transform.scale = detail::get_le<double>(in);
  if (!(model.transform.scale > 0.0) || !model.transform.centroid.allFinite()) {
    throw data_error("invalid normalization transform in model file");
  }
  if (!model.net.all_finite()) throw data_error("non-finite parameters in model file");
  return model;
}

inline void save_model(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write model file '" + path + "'");
  write_model(out, model);
  if (!out) throw data_error("failed writing model file '" + path + "'");
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open model file '" + path + "'");
  return read_model(in);
}

}  // namespace ngf
