#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "ngf/field.hpp"
#include "oracles.hpp"

using namespace ngf;

namespace {

Vec3 random_point(std::mt19937_64& rng, double r = 1.0) {
  std::uniform_real_distribution<double> u(-r, r);
  return {u(rng), u(rng), u(rng)};
}

double grad_sq_loss(const FieldNetwork& net, const PointMatrix& x) {
  Tape tape;
  const FieldNodes out = net.record(tape, tape.constant(x));
  return tape.scalar(tape.sum(tape.row_dot(out.grad, out.grad)));
}

}  // namespace

TEST(Field, LinearNetGradient) {
  Layer layer{Matrix(1, 3), Matrix::Zero(1, 1)};
  layer.weight << 0, 0, 2;
  const FieldNetwork net({layer}, 0);
  const EvalRecord r = eval(net, Vec3(0.3, -1.0, 5.0));
  EXPECT_EQ(r.grad, Vec3(0, 0, 2));
  EXPECT_EQ(r.unit_grad, Vec3(0, 0, 1));
  EXPECT_DOUBLE_EQ(r.value, 10.0);
}

TEST(Field, ZeroGradientThrows) {
  const FieldNetwork net({Layer{Matrix::Zero(1, 3), Matrix::Ones(1, 1)}}, 0);
  try {
    eval(net, Vec3(1, 2, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
}

TEST(Field, DimensionChain) {
  const FieldNetwork net = FieldNetwork::zeros({});
  ASSERT_EQ(net.layers.size(), 8u);
  EXPECT_EQ(net.layers[0].weight.cols(), 3);
  for (std::size_t l = 0; l + 1 < 8; ++l) EXPECT_EQ(net.layers[l].weight.rows(), 512);
  EXPECT_EQ(net.layers[4].weight.cols(), 512 + 3);
  EXPECT_EQ(net.layers[3].weight.cols(), 512);
  EXPECT_EQ(net.layers[7].weight.rows(), 1);
}

TEST(Field, ValidateRejectsBrokenChain) {
  std::vector<Layer> layers{{Matrix::Zero(4, 3), Matrix::Zero(1, 4)}, {Matrix::Zero(1, 5), Matrix::Zero(1, 1)}};
  EXPECT_THROW(FieldNetwork(layers, 0), Error);
}

TEST(Field, InputGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const FieldNetwork net = trial % 2 == 0 ? oracle::random_network({3, 8, 1}, 0, 100 + trial)
                                            : oracle::random_network({3, 16, 16, 16, 1}, 2, 100 + trial);
    for (int k = 0; k < 5; ++k) {
      const Vec3 x = random_point(rng);
      if (oracle::min_abs_preactivation(net, x) < 1e-4) continue;
      const Vec3 fd = oracle::fd_gradient([&](const Vec3& p) { return oracle::forward(net, p); }, x, 1e-6);
      // Every unit of some layer is off: the field is locally constant there.
      if (fd.norm() < 1e-8) continue;
      const EvalRecord r = eval(net, x);
      EXPECT_LT((r.grad - fd).norm(), 1e-5 * std::max(fd.norm(), 1e-3));
      EXPECT_NEAR(r.value, oracle::forward(net, x), 1e-12);
      ++checked;
    }
  }
  EXPECT_GT(checked, 200);
}

TEST(Field, ValuesFastPathMatchesTape) {
  const FieldNetwork net = init_geometric(3, 0.5, {6, 32, 3});
  std::mt19937_64 rng(1);
  PointMatrix x(50, 3);
  for (Index i = 0; i < 50; ++i) x.row(i) = random_point(rng).transpose();
  const FieldSamples s = evaluate(net, x);
  EXPECT_LT((net.values(x) - s.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Field, SquaredOutputGradientOfLinearNet) {
  Layer layer{Matrix(1, 3), Matrix(1, 1)};
  layer.weight << 0.5, -1.0, 2.0;
  layer.bias << 0.25;
  const FieldNetwork net({layer}, 0);
  const Vec3 x(0.3, 0.7, -0.2);
  Tape tape;
  PointMatrix p(1, 3);
  p.row(0) = x.transpose();
  const FieldNodes out = net.record(tape, tape.constant(p));
  const double f = tape.value(out.value)(0, 0);
  const Tape::Gradients g = tape.backward(tape.sum(tape.square(out.value)));
  EXPECT_LT((g[0].row(0).transpose() - 2.0 * f * x).norm(), 1e-14);
  EXPECT_NEAR(g[1](0, 0), 2.0 * f, 1e-14);
}

TEST(Field, GradientNormLossMatchesFiniteDifferences) {
  const FieldNetwork net = oracle::random_network({3, 6, 1}, 0, 41);
  std::mt19937_64 rng(2);
  PointMatrix x(7, 3);
  for (Index i = 0; i < 7; ++i) x.row(i) = random_point(rng).transpose();
  Tape tape;
  const FieldNodes out = net.record(tape, tape.constant(x));
  const Tape::Gradients g = tape.backward(tape.sum(tape.row_dot(out.grad, out.grad)));
  const auto fd = oracle::fd_parameter_gradient(net, [&](const FieldNetwork& n) { return grad_sq_loss(n, x); }, 1e-6);
  EXPECT_LT(oracle::relative_error(fd, g), 1e-4);
}

TEST(Field, ParameterGradientOfValueWithSkip) {
  const FieldNetwork net = oracle::random_network({3, 8, 8, 8, 1}, 2, 5);
  std::mt19937_64 rng(3);
  PointMatrix x(6, 3);
  for (Index i = 0; i < 6; ++i) x.row(i) = random_point(rng).transpose();
  auto loss = [&](const FieldNetwork& n) {
    Tape tape;
    const FieldNodes out = n.record(tape, tape.constant(x));
    return tape.scalar(tape.add(tape.sum(tape.square(out.value)), tape.sum(tape.row_dot(out.grad, out.grad))));
  };
  Tape tape;
  const FieldNodes out = net.record(tape, tape.constant(x));
  const Tape::Gradients g =
      tape.backward(tape.add(tape.sum(tape.square(out.value)), tape.sum(tape.row_dot(out.grad, out.grad))));
  EXPECT_LT(oracle::relative_error(oracle::fd_parameter_gradient(net, loss, 1e-6), g), 1e-4);
}

TEST(GeometricInit, Postconditions) {
  const FieldNetwork a = init_geometric(17);
  const FieldNetwork b = init_geometric(17);
  for (std::size_t s = 0; s < a.slot_count(); ++s) EXPECT_EQ(a.parameter(s), b.parameter(s));
  EXPECT_NE(init_geometric(18).layers[0].weight, a.layers[0].weight);
  EXPECT_TRUE((a.layers.back().bias.array() == -0.5).all());
  for (std::size_t l = 0; l + 1 < a.layers.size(); ++l) EXPECT_TRUE(a.layers[l].bias.isZero());

  // The outward-gradient prior holds in distribution over seeds, not for every draw.
  int within = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const EvalRecord r = eval(init_geometric(seed), Vec3(0.9, 0, 0));
    if (oracle::angle_degrees(r.unit_grad, Vec3::UnitX()) < 15.0) ++within;
  }
  EXPECT_GE(within, 18);
}

TEST(GeometricInit, ApproximatesSphereDistance) {
  const FieldNetwork net = init_geometric(4);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  PointMatrix inner(100, 3), outer(100, 3);
  for (Index i = 0; i < 100; ++i) {
    const Vec3 d = Vec3(g(rng), g(rng), g(rng)).normalized();
    inner.row(i) = 0.1 * d.transpose();
    outer.row(i) = 1.0 * d.transpose();
  }
  EXPECT_LT(net.values(inner).maxCoeff(), 0.0);
  EXPECT_GT(net.values(outer).minCoeff(), 0.0);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  FieldNetwork net = oracle::random_network({3, 4, 1}, 0, 1);
  const FieldNetwork before = net;
  Tape::Gradients g;
  for (std::size_t s = 0; s < net.slot_count(); ++s) g.push_back(Matrix::Zero(net.parameter(s).rows(), net.parameter(s).cols()));
  AdamState state;
  for (int i = 0; i < 5; ++i) adam_step(net, g, state, 1e-3);
  for (std::size_t s = 0; s < net.slot_count(); ++s) EXPECT_EQ(net.parameter(s), before.parameter(s));
}

TEST(Adam, MatchesScalarSimulation) {
  FieldNetwork net = oracle::random_network({3, 2, 1}, 0, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<oracle::ScalarAdam>> sim(net.slot_count());
  std::vector<Matrix> expected;
  for (std::size_t s = 0; s < net.slot_count(); ++s) {
    sim[s].resize(static_cast<std::size_t>(net.parameter(s).size()));
    expected.push_back(net.parameter(s));
  }
  AdamState state;
  for (int t = 0; t < 50; ++t) {
    Tape::Gradients g;
    for (std::size_t s = 0; s < net.slot_count(); ++s) {
      Matrix m(net.parameter(s).rows(), net.parameter(s).cols());
      for (Index i = 0; i < m.size(); ++i) {
        m(i) = gauss(rng);
        expected[s](i) = sim[s][static_cast<std::size_t>(i)].step(expected[s](i), m(i), 0.01);
      }
      g.push_back(m);
    }
    adam_step(net, g, state, 0.01);
  }
  for (std::size_t s = 0; s < net.slot_count(); ++s) {
    EXPECT_LT((net.parameter(s) - expected[s]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  FieldNetwork net({Layer{Matrix::Zero(1, 3), Matrix::Zero(1, 1)}}, 0);
  Tape::Gradients g{Matrix::Constant(1, 3, 0.3), Matrix::Constant(1, 1, -2.0)};
  AdamState state;
  double prev_w = 0.0, prev_b = 0.0;
  for (int t = 0; t < 200; ++t) {
    adam_step(net, g, state, 1e-3);
    const double w = net.layers[0].weight(0, 0), b = net.layers[0].bias(0, 0);
    EXPECT_NEAR(w - prev_w, -1e-3, 1e-9);
    EXPECT_NEAR(b - prev_b, 1e-3, 1e-9);
    prev_w = w;
    prev_b = b;
  }
}

TEST(Adam, NonFiniteGradientAborts) {
  FieldNetwork net = oracle::random_network({3, 2, 1}, 0, 2);
  const FieldNetwork before = net;
  Tape::Gradients g{Matrix::Constant(2, 3, std::nan(""))};
  AdamState state;
  try {
    adam_step(net, g, state, 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
  EXPECT_EQ(net.layers[0].weight, before.layers[0].weight);
  EXPECT_EQ(state.step, 0);
}

TEST(Adam, IdenticalRunsIdenticalTrajectories) {
  auto run = [] {
    FieldNetwork net = oracle::random_network({3, 5, 1}, 0, 9);
    AdamState state;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
      Tape::Gradients g;
      for (std::size_t s = 0; s < net.slot_count(); ++s) {
        Matrix m(net.parameter(s).rows(), net.parameter(s).cols());
        for (Index i = 0; i < m.size(); ++i) m(i) = gauss(rng);
        g.push_back(m);
      }
      adam_step(net, g, state, 0.05);
    }
    return net;
  };
  const FieldNetwork a = run(), b = run();
  for (std::size_t s = 0; s < a.slot_count(); ++s) EXPECT_EQ(a.parameter(s), b.parameter(s));
}

TEST(ModelFile, RoundTripAtSinglePrecision) {
  const FieldNetwork net = init_geometric(5, 0.5, {4, 16, 2});
  const Model model{net, {Vec3(1.5, -2.0, 0.25), 3.75}};
  std::stringstream buf;
  write_model(buf, model);
  EXPECT_EQ(buf.str().substr(0, 4), "NGF1");
  const Model back = read_model(buf);
  EXPECT_EQ(back.net.skip_layer, 2);
  EXPECT_EQ(back.transform.centroid, model.transform.centroid);
  EXPECT_EQ(back.transform.scale, 3.75);
  for (std::size_t s = 0; s < net.slot_count(); ++s) {
    const Matrix expected = net.parameter(s).cast<float>().cast<double>();
    EXPECT_EQ(back.net.parameter(s), expected);
  }
  // Writing the loaded model again reproduces the bytes.
  std::stringstream again;
  write_model(again, back);
  EXPECT_EQ(again.str(), buf.str());
}

TEST(ModelFile, RejectsBadMagicAndTruncation) {
  std::stringstream buf;
  write_model(buf, {init_geometric(1, 0.5, {3, 4, 1}), {}});
  std::string bytes = buf.str();
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream in1(bad);
  EXPECT_THROW(read_model(in1), Error);
  std::stringstream in2(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_model(in2), Error);
  std::string version = bytes;
  version[4] = 9;
  std::stringstream in3(version);
  EXPECT_THROW(read_model(in3), Error);
}
