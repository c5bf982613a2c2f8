#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ngf/analytic.hpp"
#include "ngf/losses.hpp"
#include "oracles.hpp"

using namespace ngf;

namespace {

PointMatrix rows_of(std::initializer_list<Vec3> pts) {
  PointMatrix m(static_cast<Index>(pts.size()), 3);
  Index i = 0;
  for (const Vec3& p : pts) m.row(i++) = p.transpose();
  return m;
}

// A chain built from given per-step values and unit gradients, for testing terms in isolation.
MoveChain manual_chain(Tape& tape, const std::vector<Matrix>& values, const std::vector<Matrix>& units) {
  MoveChain chain;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const NodeId u = tape.constant(units[i]);
    chain.steps.push_back({tape.constant(Matrix::Zero(values[i].rows(), 3)), tape.constant(values[i]), u, u});
  }
  chain.final_position = chain.steps.back().position;
  return chain;
}

QueryBatch toy_batch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  PointMatrix p(10, 3);
  for (Index i = 0; i < p.size(); ++i) p(i) = u(rng);
  const NeighborIndex index(p);
  const Eigen::VectorXd sigma = per_point_sigma(index, 3);
  return sample_batch(index, sigma, SamplerConfig{10, 5, 3, 0}, ScaleSet{{1, 2, 4}}, rng);
}

double total_value(const FieldNetwork& net, const QueryBatch& batch, const LossConfig& cfg) {
  Tape tape;
  return total_loss(tape, net, batch, cfg).terms.total;
}

}  // namespace

TEST(MoveChain, SphereStubProjectsInOneStep) {
  const SphereField sphere;
  Tape tape;
  const MoveChain one = move_chain(tape, sphere, tape.constant(rows_of({Vec3(2, 0, 0)})), 1);
  EXPECT_EQ(Vec3(tape.value(one.final_position).row(0).transpose()), Vec3(1, 0, 0));
  const MoveChain two = move_chain(tape, sphere, tape.constant(rows_of({Vec3(2, 0, 0)})), 2);
  EXPECT_EQ(Vec3(tape.value(two.final_position).row(0).transpose()), Vec3(1, 0, 0));
  EXPECT_EQ(tape.value(two.steps[1].value)(0, 0), 0.0);
}

TEST(MoveChain, ReplayIsBitIdentical) {
  const FieldNetwork net = oracle::random_network({3, 16, 16, 1}, 0, 77);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  PointMatrix x(20, 3);
  for (Index i = 0; i < x.size(); ++i) x(i) = u(rng);
  Tape tape;
  const MoveChain chain = move_chain(tape, net, tape.constant(x), 3);

  PointMatrix pos = x;
  for (int step = 0; step < 3; ++step) {
    const FieldSamples s = evaluate(net, pos);
    PointMatrix next(pos.rows(), 3);
    const Eigen::VectorXd norms = Matrix(s.grads).rowwise().norm();  // same storage as the tape
    for (Index i = 0; i < pos.rows(); ++i) {
      const double inv = 1.0 / norms(i);
      for (int c = 0; c < 3; ++c) next(i, c) = pos(i, c) - s.values(i) * (s.grads(i, c) * inv);
    }
    EXPECT_EQ(tape.value(chain.steps[static_cast<std::size_t>(step)].position), pos);
    pos = next;
  }
  EXPECT_EQ(tape.value(chain.final_position), pos);
}

TEST(MoveChain, VanishedGradientNamesThePoint) {
  const ConstantField flat{0.5};
  Tape tape;
  try {
    move_chain(tape, flat, tape.constant(rows_of({Vec3(0, 0, 0)})), 1);
    FAIL();
  } catch (const GradientVanished& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
  }
}

TEST(LossD, ZeroWhenMovedOntoTargets) {
  const PlaneField plane;
  const PointMatrix start = rows_of({Vec3(0.1, 0.2, 0.0), Vec3(-0.3, 0.4, 0.0)});
  Tape tape;
  const MoveChain chain = move_chain(tape, plane, tape.constant(start), 2);
  EXPECT_EQ(tape.scalar(loss_d(tape, chain, start, RowLayout::whole(1, 1))), 0.0);
}

TEST(LossD, SinglePointOffset) {
  const PlaneField plane;
  const PointMatrix start = rows_of({Vec3(0.5, 0.5, 0.0)});
  Tape tape;
  const MoveChain chain = move_chain(tape, plane, tape.constant(start), 1);
  const PointMatrix target = rows_of({Vec3(0.5, 0.5, -0.1)});
  EXPECT_NEAR(tape.scalar(loss_d(tape, chain, target, RowLayout::whole(1, 0))), 0.01, 1e-15);
}

TEST(LossD, SphereStubProjectsNoiselessQueries) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 1);
  PointMatrix q(200, 3), target(200, 3);
  for (Index i = 0; i < 200; ++i) {
    const Vec3 d = Vec3(g(rng), g(rng), g(rng)).normalized();
    q.row(i) = ((1.0 + 0.05 * g(rng)) * d).transpose();
    target.row(i) = d.transpose();
  }
  Tape tape;
  const MoveChain chain = move_chain(tape, SphereField{}, tape.constant(q), 1);
  EXPECT_LT(tape.scalar(loss_d(tape, chain, target, RowLayout::whole(200, 0))), 1e-10);
}

TEST(LossReg, SphereStubSurfaceTermVanishes) {
  const PointMatrix g = rows_of({Vec3(1, 0, 0), Vec3(0, -1, 0), Vec3(0, 0.6, 0.8)});
  Tape tape;
  const MoveChain chain = move_chain(tape, SphereField{}, tape.constant(g), 1);
  EXPECT_LT(tape.scalar(loss_reg(tape, chain, RowLayout::whole(0, 3))), 1e-30);
}

TEST(LossReg, MatchesRecomputationFromChainValues) {
  const FieldNetwork net = oracle::random_network({3, 8, 1}, 0, 3);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  PointMatrix x(9, 3);
  for (Index i = 0; i < x.size(); ++i) x(i) = u(rng);
  for (int steps : {1, 2, 3}) {
    Tape tape;
    const MoveChain chain = move_chain(tape, net, tape.constant(x), steps);
    const RowLayout rows = RowLayout::whole(5, 4);
    double expected = 0.0;
    const Matrix& f1 = tape.value(chain.steps[0].value);
    for (Index r = 5; r < 9; ++r) expected += f1(r, 0) * f1(r, 0) / 4.0;
    for (int i = 1; i < steps; ++i) {
      const Matrix& fi = tape.value(chain.steps[static_cast<std::size_t>(i)].value);
      for (Index r = 0; r < 9; ++r) expected += fi(r, 0) * fi(r, 0) / 9.0;
    }
    EXPECT_NEAR(tape.scalar(loss_reg(tape, chain, rows)), expected, 1e-14 * std::max(1.0, expected));
  }
}

TEST(LossV, ArithmeticExample) {
  // f1 = 0.1 with unit gradient (1,0,0); V = q - mean = 0.
  const PlaneField plane{Vec3::UnitX(), 0.0};
  const PointMatrix q = rows_of({Vec3(0.1, 0.3, -0.2)});
  Tape tape;
  const MoveChain chain = move_chain(tape, plane, tape.constant(q), 1);
  EXPECT_NEAR(tape.scalar(loss_v(tape, chain, q, {q}, RowLayout::whole(1, 0))), 0.01, 1e-15);
  EXPECT_NEAR(tape.scalar(loss_v(tape, chain, q, {q, q}, RowLayout::whole(1, 0))), 0.02, 1e-15);
}

TEST(LossV, ZeroFieldAndZeroTargets) {
  const PlaneField plane;
  const PointMatrix q = rows_of({Vec3(0.1, 0.3, 0.0), Vec3(0.2, -0.1, 0.0)});
  Tape tape;
  const MoveChain chain = move_chain(tape, plane, tape.constant(q), 1);
  EXPECT_EQ(tape.scalar(loss_v(tape, chain, q, {q}, RowLayout::whole(2, 0))), 0.0);
}

TEST(LossV, SphereStubRadialQueries) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 1);
  PointMatrix q(100, 3), nearest(100, 3);
  for (Index i = 0; i < 100; ++i) {
    const Vec3 d = Vec3(g(rng), g(rng), g(rng)).normalized();
    nearest.row(i) = d.transpose();
    q.row(i) = ((1.0 + 0.02 * g(rng)) * d).transpose();
  }
  Tape tape;
  const MoveChain chain = move_chain(tape, SphereField{}, tape.constant(q), 1);
  EXPECT_LT(tape.scalar(loss_v(tape, chain, q, {nearest}, RowLayout::whole(100, 0))), 1e-20);
}

TEST(LossCon, ParallelGradientsGiveZero) {
  Tape tape;
  const Matrix v = Matrix::Constant(2, 1, 0.2);
  Matrix n(2, 3);
  n << 1, 0, 0, 0, 0.6, 0.8;
  const MoveChain chain = manual_chain(tape, {v, v}, {n, n});
  EXPECT_NEAR(tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(2, 0))), 0.0, 1e-16);
}

TEST(LossCon, OrthogonalOnSurfaceIsOne) {
  Tape tape;
  Matrix a(1, 3), b(1, 3);
  a << 1, 0, 0;
  b << 0, 1, 0;
  const MoveChain chain = manual_chain(tape, {Matrix::Zero(1, 1), Matrix::Zero(1, 1)}, {a, b});
  EXPECT_DOUBLE_EQ(tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(1, 0))), 1.0);
}

TEST(LossCon, ConfidenceWeightAtDistance) {
  Tape tape;
  Matrix a(1, 3), b(1, 3);
  a << 0, 0, 1;
  b << 1, 0, 0;
  const MoveChain chain = manual_chain(tape, {Matrix::Constant(1, 1, 0.1), Matrix::Zero(1, 1)}, {a, b});
  const double weighted = tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(1, 0)));
  EXPECT_NEAR(weighted, std::exp(-6.0), 1e-15);
  EXPECT_NEAR(weighted, 0.00248, 5e-6);
  const double plain = tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(1, 0), false));
  EXPECT_DOUBLE_EQ(plain, 1.0);
}

TEST(LossCon, WeightBoundsKeepTermWithinCosineDeficit) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0, 1);
  Matrix f(50, 1), u1(50, 3), u2(50, 3);
  double deficit_sum = 0.0;
  for (Index i = 0; i < 50; ++i) {
    f(i, 0) = g(rng);
    u1.row(i) = Vec3(g(rng), g(rng), g(rng)).normalized().transpose();
    u2.row(i) = Vec3(g(rng), g(rng), g(rng)).normalized().transpose();
    deficit_sum += 1.0 - u1.row(i).dot(u2.row(i));
  }
  Tape tape;
  const MoveChain chain = manual_chain(tape, {f, f}, {u1, u2});
  const double term = tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(50, 0)));
  EXPECT_GE(term, 0.0);
  EXPECT_LE(term, deficit_sum / 50.0);
}

TEST(LossCon, SingleStepHasNoConsistencyTerm) {
  Tape tape;
  const MoveChain chain = manual_chain(tape, {Matrix::Zero(1, 1)}, {Matrix::Identity(1, 3)});
  EXPECT_EQ(tape.scalar(loss_con(tape, chain, 60.0, RowLayout::whole(1, 0))), 0.0);
}

TEST(TotalLoss, WeightedCombination) {
  const LossConfig cfg;
  EXPECT_NEAR(LossBreakdown::combine(1, 1, 1, 1, cfg).total, 11.11, 1e-12);
  EXPECT_EQ(LossBreakdown::combine(0, 0, 0, 0, cfg).total, 0.0);
}

TEST(TotalLoss, RootMatchesBreakdown) {
  const FieldNetwork net = oracle::random_network({3, 8, 8, 1}, 0, 21);
  const QueryBatch batch = toy_batch(2);
  Tape tape;
  const RecordedLoss rec = total_loss(tape, net, batch, LossConfig{});
  EXPECT_NEAR(tape.scalar(rec.root), rec.terms.total, 1e-14 * std::abs(rec.terms.total));
  EXPECT_GT(rec.terms.l_v, 0.0);
  EXPECT_GT(rec.terms.l_con, 0.0);
  EXPECT_GT(rec.terms.l_d, 0.0);
  EXPECT_GT(rec.terms.l_reg, 0.0);
}

TEST(TotalLoss, ParameterGradientMatchesFiniteDifferences) {
  for (const auto& dims : {std::vector<Index>{3, 8, 1}, std::vector<Index>{3, 8, 8, 1}}) {
    const FieldNetwork net = oracle::random_network(dims, 0, 31);
    const QueryBatch batch = toy_batch(3);
    const LossConfig cfg;
    Tape tape;
    const RecordedLoss rec = total_loss(tape, net, batch, cfg);
    const Tape::Gradients g = tape.backward(rec.root);
    const auto fd = oracle::fd_parameter_gradient(
        net, [&](const FieldNetwork& n) { return total_value(n, batch, cfg); }, 1e-6);
    EXPECT_LT(oracle::relative_error(fd, g), 1e-4) << dims.size() << " layers";
  }
}

TEST(TotalLoss, SlicesAddUpToTheWholeBatch) {
  const FieldNetwork net = oracle::random_network({3, 8, 8, 1}, 0, 5);
  const QueryBatch batch = toy_batch(4);
  const LossConfig cfg;
  Tape whole;
  const RecordedLoss all = total_loss(whole, net, batch, cfg);
  const Tape::Gradients g_all = whole.backward(all.root);

  double total = 0.0;
  Tape::Gradients g_sum;
  for (const BatchSlice slice : {BatchSlice{0, 6, 0, 0}, BatchSlice{6, 10, 0, 2}, BatchSlice{10, 10, 2, 5}}) {
    Tape tape;
    const RecordedLoss part = total_loss(tape, net, batch, cfg, slice);
    total += part.terms.total;
    Tape::Gradients g = tape.backward(part.root);
    if (g_sum.empty()) g_sum = g;
    else for (std::size_t s = 0; s < g.size(); ++s) g_sum[s] += g[s];
  }
  EXPECT_NEAR(total, all.terms.total, 1e-13 * all.terms.total);
  EXPECT_LT(oracle::relative_error(g_all, g_sum), 1e-12);
}
