#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "emac/tensor_nn.hpp"
#include "test_util.hpp"

using namespace emac::nn;
using testutil::random_matrix;

namespace {

Network single_layer(const Matrix& w, const Vector& b, Activation act = Activation::identity, double scale = 1.0) {
  Network net;
  net.layers.push_back(Layer{w, b, act, scale});
  return net;
}

Network random_net(std::uint64_t seed, std::vector<int> sizes, Activation hidden = Activation::relu,
                   Activation out = Activation::identity, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return make_mlp(sizes, hidden, out, scale, rng);
}

// Plain loops, no Eigen products: y = act(W x + b) layer by layer.
std::vector<double> hand_forward(const Network& net, std::vector<double> x) {
  for (const auto& l : net.layers) {
    std::vector<double> y(static_cast<std::size_t>(l.out()));
    for (Eigen::Index r = 0; r < l.out(); ++r) {
      double z = l.bias(r);
      for (Eigen::Index c = 0; c < l.in(); ++c) z += l.weight(r, c) * x[c];
      switch (l.activation) {
        case Activation::identity: y[r] = z; break;
        case Activation::relu: y[r] = z > 0.0 ? z : 0.0; break;
        case Activation::scaled_tanh: y[r] = l.scale * std::tanh(z); break;
      }
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace

TEST(Forward, ZeroNetworkGivesZero) {
  Network net = random_net(1, {3, 5, 2});
  for (auto& l : net.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  std::mt19937_64 rng(2);
  const Matrix y = predict(net, random_matrix(3, 7, rng));
  EXPECT_EQ(y.rows(), 2);
  EXPECT_TRUE((y.array() == 0.0).all());
}

TEST(Forward, IdentityLayer) {
  const Network net = single_layer(Matrix::Identity(4, 4), Vector::Zero(4));
  const std::vector<double> x{0.5, -1.25, 3.0, 1e-9};
  const Vector y = predict_one(net, x);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(y(i), x[i]);
}

TEST(Forward, MatchesHandRolledOracle) {
  const Network net = random_net(42, {3, 4, 2}, Activation::relu, Activation::scaled_tanh, 2.0);
  std::mt19937_64 rng(7);
  const Matrix x = random_matrix(3, 10, rng);
  const Matrix y = forward(net, x).output;
  for (int j = 0; j < 10; ++j) {
    const auto expect = hand_forward(net, {x(0, j), x(1, j), x(2, j)});
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(y(i, j), expect[i], 1e-12);
  }
  EXPECT_TRUE(y.isApprox(predict(net, x), 0.0));
}

TEST(Forward, DimensionMismatchThrows) {
  const Network net = random_net(1, {3, 4, 2});
  EXPECT_THROW(forward(net, Matrix::Zero(2, 1)), std::invalid_argument);
  EXPECT_THROW(predict(net, Matrix::Zero(4, 1)), std::invalid_argument);
}

TEST(Forward, MakeMlpInitBounds) {
  const Network net = random_net(3, {16, 64, 1});
  EXPECT_TRUE((net.layers[0].weight.array().abs() <= 0.25).all());
  EXPECT_TRUE((net.layers[1].weight.array().abs() <= 0.125).all());
  EXPECT_EQ(net.parameter_count(), 16u * 64 + 64 + 64 + 1);
  EXPECT_TRUE(testutil::bitwise_equal(net, random_net(3, {16, 64, 1})));
}

TEST(Backward, LinearCase) {
  Matrix w(1, 3);
  w << 0.5, -2.0, 1.5;
  const Network net = single_layer(w, Vector::Zero(1));
  Matrix x(3, 1);
  x << 1.0, 2.0, -3.0;
  const auto cache = forward(net, x);
  const auto g = backward(net, cache, Matrix::Ones(1, 1));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(g.params.weight[0](0, i), x(i, 0));
    EXPECT_EQ(g.input(i, 0), w(0, i));
  }
  EXPECT_EQ(g.params.bias[0](0), 1.0);
}

TEST(Backward, DeadReluContributesNothing) {
  Matrix w1(2, 1), w2(1, 2);
  w1 << 1.0, -1.0;
  w2 << 3.0, 4.0;
  Network net;
  net.layers.push_back(Layer{w1, Vector::Zero(2), Activation::relu, 1.0});
  net.layers.push_back(Layer{w2, Vector::Zero(1), Activation::identity, 1.0});
  const auto cache = forward(net, Matrix::Constant(1, 1, 2.0));  // second unit pre-activation -2
  const auto g = backward(net, cache, Matrix::Ones(1, 1));
  EXPECT_EQ(g.params.weight[0](1, 0), 0.0);
  EXPECT_EQ(g.params.bias[0](1), 0.0);
  EXPECT_EQ(g.params.weight[1](0, 1), 0.0);
  EXPECT_EQ(g.params.weight[0](0, 0), 3.0 * 2.0);
}

TEST(Backward, FiniteDifferenceOn100Networks) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<int> width(1, 6);
    std::vector<int> sizes{width(rng), width(rng), width(rng), width(rng)};
    const auto out_act = seed % 2 ? Activation::scaled_tanh : Activation::identity;
    const Network net = random_net(seed, sizes, Activation::relu, out_act, 1.5);
    const Matrix x = random_matrix(sizes.front(), 4, rng);
    const Matrix weights = random_matrix(sizes.back(), 4, rng);
    // loss = sum(weights .* net(x))
    auto loss = [&](const Network& n) { return predict(n, x).cwiseProduct(weights).sum(); };
    const auto g = backward(net, forward(net, x), weights);
    worst = std::max(worst, testutil::check_gradients(net, g.params, loss).max_rel);

    // Input gradient by the same rule.
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Matrix up = x, down = x;
      up.data()[i] += 1e-5;
      down.data()[i] -= 1e-5;
      const double numeric = (predict(net, up).cwiseProduct(weights).sum() -
                              predict(net, down).cwiseProduct(weights).sum()) / 2e-5;
      worst = std::max(worst, testutil::relative_error(g.input.data()[i], numeric));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Backward, PureAndDeterministic) {
  const Network net = random_net(9, {3, 8, 8, 2});
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(3, 5, rng);
  const Matrix dy = random_matrix(2, 5, rng);
  const auto c1 = forward(net, x), c2 = forward(net, x);
  EXPECT_EQ(c1.output, c2.output);
  const auto g1 = backward(net, c1, dy), g2 = backward(net, c1, dy);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    EXPECT_EQ(g1.params.weight[i], g2.params.weight[i]);
    EXPECT_EQ(g1.params.bias[i], g2.params.bias[i]);
  }
  EXPECT_EQ(g1.input, g2.input);
  EXPECT_EQ(g1.input, backward_input(net, c1, dy));
}

TEST(Backward, StaleOrMismatchedCacheThrows) {
  Network net = random_net(9, {3, 4, 2});
  std::mt19937_64 rng(1);
  const auto cache = forward(net, random_matrix(3, 2, rng));
  EXPECT_THROW(backward(net, cache, Matrix::Ones(1, 2)), std::invalid_argument);
  EXPECT_THROW(backward(net, cache, Matrix::Ones(2, 3)), std::invalid_argument);
  const Network other = random_net(9, {3, 5, 2});
  EXPECT_THROW(backward(other, cache, Matrix::Ones(2, 2)), std::invalid_argument);
  AdamState opt = AdamState::for_network(net);
  adam_step(net, Gradients::zeros_like(net), opt, 1e-3);
  EXPECT_THROW(backward(net, cache, Matrix::Ones(2, 2)), std::invalid_argument);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Network net = random_net(5, {2, 3, 1});
  const Network before = net;
  AdamState s = AdamState::for_network(net);
  Gradients g = Gradients::zeros_like(net);
  g.weight[0].setConstant(0.3);
  adam_step(net, g, s, 1e-3);  // seed nonzero moments
  const double m_before = s.first_moment.weight[0](0, 0);
  g.set_zero();
  for (int i = 0; i < 50; ++i) adam_step(net, g, s, 1e-3);
  EXPECT_EQ(s.step, 51u);
  EXPECT_LT(std::abs(s.first_moment.weight[0](0, 0)), std::abs(m_before));
  // Parameters with zero history never move.
  EXPECT_EQ(net.layers[1].weight, before.layers[1].weight);
  EXPECT_EQ(net.layers[0].bias, before.layers[0].bias);

  Network fresh = random_net(6, {2, 3, 1});
  const Network fresh_before = fresh;
  AdamState fs = AdamState::for_network(fresh);
  for (int i = 0; i < 100; ++i) adam_step(fresh, Gradients::zeros_like(fresh), fs, 1e-3);
  EXPECT_TRUE(testutil::bitwise_equal(fresh, fresh_before));
}

TEST(Adam, MatchesHandRecurrence) {
  Network net = single_layer(Matrix::Constant(1, 1, 0.7), Vector::Constant(1, -0.2));
  AdamState s = AdamState::for_network(net);
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  // First step, g = 1: the bias-corrected ratio is 1/(1+eps).
  Gradients g = Gradients::zeros_like(net);
  g.weight[0](0, 0) = 1.0;
  adam_step(net, g, s, lr);
  EXPECT_NEAR(net.layers[0].weight(0, 0), 0.7 - lr / (1.0 + eps), 1e-12);
  EXPECT_NEAR(0.7 - net.layers[0].weight(0, 0), lr, 1e-10);
  EXPECT_EQ(net.layers[0].bias(0), -0.2);

  double w = net.layers[0].weight(0, 0), m = (1 - b1) * 1.0, v = (1 - b2) * 1.0;
  const double gs[] = {-0.5, 2.0, 0.25, -3.0, 1e-3};
  for (int t = 2; t <= 6; ++t) {
    const double gt = gs[t - 2];
    g.weight[0](0, 0) = gt;
    adam_step(net, g, s, lr);
    m = b1 * m + (1 - b1) * gt;
    v = b2 * v + (1 - b2) * gt * gt;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(net.layers[0].weight(0, 0), w, 1e-12) << "step " << t;
  }
  EXPECT_EQ(s.step, 6u);
}

TEST(Adam, DeterministicAcrossCopies) {
  Network a = random_net(11, {4, 6, 2}), b = a;
  AdamState sa = AdamState::for_network(a), sb = AdamState::for_network(b);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    Gradients g = Gradients::zeros_like(a);
    for (auto& w : g.weight) w = random_matrix(w.rows(), w.cols(), rng);
    adam_step(a, g, sa, 1e-3);
    adam_step(b, g, sb, 1e-3);
  }
  EXPECT_TRUE(testutil::bitwise_equal(a, b));
}

TEST(Adam, Errors) {
  Network net = random_net(1, {2, 2, 1});
  AdamState s = AdamState::for_network(net);
  Gradients g = Gradients::zeros_like(net);
  EXPECT_THROW(adam_step(net, g, s, 0.0), std::invalid_argument);
  EXPECT_THROW(adam_step(net, g, s, -1.0), std::invalid_argument);
  g.weight[0](0, 0) = std::nan("");
  const Network before = net;
  EXPECT_THROW(adam_step(net, g, s, 1e-3), NonFiniteError);
  g.weight[0](0, 0) = INFINITY;
  EXPECT_THROW(adam_step(net, g, s, 1e-3), NonFiniteError);
  EXPECT_TRUE(testutil::bitwise_equal(net, before));
  EXPECT_EQ(s.step, 0u);
  const Network other = random_net(1, {2, 3, 1});
  EXPECT_THROW(adam_step(net, Gradients::zeros_like(other), s, 1e-3), std::invalid_argument);
}

TEST(SoftUpdate, Cases) {
  Network target = random_net(1, {3, 4, 2}), online = random_net(2, {3, 4, 2});
  Network copy = target;
  soft_update(copy, online, 1.0);
  EXPECT_TRUE(testutil::bitwise_equal(copy, online));
  copy = target;
  soft_update(copy, online, 0.0);
  EXPECT_TRUE(testutil::bitwise_equal(copy, target));

  Network t1 = single_layer(Matrix::Zero(1, 1), Vector::Zero(1));
  const Network o1 = single_layer(Matrix::Ones(1, 1), Vector::Ones(1));
  soft_update(t1, o1, 0.005);
  EXPECT_EQ(t1.layers[0].weight(0, 0), 0.005);

  EXPECT_THROW(soft_update(target, random_net(2, {3, 5, 2}), 0.5), std::invalid_argument);
  EXPECT_THROW(soft_update(target, online, 1.5), std::invalid_argument);
  EXPECT_THROW(soft_update(target, online, -0.1), std::invalid_argument);
}

TEST(SoftUpdate, ConvexCombination) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> tau(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Network target = random_net(100 + trial, {3, 5, 2}), online = random_net(200 + trial, {3, 5, 2});
    const auto ft = testutil::flatten(target), fo = testutil::flatten(online);
    const double t = tau(rng);
    soft_update(target, online, t);
    const auto fn = testutil::flatten(target);
    for (std::size_t i = 0; i < fn.size(); ++i) {
      EXPECT_GE(fn[i], std::min(ft[i], fo[i]));
      EXPECT_LE(fn[i], std::max(ft[i], fo[i]));
      EXPECT_NEAR(fn[i], t * fo[i] + (1 - t) * ft[i], 1e-15);
    }
  }
}

TEST(Checkpoint, RoundTripAndLayout) {
  const Network net = random_net(21, {3, 4, 2});
  std::stringstream ss;
  write_parameters(ss, net);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.size(), 4u + 2 * 8 + 8 * net.parameter_count());
  // Little-endian u32 layer count, then (out, in) of the first layer.
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 4);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3);
  double w00;
  std::memcpy(&w00, bytes.data() + 20, 8);
  EXPECT_EQ(w00, net.layers[0].weight(0, 0));
  double w01;
  std::memcpy(&w01, bytes.data() + 28, 8);
  EXPECT_EQ(w01, net.layers[0].weight(0, 1));

  Network loaded = random_net(99, {3, 4, 2});
  read_parameters(ss, loaded);
  EXPECT_TRUE(testutil::bitwise_equal(net, loaded));

  std::stringstream again(bytes);
  Network wrong = random_net(99, {3, 5, 2});
  EXPECT_THROW(read_parameters(again, wrong), std::runtime_error);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  Network t = random_net(99, {3, 4, 2});
  EXPECT_THROW(read_parameters(truncated, t), std::runtime_error);
}
