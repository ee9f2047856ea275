#include <doctest.h>

#include <cmath>

#include "demorl/errors.hpp"
#include "demorl/numkit.hpp"

using namespace demorl;
using nn::Activation;
using nn::DenseNet;
using nn::Matrix;

namespace {

double act_scalar(Activation a, double x) {
  switch (a) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::tanh:
      return std::tanh(x);
    case Activation::identity:
      return x;
  }
  return x;
}

// Per-element loops, no Eigen products.
Matrix naive_forward(const DenseNet& net, const Matrix& x) {
  Matrix cur = x;
  for (const auto& layer : net.layers()) {
    Matrix next(cur.rows(), layer.weight.cols());
    for (Eigen::Index r = 0; r < cur.rows(); ++r) {
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        double s = layer.bias(0, j);
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) s += cur(r, i) * layer.weight(i, j);
        next(r, j) = act_scalar(layer.activation, s);
      }
    }
    cur = next;
  }
  return cur;
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -scale, scale);
  return m;
}

DenseNet random_net(Rng& rng, std::size_t layers, Activation hidden, Activation out) {
  std::vector<std::size_t> dims{4 + uniform_index(rng, 29)};
  for (std::size_t k = 0; k < layers; ++k) dims.push_back(4 + uniform_index(rng, 29));
  return DenseNet::random(dims, hidden, out, rng);
}

}  // namespace

TEST_SUITE("numkit") {
  TEST_CASE("zero network with tanh head outputs zeros") {
    const DenseNet net = DenseNet::zeros({3, 5, 2}, Activation::relu, Activation::tanh);
    const Matrix out = nn::forward(net, Matrix::Ones(4, 3));
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("identity linear layer passes input through") {
    nn::Layer l{Matrix::Identity(2, 2), nn::RowVector::Zero(2), Activation::identity};
    const DenseNet net({l});
    Matrix x(1, 2);
    x << 1.0, 2.0;
    const Matrix out = nn::forward(net, x);
    CHECK(out(0, 0) == 1.0);
    CHECK(out(0, 1) == 2.0);
  }

  TEST_CASE("forward matches the scalar-loop oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
      const DenseNet net = random_net(rng, 3, trial % 2 ? Activation::relu : Activation::tanh, Activation::tanh);
      const Matrix x = random_matrix(rng, 7, static_cast<Eigen::Index>(net.input_dim()));
      const Matrix a = nn::forward(net, x);
      const Matrix b = naive_forward(net, x);
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), 1e-300});
        CHECK(std::abs(a.data()[i] - b.data()[i]) / denom < 1e-12);
      }
    }
  }

  TEST_CASE("forward rejects a batch of the wrong width") {
    Rng rng(1);
    const DenseNet net = DenseNet::random({3, 4, 1}, Activation::relu, Activation::identity, rng);
    CHECK_THROWS_AS(nn::forward(net, Matrix::Zero(2, 4)), InvalidInput);
  }

  TEST_CASE("backward of a zero output gradient is zero") {
    Rng rng(2);
    const DenseNet net = DenseNet::random({3, 6, 2}, Activation::relu, Activation::tanh, rng);
    nn::ForwardCache cache;
    nn::forward(net, random_matrix(rng, 5, 3), &cache);
    const nn::GradBundle g = nn::backward(net, cache, Matrix::Zero(5, 2));
    CHECK(g.max_abs() == 0.0);
    REQUIRE(g.input.has_value());
    CHECK(g.input->cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("tanh at zero has unit slope") {
    nn::Layer l{Matrix::Zero(1, 1), nn::RowVector::Zero(1), Activation::tanh};
    const DenseNet net({l});
    nn::ForwardCache cache;
    nn::forward(net, Matrix::Ones(1, 1), &cache);
    const nn::GradBundle g = nn::backward(net, cache, Matrix::Ones(1, 1));
    CHECK(g.layers[0].weight(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }

  TEST_CASE("backward rejects a stale cache") {
    Rng rng(3);
    const DenseNet a = DenseNet::random({3, 4, 2}, Activation::relu, Activation::tanh, rng);
    const DenseNet b = DenseNet::random({3, 5, 2}, Activation::relu, Activation::tanh, rng);
    nn::ForwardCache cache;
    nn::forward(a, random_matrix(rng, 2, 3), &cache);
    CHECK_THROWS_AS(nn::backward(b, cache, Matrix::Ones(2, 2)), InvalidInput);
    CHECK_THROWS_AS(nn::backward(a, cache, Matrix::Ones(2, 3)), InvalidInput);
  }

  TEST_CASE("backward agrees with central differences on random nets") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t depth = 2 + uniform_index(rng, 3);
      const Activation hid = trial % 3 == 0 ? Activation::relu : Activation::tanh;
      const Activation out = trial % 2 ? Activation::tanh : Activation::identity;
      const DenseNet net = random_net(rng, depth - 1, hid, out);
      const Matrix x = random_matrix(rng, 3, static_cast<Eigen::Index>(net.input_dim()));
      const Matrix w = random_matrix(rng, 3, static_cast<Eigen::Index>(net.output_dim()));
      const nn::LossFn loss = [&](const DenseNet& n) { return nn::forward(n, x).cwiseProduct(w).sum(); };
      nn::ForwardCache cache;
      nn::forward(net, x, &cache);
      const nn::GradBundle g = nn::backward(net, cache, w);
      const nn::GradBundle fd = nn::finite_diff_grad(loss, net, 1e-5);
      CHECK(nn::max_relative_error(g, fd, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("input gradient agrees with central differences") {
    Rng rng(6);
    const DenseNet net = DenseNet::random({5, 8, 3}, Activation::tanh, Activation::tanh, rng);
    Matrix x = random_matrix(rng, 2, 5);
    nn::ForwardCache cache;
    nn::forward(net, x, &cache);
    const nn::GradBundle g = nn::backward(net, cache, Matrix::Ones(2, 3));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Matrix xp = x, xm = x;
      xp.data()[i] += 1e-5;
      xm.data()[i] -= 1e-5;
      const double fd = (nn::forward(net, xp).sum() - nn::forward(net, xm).sum()) / 2e-5;
      CHECK(g.input->data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }

  TEST_CASE("tanh head stays inside the unit interval") {
    Rng rng(7);
    const DenseNet net = DenseNet::random({4, 16, 3}, Activation::relu, Activation::tanh, rng);
    const Matrix out = nn::forward(net, random_matrix(rng, 200, 4, 50.0));
    CHECK(out.cwiseAbs().maxCoeff() <= 1.0);
  }

  TEST_CASE("forward and backward are bit-reproducible") {
    Rng rng(8);
    const DenseNet net = DenseNet::random({6, 10, 10, 2}, Activation::relu, Activation::tanh, rng);
    const Matrix x = random_matrix(rng, 9, 6);
    nn::ForwardCache c1, c2;
    const Matrix a = nn::forward(net, x, &c1);
    const Matrix b = nn::forward(net, x, &c2);
    CHECK(a == b);
    const nn::GradBundle g1 = nn::backward(net, c1, a);
    const nn::GradBundle g2 = nn::backward(net, c2, b);
    for (std::size_t k = 0; k < g1.layers.size(); ++k) {
      CHECK(g1.layers[k].weight == g2.layers[k].weight);
      CHECK(g1.layers[k].bias == g2.layers[k].bias);
    }
  }

  TEST_CASE("adam with zero gradient leaves parameters alone") {
    Rng rng(9);
    DenseNet net = DenseNet::random({3, 4, 1}, Activation::relu, Activation::identity, rng);
    const DenseNet before = net;
    nn::AdamState st = nn::AdamState::for_net(net);
    nn::adam_step(net, nn::GradBundle::zeros_like(net), st);
    CHECK(net == before);
    CHECK(st.step == 1);
  }

  TEST_CASE("first adam step moves by about lr against the gradient sign") {
    Rng rng(10);
    DenseNet net = DenseNet::random({3, 4, 2}, Activation::relu, Activation::identity, rng);
    const DenseNet before = net;
    nn::GradBundle g = nn::GradBundle::zeros_like(net);
    for (auto& l : g.layers) {
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = uniform(rng, -2.0, 2.0);
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = uniform(rng, -2.0, 2.0);
    }
    nn::AdamState st = nn::AdamState::for_net(net, 1e-3);
    nn::adam_step(net, g, st);
    for (std::size_t k = 0; k < g.layers.size(); ++k) {
      for (Eigen::Index i = 0; i < g.layers[k].weight.size(); ++i) {
        const double moved = net.layers()[k].weight.data()[i] - before.layers()[k].weight.data()[i];
        const double gi = g.layers[k].weight.data()[i];
        CHECK(moved == doctest::Approx(-1e-3 * (gi > 0 ? 1.0 : -1.0)).epsilon(1e-6));
      }
    }
  }

  TEST_CASE("adam on w^2 follows a scalar reference trace") {
    nn::Layer l{Matrix::Constant(1, 1, 1.5), nn::RowVector::Zero(1), Activation::identity};
    DenseNet net({l});
    nn::AdamState st = nn::AdamState::for_net(net, 0.1);
    double w = 1.5, m = 0.0, v = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1;
    for (int t = 1; t <= 10; ++t) {
      nn::GradBundle g = nn::GradBundle::zeros_like(net);
      g.layers[0].weight(0, 0) = 2.0 * net.layers()[0].weight(0, 0);
      nn::adam_step(net, g, st);
      const double gw = 2.0 * w;
      m = b1 * m + (1 - b1) * gw;
      v = b2 * v + (1 - b2) * gw * gw;
      const double mh = m / (1 - std::pow(b1, t));
      const double vh = v / (1 - std::pow(b2, t));
      w -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(std::abs(net.layers()[0].weight(0, 0) - w) < 1e-12);
    }
  }

  TEST_CASE("adam with zero learning rate is the identity") {
    Rng rng(12);
    DenseNet net = DenseNet::random({3, 5, 2}, Activation::tanh, Activation::tanh, rng);
    const DenseNet before = net;
    nn::AdamState st = nn::AdamState::for_net(net, 0.0);
    nn::GradBundle g = nn::GradBundle::zeros_like(net);
    g.layers[0].weight.setConstant(3.0);
    for (int i = 0; i < 5; ++i) nn::adam_step(net, g, st);
    CHECK(net == before);
  }

  TEST_CASE("adam refuses non-finite gradients without side effects") {
    Rng rng(13);
    DenseNet net = DenseNet::random({2, 3, 1}, Activation::relu, Activation::identity, rng);
    const DenseNet before = net;
    nn::AdamState st = nn::AdamState::for_net(net);
    nn::GradBundle g = nn::GradBundle::zeros_like(net);
    g.layers[1].bias(0, 0) = std::nan("");
    CHECK_THROWS_AS(nn::adam_step(net, g, st), NumericError);
    CHECK(net == before);
    CHECK(st.step == 0);
  }

  TEST_CASE("l2 gradient is coeff times weight and skips biases") {
    nn::Layer l{Matrix::Constant(1, 1, 2.0), nn::RowVector::Constant(1, 3.0), Activation::identity};
    const DenseNet net({l});
    const nn::GradBundle g = nn::l2_grad(net, 5e-3);
    CHECK(g.layers[0].weight(0, 0) == doctest::Approx(0.01));
    CHECK(g.layers[0].bias(0, 0) == 0.0);
    CHECK(nn::l2_grad(net, 0.0).max_abs() == 0.0);
    CHECK_THROWS_AS(nn::l2_grad(net, -1.0), InvalidInput);
  }

  TEST_CASE("l2 gradient is consistent with finite differences of the penalized loss") {
    Rng rng(14);
    const DenseNet net = DenseNet::random({4, 6, 2}, Activation::tanh, Activation::identity, rng);
    const Matrix x = random_matrix(rng, 3, 4);
    const double c = 0.37;
    const nn::LossFn loss = [&](const DenseNet& n) { return nn::forward(n, x).sum() + nn::l2_penalty(n, c); };
    nn::ForwardCache cache;
    nn::forward(net, x, &cache);
    nn::GradBundle g = nn::backward(net, cache, Matrix::Ones(3, 2));
    g += nn::l2_grad(net, c);
    CHECK(nn::max_relative_error(g, nn::finite_diff_grad(loss, net, 1e-5), 1e-6) < 1e-6);
  }

  TEST_CASE("finite differences of simple functions") {
    nn::Layer l{Matrix::Constant(1, 1, 3.0), nn::RowVector::Zero(1), Activation::identity};
    const DenseNet net({l});
    const nn::GradBundle sq = nn::finite_diff_grad(
        [](const DenseNet& n) { return n.layers()[0].weight(0, 0) * n.layers()[0].weight(0, 0); }, net, 1e-5);
    CHECK(std::abs(sq.layers[0].weight(0, 0) - 6.0) < 1e-6);
    const nn::GradBundle flat = nn::finite_diff_grad([](const DenseNet&) { return 4.0; }, net, 1e-5);
    CHECK(flat.max_abs() == 0.0);
  }

  TEST_CASE("polyak averaging") {
    nn::Layer zero{Matrix::Zero(1, 1), nn::RowVector::Zero(1), Activation::identity};
    nn::Layer one{Matrix::Ones(1, 1), nn::RowVector::Ones(1), Activation::identity};
    DenseNet target({zero});
    const DenseNet source({one});
    nn::polyak_average(target, source, 0.05);
    nn::polyak_average(target, source, 0.05);
    CHECK(target.layers()[0].weight(0, 0) == doctest::Approx(0.0975).epsilon(1e-14));
  }

  TEST_CASE("network json round trip is exact") {
    Rng rng(15);
    const DenseNet net = DenseNet::random({5, 7, 3}, Activation::relu, Activation::tanh, rng);
    const nlohmann::json j = net;
    const DenseNet back = nlohmann::json::parse(j.dump()).get<DenseNet>();
    CHECK(back == net);
    nn::AdamState st = nn::AdamState::for_net(net);
    st.step = 17;
    st.m[0].weight(0, 0) = 0.123456789012345678;
    const nn::AdamState st2 = nlohmann::json::parse(nlohmann::json(st).dump()).get<nn::AdamState>();
    CHECK(st2.step == 17);
    CHECK(st2.m[0].weight(0, 0) == st.m[0].weight(0, 0));
  }
}
