#include <gtest/gtest.h>

#include <cmath>

#include "betacons/nn.hpp"
#include "betacons/rng.hpp"

using namespace betacons;

namespace {

constexpr VariantKind kAll[] = {VariantKind::kIndependent, VariantKind::kSharedFirst, VariantKind::kFullyShared,
                                VariantKind::kBaseline};

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Parameters by brute-force walk over the layers.
std::size_t counted_parameters(const Network& net) {
  std::size_t n = 0;
  for (const auto& l : net.layers()) n += static_cast<std::size_t>(l.spec.in_dim * l.spec.out_dim + l.spec.out_dim);
  return n;
}

}  // namespace

TEST(Variant, HiddenWidths) {
  NetworkVariant v{VariantKind::kFullyShared, 40};
  EXPECT_EQ(v.hidden1(), 30);
  EXPECT_EQ(v.hidden2(), 20);
  v.input_dim = 5;
  EXPECT_EQ(v.hidden1(), 4);
  EXPECT_EQ(v.hidden2(), 3);
  v.input_dim = 1;
  EXPECT_THROW(v.validate(), DomainError);
}

TEST(Variant, NamesRoundTrip) {
  for (auto k : kAll) EXPECT_EQ(parse_variant(variant_name(k)), k);
  EXPECT_THROW(parse_variant("M_X"), DomainError);
}

TEST(Variant, ParameterCountMatchesStructure) {
  for (auto k : kAll) {
    for (int d : {2, 3, 8, 40, 116, 130, 286}) {
      const auto net = Network::build({k, d}, 1);
      EXPECT_EQ(net.parameter_count(), counted_parameters(net));
      EXPECT_EQ(net.parameter_count(), NetworkVariant({k, d}).parameter_count());
    }
  }
}

TEST(Network, Structure) {
  const auto mi = Network::build({VariantKind::kIndependent, 8}, 1);
  EXPECT_EQ(mi.layers().size(), 6U);
  for (const auto& l : mi.layers()) EXPECT_TRUE(l.name.starts_with("mu.") || l.name.starts_with("sigma."));
  const auto ms = Network::build({VariantKind::kSharedFirst, 8}, 1);
  EXPECT_EQ(ms.layers().front().name, "shared.l1");
  EXPECT_EQ(ms.layers().size(), 5U);
  const auto mf = Network::build({VariantKind::kFullyShared, 8}, 1);
  EXPECT_EQ(mf.layers().back().spec.out_dim, 2);
  EXPECT_EQ(mf.heads().size(), 2U);
  const auto b = Network::build({VariantKind::kBaseline, 8}, 1);
  EXPECT_EQ(b.heads().size(), 1U);
}

TEST(Network, SeededInit) {
  const auto a = Network::build({VariantKind::kFullyShared, 10}, 42);
  const auto b = Network::build({VariantKind::kFullyShared, 10}, 42);
  const auto c = Network::build({VariantKind::kFullyShared, 10}, 43);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_NE(a.parameters(), c.parameters());
  for (const auto& l : a.layers()) {
    EXPECT_TRUE(a.bias(l).isZero());
    EXPECT_LE(a.weights(l).cwiseAbs().maxCoeff(), std::sqrt(6.0 / l.spec.in_dim));
  }
}

TEST(Network, ZeroWeightsOutputs) {
  for (auto k : {VariantKind::kIndependent, VariantKind::kSharedFirst, VariantKind::kFullyShared}) {
    auto net = Network::build({k, 5}, 1);
    net.parameters().setZero();
    Rng rng(1);
    const auto p = net.predict(random_matrix(rng, 4, 5));
    for (const auto& q : p) {
      EXPECT_DOUBLE_EQ(q.mu_hat, 0.5);
      ASSERT_TRUE(q.sigma_hat.has_value());
      EXPECT_NEAR(*q.sigma_hat, std::log(2.0), 1e-15);
    }
  }
}

TEST(Network, ZeroInputsGiveConstantOutput) {
  auto net = Network::build({VariantKind::kSharedFirst, 6}, 3);
  Rng rng(2);
  for (auto& v : net.parameters()) v += 0.1 * rng.normal();
  const Eigen::MatrixXd y = net.forward(Eigen::MatrixXd::Zero(5, 6));
  for (Eigen::Index i = 1; i < 5; ++i) EXPECT_EQ(y.row(i), y.row(0));
}

TEST(Network, DuplicateRows) {
  auto net = Network::build({VariantKind::kFullyShared, 6}, 3);
  Rng rng(3);
  Eigen::MatrixXd x = random_matrix(rng, 4, 6);
  x.row(3) = x.row(1);
  const Eigen::MatrixXd y = net.forward(x);
  EXPECT_EQ(y.row(3), y.row(1));
}

TEST(Network, ShapeErrors) {
  auto net = Network::build({VariantKind::kFullyShared, 6}, 3);
  EXPECT_THROW(net.forward(Eigen::MatrixXd::Zero(3, 5)), ShapeError);
  Eigen::VectorXd g;
  EXPECT_THROW(net.loss_and_gradient(Eigen::MatrixXd::Zero(3, 6), Eigen::MatrixXd::Zero(3, 1), g), ShapeError);
  EXPECT_THROW(net.loss(Eigen::MatrixXd::Zero(3, 6), Eigen::MatrixXd::Zero(2, 2)), ShapeError);
}

TEST(Network, OutputsInRange) {
  Rng rng(4);
  for (auto k : {VariantKind::kIndependent, VariantKind::kSharedFirst, VariantKind::kFullyShared}) {
    auto net = Network::build({k, 7}, 9);
    for (auto& v : net.parameters()) v *= 10.0;
    const Eigen::MatrixXd y = net.forward(random_matrix(rng, 50, 7, -20.0, 20.0));
    EXPECT_TRUE(y.allFinite());
    EXPECT_GE(y.col(0).minCoeff(), 0.0);
    EXPECT_LE(y.col(0).maxCoeff(), 1.0);
    EXPECT_GE(y.col(1).minCoeff(), 0.0);
  }
}

TEST(JointLoss, Examples) {
  std::vector<MomentPair> t = {{0.3, 0.1}, {0.6, 0.2}};
  std::vector<Prediction> p = {{0.3, 0.1}, {0.6, 0.2}};
  EXPECT_EQ(joint_loss(p, t), 0.0);
  std::vector<Prediction> pm = {{0.4, 0.1}, {0.7, 0.2}};
  EXPECT_NEAR(joint_loss(pm, t), 0.01, 1e-15);
  std::vector<Prediction> ps = {{0.3, 0.2}, {0.6, 0.3}};
  EXPECT_NEAR(joint_loss(ps, t), joint_loss(pm, t), 1e-15);
  EXPECT_THROW(joint_loss({p[0]}, t), ShapeError);
}

TEST(JointLoss, MatchesNetworkLoss) {
  Rng rng(5);
  auto net = Network::build({VariantKind::kFullyShared, 4}, 2);
  const Eigen::MatrixXd x = random_matrix(rng, 10, 4);
  const Eigen::MatrixXd y = random_matrix(rng, 10, 2, 0.05, 0.5);
  std::vector<MomentPair> t;
  for (Eigen::Index i = 0; i < 10; ++i) t.push_back({y(i, 0), y(i, 1)});
  EXPECT_NEAR(joint_loss(net.predict(x), t), net.loss(x, y), 1e-14);
}

TEST(Gradient, FiniteDifferences) {
  for (auto k : kAll) {
    for (int inst = 0; inst < 25; ++inst) {
      Rng rng(100 + static_cast<std::uint64_t>(inst), {static_cast<std::uint64_t>(k)});
      const int d = 2 + static_cast<int>(rng.below(7));
      auto net = Network::build({k, d}, static_cast<std::uint64_t>(inst));
      for (auto& v : net.parameters()) v += 0.1 * rng.normal();
      const Eigen::MatrixXd x = random_matrix(rng, 6, d, -2.0, 2.0);
      const Eigen::MatrixXd y = random_matrix(rng, 6, net.variant().n_outputs(), 0.05, 0.5);
      Eigen::VectorXd g;
      net.loss_and_gradient(x, y, g);
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double save = net.parameters()[i];
        net.parameters()[i] = save + 1e-5;
        const double lp = net.loss(x, y);
        net.parameters()[i] = save - 1e-5;
        const double lm = net.loss(x, y);
        net.parameters()[i] = save;
        const double fd = (lp - lm) / 2e-5;
        EXPECT_LE(std::abs(fd - g[i]), 1e-4 * std::max({std::abs(fd), std::abs(g[i]), 1e-6}))
            << variant_name(k) << " param " << i;
      }
    }
  }
}

TEST(Gradient, SingleUnitQuadratic) {
  // B with input_dim 2: hidden widths 2 and 1. Zero everything except the
  // output bias, so the loss is (b - y)^2 and dL/db = 2 (b - y).
  auto net = Network::build({VariantKind::kBaseline, 2}, 1);
  net.parameters().setZero();
  const auto& out = net.layers().back();
  net.parameters()[out.bias_offset] = 0.7;
  Eigen::MatrixXd x(1, 2);
  x << 0.3, -0.4;
  Eigen::MatrixXd y(1, 1);
  y << 0.2;
  Eigen::VectorXd g;
  EXPECT_NEAR(net.loss_and_gradient(x, y, g), 0.25, 1e-15);
  EXPECT_NEAR(g[out.bias_offset], 1.0, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto net = Network::build({VariantKind::kBaseline, 3}, 1);
  net.parameters().setZero();
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 3);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(4, 1);
  AdamState st;
  const Eigen::VectorXd before = net.parameters();
  EXPECT_EQ(backward_and_step(net, x, y, st, TrainConfig{}), 0.0);
  EXPECT_LE((net.parameters() - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Adam, NonFiniteAborts) {
  auto net = Network::build({VariantKind::kBaseline, 3}, 1);
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(2, 3);
  x(0, 0) = NAN;
  AdamState st;
  EXPECT_THROW(backward_and_step(net, x, Eigen::MatrixXd::Zero(2, 1), st, TrainConfig{}), TrainingError);
}

TEST(EarlyStopping, WorseningStopsAfterPatience) {
  EarlyStopping es(5, 1e-6);
  int stopped_at = 0;
  for (int epoch = 1; epoch <= 50; ++epoch) {
    if (es.update(static_cast<double>(epoch), epoch)) {
      stopped_at = epoch;
      break;
    }
  }
  EXPECT_EQ(stopped_at, 6);
  EXPECT_EQ(es.best_epoch(), 1);
}

TEST(EarlyStopping, MinDelta) {
  EarlyStopping es(2, 0.1);
  EXPECT_FALSE(es.update(1.0, 1));
  EXPECT_FALSE(es.update(0.95, 2));
  EXPECT_FALSE(es.improved());
  EXPECT_TRUE(es.update(0.91, 3));
  EXPECT_EQ(es.best_epoch(), 1);
}

namespace {

struct Linear {
  Eigen::MatrixXd xtr, ytr, xva, yva;
};

Linear linear_problem(std::uint64_t seed, int n, int d) {
  Rng rng(seed);
  Eigen::VectorXd w(d);
  for (int j = 0; j < d; ++j) w[j] = rng.normal();
  auto make = [&](int rows, Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
    x = random_matrix(rng, rows, d);
    y.resize(rows, 2);
    for (int i = 0; i < rows; ++i) {
      const double z = x.row(i).dot(w);
      y(i, 0) = 1.0 / (1.0 + std::exp(-z));
      y(i, 1) = 0.05 + 0.1 / (1.0 + std::exp(z));
    }
  };
  Linear p;
  make(n, p.xtr, p.ytr);
  make(n / 4, p.xva, p.yva);
  return p;
}

}  // namespace

TEST(Train, LossDecreasesEarly) {
  int decreasing = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = linear_problem(s, 800, 6);
    auto net = Network::build({VariantKind::kFullyShared, 6}, s);
    TrainConfig tc;
    tc.seed = s;
    tc.max_epochs = 5;
    tc.learning_rate = 3e-3;
    tc.batch_size = 32;
    const auto h = train(net, p.xtr, p.ytr, p.xva, p.yva, tc);
    bool strictly = true;
    for (std::size_t e = 1; e < h.train_loss.size(); ++e) strictly = strictly && h.train_loss[e] < h.train_loss[e - 1];
    decreasing += strictly ? 1 : 0;
  }
  EXPECT_GE(decreasing, 9);
}

TEST(Train, DeterministicAndRestoresBest) {
  const auto p = linear_problem(7, 400, 5);
  TrainConfig tc;
  tc.seed = 3;
  tc.max_epochs = 30;
  tc.batch_size = 16;
  auto a = Network::build({VariantKind::kSharedFirst, 5}, 3);
  auto b = Network::build({VariantKind::kSharedFirst, 5}, 3);
  const auto ha = train(a, p.xtr, p.ytr, p.xva, p.yva, tc);
  const auto hb = train(b, p.xtr, p.ytr, p.xva, p.yva, tc);
  EXPECT_EQ(ha.train_loss, hb.train_loss);
  EXPECT_EQ(ha.val_loss, hb.val_loss);
  EXPECT_EQ(a.parameters(), b.parameters());
  ASSERT_GE(ha.best_epoch, 1);
  EXPECT_DOUBLE_EQ(a.loss(p.xva, p.yva), ha.val_loss[static_cast<std::size_t>(ha.best_epoch - 1)]);
  EXPECT_DOUBLE_EQ(*std::min_element(ha.val_loss.begin(), ha.val_loss.end()),
                   ha.val_loss[static_cast<std::size_t>(ha.best_epoch - 1)]);
}

TEST(Train, EmptySplits) {
  auto net = Network::build({VariantKind::kFullyShared, 3}, 1);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(4, 3), y = Eigen::MatrixXd::Constant(4, 2, 0.2);
  EXPECT_THROW(train(net, Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 2), x, y, TrainConfig{}), InsufficientData);
  EXPECT_THROW(train(net, x, y, Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 2), TrainConfig{}), InsufficientData);
}

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  tc.patience = 0;
  EXPECT_THROW(tc.validate(), DomainError);
  tc = {};
  tc.learning_rate = -1.0;
  EXPECT_THROW(tc.validate(), DomainError);
  tc = {};
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), DomainError);
}

TEST(Normalization, TrainStatistics) {
  Rng rng(8);
  Eigen::MatrixXd x = random_matrix(rng, 100, 3, 2.0, 6.0);
  x.col(2).setConstant(4.0);
  const auto n = Normalization::fit(x);
  const Eigen::MatrixXd z = n.apply(x);
  EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(z.col(0).array().square().mean()), 1.0, 1e-12);
  EXPECT_TRUE(z.col(2).allFinite());
}

TEST(Checkpoint, RoundTrip) {
  auto net = Network::build({VariantKind::kIndependent, 5}, 11);
  Rng rng(9);
  const Eigen::MatrixXd x = random_matrix(rng, 20, 5);
  const auto norm = Normalization::fit(x);
  TrainConfig tc;
  const auto j = checkpoint_json(net, 11, tc, &norm);
  const auto back = load_checkpoint(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.net.parameters(), net.parameters());
  ASSERT_TRUE(back.normalization.has_value());
  EXPECT_EQ(back.normalization->mean, norm.mean);
  EXPECT_EQ(back.net.forward(x), net.forward(x));
}
