#include <gtest/gtest.h>

#include <cmath>

#include "mlcaps/model.hpp"
#include "support.hpp"

using namespace mlcaps;
using mlcaps::testing::Gen;
using mlcaps::testing::gradcheck;
using mlcaps::testing::gradcheck_widened;
using mlcaps::testing::widen;

namespace {

// Scalar hinge loss, written out term by term.
double margin_oracle(const std::vector<double>& x, const std::vector<double>& t, std::size_t batch, double mp,
                     double mm, double gamma) {
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double present = mp - x[i] > 0 ? (mp - x[i]) * (mp - x[i]) : 0.0;
    const double absent = x[i] - mm > 0 ? (x[i] - mm) * (x[i] - mm) : 0.0;
    total += t[i] * present + gamma * (1 - t[i]) * absent;
  }
  return total / double(batch);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 1;
  c.height = c.width = 8;
  c.conv_filters = {2};
  c.primary_capsule_channels = 1;  // 64 primary capsules on an 8x8 map
  c.primary_dim = 4;
  c.secondary_dim = 4;
  c.decoder_hidden = {6, 5};
  c.level_classes = {2, 3};
  c.secondary_init_std = 0.3;
  return c;
}

template <typename T>
std::vector<Tensor<T>> one_hot_targets(const std::vector<std::vector<std::size_t>>& ids,
                                       const std::vector<std::size_t>& classes) {
  std::vector<Tensor<T>> out;
  for (std::size_t n = 0; n < classes.size(); ++n) {
    Tensor<T> t(Shape{ids.size(), classes[n]});
    for (std::size_t b = 0; b < ids.size(); ++b) t.mutable_data()[b * classes[n] + ids[b][n]] = T(1);
    out.push_back(t);
  }
  return out;
}

}  // namespace

TEST(MarginLoss, BothHingesInactiveAtMargins) {
  Tensor<double> x({1, 3}, std::vector<double>{0.9, 0.1, 0.1}), t({1, 3}, std::vector<double>{1, 0, 0});
  EXPECT_DOUBLE_EQ(margin_loss(x, t, LossConstants{}).item(), 0.0);
}

TEST(MarginLoss, SingleAbsentCapsuleCostsMPlusSquared) {
  Tensor<double> x({1, 1}, 0.0), t({1, 1}, 1.0);
  EXPECT_NEAR(margin_loss(x, t, LossConstants{}).item(), 0.81, 1e-12);
}

TEST(MarginLoss, MatchesScalarOracleOnRandomInputs) {
  Gen g(40);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = g.index(1, 5), K = g.index(1, 12);
    LossConstants c;
    c.m_plus = g.uniform(0.5, 0.99);
    c.m_minus = g.uniform(0.01, 0.5);
    c.gamma = g.uniform(0.05, 0.95);
    auto x = g.tensor<double>({B, K}, 0, 1);
    auto t = g.tensor<double>({B, K}, 0, 1);  // soft targets are allowed
    if (trial % 2 == 0) {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
      for (std::size_t b = 0; b < B; ++b) t.mutable_data()[b * K + g.index(0, K - 1)] = 1.0;
    }
    const double oracle = margin_oracle({x.data().begin(), x.data().end()}, {t.data().begin(), t.data().end()}, B,
                                        c.m_plus, c.m_minus, c.gamma);
    EXPECT_NEAR(margin_loss(x, t, c).item(), oracle, 1e-5 * std::max(1.0, oracle));
  }
}

TEST(MarginLoss, GradientMatchesFiniteDifferences) {
  Gen g(41);
  auto x = g.tensor<double>({3, 4}, 0.02, 0.98, true), t = g.tensor<double>({3, 4}, 0, 1, true);
  auto r = gradcheck<double>([](auto& in) { return margin_loss(in[0], in[1], LossConstants{}); }, {x, t}, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(ReconstructionLoss, Arithmetic) {
  Tensor<double> x({2, 1, 28, 28}, 0.0), h({2, 1, 28, 28}, 0.5);
  EXPECT_NEAR(reconstruction_loss(x, h).item(), 196.0, 1e-9);
  EXPECT_DOUBLE_EQ(reconstruction_loss(x, x).item(), 0.0);
  Gen g(42);
  auto a = g.tensor<double>({3, 2, 4, 4}, 0, 1), b = g.tensor<double>({3, 2, 4, 4}, 0, 1);
  double oracle = 0;
  for (std::size_t i = 0; i < a.size(); ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(reconstruction_loss(a, b).item(), oracle / 3.0, 1e-9);
  EXPECT_THROW(reconstruction_loss(a, Tensor<double>({3, 2, 4, 5})), dimension_error);
}

TEST(TotalLoss, FixtureValue) {
  auto l = [](double v) { return Tensor<double>::scalar(v); };
  EXPECT_NEAR(total_loss<double>({l(2.0), l(1.0)}, l(100.0), {0.9, 0.1}, 0.0005).item(), 1.949050, 1e-6);
}

TEST(TotalLoss, CollapsingWeights) {
  auto l = [](double v) { return Tensor<double>::scalar(v); };
  EXPECT_DOUBLE_EQ(total_loss<double>({l(3.0), l(7.0), l(11.0)}, l(5.0), {1, 0, 0}, 0.0).item(), 3.0);
  EXPECT_DOUBLE_EQ(total_loss<double>({l(3.0), l(7.0)}, l(5.0), {0.4, 0.6}, 1.0).item(), 5.0);
  EXPECT_THROW(total_loss<double>({l(3.0), l(7.0)}, l(5.0), {1.0}, 0.5), dimension_error);
}

TEST(TotalLoss, LinearInEachComponent) {
  Gen g(43);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = g.index(2, 4);
    std::vector<double> lambdas(N);
    for (auto& v : lambdas) v = g.uniform(0, 1);
    const double tau = g.uniform(0, 1);
    auto probe = [&](std::size_t which) {  // which == N probes L_R
      std::vector<Tensor<double>> ls;
      for (std::size_t n = 0; n < N; ++n) ls.push_back(Tensor<double>::scalar(n == which ? 1.0 : 0.0, true));
      auto r = Tensor<double>::scalar(which == N ? 1.0 : 0.0, true);
      auto total = total_loss(ls, r, lambdas, tau);
      backward(total);
      const double coef = which == N ? tau : (1 - tau) * lambdas[which];
      EXPECT_NEAR(total.item(), coef, 1e-12);
      EXPECT_NEAR((which == N ? r : ls[which]).grad()[0], coef, 1e-12);
    };
    for (std::size_t w = 0; w <= N; ++w) probe(w);
  }
}

TEST(Model, MnistAndCifar100LevelShapes) {
  ModelConfig c;
  c.conv_filters = {2, 2};
  c.primary_capsule_channels = 1;
  c.decoder_hidden = {8, 8};
  c.level_classes = {5, 10};
  Model<float> mnist(c, 1);
  auto out = mnist.forward(Tensor<float>({1, 1, 28, 28}));
  ASSERT_EQ(out.scores.size(), 2u);
  EXPECT_EQ(out.scores[0].shape(), (Shape{1, 5}));
  EXPECT_EQ(out.scores[1].shape(), (Shape{1, 10}));
  EXPECT_EQ(out.capsules[1].shape(), (Shape{1, 10, 16}));
  EXPECT_EQ(out.reconstruction.shape(), (Shape{1, 1, 28, 28}));
  for (const auto& s : out.scores)
    for (float v : s.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  for (float v : out.reconstruction.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }

  c.channels = 3;
  c.height = c.width = 8;
  c.level_classes = {8, 20, 100};
  Model<float> cifar(c, 1);
  auto out100 = cifar.forward(Tensor<float>({2, 3, 8, 8}));
  ASSERT_EQ(out100.scores.size(), 3u);
  EXPECT_EQ(out100.scores[2].shape(), (Shape{2, 100}));
  EXPECT_EQ(out100.reconstruction.shape(), (Shape{2, 3, 8, 8}));
}

TEST(Model, DecoderParameterCountMatchesClosedForm) {
  ModelConfig c;
  c.conv_filters = {4, 4};
  c.primary_capsule_channels = 1;
  c.level_classes = {5, 10};
  Model<float> m(c, 3);
  const std::size_t D = 16, h1 = 512, h2 = 512, img = 784;
  std::size_t expected = 0;
  for (std::size_t k : {5u, 10u}) expected += (k * D * h1 + h1) + (h1 * h2 + h2);
  expected += 2 * h2 * img + img;
  EXPECT_EQ(m.decoder_parameter_count(), expected);
}

TEST(Model, RejectsMismatchedInput) {
  Model<float> m(tiny_config(), 1);
  EXPECT_THROW(m.forward(Tensor<float>({1, 1, 8, 9})), dimension_error);
  EXPECT_THROW(m.forward(Tensor<float>({1, 3, 8, 8})), dimension_error);
  auto bad = one_hot_targets<float>({{0, 0}}, {2, 4});
  EXPECT_THROW(m.forward(Tensor<float>({1, 1, 8, 8}), &bad), dimension_error);
  ModelConfig one_level = tiny_config();
  one_level.level_classes = {3};
  EXPECT_THROW(Model<float>(one_level, 1), config_error);
}

TEST(Model, PerturbingOneLevelLeavesOtherLevelsBitIdentical) {
  Model<double> m(tiny_config(), 5);
  Gen g(44);
  auto x = g.tensor<double>({3, 1, 8, 8});
  ForwardOutput<double> before, after;
  m.encode(x, before);
  auto w = m.parameter("secondary1.weight");
  for (auto& v : w.mutable_data()) v += 0.05;
  m.encode(x, after);
  EXPECT_EQ(std::vector<double>(before.capsules[0].data().begin(), before.capsules[0].data().end()),
            std::vector<double>(after.capsules[0].data().begin(), after.capsules[0].data().end()));
  EXPECT_NE(std::vector<double>(before.capsules[1].data().begin(), before.capsules[1].data().end()),
            std::vector<double>(after.capsules[1].data().begin(), after.capsules[1].data().end()));
}

TEST(Model, PrimaryCapsulesAreComputedOncePerForward) {
  Model<double> m(tiny_config(), 6);
  auto x = Tensor<double>({2, 1, 8, 8}, 0.3);
  auto out = m.forward(x);
  auto order = topological_order(sum(add(sum(out.scores[0]), sum(out.scores[1]))));
  // both secondary layers hang off the same squash node
  std::size_t primary_squash = 0;
  for (auto* n : order)
    if (n->op == "squash") ++primary_squash;
  EXPECT_EQ(primary_squash, 1u);
}

TEST(Model, MaskedOutCapsulesGetNoDecoderGradient) {
  Model<double> m(tiny_config(), 7);
  Gen g(45);
  auto caps0 = g.tensor<double>({2, 2, 4}, -0.5, 0.5, true), caps1 = g.tensor<double>({2, 3, 4}, -0.5, 0.5, true);
  auto masks = one_hot_targets<double>({{1, 2}, {0, 0}}, {2, 3});
  backward(sum(m.decode({caps0, caps1}, masks)));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 3; ++k) {
      const bool selected = masks[1][b * 3 + k] == 1.0;
      double mag = 0;
      for (std::size_t d = 0; d < 4; ++d) mag += std::abs(caps1.grad()[(b * 3 + k) * 4 + d]);
      if (selected) EXPECT_GT(mag, 0.0);
      else EXPECT_EQ(mag, 0.0);
    }
}

TEST(Model, TauZeroStarvesDecoderAndZeroLambdasStarveClassifier) {
  Gen g(46);
  auto x = g.tensor<double>({2, 1, 8, 8}, -1, 1);
  auto raw = g.tensor<double>({2, 1, 8, 8}, 0, 1);
  auto targets = one_hot_targets<double>({{0, 1}, {1, 2}}, {2, 3});
  auto run = [&](double tau, std::vector<double> lambdas) {
    auto c = tiny_config();
    c.loss.tau = tau;
    auto m = std::make_unique<Model<double>>(c, 8);
    auto out = m->forward(x, &targets);
    std::vector<Tensor<double>> levels;
    for (std::size_t n = 0; n < 2; ++n) levels.push_back(margin_loss(out.scores[n], targets[n], c.loss));
    backward(total_loss(levels, reconstruction_loss(raw, out.reconstruction), lambdas, tau));
    return m;
  };
  auto grad_mag = [](Model<double>& m, const std::string& prefix) {
    double s = 0;
    for (auto& p : m.parameters())
      if (p.name.rfind(prefix, 0) == 0 && p.tensor.has_grad())
        for (double v : p.tensor.grad()) s += std::abs(v);
    return s;
  };
  auto a = run(0.0, {0.5, 0.5});
  EXPECT_EQ(grad_mag(*a, "decoder"), 0.0);
  EXPECT_GT(grad_mag(*a, "secondary"), 0.0);
  auto b = run(0.5, {0.0, 0.0});
  EXPECT_GT(grad_mag(*b, "decoder"), 0.0);
  auto d = run(0.0, {0.0, 0.0});
  EXPECT_EQ(grad_mag(*d, "secondary"), 0.0);
  EXPECT_EQ(grad_mag(*d, "conv"), 0.0);
}

TEST(Model, ZeroLambdasGiveNoGradientThroughTheScores) {
  auto c = tiny_config();
  Model<double> m(c, 11);
  Gen g(49);
  auto x = g.tensor<double>({2, 1, 8, 8}, -1, 1);
  auto raw = g.tensor<double>({2, 1, 8, 8}, 0, 1);
  auto targets = one_hot_targets<double>({{0, 1}, {1, 2}}, {2, 3});
  auto out = m.forward(x, &targets);
  std::vector<Tensor<double>> levels;
  for (std::size_t n = 0; n < 2; ++n) levels.push_back(margin_loss(out.scores[n], targets[n], c.loss));
  backward(total_loss(levels, reconstruction_loss(raw, out.reconstruction), {0.0, 0.0}, 0.5));
  for (const auto& s : out.scores) {
    ASSERT_TRUE(s.has_grad());
    for (double v : s.grad()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Model, ArgmaxMaskAndPredictions) {
  Tensor<float> s({2, 3}, std::vector<float>{0.1f, 0.7f, 0.2f, 0.9f, 0.3f, 0.4f});
  auto m = argmax_mask(s);
  EXPECT_EQ(std::vector<float>(m.data().begin(), m.data().end()), (std::vector<float>{0, 1, 0, 1, 0, 0}));
  Tensor<float> f({2, 2}, std::vector<float>{0.2f, 0.8f, 0.6f, 0.5f});
  auto p = predict_labels<float>({s, f});
  EXPECT_EQ(p[0].ids, (std::vector<std::size_t>{1, 1}));
  EXPECT_EQ(p[1].ids, (std::vector<std::size_t>{0, 0}));
  auto probs = class_probabilities(s);
  EXPECT_NEAR(probs[0] + probs[1] + probs[2], 1.0f, 1e-6f);
}

template <typename T>
class EndToEndGrad : public ::testing::Test {};
using Scalars = ::testing::Types<float, double>;
TYPED_TEST_SUITE(EndToEndGrad, Scalars);

// Whole tiny model: 8x8 input, 2 conv filters, K = (2, 3). Routing runs one
// iteration so that the analytic gradient is the true derivative.
TYPED_TEST(EndToEndGrad, TinyModelMatchesFiniteDifferences) {
  using T = TypeParam;
  auto c = tiny_config();
  c.routing_iters = 1;
  c.loss.tau = 0.3;
  Model<T> m(c, 9);
  Model<double> twin(c, 9);
  Gen g(47);
  auto x = g.tensor<T>({2, 1, 8, 8}, -1, 1);
  auto raw = g.tensor<T>({2, 1, 8, 8}, 0, 1);
  auto x_wide = widen(x), raw_wide = widen(raw);
  auto targets = one_hot_targets<T>({{0, 1}, {1, 2}}, {2, 3});
  auto targets_wide = one_hot_targets<double>({{0, 1}, {1, 2}}, {2, 3});
  std::vector<Tensor<T>> params;
  std::vector<Tensor<double>> twin_params;
  auto mp = m.parameters(), tp = twin.parameters();
  for (std::size_t i = 0; i < mp.size(); ++i) {
    params.push_back(mp[i].tensor);
    auto dst = tp[i].tensor.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = double(mp[i].tensor.data()[j]);
    twin_params.push_back(tp[i].tensor);
  }
  auto loss = [&](const auto& model, const auto& in, const auto& target, const auto& r) {
    auto out = model.forward(in, &target);
    using U = typename std::decay_t<decltype(in)>::value_type;
    std::vector<Tensor<U>> levels;
    for (std::size_t n = 0; n < 2; ++n) levels.push_back(margin_loss(out.scores[n], target[n], c.loss));
    return total_loss(levels, reconstruction_loss(r, out.reconstruction), {0.6, 0.4}, c.loss.tau);
  };
  auto r = gradcheck_widened<T>([&](const std::vector<Tensor<T>>&) { return loss(m, x, targets, raw); }, params,
                                [&](const std::vector<Tensor<double>>&) {
                                  return loss(twin, x_wide, targets_wide, raw_wide);
                                },
                                twin_params);
  EXPECT_LT(r.max_relative_error, mlcaps::testing::grad_tolerance<T>()) << r.worst;
}

TEST(EndToEndGrad, CoupledRoutingPathMatchesFiniteDifferences) {
  auto c = tiny_config();
  c.routing_iters = 3;
  c.differentiate_coupling = true;
  Model<double> m(c, 10);
  Gen g(48);
  auto x = g.tensor<double>({2, 1, 8, 8}, -1, 1);
  auto targets = one_hot_targets<double>({{0, 1}, {1, 0}}, {2, 3});
  std::vector<Tensor<double>> params;
  for (auto& p : m.parameters())
    if (p.name.rfind("decoder", 0) != 0) params.push_back(p.tensor);
  auto f = [&](const std::vector<Tensor<double>>&) {
    ForwardOutput<double> out;
    m.encode(x, out);
    return add(margin_loss(out.scores[0], targets[0], c.loss), margin_loss(out.scores[1], targets[1], c.loss));
  };
  auto r = gradcheck<double>(f, params, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}
