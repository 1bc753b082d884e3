#include <gtest/gtest.h>

#include "pfa/training.hpp"
#include "test_util.hpp"

#include <numeric>

using namespace pfa;

namespace {

// Two-channel toy patches: positives carry a bright blob in channel 0 at
// the centre, negatives are flat noise. Masks mark the blob.
std::vector<TrainSample> toy_data(const NetworkSpec& spec, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.2f);
  const std::size_t P = spec.patch_size, M = spec.mask_extent, off = (P - M) / 2;
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainSample s;
    s.label = static_cast<int>(i % 2);
    s.image = Tensor({1, spec.input_channels, P, P});
    s.mask = Mask({M, M}, 0);
    for (auto& v : s.image.data()) v = 0.4f + noise(rng);
    if (s.label) {
      for (std::size_t y = 0; y < P; ++y)
        for (std::size_t x = 0; x < P; ++x) {
          const double dy = y + 0.5 - P / 2.0, dx = x + 0.5 - P / 2.0;
          if (dy * dy + dx * dx > 36) continue;
          s.image(0, 0, y, x) = 0.9f + noise(rng) * 0.5f;
          if (y >= off && x >= off && y - off < M && x - off < M) s.mask[(y - off) * M + x - off] = 1;
        }
    }
    out.push_back(std::move(s));
  }
  return out;
}

double mean_cls(const std::vector<LossBreakdown>& c, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += c[i].cls;
  return s / static_cast<double>(to - from);
}

}  // namespace

TEST(Sgd, MomentumUpdateByHand) {
  NetworkParams<float> p, g;
  p.tensors["w"] = Tensor({2}, std::vector<float>{1.0f, -1.0f});
  g.tensors["w"] = Tensor({2}, std::vector<float>{0.5f, 2.0f});
  Sgd opt({0.1, 0.5, 1, 1, 1});
  opt.step(p, g);
  EXPECT_FLOAT_EQ(p.at("w")[0], 1.0f - 0.1f * 0.5f);
  EXPECT_FLOAT_EQ(p.at("w")[1], -1.0f - 0.1f * 2.0f);
  opt.step(p, g);  // v = 0.5 * g + g
  EXPECT_FLOAT_EQ(p.at("w")[0], 1.0f - 0.1f * 0.5f - 0.1f * 0.75f);
}

TEST(Training, ZeroLearningRateKeepsWeightsBitwise) {
  const auto spec = testutil::tiny_spec();
  auto init = init_params<float>(spec, 1);
  auto r = train_toy(spec, init, toy_data(spec, 8, 1), LossConfig{}, SgdConfig{0.0, 0.9, 5, 4, 1});
  EXPECT_EQ(r.params.tensors, init.tensors);
  EXPECT_EQ(r.curve.size(), 5u);
}

TEST(Training, LambdaZeroLeavesDecoderUntouched) {
  const auto spec = testutil::tiny_spec();
  auto init = init_params<float>(spec, 2);
  auto r = train_toy(spec, init, toy_data(spec, 8, 2), LossConfig{0.04, 0.0}, SgdConfig{0.01, 0.9, 10, 4, 2});
  std::size_t changed = 0;
  for (const auto& [name, t] : init.tensors) {
    if (name.rfind("dec.", 0) == 0) EXPECT_EQ(r.params.at(name), t) << name;
    else changed += !(r.params.at(name) == t);
  }
  EXPECT_GT(changed, 0u);
}

TEST(Training, ClassificationLossHalvesWithinTwoHundredSteps) {
  const auto spec = testutil::tiny_spec();
  auto data = toy_data(spec, 32, 3);
  auto r = train_toy(spec, init_params<float>(spec, 3), data, LossConfig{0.04, 0.5}, SgdConfig{0.01, 0.9, 200, 8, 3});
  ASSERT_EQ(r.curve.size(), 200u);
  const double first = mean_cls(r.curve, 0, 10), last = mean_cls(r.curve, 190, 200);
  EXPECT_LE(last, 0.5 * first) << "first " << first << " last " << last;
  for (const auto& l : r.curve) EXPECT_NEAR(l.total, l.cls + 0.5 * l.seg, 1e-9);
}

TEST(Training, DeterministicInSeed) {
  const auto spec = testutil::tiny_spec();
  auto data = toy_data(spec, 8, 4);
  const SgdConfig sgd{0.01, 0.9, 6, 4, 9};
  auto a = train_toy(spec, init_params<float>(spec, 4), data, LossConfig{}, sgd);
  auto b = train_toy(spec, init_params<float>(spec, 4), data, LossConfig{}, sgd);
  EXPECT_EQ(a.params.tensors, b.params.tensors);
  auto other = sgd;
  other.seed = 10;
  auto c = train_toy(spec, init_params<float>(spec, 4), data, LossConfig{}, other);
  EXPECT_NE(a.params.tensors, c.params.tensors);
}

TEST(Training, WithoutDecoderTensorsTrainsDetectorOnly) {
  const auto spec = testutil::tiny_spec();
  auto init = init_params<float>(spec, 5, false);
  auto r = train_toy(spec, init, toy_data(spec, 8, 5), LossConfig{}, SgdConfig{0.01, 0.9, 3, 4, 5});
  for (const auto& l : r.curve) EXPECT_EQ(l.seg, 0.0);
}

TEST(Training, DivergenceIsReported) {
  const auto spec = testutil::tiny_spec();
  try {
    train_toy(spec, init_params<float>(spec, 6), toy_data(spec, 8, 6), LossConfig{}, SgdConfig{1e30, 0.9, 20, 4, 6});
    FAIL() << "expected divergence";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Training, RejectsBadHyperparameters) {
  const auto spec = testutil::tiny_spec();
  auto p = init_params<float>(spec, 7);
  auto data = toy_data(spec, 2, 7);
  EXPECT_THROW(train_toy(spec, p, data, LossConfig{}, SgdConfig{0.01, 0.9, 1, 0, 1}), ConfigError);
  EXPECT_THROW(train_toy(spec, p, data, LossConfig{}, SgdConfig{0.01, 1.0, 1, 1, 1}), ConfigError);
  EXPECT_THROW(train_toy(spec, p, data, LossConfig{}, SgdConfig{-1.0, 0.9, 1, 1, 1}), ConfigError);
  EXPECT_THROW(train_toy(spec, p, data, LossConfig{0.9, 0.5}, SgdConfig{}), ConfigError);
  EXPECT_THROW(train_toy(spec, p, {}, LossConfig{}, SgdConfig{}), ValidationError);
}
