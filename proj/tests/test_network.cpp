#include <gtest/gtest.h>

#include "pfa/detector.hpp"
#include "pfa/network.hpp"
#include "test_util.hpp"

#include <sstream>

using namespace pfa;

TEST(NetworkSpec, BuiltinsValidate) {
  EXPECT_NO_THROW(validate(desk_network_spec()));
  EXPECT_NO_THROW(validate(full_network_spec()));
  EXPECT_NO_THROW(validate(testutil::tiny_spec()));
}

TEST(NetworkSpec, ShippedConfigsMatchBuiltins) {
  const std::string dir = PFA_CONFIG_DIR;
  EXPECT_EQ(load_network_spec(dir + "/desk.net"), desk_network_spec());
  EXPECT_EQ(load_network_spec(dir + "/full.net"), full_network_spec());
}

TEST(NetworkSpec, FormatRoundTrip) {
  for (const auto& s : {desk_network_spec(), full_network_spec(), testutil::tiny_spec()}) {
    const std::string text = format_network_spec(s);
    EXPECT_EQ(parse_network_spec(text), s);
    EXPECT_EQ(format_network_spec(parse_network_spec(text)), text);
  }
}

TEST(NetworkSpec, ParseErrorsCarryLineNumbers) {
  try {
    parse_network_spec("name = x\nconv kernel=2 strid=2 out=3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_network_spec("patch_size = -3\n"), ConfigError);
  EXPECT_THROW(parse_network_spec("pfe level=2 kernel=3 crop=half\n"), ConfigError);
  EXPECT_THROW(load_network_spec("/nonexistent/net.net"), IoError);
}

TEST(NetworkSpec, ValidateRejectsBrokenAlignment) {
  auto s = desk_network_spec();
  for (auto& p : s.pfe)
    if (p.level == 3) p.pool_stride = 8;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(NetworkSpec, ValidateRejectsInexactClosure) {
  auto s = desk_network_spec();
  s.patch_size = 53;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(NetworkSpec, ValidateRejectsMaskMismatch) {
  auto s = desk_network_spec();
  s.mask_extent = 40;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(NetworkSpec, AlignmentConstant) {
  for (const auto& s : {desk_network_spec(), full_network_spec(), testutil::tiny_spec()})
    for (int lv : s.pooled_levels())
      EXPECT_EQ(s.level_stride(lv) * s.pfe_level(lv).pool_stride, s.native_stride) << s.name << " level " << lv;
}

TEST(Shapes, TinyLevels) {
  const auto r = propagate_shapes(testutil::tiny_spec(), 24);
  EXPECT_TRUE(r.exact);
  struct Row { int level; std::size_t extent, refined, rf; double origin, pitch; };
  for (const Row& w : {Row{2, 12, 10, 6, 2.5, 2}, Row{3, 6, 4, 12, 5.5, 4}, Row{4, 3, 3, 8, 3.5, 8}}) {
    const auto& l = r.levels.at(w.level);
    EXPECT_EQ(l.extent, w.extent) << w.level;
    EXPECT_EQ(l.refined_extent, w.refined) << w.level;
    EXPECT_EQ(l.receptive_field, w.rf) << w.level;
    EXPECT_DOUBLE_EQ(l.lattice.origin, w.origin) << w.level;
    EXPECT_DOUBLE_EQ(l.lattice.pitch, w.pitch) << w.level;
  }
}

TEST(Shapes, TooSmallInputIsGeometryError) {
  EXPECT_THROW(propagate_shapes(desk_network_spec(), 20), GeometryError);
}

TEST(Shapes, DenseStridesPerLevel) {
  const auto s = full_network_spec();
  std::vector<std::size_t> got;
  for (int lv : s.pooled_levels()) got.push_back(dense_pool_stride(s.pfe_level(lv), 16));
  EXPECT_EQ(got, (std::vector<std::size_t>{8, 4, 2}));
  EXPECT_THROW(check_alpha(s, 3), ConfigError);
  EXPECT_THROW(check_alpha(s, 0), ConfigError);
  EXPECT_NO_THROW(check_alpha(s, 32));
}

TEST(Shapes, FullRoiGivesSixtyFourTile) {
  const auto s = full_network_spec();
  EXPECT_EQ(roi_extent(s, 16, 64), 2708u);
  EXPECT_EQ(tile_for_extent(s, 16, 2708), 64u);
  EXPECT_THROW(tile_for_extent(s, 16, 2709), GeometryError);
  EXPECT_EQ(roi_extent(desk_network_spec(), 4, 8), 52u + 7 * 16);
}

TEST(Shapes, DenseClosureForDeskTiles) {
  const auto s = desk_network_spec();
  for (std::size_t alpha : {1u, 2u, 4u})
    for (std::size_t tile = 1; tile <= 8; ++tile) EXPECT_TRUE(propagate_shapes(s, roi_extent(s, alpha, tile)).exact);
}

TEST(GlobalConv, WeightCountRatio) {
  EXPECT_EQ(global_conv_weight_count(15, 1, 1), 60u);
  EXPECT_NEAR(static_cast<double>(global_conv_weight_count(15, 1, 1)) / (15 * 15), 60.0 / 225.0, 1e-15);
}

namespace {

NetworkParams<double> gconv_params(int level, std::size_t ci, std::size_t c, std::size_t k, std::mt19937_64& rng) {
  NetworkParams<double> p;
  p.tensors[param_names::gconv(level, "a1")] = testutil::random_tensor({c, ci, 1, k}, rng);
  p.tensors[param_names::gconv(level, "a2")] = testutil::random_tensor({c, c, k, 1}, rng);
  p.tensors[param_names::gconv(level, "b1")] = testutil::random_tensor({c, ci, k, 1}, rng);
  p.tensors[param_names::gconv(level, "b2")] = testutil::random_tensor({c, c, 1, k}, rng);
  p.tensors[param_names::gconv(level, "bias")] = testutil::random_tensor({c}, rng);
  return p;
}

}  // namespace

TEST(GlobalConv, UnitKernelIdentityDoubles) {
  NetworkParams<double> p;
  TensorD eye({2, 2, 1, 1}, 0.0);
  eye(0, 0, 0, 0) = eye(1, 1, 0, 0) = 1.0;
  for (const char* part : {"a1", "a2", "b1", "b2"}) p.tensors[param_names::gconv(3, part)] = eye;
  p.tensors[param_names::gconv(3, "bias")] = TensorD({2}, 0.0);
  std::mt19937_64 rng(1);
  auto x = testutil::random_tensor({1, 2, 4, 4}, rng);
  auto y = global_conv(x, p, 3);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], 2 * x[i]);
}

TEST(GlobalConv, EqualsDenseOuterProductKernel) {
  std::mt19937_64 rng(2);
  const std::size_t ci = 2, c = 3, k = 5;
  auto p = gconv_params(2, ci, c, k, rng);
  const auto& a1 = p.at(param_names::gconv(2, "a1"));
  const auto& a2 = p.at(param_names::gconv(2, "a2"));
  const auto& b1 = p.at(param_names::gconv(2, "b1"));
  const auto& b2 = p.at(param_names::gconv(2, "b2"));
  TensorD dense({c, ci, k, k}, 0.0);
  for (std::size_t o = 0; o < c; ++o)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x)
          for (std::size_t m = 0; m < c; ++m)
            dense(o, i, y, x) += a2(o, m, y, 0) * a1(m, i, 0, x) + b2(o, m, 0, x) * b1(m, i, y, 0);
  auto x = testutil::random_tensor({1, ci, 9, 8}, rng);
  auto want = conv2d_valid(x, dense, p.at(param_names::gconv(2, "bias")), 1);
  EXPECT_LE(max_abs_diff(global_conv(x, p, 2), want), 1e-12);
}

TEST(GlobalConv, BackwardFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto p = gconv_params(4, 2, 2, 3, rng);
  auto x = testutil::random_tensor({1, 2, 6, 6}, rng);
  GconvCache<double> cache;
  auto y = global_conv(x, p, 4, &cache);
  auto probe = testutil::random_tensor(y.shape(), rng);
  auto grads = p.zeros_like();
  auto gx = global_conv_backward(x, cache, p, 4, probe, grads);
  auto loss = [&] {
    auto o = global_conv(x, p, 4);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * probe[i];
    return s;
  };
  for (std::size_t i = 0; i < x.size(); i += 2)
    EXPECT_LE(testutil::rel_err(testutil::central_diff(x, i, 1e-5, loss), gx[i]), 1e-4);
  for (auto& [name, t] : p.tensors)
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_LE(testutil::rel_err(testutil::central_diff(t, i, 1e-5, loss), grads.at(name)[i]), 1e-4) << name;
}

TEST(GlobalConv, KernelLargerThanInput) {
  std::mt19937_64 rng(4);
  auto p = gconv_params(2, 1, 1, 5, rng);
  EXPECT_THROW(global_conv(TensorD({1, 1, 4, 4}), p, 2), GeometryError);
}

TEST(Params, InitIsDeterministicAndComplete) {
  const auto s = desk_network_spec();
  auto a = init_params<float>(s, 7), b = init_params<float>(s, 7), c = init_params<float>(s, 8);
  EXPECT_EQ(a.tensors, b.tensors);
  EXPECT_NE(a.tensors, c.tensors);
  EXPECT_NO_THROW(check_params(s, a, true));
  auto no_dec = init_params<float>(s, 7, false);
  EXPECT_NO_THROW(check_params(s, no_dec, false));
  EXPECT_THROW(check_params(s, no_dec, true), ValidationError);
}

TEST(Params, CheckRejectsWrongShape) {
  const auto s = desk_network_spec();
  auto p = init_params<float>(s, 1, false);
  p.at(param_names::head_weight) = Tensor({1, 1, 1, 1});
  EXPECT_THROW(check_params(s, p, false), ValidationError);
}

TEST(Params, BundleRoundTrip) {
  auto p = init_params<float>(testutil::tiny_spec(), 3);
  std::stringstream ss;
  write_bundle(ss, to_bundle(p));
  EXPECT_EQ(from_bundle(read_bundle(ss)).tensors, p.tensors);
  auto dup = to_bundle(p);
  dup.push_back(dup.front());
  EXPECT_THROW(from_bundle(dup), IoError);
}

TEST(Params, TinyGlobalConvCountMatchesFormula) {
  const auto s = testutil::tiny_spec();
  auto p = init_params<float>(s, 1, false);
  const auto& a1 = p.at(param_names::gconv(3, "a1"));
  const auto& a2 = p.at(param_names::gconv(3, "a2"));
  const auto& b1 = p.at(param_names::gconv(3, "b1"));
  const auto& b2 = p.at(param_names::gconv(3, "b2"));
  EXPECT_EQ(a1.size() + a2.size() + b1.size() + b2.size(), global_conv_weight_count(3, 3, 3));
}
