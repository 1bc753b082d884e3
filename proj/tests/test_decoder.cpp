#include <gtest/gtest.h>

#include "pfa/decoder.hpp"
#include "pfa/detector.hpp"
#include "test_util.hpp"

using namespace pfa;
namespace pn = param_names;

namespace {

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm1(const TensorD& t) {
  double s = 0;
  for (double v : t.data()) s += std::abs(v);
  return s;
}

// X_i' for the tiny network on a random patch.
std::map<int, TensorD> tiny_refined(const NetworkParams<double>& p, std::mt19937_64& rng,
                                    DetectorCache<double>* cache = nullptr, TensorD* input = nullptr) {
  const auto spec = testutil::tiny_spec();
  auto x = testutil::random_tensor({1, 2, 24, 24}, rng, 0.0, 1.0);
  if (input) *input = x;
  ForwardOptions opt;
  opt.decoder_features = true;
  DetectorCache<double> local;
  DetectorCache<double>& c = cache ? *cache : local;
  detector_forward(x, spec, p, opt, nullptr, &c);
  return c.refined;
}

}  // namespace

TEST(DecoderShapes, TinyHeads) {
  const auto spec = testutil::tiny_spec();
  const auto ds = decoder_shapes(spec, propagate_shapes(spec, spec.patch_size));
  ASSERT_EQ(ds.heads.size(), 2u);
  EXPECT_EQ(ds.heads[0].level, 3);
  EXPECT_FALSE(ds.heads[0].final);
  EXPECT_EQ(ds.heads[0].extent, 4u);
  EXPECT_DOUBLE_EQ(ds.heads[0].lattice.origin, 5.5);
  EXPECT_DOUBLE_EQ(ds.heads[0].lattice.pitch, 4.0);
  EXPECT_DOUBLE_EQ(ds.heads[0].weight, 0.3);
  EXPECT_TRUE(ds.heads[1].final);
  EXPECT_EQ(ds.heads[1].extent, 22u);
  EXPECT_DOUBLE_EQ(ds.heads[1].lattice.origin, 1.0);
  EXPECT_DOUBLE_EQ(ds.heads[1].lattice.pitch, 1.0);
  EXPECT_EQ(ds.final_extent, spec.mask_extent);
}

TEST(DecoderShapes, DeskHeadsAreCentred) {
  const auto spec = desk_network_spec();
  const auto ds = decoder_shapes(spec, propagate_shapes(spec, spec.patch_size));
  ASSERT_EQ(ds.heads.size(), 3u);
  const double centre = (spec.patch_size - 1) / 2.0;
  for (const auto& h : ds.heads) {
    const double mid = h.lattice.origin + h.lattice.pitch * (h.extent - 1) / 2.0;
    EXPECT_DOUBLE_EQ(mid, centre) << "level " << h.level;
  }
  EXPECT_EQ(ds.heads.back().extent, 38u);
  EXPECT_EQ(ds.heads[0].extent, 4u);
  EXPECT_DOUBLE_EQ(ds.heads[0].lattice.pitch, 8.0);
  EXPECT_EQ(ds.heads[1].extent, 10u);
  EXPECT_DOUBLE_EQ(ds.heads[1].lattice.pitch, 4.0);
}

TEST(BoundaryAware, ZeroBranchIsCroppedIdentity) {
  std::mt19937_64 rng(1);
  auto x = testutil::random_tensor({1, 3, 7, 7}, rng);
  auto w1 = testutil::random_tensor({3, 3, 3, 3}, rng);
  auto b1 = testutil::random_tensor({3}, rng);
  auto y = boundary_aware(x, w1, b1, TensorD({3, 3, 3, 3}, 0.0), TensorD({3}, 0.0));
  EXPECT_EQ(y, crop_center_to(x, 3, 3));
}

TEST(BoundaryAware, BranchIsolation) {
  // With the second convolution zeroed the first cannot influence the output.
  std::mt19937_64 rng(2);
  auto x = testutil::random_tensor({1, 2, 5, 5}, rng);
  TensorD w2({2, 2, 1, 1}, 0.0), b2({2}, 0.25);
  auto y1 = boundary_aware(x, testutil::random_tensor({2, 2, 1, 1}, rng), TensorD({2}, 0.0), w2, b2);
  auto y2 = boundary_aware(x, testutil::random_tensor({2, 2, 1, 1}, rng), TensorD({2}, 1.0), w2, b2);
  EXPECT_EQ(y1, y2);
  // Channels do not mix through the identity path.
  TensorD eye({2, 2, 1, 1}, 0.0);
  eye(0, 0, 0, 0) = eye(1, 1, 0, 0) = 1.0;
  auto x0 = x;
  for (std::size_t i = 0; i < 25; ++i) x0[25 + i] = 0.0;
  auto y = boundary_aware(x0, eye, TensorD({2}, 0.0), eye, TensorD({2}, 0.0));
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y[25 + i], 0.0);
}

TEST(BoundaryAware, NegativeKernelReluZeroesBranch) {
  std::mt19937_64 rng(3);
  auto x = testutil::random_tensor({1, 2, 6, 6}, rng, 0.1, 1.0);
  TensorD w1({2, 2, 3, 3}, -1.0);
  auto w2 = testutil::random_tensor({2, 2, 3, 3}, rng);
  TensorD b2({2}, std::vector<double>{0.5, -0.5});
  BmCache<double> cache;
  auto y = boundary_aware(x, w1, TensorD({2}, 0.0), w2, b2, &cache);
  for (double v : cache.hidden.data()) EXPECT_EQ(v, 0.0);
  auto base = crop_center_to(x, 2, 2);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[c * 4 + i], base[c * 4 + i] + b2[c]);
}

TEST(BoundaryAware, BackwardFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto x = testutil::random_tensor({1, 2, 6, 6}, rng);
  auto w1 = testutil::random_tensor({2, 2, 3, 3}, rng);
  auto b1 = testutil::random_tensor({2}, rng);
  auto w2 = testutil::random_tensor({2, 2, 3, 3}, rng);
  auto b2 = testutil::random_tensor({2}, rng);
  BmCache<double> cache;
  auto y = boundary_aware(x, w1, b1, w2, b2, &cache);
  auto probe = testutil::random_tensor(y.shape(), rng);
  auto g = boundary_aware_backward(cache, w1, w2, probe);
  auto loss = [&] { return dot(boundary_aware(x, w1, b1, w2, b2), probe); };
  auto check = [&](TensorD& t, const TensorD& grad, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_LE(testutil::rel_err(testutil::central_diff(t, i, 1e-6, loss), grad[i]), 1e-4) << what << " " << i;
  };
  check(x, g.input, "x");
  check(w1, g.w1, "w1");
  check(b1, g.b1, "b1");
  check(w2, g.w2, "w2");
  check(b2, g.b2, "b2");
}

TEST(Decoder, EmitsHeadShapes) {
  const auto spec = testutil::tiny_spec();
  std::mt19937_64 rng(5);
  auto p = testutil::random_params<double>(spec, 5);
  auto maps = decoder_forward(tiny_refined(p, rng), spec, p);
  const auto ds = decoder_shapes(spec, propagate_shapes(spec, spec.patch_size));
  ASSERT_EQ(maps.size(), ds.heads.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    EXPECT_EQ(maps[i].level, ds.heads[i].level);
    EXPECT_EQ(maps[i].final, ds.heads[i].final);
    EXPECT_EQ(maps[i].logits.shape(), (Shape{1, 2, ds.heads[i].extent, ds.heads[i].extent}));
  }
}

TEST(Decoder, PositiveHomogeneityWithoutBiases) {
  const auto spec = testutil::tiny_spec();
  std::mt19937_64 rng(6);
  auto p = init_params<double>(spec, 6);  // zero biases
  auto refined = tiny_refined(p, rng);
  auto scaled = refined;
  for (auto& [lv, t] : scaled)
    for (auto& v : t.data()) v *= 3.0;
  auto a = decoder_forward(refined, spec, p);
  auto b = decoder_forward(scaled, spec, p);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].logits.size(); ++j)
      EXPECT_NEAR(b[i].logits[j], 3.0 * a[i].logits[j], 1e-12);
}

TEST(Decoder, BackwardFiniteDifferences) {
  const auto spec = testutil::tiny_spec();
  std::mt19937_64 rng(7);
  auto p = testutil::random_params<double>(spec, 7);
  auto refined = tiny_refined(p, rng);
  DecoderCache<double> cache;
  auto maps = decoder_forward(refined, spec, p, &cache);
  std::vector<TensorD> probes;
  for (const auto& m : maps) probes.push_back(testutil::random_tensor(m.logits.shape(), rng));
  auto grads = p.zeros_like();
  auto grad_in = decoder_backward(cache, probes, spec, p, grads);
  auto loss = [&] {
    auto ms = decoder_forward(refined, spec, p);
    double s = 0;
    for (std::size_t i = 0; i < ms.size(); ++i) s += dot(ms[i].logits, probes[i]);
    return s;
  };
  for (auto& [lv, t] : refined)
    for (std::size_t i = 0; i < t.size(); i += 7)
      EXPECT_LE(testutil::rel_err(testutil::central_diff(t, i, 1e-6, loss), grad_in.at(lv)[i]), 1e-4) << "level " << lv;
  for (auto& [name, t] : p.tensors) {
    if (name.rfind("dec.", 0) != 0) continue;
    for (std::size_t i = 0; i < t.size(); i += 5)
      EXPECT_LE(testutil::rel_err(testutil::central_diff(t, i, 1e-6, loss), grads.at(name)[i]), 1e-4) << name;
  }
}

TEST(Decoder, GradientReachesEveryTrunkLayer) {
  const auto spec = testutil::tiny_spec();
  std::mt19937_64 rng(8);
  auto p = testutil::random_params<double>(spec, 8);
  DetectorCache<double> dcache;
  auto refined = tiny_refined(p, rng, &dcache);
  DecoderCache<double> cache;
  auto maps = decoder_forward(refined, spec, p, &cache);
  std::vector<TensorD> probes;
  for (const auto& m : maps) probes.push_back(testutil::random_tensor(m.logits.shape(), rng));
  auto grads = p.zeros_like();
  auto grad_refined = decoder_backward(cache, probes, spec, p, grads);
  detector_backward<double>(dcache, nullptr, grad_refined, spec, p, grads);
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) EXPECT_GT(norm1(grads.at(pn::trunk_weight(i))), 0.0) << i;
  // The classifier head receives nothing without detector logits.
  EXPECT_EQ(norm1(grads.at(pn::head_weight)), 0.0);
}

TEST(Decoder, ImpulseResponseFollowsHeadLattice) {
  const auto spec = testutil::tiny_spec();
  std::mt19937_64 rng(9);
  auto p = testutil::random_params<double>(spec, 9);
  auto refined = tiny_refined(p, rng);
  const auto report = propagate_shapes(spec, spec.patch_size);
  const auto ds = decoder_shapes(spec, report);
  const Lattice in = report.levels.at(2).lattice;
  const Lattice out = ds.heads.back().lattice;
  const auto base = decoder_forward(refined, spec, p).back().logits;
  for (std::size_t cell : {2u, 5u, 7u}) {
    auto bumped = refined;
    for (std::size_t c = 0; c < bumped.at(2).channels(); ++c) bumped.at(2)(0, c, cell, cell) += 0.5;
    const auto moved = decoder_forward(bumped, spec, p).back().logits;
    double wy = 0, sy = 0;
    std::size_t lo = 1000, hi = 0;
    for (std::size_t y = 0; y < moved.height(); ++y) {
      double row = 0;
      for (std::size_t x = 0; x < moved.width(); ++x) row += std::abs(moved(0, 0, y, x) - base(0, 0, y, x));
      if (row > 0) {
        lo = std::min(lo, y);
        hi = std::max(hi, y);
      }
      wy += row * (out.origin + out.pitch * y);
      sy += row;
    }
    // Support is exactly the transposed-conv footprint of one cell.
    EXPECT_EQ(lo, 2 * cell);
    EXPECT_EQ(hi, 2 * cell + 3);
    const double centre = in.origin + in.pitch * cell;
    EXPECT_DOUBLE_EQ(out.origin + out.pitch * (lo + hi) / 2.0, centre);
    EXPECT_GT(sy, 0.0);
    EXPECT_NEAR(wy / sy, centre, 1.5);
  }
}
