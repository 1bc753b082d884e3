#include <gtest/gtest.h>

#include "pfa/scan.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

using namespace pfa;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TileGeometry desk_geometry(std::size_t tile, std::size_t alpha) {
  const auto s = desk_network_spec();
  return solve_geometry(s.patch_size, tile, s.native_stride, alpha);
}

NetworkParams<double> biased_params(const NetworkSpec& spec, std::uint64_t seed) {
  return testutil::random_params<double>(spec, seed, false);
}

}  // namespace

TEST(Geometry, FullAndDeskTuples) {
  auto g = solve_geometry(692, 64, 512, 16);
  EXPECT_EQ(g.roi, 2708u);
  EXPECT_EQ(g.roi_stride, 2048u);
  EXPECT_EQ(g.pitch, 32u);
  auto d = solve_geometry(52, 8, 64, 4);
  EXPECT_EQ(d.roi, 164u);
  EXPECT_EQ(d.roi_stride, 128u);
}

TEST(Geometry, RejectsInvalidTuples) {
  EXPECT_THROW(solve_geometry(52, 8, 64, 3), ConfigError);
  EXPECT_THROW(solve_geometry(52, 0, 64, 4), ConfigError);
  EXPECT_THROW(solve_geometry(52, 8, 64, 0), ConfigError);
}

TEST(Geometry, RandomTuplesTileExactly) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t alpha = std::size_t{1} << (rng() % 5);
    const std::size_t sp = alpha * (1 + rng() % 64);
    const std::size_t lp = 1 + rng() % 700;
    const std::size_t lm = 1 + rng() % 64;
    const auto g = solve_geometry(lp, lm, sp, alpha);
    const std::size_t pitch = sp / alpha;
    ASSERT_EQ(g.pitch, pitch);
    ASSERT_EQ(g.roi, lp + (lm - 1) * pitch);
    ASSERT_EQ(g.roi_stride, lm * pitch);
    // Cell u of ROI k starts at k*S_R + u*pitch; consecutive ROIs continue
    // the lattice with no gap or overlap.
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t last = k * g.roi_stride + (lm - 1) * pitch;
      const std::size_t next = (k + 1) * g.roi_stride;
      ASSERT_EQ(next - last, pitch) << lp << " " << lm << " " << sp << " " << alpha;
      // The final patch of an ROI ends exactly at the ROI border.
      ASSERT_EQ(last + lp, k * g.roi_stride + g.roi);
    }
  }
}

TEST(Geometry, PlanCoversEveryCellOnce) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t alpha = std::size_t{1} << (rng() % 3);
    const auto g = desk_geometry(1 + rng() % 8, alpha);
    const std::size_t h = 20 + rng() % 500, w = 20 + rng() % 500;
    const auto plan = plan_scan(h, w, g, nullptr, 0.0);
    std::vector<int> hits(plan.lat_y.cells * plan.lat_x.cells, 0);
    for (const auto& r : plan.rois) {
      for (std::size_t u = 0; u < r.rows; ++u)
        for (std::size_t v = 0; v < r.cols; ++v) {
          ++hits[(r.cell_row + u) * plan.lat_x.cells + r.cell_col + v];
          // Patch of this cell inside the ROI sits on the global lattice.
          const double cy = static_cast<double>(r.y) + static_cast<double>(u * g.pitch) + g.patch / 2.0;
          EXPECT_DOUBLE_EQ(cy, plan.cell_center_y(r.cell_row + u));
        }
    }
    for (int c : hits) ASSERT_EQ(c, 1);
    // Lattice holds every patch that fits and is centred.
    if (h >= g.patch) {
      EXPECT_LE(plan.lat_y.origin + static_cast<std::ptrdiff_t>((plan.lat_y.cells - 1) * g.pitch + g.patch),
                static_cast<std::ptrdiff_t>(h));
      EXPECT_GT(plan.lat_y.origin + static_cast<std::ptrdiff_t>(plan.lat_y.cells * g.pitch + g.patch),
                static_cast<std::ptrdiff_t>(h));
      const std::ptrdiff_t right = static_cast<std::ptrdiff_t>(h) - plan.lat_y.origin -
                                   static_cast<std::ptrdiff_t>((plan.lat_y.cells - 1) * g.pitch + g.patch);
      EXPECT_GE(right, plan.lat_y.origin);
      EXPECT_LE(right - plan.lat_y.origin, 1);
    }
  }
}

TEST(Geometry, SmallSlidesRoiCounts) {
  const auto g = desk_geometry(8, 4);
  auto one = plan_scan(164, 164, g, nullptr, 0.0);
  EXPECT_EQ(one.rois.size(), 1u);
  EXPECT_EQ(one.lat_x.cells, 8u);
  EXPECT_EQ(one.rois[0].y, 0);
  auto two = plan_scan(164, 292, g, nullptr, 0.0);
  ASSERT_EQ(two.rois.size(), 2u);
  EXPECT_EQ(two.rois[1].x, 128);
  EXPECT_EQ(two.lat_x.cells, 16u);
  // Slide smaller than a patch still yields one centred cell.
  auto tiny = plan_scan(30, 30, g, nullptr, 0.0);
  EXPECT_EQ(tiny.lat_y.cells, 1u);
  EXPECT_LT(tiny.lat_y.origin, 0);
}

TEST(Geometry, TissueSkipping) {
  const auto g = desk_geometry(8, 4);
  Mask none({164, 292}, 0);
  auto plan = plan_scan(164, 292, g, &none, 0.01);
  for (const auto& r : plan.rois) EXPECT_TRUE(r.skipped);
  auto map = stitch(plan, {});
  for (float v : map.values) EXPECT_EQ(v, 0.0f);
  Mask half = none;
  for (std::size_t y = 0; y < 164; ++y)
    for (std::size_t x = 0; x < 100; ++x) half[y * 292 + x] = 1;
  auto plan2 = plan_scan(164, 292, g, &half, 0.01);
  EXPECT_FALSE(plan2.rois[0].skipped);
  EXPECT_TRUE(plan2.rois[1].skipped);
  EXPECT_THROW(plan_scan(100, 100, g, &half, 0.01), DimensionError);
}

TEST(Stitch, OrderIndependentAndComplete) {
  const auto g = desk_geometry(2, 4);
  const auto plan = plan_scan(150, 130, g, nullptr, 0.0);
  std::vector<PlacedTile> tiles;
  for (std::size_t i = 0; i < plan.rois.size(); ++i) {
    Tensor t({2, 2});
    for (std::size_t k = 0; k < 4; ++k) t[k] = static_cast<float>(i * 4 + k);
    tiles.push_back({i, t});
  }
  const auto a = stitch(plan, tiles);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(tiles.begin(), tiles.end(), rng);
    EXPECT_EQ(stitch(plan, tiles), a);
  }
  // Each cell value names its ROI and in-tile position.
  for (const auto& t : tiles) {
    const auto& r = plan.rois[t.roi];
    for (std::size_t u = 0; u < r.rows; ++u)
      for (std::size_t v = 0; v < r.cols; ++v) EXPECT_EQ(a.at(r.cell_row + u, r.cell_col + v), t.prob[u * 2 + v]);
  }
  auto missing = tiles;
  missing.pop_back();
  try {
    stitch(plan, missing);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
  auto dup = tiles;
  dup.push_back(tiles.front());
  EXPECT_THROW(stitch(plan, dup), ValidationError);
}

TEST(Window, BackgroundOutsideSlide) {
  Tensor img({1, 1, 3, 3}, 0.25f);
  auto w = extract_window(img, -1, 1, 3);
  EXPECT_EQ(w(0, 0, 0, 0), kBackground);
  EXPECT_EQ(w(0, 0, 1, 0), 0.25f);
  EXPECT_EQ(w(0, 0, 1, 2), kBackground);
}

TEST(ProbabilityMapFile, GoldenBytes) {
  ProbabilityMap m;
  m.slide_id = "golden";
  m.rows = 2;
  m.cols = 3;
  m.cell_pitch_px = 16;
  m.origin_y_px = 26;
  m.origin_x_px = 34.5;
  m.spacing_um = 4;
  m.alpha = 4;
  m.network_hash = "00ff";
  m.values = {0.0f, 0.25f, 0.5f, 0.75f, 1.0f, 0.125f};
  std::ostringstream os;
  write_probability_map(os, m);
  const std::string golden = slurp(std::string(PFA_GOLDEN_DIR) + "/tiny.pmap");
  EXPECT_EQ(os.str(), golden);
  std::istringstream is(golden);
  EXPECT_EQ(read_probability_map(is), m);
  EXPECT_DOUBLE_EQ(m.cell_mm(), 0.064);
}

TEST(ProbabilityMapFile, RejectsCorruption) {
  const std::string golden = slurp(std::string(PFA_GOLDEN_DIR) + "/tiny.pmap");
  std::istringstream cut(golden.substr(0, golden.size() - 1));
  EXPECT_THROW(read_probability_map(cut), IoError);
  std::string bad = golden;
  bad.replace(bad.find("rows=2"), 6, "rows=x");
  std::istringstream b(bad);
  EXPECT_THROW(read_probability_map(b), IoError);
  ProbabilityMap m;
  m.slide_id = "a=b";
  std::ostringstream os;
  EXPECT_THROW(write_probability_map(os, m), ValidationError);
}

TEST(DenseScan, MatchesPatchOracleInDouble) {
  const auto spec = desk_network_spec();
  for (std::size_t alpha : {1u, 2u, 4u}) {
    const auto g = desk_geometry(3, alpha);
    auto p = biased_params(spec, 40 + alpha);
    std::mt19937_64 rng(alpha);
    auto roi = testutil::random_tensor({1, 3, g.roi, g.roi}, rng, 0.0, 1.0);
    ForwardOptions opt;
    opt.mode = Mode::dense;
    opt.alpha = alpha;
    auto dense = detector_forward(roi, spec, p, opt);
    auto oracle = patch_oracle(roi, spec, p, g);
    EXPECT_LE(max_abs_diff(dense, oracle), 1e-12) << "alpha " << alpha;
  }
}

TEST(DenseScan, MergedFeaturesAreSumsOfPatchContributions) {
  // Each dense M cell equals the train-mode M of the patch it stands for.
  const auto spec = desk_network_spec();
  const auto g = desk_geometry(2, 2);
  auto p = biased_params(spec, 5);
  std::mt19937_64 rng(5);
  auto roi = testutil::random_tensor({1, 3, g.roi, g.roi}, rng, 0.0, 1.0);
  ForwardOptions opt;
  opt.mode = Mode::dense;
  opt.alpha = 2;
  DetectorCache<double> dense;
  detector_forward(roi, spec, p, opt, nullptr, &dense);
  const auto report = propagate_shapes(spec, spec.patch_size);
  TensorD sum(dense.merged.shape(), 0.0);
  for (int lv : spec.pooled_levels()) add_inplace(sum, pfe_pool(dense.refined.at(lv), spec, lv, opt, 2, report));
  EXPECT_LE(max_abs_diff(sum, dense.merged), 1e-12);
  for (std::size_t u = 0; u < 2; ++u)
    for (std::size_t v = 0; v < 2; ++v) {
      DetectorCache<double> one;
      detector_forward(crop(roi, u * g.pitch, v * g.pitch, 52, 52), spec, p, {}, nullptr, &one);
      for (std::size_t c = 0; c < spec.reduced_channels; ++c)
        EXPECT_NEAR(one.merged(0, c, 0, 0), dense.merged(0, c, u, v), 1e-12);
    }
}

TEST(DenseScan, ShiftByPitchShiftsTile) {
  const auto spec = desk_network_spec();
  const auto g = desk_geometry(4, 4);
  auto p = biased_params(spec, 6);
  std::mt19937_64 rng(6);
  auto big = testutil::random_tensor({1, 3, g.roi, g.roi + g.pitch}, rng, 0.0, 1.0);
  ForwardOptions opt;
  opt.mode = Mode::dense;
  opt.alpha = 4;
  auto a = detector_forward(crop(big, 0, 0, g.roi, g.roi), spec, p, opt);
  auto b = detector_forward(crop(big, 0, g.pitch, g.roi, g.roi), spec, p, opt);
  for (std::size_t u = 0; u < 4; ++u)
    for (std::size_t v = 0; v + 1 < 4; ++v) EXPECT_NEAR(b(0, 1, u, v), a(0, 1, u, v + 1), 1e-12);
}

TEST(DenseScan, ScanSlideStitchesOracleValues) {
  const auto spec = desk_network_spec();
  const auto g = desk_geometry(2, 4);
  auto pd = biased_params(spec, 8);
  auto pf = pd.cast<float>();
  std::mt19937_64 rng(8);
  Tensor img = testutil::random_tensor<float>({1, 3, 120, 100}, rng, 0.0, 1.0);
  const auto plan = plan_scan(120, 100, g, nullptr, 0.0);
  const auto map = stitch(plan, scan_slide(img, plan, spec, pf));
  // Oracle: one train-mode forward per lattice cell on the padded slide.
  for (std::size_t r = 0; r < map.rows; ++r)
    for (std::size_t c = 0; c < map.cols; ++c) {
      const auto y = plan.lat_y.origin + static_cast<std::ptrdiff_t>(r * g.pitch);
      const auto x = plan.lat_x.origin + static_cast<std::ptrdiff_t>(c * g.pitch);
      const auto patch = extract_window(img, y, x, g.patch).cast<double>();
      EXPECT_NEAR(map.at(r, c), detector_forward(patch, spec, pd)(0, 1, 0, 0), 1e-4) << r << "," << c;
    }
  EXPECT_DOUBLE_EQ(map.origin_y_px, plan.cell_center_y(0));
}

TEST(DenseScan, ExtentErrorsNameNearestValid) {
  const auto spec = desk_network_spec();
  ForwardOptions opt;
  opt.mode = Mode::dense;
  opt.alpha = 4;
  try {
    detector_forward(TensorD({1, 3, 70, 70}), spec, init_params<double>(spec, 1, false), opt);
    FAIL();
  } catch (const GeometryError& e) {
    EXPECT_NE(std::string(e.what()).find("68 or 84"), std::string::npos) << e.what();
  }
}

TEST(Certify, PassesForDeskGrid) {
  const auto spec = desk_network_spec();
  for (std::size_t alpha : {1u, 4u})
    for (std::size_t tile : {2u, 4u}) {
      CertifyOptions o;
      o.trials = 2;
      auto rep = certify_equivalence(spec, desk_geometry(tile, alpha), o);
      EXPECT_TRUE(rep.passed) << rep.max_deviation << " " << rep.error;
      EXPECT_EQ(rep.trials_run, 2u);
      o.precision = Precision::double_only;
      auto dbl = certify_equivalence(spec, desk_geometry(tile, alpha), o);
      EXPECT_TRUE(dbl.passed) << dbl.max_deviation;
      EXPECT_LE(dbl.max_deviation, 1e-9);
    }
}

TEST(Certify, PoolingFaultIsDetected) {
  CertifyOptions o;
  o.trials = 1;
  o.fault_offset = 1;
  auto rep = certify_equivalence(desk_network_spec(), desk_geometry(4, 2), o);
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_deviation, 1e-4);
}

TEST(Certify, UnitTileIsTrivial) {
  CertifyOptions o;
  o.trials = 3;
  auto rep = certify_equivalence(desk_network_spec(), desk_geometry(1, 1), o);
  EXPECT_TRUE(rep.passed);
}

TEST(Certify, MismatchedGeometry) {
  EXPECT_THROW(certify_equivalence(desk_network_spec(), solve_geometry(50, 2, 64, 4), {}), ConfigError);
}
