#include <gtest/gtest.h>

#include "pfa/wsi.hpp"
#include "otsu_oracle.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <numbers>

using namespace pfa;
using testutil::otsu_oracle;
namespace fs = std::filesystem;

namespace {

Polygon random_polygon(std::mt19937_64& rng, double cx, double cy, double r) {
  // Star-shaped around the centre, so never self-intersecting.
  std::uniform_real_distribution<double> rad(0.4 * r, r);
  Polygon p;
  for (int i = 0; i < 9; ++i) {
    const double t = 2 * std::numbers::pi * i / 9.0;
    const double k = rad(rng);
    p.push_back({cx + k * std::cos(t), cy + k * std::sin(t)});
  }
  return p;
}

fs::path scratch_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("pfa_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Otsu, TwoDeltas) {
  Histogram h{};
  h[50] = 100;
  h[200] = 100;
  EXPECT_EQ(otsu_threshold(h).threshold, 50);
  EXPECT_FALSE(otsu_threshold(h).degenerate);
  h[50] = 1;
  EXPECT_EQ(otsu_threshold(h).threshold, 50);
}

TEST(Otsu, DegenerateHistograms) {
  Histogram h{};
  EXPECT_THROW(otsu_threshold(h), ValidationError);
  h[77] = 5;
  EXPECT_TRUE(otsu_threshold(h).degenerate);
}

TEST(Otsu, UniformMatchesOracle) {
  Histogram h;
  h.fill(3);
  EXPECT_EQ(otsu_threshold(h).threshold, otsu_oracle(h));
  EXPECT_EQ(otsu_oracle(h), 127);
}

TEST(Otsu, RandomHistogramsMatchOracle) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    Histogram h{};
    const int mode = trial % 3;
    for (int v = 0; v < 256; ++v) {
      if (mode == 0) h[v] = rng() % 1000;
      else if (mode == 1) h[v] = (rng() % 4 == 0) ? rng() % 1000 : 0;  // sparse, many ties
      else h[v] = static_cast<std::uint64_t>(900 * std::exp(-std::pow((v - 60.0) / 20, 2)) +
                                             400 * std::exp(-std::pow((v - 170.0) / 30, 2))) + rng() % 5;
    }
    h[rng() % 256] += 1;
    h[rng() % 256] += 1;
    ASSERT_EQ(otsu_threshold(h).threshold, otsu_oracle(h)) << "trial " << trial;
  }
}

TEST(Otsu, ExactNearSampleCap) {
  // Squared separations here exceed 128 bits.
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Histogram h{};
    std::uint64_t left = (std::uint64_t{1} << 31) - 1;
    h[rng() % 8] = left / 3;
    h[255 - rng() % 8] = left / 3;
    left -= 2 * (left / 3);
    for (int v = 0; v < 256 && left > 0; v += 1 + static_cast<int>(rng() % 40)) {
      const std::uint64_t take = std::min<std::uint64_t>(left, rng() % (left + 1));
      h[v] += take;
      left -= take;
    }
    ASSERT_EQ(otsu_threshold(h).threshold, otsu_oracle(h)) << "trial " << trial;
  }
}

TEST(TissueMask, RecoversSyntheticTissue) {
  SyntheticSpec s;
  s.height = s.width = 256;
  s.lesion_diameters_mm = {0.2};
  auto slide = generate_synthetic_slide(s, 4);
  const Mask m = tissue_mask(slide.slide.image);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    inter += m[i] && slide.tissue[i];
    uni += m[i] || slide.tissue[i];
  }
  EXPECT_GE(static_cast<double>(inter) / static_cast<double>(uni), 0.9);
}

TEST(TissueMask, BlankSlideIsEmpty) {
  RgbImage img(32, 32, 240);
  const Mask m = tissue_mask(img);
  for (auto v : m.values()) EXPECT_EQ(v, 0);
  EXPECT_EQ(saturation_channel(img), std::vector<std::uint8_t>(32 * 32, 0));
}

TEST(Polygons, PointInPolygonAndDiameter) {
  Polygon sq{{0, 0}, {4, 0}, {4, 4}, {0, 4}};
  EXPECT_TRUE(point_in_polygon(sq, 2, 2));
  EXPECT_FALSE(point_in_polygon(sq, 5, 2));
  EXPECT_DOUBLE_EQ(polygon_diameter(sq), std::sqrt(32.0));
  auto m = rasterize({Lesion{1, sq}}, 6, 6);
  std::size_t n = 0;
  for (auto v : m.values()) n += v;
  EXPECT_EQ(n, 16u);
}

TEST(Polygons, ValidationRejectsBowtieAndShort) {
  AnnotationSet a{"s", {{1, {{0, 0}, {4, 4}, {4, 0}, {0, 4}}}}};
  EXPECT_THROW(a.validate(), ValidationError);
  AnnotationSet b{"s", {{1, {{0, 0}, {4, 4}}}}};
  EXPECT_THROW(b.validate(), ValidationError);
  AnnotationSet ok{"s", {{1, {{0, 0}, {4, 0}, {4, 4}}}}};
  EXPECT_NO_THROW(ok.validate());
}

TEST(Augment, IdentityLeavesInputs) {
  std::mt19937_64 rng(1);
  auto patch = testutil::random_tensor<float>({1, 3, 8, 8}, rng, 0.0, 1.0);
  Mask m({6, 6}, 0);
  m[7] = 1;
  auto p2 = patch;
  auto m2 = m;
  augment(AugmentDraw::identity(), p2, m2);
  EXPECT_EQ(p2, patch);
  EXPECT_EQ(m2, m);
}

TEST(Augment, FlipTwiceAndFullTurn) {
  std::mt19937_64 rng(2);
  auto patch = testutil::random_tensor<float>({1, 3, 9, 9}, rng, 0.0, 1.0);
  Mask m({7, 7}, 0);
  m[3] = m[10] = 1;
  for (int which = 0; which < 3; ++which) {
    AugmentDraw d;
    if (which == 0) d.flip_h = true;
    if (which == 1) d.flip_v = true;
    if (which == 2) d.rot90 = 2;
    auto p = patch;
    auto mm = m;
    augment(d, p, mm);
    EXPECT_NE(p, patch);
    augment(d, p, mm);
    EXPECT_EQ(p, patch);
    EXPECT_EQ(mm, m);
  }
  AugmentDraw q;
  q.rot90 = 1;
  auto p = patch;
  auto mm = m;
  for (int i = 0; i < 4; ++i) augment(q, p, mm);
  EXPECT_EQ(p, patch);
  EXPECT_EQ(mm, m);
}

TEST(Augment, GeometricOpsPreserveMaskCount) {
  std::mt19937_64 rng(3);
  Mask m({12, 12}, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng() % 3 == 0;
  std::size_t before = 0;
  for (auto v : m.values()) before += v;
  for (int i = 0; i < 16; ++i) {
    AugmentDraw d;
    d.flip_h = i & 1;
    d.flip_v = i & 2;
    d.rot90 = i / 4;
    Tensor p({1, 3, 12, 12}, 0.5f);
    auto mm = m;
    augment(d, p, mm);
    std::size_t after = 0;
    for (auto v : mm.values()) after += v;
    EXPECT_EQ(after, before);
  }
}

TEST(Augment, RasterizeCommutesWithFlipsAndRotations) {
  std::mt19937_64 rng(4);
  const std::size_t n = 20;
  for (int i = 0; i < 16; ++i) {
    const Polygon poly = random_polygon(rng, 9.3, 11.1, 7.0);
    AugmentDraw d;
    d.flip_h = i & 1;
    d.flip_v = i & 2;
    d.rot90 = i / 4;
    Mask m = rasterize({Lesion{1, poly}}, n, n);
    Tensor p({1, 3, n, n}, 0.5f);
    augment(d, p, m);
    EXPECT_EQ(m, rasterize({Lesion{1, transform_polygon(poly, d, static_cast<double>(n))}}, n, n)) << i;
  }
}

TEST(Augment, ColourShiftKeepsRange) {
  std::mt19937_64 rng(5);
  auto patch = testutil::random_tensor<float>({1, 3, 6, 6}, rng, 0.0, 1.0);
  Mask m({1});
  for (int i = 0; i < 20; ++i) {
    auto p = patch;
    augment(AugmentDraw::random(rng), p, m);
    for (float v : p.data()) {
      EXPECT_GE(v, -1e-6f);
      EXPECT_LE(v, 1.0f + 1e-6f);
    }
  }
  // A full hue turn round-trips through HSV.
  AugmentDraw d;
  d.dh = 1.0;  // full turn
  auto p = patch;
  augment(d, p, m);
  EXPECT_LE(max_abs_diff(p, patch), 1e-5f);
}

TEST(Synthetic, LesionDiameterInPixels) {
  SyntheticSpec s;
  s.height = s.width = 1200;
  s.spacing_um = 10.0;
  s.lesion_diameters_mm = {3.0};
  auto slide = generate_synthetic_slide(s, 11);
  ASSERT_EQ(slide.annotations.lesions.size(), 1u);
  EXPECT_NEAR(polygon_diameter(slide.annotations.lesions[0].polygon), 300.0, 1.0);
  EXPECT_NO_THROW(slide.annotations.validate());
  s.lesion_diameters_mm = {20.0};
  EXPECT_THROW(generate_synthetic_slide(s, 11), ConfigError);
}

TEST(Synthetic, DeterministicInSeed) {
  SyntheticSpec s;
  s.height = s.width = 200;
  s.lesion_diameters_mm = {0.1, 0.3};
  auto a = generate_synthetic_slide(s, 5), b = generate_synthetic_slide(s, 5), c = generate_synthetic_slide(s, 6);
  EXPECT_EQ(a.slide.image, b.slide.image);
  EXPECT_EQ(a.annotations, b.annotations);
  EXPECT_NE(a.slide.image, c.slide.image);
}

TEST(Sampling, ItcPatchesContainLesion) {
  SyntheticSpec s;
  s.height = s.width = 400;
  s.spacing_um = 4.0;
  s.lesion_diameters_mm = {0.1, 0.5};
  auto slide = generate_synthetic_slide(s, 21);
  SampleCounts c{10, 6, 6, 0.2};
  auto r = sample_patches(slide.slide, slide.annotations, c, 52, 38, 3);
  EXPECT_TRUE(r.warnings.empty());
  ASSERT_EQ(r.patches.size(), 22u);
  const Polygon& itc = slide.annotations.lesions[0].polygon;
  std::size_t itc_seen = 0, boundary_seen = 0;
  for (const auto& p : r.patches) {
    EXPECT_EQ(p.image.shape(), (Shape{1, 3, 52, 52}));
    EXPECT_EQ(p.label, slide.lesion[p.center_y * 400 + p.center_x] ? 1 : 0);
    if (p.provenance == Provenance::itc) {
      ++itc_seen;
      EXPECT_TRUE(point_in_polygon(itc, p.center_x + 0.5, p.center_y + 0.5));
      EXPECT_EQ(p.label, 1);
      std::size_t lesion_px = 0;
      for (auto v : p.mask.values()) lesion_px += v;
      EXPECT_GT(lesion_px, 0u);
    }
    if (p.provenance == Provenance::boundary) ++boundary_seen;
  }
  EXPECT_EQ(itc_seen, 6u);
  EXPECT_EQ(boundary_seen, 6u);
}

TEST(Sampling, SameSeedSameOutput) {
  SyntheticSpec s;
  s.height = s.width = 300;
  s.lesion_diameters_mm = {0.15};
  auto slide = generate_synthetic_slide(s, 2);
  SampleCounts c{6, 3, 3, 0.2};
  auto a = sample_patches(slide.slide, slide.annotations, c, 24, 22, 9);
  auto b = sample_patches(slide.slide, slide.annotations, c, 24, 22, 9);
  auto d = sample_patches(slide.slide, slide.annotations, c, 24, 22, 10);
  ASSERT_EQ(a.patches.size(), b.patches.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    EXPECT_EQ(a.patches[i].image, b.patches[i].image);
    EXPECT_EQ(a.patches[i].mask, b.patches[i].mask);
    differs |= a.patches[i].center_y != d.patches[i].center_y || a.patches[i].center_x != d.patches[i].center_x;
  }
  EXPECT_TRUE(differs);
}

TEST(Sampling, MissingCategoriesWarn) {
  SyntheticSpec s;
  s.height = s.width = 200;
  auto slide = generate_synthetic_slide(s, 1);
  auto r = sample_patches(slide.slide, slide.annotations, SampleCounts{4, 2, 2, 0.2}, 24, 22, 1);
  EXPECT_EQ(r.patches.size(), 4u);
  EXPECT_EQ(r.warnings.size(), 2u);
}

TEST(Sampling, CutPatchCentresMask) {
  Tensor img({1, 1, 10, 10}, 0.0f);
  Mask les({10, 10}, 0);
  les[5 * 10 + 5] = 1;
  auto p = cut_patch(img, les, 5, 5, 6, 2, Provenance::random);
  // Patch covers rows 2..7; the 2x2 mask covers rows 4..5.
  EXPECT_EQ(p.mask.values(), (std::vector<std::uint8_t>{0, 0, 0, 1}));
  EXPECT_EQ(p.label, 1);
  auto edge = cut_patch(img, les, 0, 0, 6, 2, Provenance::random);
  EXPECT_EQ(edge.image(0, 0, 0, 0), 1.0f);  // outside the slide
  EXPECT_THROW(cut_patch(img, les, 10, 0, 6, 2, Provenance::random), GeometryError);
}

TEST(Files, SlideAndAnnotationRoundTrip) {
  const auto dir = scratch_dir("files");
  SyntheticSpec s;
  s.height = s.width = 96;
  s.spacing_um = 2.5;
  s.slide_id = "rt";
  s.lesion_diameters_mm = {0.05};
  auto slide = generate_synthetic_slide(s, 3);
  save_slide(dir / "rt", slide.slide);
  auto back = load_slide(dir / "rt.png");
  EXPECT_EQ(back.image, slide.slide.image);
  EXPECT_EQ(back.id, "rt");
  EXPECT_DOUBLE_EQ(back.spacing_um, 2.5);
  save_annotations(dir / "rt.annotations.json", slide.annotations);
  EXPECT_EQ(load_annotations(dir / "rt.annotations.json"), slide.annotations);
  EXPECT_THROW(load_slide(dir / "missing.png"), IoError);
  EXPECT_THROW(read_png(dir / "rt.json"), IoError);
  fs::remove_all(dir);
}

TEST(Files, TensorConversionRoundTrip) {
  RgbImage img(3, 4);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 7);
  EXPECT_EQ(from_tensor(to_tensor(img)), img);
}
