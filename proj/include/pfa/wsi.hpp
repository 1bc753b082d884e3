#pragma once

// Slide rasters, lesion annotations, Otsu tissue masking, training-patch
// sampling, joint augmentation and the synthetic slide generator.
//
// Geometry uses continuous pixel coordinates: pixel (y, x) covers
// [x, x + 1) x [y, y + 1) and its centre is (x + 0.5, y + 0.5).

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pfa/image_io.hpp"
#include "pfa/loss.hpp"

namespace pfa {

struct SlideRaster {
  std::string id;
  double spacing_um = 1.0;  // per pixel
  RgbImage image;

  void validate() const;
};

/// Writes `<stem>.png` and the `<stem>.json` sidecar ({"slide_id", "spacing_um"}).
void save_slide(const std::filesystem::path& stem, const SlideRaster& slide);
/// Accepts the PNG path or the stem.
SlideRaster load_slide(const std::filesystem::path& path);

struct Point {
  double x = 0.0, y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using Polygon = std::vector<Point>;  // closed implicitly, last vertex != first

struct Lesion {
  int id = 0;
  Polygon polygon;
  friend bool operator==(const Lesion&, const Lesion&) = default;
};

struct AnnotationSet {
  std::string slide_id;
  std::vector<Lesion> lesions;

  /// Throws ValidationError for polygons with < 3 vertices or crossing edges.
  void validate() const;
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

// JSON: {"slide_id": "...", "lesions": [{"id": 1, "polygon": [[x, y], ...]}]}
void save_annotations(const std::filesystem::path& path, const AnnotationSet& set);
AnnotationSet load_annotations(const std::filesystem::path& path);

bool point_in_polygon(const Polygon& poly, double x, double y);
/// Largest vertex-to-vertex distance, in pixels.
double polygon_diameter(const Polygon& poly);
/// Pixels whose centre lies inside any lesion.
Mask rasterize(const std::vector<Lesion>& lesions, std::size_t height, std::size_t width);

// ---- Otsu --------------------------------------------------------------------

using Histogram = std::array<std::uint64_t, 256>;

struct OtsuResult {
  int threshold = 0;        // classes are v <= threshold and v > threshold
  bool degenerate = false;  // fewer than two occupied bins
};

/// Maximises the between-class variance exactly (rational arithmetic);
/// ties go to the lowest threshold.
OtsuResult otsu_threshold(const Histogram& hist);

/// Per-pixel max(R,G,B) - min(R,G,B).
std::vector<std::uint8_t> saturation_channel(const RgbImage& image);
/// Tissue = saturation above the Otsu threshold. Empty when degenerate.
Mask tissue_mask(const RgbImage& image);

// ---- patch sampling ------------------------------------------------------------

enum class Provenance { random, itc, boundary };
const char* to_string(Provenance p);

struct PatchSample {
  Tensor image;  // [1, 3, patch, patch]
  Mask mask;     // [mask_extent, mask_extent], centred on the patch
  int label = 0; // lesion under the patch centre pixel
  Provenance provenance = Provenance::random;
  std::size_t center_y = 0, center_x = 0;  // pixel indices
};

struct SampleCounts {
  std::size_t random = 32;
  std::size_t itc = 8;
  std::size_t boundary = 8;
  double itc_max_mm = 0.2;
};

struct SampleResult {
  std::vector<PatchSample> patches;
  std::vector<std::string> warnings;
};

/// Patches whose centre pixel is (cy, cx); the patch covers
/// [c - patch/2, c - patch/2 + patch).
PatchSample cut_patch(const Tensor& image, const Mask& lesion_mask, std::size_t cy, std::size_t cx,
                      std::size_t patch, std::size_t mask_extent, Provenance provenance);

SampleResult sample_patches(const SlideRaster& slide, const AnnotationSet& annotations, const SampleCounts& counts,
                            std::size_t patch, std::size_t mask_extent, std::uint64_t seed);

// ---- augmentation ------------------------------------------------------------

struct AugmentDraw {
  bool flip_h = false, flip_v = false;
  int rot90 = 0;        // counter-clockwise quarter turns
  double scale = 1.0;   // [0.9, 1.1]
  double dh = 0.0;      // hue shift, fraction of a turn, [-0.04, 0.04]
  double ds = 0.0, dv = 0.0;  // [-0.1, 0.1]

  static AugmentDraw identity() { return {}; }
  static AugmentDraw random(std::mt19937_64& rng);
};

/// Geometric ops act on patch and mask about their shared centre; colour
/// ops touch the patch only.
void augment(const AugmentDraw& draw, Tensor& patch, Mask& mask);
/// Applies the flips / rotation of `draw` to polygon coordinates of an
/// extent x extent window.
Polygon transform_polygon(const Polygon& poly, const AugmentDraw& draw, double extent);

// ---- synthetic slides ----------------------------------------------------------

struct SyntheticSpec {
  std::string slide_id = "synthetic";
  std::size_t height = 1024, width = 1024;
  double spacing_um = 4.0;
  std::vector<double> lesion_diameters_mm;  // one lesion per entry
};

struct SyntheticSlide {
  SlideRaster slide;
  AnnotationSet annotations;
  Mask tissue;  // generator ground truth
  Mask lesion;  // rasterized annotations
};

/// Tissue ellipse with pink texture on white; lesions are purple textured
/// polygons inside the tissue. Throws ConfigError when a lesion does not fit.
SyntheticSlide generate_synthetic_slide(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace pfa
