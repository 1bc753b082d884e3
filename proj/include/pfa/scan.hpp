#pragma once

// Tile geometry, ROI scheduling over a slide, stitching of probability
// tiles, the brute-force patch oracle and the dense-vs-patch certifier.
//
// Cells live on a lattice of pitch S_p / alpha. Along each axis the lattice
// holds every patch position that fits inside the slide, centred so the
// leftover margin is split evenly (left side gets the smaller half). ROIs of
// L_R pixels step by S_R and each covers L_m x L_m consecutive cells; the
// last ROI may overhang the slide and reads background there.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pfa/detector.hpp"
#include "pfa/loss.hpp"

namespace pfa {

struct TileGeometry {
  std::size_t patch = 0;          // L_p
  std::size_t tile = 0;           // L_m
  std::size_t native_stride = 0;  // S_p
  std::size_t alpha = 1;
  std::size_t roi = 0;            // L_R = L_p + (L_m - 1) * pitch
  std::size_t roi_stride = 0;     // S_R = pitch * L_m
  std::size_t pitch = 0;          // S_p / alpha
};

TileGeometry solve_geometry(std::size_t patch, std::size_t tile, std::size_t native_stride, std::size_t alpha);

/// Number of cells along an axis of `extent` pixels, and the pixel position
/// of the first patch (negative when the slide is smaller than a patch).
struct AxisLattice {
  std::size_t cells = 0;
  std::ptrdiff_t origin = 0;
};
AxisLattice axis_lattice(std::size_t extent, const TileGeometry& g);

struct RoiPlacement {
  std::ptrdiff_t y = 0, x = 0;     // top-left pixel, may lie outside the slide
  std::size_t cell_row = 0, cell_col = 0;
  std::size_t rows = 0, cols = 0;  // cells of this ROI inside the map
  double tissue_fraction = 1.0;
  bool skipped = false;
};

struct ScanPlan {
  std::size_t height = 0, width = 0;
  TileGeometry geometry;
  AxisLattice lat_y, lat_x;
  std::vector<RoiPlacement> rois;  // row-major over the ROI grid

  /// Pixel coordinates of the centre of cell (r, c).
  double cell_center_y(std::size_t r) const;
  double cell_center_x(std::size_t c) const;
};

/// `tissue` is an optional [height, width] mask; ROIs whose in-slide tissue
/// fraction is below `min_tissue_fraction` are skipped.
ScanPlan plan_scan(std::size_t height, std::size_t width, const TileGeometry& geometry, const Mask* tissue,
                   double min_tissue_fraction);

inline constexpr float kBackground = 1.0f;  // white

/// Copies an extent x extent window at (y, x) from a [1, C, H, W] image,
/// filling out-of-slide pixels with kBackground.
Tensor extract_window(const Tensor& image, std::ptrdiff_t y, std::ptrdiff_t x, std::size_t extent);

struct ProbabilityMap {
  std::string slide_id;
  std::size_t rows = 0, cols = 0;
  double cell_pitch_px = 0.0;
  double origin_y_px = 0.0, origin_x_px = 0.0;  // centre of cell (0, 0)
  double spacing_um = 0.0;                      // per slide pixel
  std::size_t alpha = 1;
  std::string network_hash;
  std::vector<float> values;  // rows x cols, row-major

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double cell_mm() const { return cell_pitch_px * spacing_um / 1000.0; }
  friend bool operator==(const ProbabilityMap&, const ProbabilityMap&) = default;
};

struct PlacedTile {
  std::size_t roi = 0;  // index into plan.rois
  Tensor prob;          // [L_m, L_m] tumour probability
};

/// Assembles tiles in any order. Skipped ROIs are filled with 0.
ProbabilityMap stitch(const ScanPlan& plan, const std::vector<PlacedTile>& tiles);

/// Dense inference over every non-skipped ROI of `plan`.
std::vector<PlacedTile> scan_slide(const Tensor& image, const ScanPlan& plan, const NetworkSpec& spec,
                                   const NetworkParams<float>& params, CostCounter* cost = nullptr);

void write_probability_map(std::ostream& out, const ProbabilityMap& map);
ProbabilityMap read_probability_map(std::istream& in);
void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& map);
ProbabilityMap load_probability_map(const std::filesystem::path& path);

/// Sliding-window reference: one train-mode forward per cell on the patch at
/// (u * pitch, v * pitch). Returns [1, 2, L_m, L_m].
template <typename T>
BasicTensor<T> patch_oracle(const BasicTensor<T>& roi, const NetworkSpec& spec, const NetworkParams<T>& params,
                            const TileGeometry& geometry, CostCounter* cost = nullptr);

enum class Precision { mixed, double_only };

struct CertifyOptions {
  std::size_t trials = 10;
  std::uint64_t seed = 1;
  Precision precision = Precision::mixed;
  std::size_t fault_offset = 0;  // test hook, see ForwardOptions
};

struct CertifyReport {
  bool passed = false;
  double tolerance = 0.0;
  double max_deviation = 0.0;
  std::size_t worst_trial = 0, worst_row = 0, worst_col = 0;
  std::size_t trials_run = 0;
  std::string error;  // set when a trial threw
};

/// Dense forward vs patch_oracle on random ROIs with fresh random weights
/// per trial. Tolerance 1e-4 for 32-bit dense vs 64-bit oracle, 1e-9 when
/// both run in 64 bits.
CertifyReport certify_equivalence(const NetworkSpec& spec, const TileGeometry& geometry, const CertifyOptions& opt);

}  // namespace pfa
