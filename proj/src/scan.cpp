#include "pfa/scan.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "pfa/tensor_io.hpp"

namespace pfa {

TileGeometry solve_geometry(std::size_t patch, std::size_t tile, std::size_t native_stride, std::size_t alpha) {
  if (patch == 0 || tile == 0 || native_stride == 0) throw ConfigError("patch, tile and native stride must be >= 1");
  if (alpha == 0) throw ConfigError("dense coefficient alpha must be >= 1");
  if (native_stride % alpha != 0) {
    throw ConfigError("alpha " + std::to_string(alpha) + " does not divide native stride " + std::to_string(native_stride));
  }
  TileGeometry g;
  g.patch = patch;
  g.tile = tile;
  g.native_stride = native_stride;
  g.alpha = alpha;
  g.pitch = native_stride / alpha;
  g.roi = patch + (tile - 1) * g.pitch;
  g.roi_stride = g.pitch * tile;
  return g;
}

AxisLattice axis_lattice(std::size_t extent, const TileGeometry& g) {
  if (extent == 0) throw GeometryError("slide extent must be >= 1");
  AxisLattice a;
  a.cells = extent >= g.patch ? (extent - g.patch) / g.pitch + 1 : 1;
  const auto slack = static_cast<std::ptrdiff_t>(extent) - static_cast<std::ptrdiff_t>(g.patch) -
                     static_cast<std::ptrdiff_t>((a.cells - 1) * g.pitch);
  // floor division, so a negative slack pads more on the left
  a.origin = slack >= 0 ? slack / 2 : -((-slack + 1) / 2);
  return a;
}

double ScanPlan::cell_center_y(std::size_t r) const {
  return static_cast<double>(lat_y.origin) + static_cast<double>(r * geometry.pitch) + 0.5 * static_cast<double>(geometry.patch);
}
double ScanPlan::cell_center_x(std::size_t c) const {
  return static_cast<double>(lat_x.origin) + static_cast<double>(c * geometry.pitch) + 0.5 * static_cast<double>(geometry.patch);
}

ScanPlan plan_scan(std::size_t height, std::size_t width, const TileGeometry& geometry, const Mask* tissue,
                   double min_tissue_fraction) {
  if (tissue && (tissue->rank() != 2 || tissue->extent(0) != height || tissue->extent(1) != width)) {
    throw DimensionError("tissue mask " + to_string(tissue->shape()) + " does not match slide " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  ScanPlan plan;
  plan.height = height;
  plan.width = width;
  plan.geometry = geometry;
  plan.lat_y = axis_lattice(height, geometry);
  plan.lat_x = axis_lattice(width, geometry);
  const std::size_t L = geometry.tile;
  const std::size_t roi_rows = (plan.lat_y.cells + L - 1) / L;
  const std::size_t roi_cols = (plan.lat_x.cells + L - 1) / L;
  for (std::size_t i = 0; i < roi_rows; ++i) {
    for (std::size_t j = 0; j < roi_cols; ++j) {
      RoiPlacement r;
      r.cell_row = i * L;
      r.cell_col = j * L;
      r.rows = std::min(L, plan.lat_y.cells - r.cell_row);
      r.cols = std::min(L, plan.lat_x.cells - r.cell_col);
      r.y = plan.lat_y.origin + static_cast<std::ptrdiff_t>(i * geometry.roi_stride);
      r.x = plan.lat_x.origin + static_cast<std::ptrdiff_t>(j * geometry.roi_stride);
      if (tissue) {
        const auto y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(r.y, 0));
        const auto x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(r.x, 0));
        const auto y1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(r.y + static_cast<std::ptrdiff_t>(geometry.roi), static_cast<std::ptrdiff_t>(height)));
        const auto x1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(r.x + static_cast<std::ptrdiff_t>(geometry.roi), static_cast<std::ptrdiff_t>(width)));
        std::size_t hits = 0, total = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x, ++total) hits += (*tissue)[y * width + x] ? 1 : 0;
        r.tissue_fraction = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
        r.skipped = r.tissue_fraction < min_tissue_fraction;
      }
      plan.rois.push_back(r);
    }
  }
  return plan;
}

Tensor extract_window(const Tensor& image, std::ptrdiff_t y, std::ptrdiff_t x, std::size_t extent) {
  if (image.rank() != 4 || image.batch() != 1) throw DimensionError("extract_window: image must be [1,C,H,W]");
  const std::size_t C = image.channels(), H = image.height(), W = image.width();
  Tensor out({1, C, extent, extent}, kBackground);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < extent; ++i) {
      const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(i);
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
      for (std::size_t j = 0; j < extent; ++j) {
        const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(j);
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
        out(0, c, i, j) = image(0, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

ProbabilityMap stitch(const ScanPlan& plan, const std::vector<PlacedTile>& tiles) {
  ProbabilityMap map;
  map.rows = plan.lat_y.cells;
  map.cols = plan.lat_x.cells;
  map.cell_pitch_px = static_cast<double>(plan.geometry.pitch);
  map.origin_y_px = plan.cell_center_y(0);
  map.origin_x_px = plan.cell_center_x(0);
  map.alpha = plan.geometry.alpha;
  map.values.assign(map.rows * map.cols, 0.0f);

  std::vector<const Tensor*> by_roi(plan.rois.size(), nullptr);
  for (const auto& t : tiles) {
    if (t.roi >= plan.rois.size()) throw ValidationError("tile refers to unknown ROI " + std::to_string(t.roi));
    if (by_roi[t.roi]) throw ValidationError("duplicate tile for ROI " + std::to_string(t.roi));
    const std::size_t L = plan.geometry.tile;
    if (t.prob.rank() != 2 || t.prob.extent(0) != L || t.prob.extent(1) != L) {
      throw DimensionError("tile for ROI " + std::to_string(t.roi) + " has shape " + to_string(t.prob.shape()));
    }
    by_roi[t.roi] = &t.prob;
  }
  std::string missing;
  for (std::size_t i = 0; i < plan.rois.size(); ++i) {
    const auto& r = plan.rois[i];
    if (r.skipped) continue;
    if (!by_roi[i]) {
      missing += (missing.empty() ? "" : ", ") + std::string("(") + std::to_string(r.y) + "," + std::to_string(r.x) + ")";
      continue;
    }
    const Tensor& p = *by_roi[i];
    for (std::size_t u = 0; u < r.rows; ++u)
      for (std::size_t v = 0; v < r.cols; ++v) map.values[(r.cell_row + u) * map.cols + r.cell_col + v] = p[u * plan.geometry.tile + v];
  }
  if (!missing.empty()) throw ValidationError("missing tiles for ROIs at " + missing);
  return map;
}

std::vector<PlacedTile> scan_slide(const Tensor& image, const ScanPlan& plan, const NetworkSpec& spec,
                                   const NetworkParams<float>& params, CostCounter* cost) {
  if (plan.geometry.patch != spec.patch_size || plan.geometry.native_stride != spec.native_stride) {
    throw ConfigError("scan geometry does not match network " + spec.name);
  }
  if (image.height() != plan.height || image.width() != plan.width) throw DimensionError("image does not match scan plan");
  ForwardOptions opt;
  opt.mode = Mode::dense;
  opt.alpha = plan.geometry.alpha;
  const std::size_t L = plan.geometry.tile;
  std::vector<PlacedTile> out;
  for (std::size_t i = 0; i < plan.rois.size(); ++i) {
    const auto& r = plan.rois[i];
    if (r.skipped) continue;
    const Tensor prob = detector_forward(extract_window(image, r.y, r.x, plan.geometry.roi), spec, params, opt, cost);
    Tensor tile({L, L});
    for (std::size_t u = 0; u < L; ++u)
      for (std::size_t v = 0; v < L; ++v) tile[u * L + v] = prob(0, 1, u, v);
    out.push_back({i, std::move(tile)});
  }
  return out;
}

// ---- ProbabilityMap file ---------------------------------------------------

namespace {

constexpr std::string_view kMapMagic = "PFAMAP1";

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& s, const std::string& key) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw IoError("probability map: bad value for " + key + ": '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& key) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw IoError("probability map: bad value for " + key + ": '" + s + "'");
  return v;
}

}  // namespace

void write_probability_map(std::ostream& out, const ProbabilityMap& map) {
  if (map.values.size() != map.rows * map.cols) throw DimensionError("probability map data does not match its extent");
  for (const std::string* s : {&map.slide_id, &map.network_hash})
    if (s->find_first_of("\n=") != std::string::npos) throw ValidationError("probability map: header value contains '=' or newline");
  out << kMapMagic << "\n"
      << "slide_id=" << map.slide_id << "\n"
      << "rows=" << map.rows << "\n"
      << "cols=" << map.cols << "\n"
      << "cell_pitch_px=" << format_number(map.cell_pitch_px) << "\n"
      << "origin_y_px=" << format_number(map.origin_y_px) << "\n"
      << "origin_x_px=" << format_number(map.origin_x_px) << "\n"
      << "spacing_um=" << format_number(map.spacing_um) << "\n"
      << "alpha=" << map.alpha << "\n"
      << "network_hash=" << map.network_hash << "\n"
      << "END\n";
  write_f32(out, map.values);
  if (!out) throw IoError("probability map: write failed");
}

ProbabilityMap read_probability_map(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMapMagic) throw IoError("probability map: bad magic");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line) && line != "END") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("probability map: malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (line != "END") throw IoError("probability map: header not terminated");
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError(std::string("probability map: missing header key ") + key);
    return it->second;
  };
  ProbabilityMap m;
  m.slide_id = get("slide_id");
  m.rows = parse_count(get("rows"), "rows");
  m.cols = parse_count(get("cols"), "cols");
  m.cell_pitch_px = parse_number(get("cell_pitch_px"), "cell_pitch_px");
  m.origin_y_px = parse_number(get("origin_y_px"), "origin_y_px");
  m.origin_x_px = parse_number(get("origin_x_px"), "origin_x_px");
  m.spacing_um = parse_number(get("spacing_um"), "spacing_um");
  m.alpha = parse_count(get("alpha"), "alpha");
  m.network_hash = get("network_hash");
  if (kv.size() != 9) throw IoError("probability map: unexpected header keys");
  m.values.resize(m.rows * m.cols);
  read_f32(in, m.values);
  return m;
}

void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_probability_map(out, map);
}

ProbabilityMap load_probability_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_probability_map(in);
}

// ---- oracle and certifier --------------------------------------------------

template <typename T>
BasicTensor<T> patch_oracle(const BasicTensor<T>& roi, const NetworkSpec& spec, const NetworkParams<T>& params,
                            const TileGeometry& geometry, CostCounter* cost) {
  if (geometry.patch != spec.patch_size) throw GeometryError("oracle geometry patch size differs from the network");
  if (roi.rank() != 4 || roi.batch() != 1 || roi.height() != geometry.roi || roi.width() != geometry.roi) {
    throw GeometryError("patch oracle expects a [1,C," + std::to_string(geometry.roi) + "," + std::to_string(geometry.roi) +
                        "] ROI, got " + to_string(roi.shape()));
  }
  const std::size_t L = geometry.tile, P = geometry.patch, C = roi.channels();
  BasicTensor<T> out({1, 2, L, L});
  BasicTensor<T> patch({1, C, P, P});
  for (std::size_t u = 0; u < L; ++u) {
    for (std::size_t v = 0; v < L; ++v) {
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < P; ++y)
          for (std::size_t x = 0; x < P; ++x) patch(0, c, y, x) = roi(0, c, u * geometry.pitch + y, v * geometry.pitch + x);
      const BasicTensor<T> p = detector_forward(patch, spec, params, {}, cost);
      out(0, 0, u, v) = p(0, 0, 0, 0);
      out(0, 1, u, v) = p(0, 1, 0, 0);
    }
  }
  return out;
}

template TensorD patch_oracle<double>(const TensorD&, const NetworkSpec&, const NetworkParams<double>&, const TileGeometry&, CostCounter*);
template Tensor patch_oracle<float>(const Tensor&, const NetworkSpec&, const NetworkParams<float>&, const TileGeometry&, CostCounter*);

CertifyReport certify_equivalence(const NetworkSpec& spec, const TileGeometry& geometry, const CertifyOptions& opt) {
  CertifyReport rep;
  rep.tolerance = opt.precision == Precision::mixed ? 1e-4 : 1e-9;
  if (geometry.patch != spec.patch_size || geometry.native_stride != spec.native_stride) {
    throw ConfigError("certify: geometry (patch " + std::to_string(geometry.patch) + ", stride " +
                      std::to_string(geometry.native_stride) + ") does not match network " + spec.name);
  }
  check_alpha(spec, geometry.alpha);
  ForwardOptions dense;
  dense.mode = Mode::dense;
  dense.alpha = geometry.alpha;
  dense.fault_offset = opt.fault_offset;
  try {
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::uint64_t seed = opt.seed * 1000003ULL + t;
      NetworkParams<double> params = init_params<double>(spec, seed, false);
      std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
      std::normal_distribution<double> bias(0.0, 0.1);
      for (auto& [name, tensor] : params.tensors)
        if (tensor.rank() == 1)
          for (std::size_t i = 0; i < tensor.size(); ++i) tensor[i] = bias(rng);
      std::uniform_real_distribution<double> pix(0.0, 1.0);
      TensorD roi({1, spec.input_channels, geometry.roi, geometry.roi});
      for (std::size_t i = 0; i < roi.size(); ++i) roi[i] = pix(rng);

      const TensorD oracle = patch_oracle(roi, spec, params, geometry);
      TensorD got;
      if (opt.precision == Precision::mixed) {
        got = detector_forward(roi.cast<float>(), spec, params.cast<float>(), dense).cast<double>();
      } else {
        got = detector_forward(roi, spec, params, dense);
      }
      if (got.shape() != oracle.shape()) {
        throw GeometryError("dense tile " + to_string(got.shape()) + " vs oracle " + to_string(oracle.shape()));
      }
      for (std::size_t u = 0; u < geometry.tile; ++u) {
        for (std::size_t v = 0; v < geometry.tile; ++v) {
          const double d = std::abs(got(0, 1, u, v) - oracle(0, 1, u, v));
          if (d > rep.max_deviation || std::isnan(d)) {
            rep.max_deviation = std::isnan(d) ? INFINITY : d;
            rep.worst_trial = t;
            rep.worst_row = u;
            rep.worst_col = v;
          }
        }
      }
      ++rep.trials_run;
    }
  } catch (const Error& e) {
    rep.error = e.what();
    rep.passed = false;
    return rep;
  }
  rep.passed = rep.trials_run == opt.trials && rep.max_deviation <= rep.tolerance;
  return rep;
}

}  // namespace pfa
