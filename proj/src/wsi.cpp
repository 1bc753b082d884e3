#include "pfa/wsi.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace pfa {

using nlohmann::json;

// ---- slides & annotations ----------------------------------------------------

void SlideRaster::validate() const {
  if (!(spacing_um > 0.0) || !std::isfinite(spacing_um)) throw ValidationError("slide " + id + ": spacing must be > 0");
  if (image.height == 0 || image.width == 0) throw ValidationError("slide " + id + ": empty raster");
  if (image.rgb.size() != image.height * image.width * 3) throw ValidationError("slide " + id + ": raster size mismatch");
}

namespace {

std::filesystem::path stem_of(const std::filesystem::path& p) {
  auto s = p;
  if (s.extension() == ".png" || s.extension() == ".json") s.replace_extension();
  return s;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void save_slide(const std::filesystem::path& stem, const SlideRaster& slide) {
  slide.validate();
  const auto s = stem_of(stem);
  write_png(std::filesystem::path(s.string() + ".png"), slide.image);
  json meta = {{"slide_id", slide.id}, {"spacing_um", slide.spacing_um}};
  write_text(std::filesystem::path(s.string() + ".json"), meta.dump(2) + "\n");
}

SlideRaster load_slide(const std::filesystem::path& path) {
  const auto s = stem_of(path);
  const json meta = read_json(std::filesystem::path(s.string() + ".json"));
  SlideRaster slide;
  try {
    slide.id = meta.at("slide_id").get<std::string>();
    slide.spacing_um = meta.at("spacing_um").get<double>();
  } catch (const json::exception& e) {
    throw IoError("slide sidecar " + s.string() + ".json: " + e.what());
  }
  slide.image = read_png(std::filesystem::path(s.string() + ".png"));
  slide.validate();
  return slide;
}

namespace {

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool segments_intersect(const Point& p1, const Point& p2, const Point& p3, const Point& p4) {
  const double d1 = cross(p3, p4, p1), d2 = cross(p3, p4, p2);
  const double d3 = cross(p1, p2, p3), d4 = cross(p1, p2, p4);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) return true;
  auto on_segment = [](const Point& a, const Point& b, const Point& p) {
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
  };
  if (d1 == 0 && on_segment(p3, p4, p1)) return true;
  if (d2 == 0 && on_segment(p3, p4, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, p3)) return true;
  if (d4 == 0 && on_segment(p1, p2, p4)) return true;
  return false;
}

}  // namespace

void AnnotationSet::validate() const {
  for (const auto& l : lesions) {
    const auto& p = l.polygon;
    const std::size_t n = p.size();
    if (n < 3) throw ValidationError("lesion " + std::to_string(l.id) + ": polygon needs at least 3 vertices");
    for (const auto& v : p)
      if (!std::isfinite(v.x) || !std::isfinite(v.y)) throw ValidationError("lesion " + std::to_string(l.id) + ": non-finite vertex");
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (j == i + 1 || (i == 0 && j == n - 1)) continue;  // adjacent edges share a vertex
        if (segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n])) {
          throw ValidationError("lesion " + std::to_string(l.id) + ": polygon edges " + std::to_string(i) + " and " +
                                std::to_string(j) + " intersect");
        }
      }
    }
  }
}

void save_annotations(const std::filesystem::path& path, const AnnotationSet& set) {
  json lesions = json::array();
  for (const auto& l : set.lesions) {
    json poly = json::array();
    for (const auto& v : l.polygon) poly.push_back({v.x, v.y});
    lesions.push_back({{"id", l.id}, {"polygon", poly}});
  }
  json doc = {{"slide_id", set.slide_id}, {"lesions", lesions}};
  write_text(path, doc.dump(2) + "\n");
}

AnnotationSet load_annotations(const std::filesystem::path& path) {
  const json doc = read_json(path);
  AnnotationSet set;
  try {
    set.slide_id = doc.at("slide_id").get<std::string>();
    for (const auto& l : doc.at("lesions")) {
      Lesion lesion;
      lesion.id = l.at("id").get<int>();
      for (const auto& v : l.at("polygon")) {
        if (!v.is_array() || v.size() != 2) throw ValidationError("lesion " + std::to_string(lesion.id) + ": vertices must be [x, y]");
        lesion.polygon.push_back({v[0].get<double>(), v[1].get<double>()});
      }
      set.lesions.push_back(std::move(lesion));
    }
  } catch (const json::exception& e) {
    throw IoError("annotations " + path.string() + ": " + e.what());
  }
  set.validate();
  return set;
}

bool point_in_polygon(const Polygon& poly, double x, double y) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y)) {
      const double xc = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (x < xc) inside = !inside;
    }
  }
  return inside;
}

double polygon_diameter(const Polygon& poly) {
  double best = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i)
    for (std::size_t j = i + 1; j < poly.size(); ++j)
      best = std::max(best, std::hypot(poly[i].x - poly[j].x, poly[i].y - poly[j].y));
  return best;
}

Mask rasterize(const std::vector<Lesion>& lesions, std::size_t height, std::size_t width) {
  Mask m({height, width});
  for (const auto& l : lesions) {
    if (l.polygon.empty()) continue;
    double x0 = l.polygon[0].x, x1 = x0, y0 = l.polygon[0].y, y1 = y0;
    for (const auto& v : l.polygon) {
      x0 = std::min(x0, v.x), x1 = std::max(x1, v.x);
      y0 = std::min(y0, v.y), y1 = std::max(y1, v.y);
    }
    const auto ylo = static_cast<std::size_t>(std::clamp(std::floor(y0 - 0.5), 0.0, static_cast<double>(height)));
    const auto yhi = static_cast<std::size_t>(std::clamp(std::ceil(y1), 0.0, static_cast<double>(height)));
    const auto xlo = static_cast<std::size_t>(std::clamp(std::floor(x0 - 0.5), 0.0, static_cast<double>(width)));
    const auto xhi = static_cast<std::size_t>(std::clamp(std::ceil(x1), 0.0, static_cast<double>(width)));
    for (std::size_t y = ylo; y < yhi; ++y)
      for (std::size_t x = xlo; x < xhi; ++x)
        if (point_in_polygon(l.polygon, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) m[y * width + x] = 1;
  }
  return m;
}

// ---- Otsu ----------------------------------------------------------------------

namespace {

// Little-endian base-2^32 integer, wide enough for (2^70)^2 * 2^62.
using Wide = std::array<std::uint32_t, 8>;

Wide to_wide(unsigned __int128 v) {
  Wide w{};
  for (std::size_t i = 0; i < 4; ++i, v >>= 32) w[i] = static_cast<std::uint32_t>(v);
  return w;
}

Wide multiply(const Wide& a, const Wide& b) {
  Wide out{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint64_t carry = 0;
    for (std::size_t j = 0; i + j < out.size(); ++j) {
      const std::uint64_t cur = out[i + j] + static_cast<std::uint64_t>(a[i]) * b[j] + carry;
      out[i + j] = static_cast<std::uint32_t>(cur);
      carry = cur >> 32;
    }
  }
  return out;
}

int compare(const Wide& a, const Wide& b) {
  for (std::size_t i = a.size(); i-- > 0;)
    if (a[i] != b[i]) return a[i] < b[i] ? -1 : 1;
  return 0;
}

}  // namespace

OtsuResult otsu_threshold(const Histogram& hist) {
  std::uint64_t total = 0, sum = 0;
  int occupied = 0, first = -1;
  for (int v = 0; v < 256; ++v) {
    total += hist[v];
    sum += hist[v] * static_cast<std::uint64_t>(v);
    if (hist[v]) {
      ++occupied;
      if (first < 0) first = v;
    }
  }
  if (total == 0) throw ValidationError("otsu_threshold: empty histogram");
  if (total >= (std::uint64_t{1} << 31)) throw ValidationError("otsu_threshold: more than 2^31 samples");
  if (occupied < 2) return {first, true};

  // Between-class variance is proportional to (n1 S0 - n0 S1)^2 / (n0 n1).
  // Candidates are compared by exact cross-multiplication.
  Wide best_mag{}, best_den = to_wide(1);
  int best = 0;
  std::uint64_t n0 = 0, s0 = 0;
  for (int t = 0; t < 256; ++t) {
    n0 += hist[t];
    s0 += hist[t] * static_cast<std::uint64_t>(t);
    const std::uint64_t n1 = total - n0, s1 = sum - s0;
    if (n0 == 0 || n1 == 0) continue;
    const __int128 diff = static_cast<__int128>(n1) * s0 - static_cast<__int128>(n0) * s1;
    const Wide mag = to_wide(static_cast<unsigned __int128>(diff < 0 ? -diff : diff));
    const Wide den = to_wide(static_cast<unsigned __int128>(n0) * n1);
    if (compare(multiply(multiply(mag, mag), best_den), multiply(multiply(best_mag, best_mag), den)) > 0) {
      best_mag = mag;
      best_den = den;
      best = t;
    }
  }
  return {best, false};
}

std::vector<std::uint8_t> saturation_channel(const RgbImage& image) {
  std::vector<std::uint8_t> out(image.height * image.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* p = &image.rgb[i * 3];
    out[i] = static_cast<std::uint8_t>(std::max({p[0], p[1], p[2]}) - std::min({p[0], p[1], p[2]}));
  }
  return out;
}

Mask tissue_mask(const RgbImage& image) {
  const auto sat = saturation_channel(image);
  Histogram h{};
  for (auto v : sat) ++h[v];
  const OtsuResult r = otsu_threshold(h);
  Mask m({image.height, image.width});
  if (r.degenerate) return m;
  for (std::size_t i = 0; i < sat.size(); ++i) m[i] = sat[i] > r.threshold ? 1 : 0;
  return m;
}

// ---- sampling ----------------------------------------------------------------

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::random: return "random";
    case Provenance::itc: return "itc";
    case Provenance::boundary: return "boundary";
  }
  return "?";
}

PatchSample cut_patch(const Tensor& image, const Mask& lesion_mask, std::size_t cy, std::size_t cx, std::size_t patch,
                      std::size_t mask_extent, Provenance provenance) {
  const std::size_t H = image.height(), W = image.width();
  if (cy >= H || cx >= W) throw GeometryError("patch centre outside the slide");
  PatchSample s;
  s.center_y = cy;
  s.center_x = cx;
  s.provenance = provenance;
  const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(cy) - static_cast<std::ptrdiff_t>(patch / 2);
  const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(cx) - static_cast<std::ptrdiff_t>(patch / 2);
  s.image = Tensor({1, image.channels(), patch, patch}, 1.0f);
  for (std::size_t c = 0; c < image.channels(); ++c)
    for (std::size_t y = 0; y < patch; ++y)
      for (std::size_t x = 0; x < patch; ++x) {
        const std::ptrdiff_t sy = y0 + static_cast<std::ptrdiff_t>(y), sx = x0 + static_cast<std::ptrdiff_t>(x);
        if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx < static_cast<std::ptrdiff_t>(W))
          s.image(0, c, y, x) = image(0, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
  if (mask_extent > 0) {
    const std::ptrdiff_t my = y0 + static_cast<std::ptrdiff_t>((patch - mask_extent) / 2);
    const std::ptrdiff_t mx = x0 + static_cast<std::ptrdiff_t>((patch - mask_extent) / 2);
    s.mask = Mask({mask_extent, mask_extent});
    for (std::size_t y = 0; y < mask_extent; ++y)
      for (std::size_t x = 0; x < mask_extent; ++x) {
        const std::ptrdiff_t sy = my + static_cast<std::ptrdiff_t>(y), sx = mx + static_cast<std::ptrdiff_t>(x);
        if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(H) && sx < static_cast<std::ptrdiff_t>(W))
          s.mask[y * mask_extent + x] = lesion_mask[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
      }
  }
  s.label = lesion_mask[cy * W + cx] ? 1 : 0;
  return s;
}

SampleResult sample_patches(const SlideRaster& slide, const AnnotationSet& annotations, const SampleCounts& counts,
                            std::size_t patch, std::size_t mask_extent, std::uint64_t seed) {
  slide.validate();
  const std::size_t H = slide.image.height, W = slide.image.width;
  const Tensor image = to_tensor(slide.image);
  const Mask lesions = rasterize(annotations.lesions, H, W);
  SampleResult out;

  // Independent stream per category so changing one count leaves the others intact.
  auto stream = [&](std::uint64_t category) { return std::mt19937_64(seed * 0x9e3779b97f4a7c15ULL + category); };
  auto draw_from = [&](const std::vector<std::size_t>& pool, std::size_t n, std::mt19937_64& rng, Provenance prov) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t p = pool[pick(rng)];
      out.patches.push_back(cut_patch(image, lesions, p / W, p % W, patch, mask_extent, prov));
    }
  };

  if (counts.random) {
    const Mask tissue = tissue_mask(slide.image);
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < tissue.size(); ++i)
      if (tissue[i]) pool.push_back(i);
    auto rng = stream(1);
    if (pool.empty()) {
      out.warnings.push_back(slide.id + ": no tissue, 0 of " + std::to_string(counts.random) + " random patches");
    } else {
      draw_from(pool, counts.random, rng, Provenance::random);
    }
  }

  if (counts.itc) {
    std::vector<std::vector<std::size_t>> pools;
    for (const auto& l : annotations.lesions) {
      if (polygon_diameter(l.polygon) * slide.spacing_um / 1000.0 >= counts.itc_max_mm) continue;
      const Mask m = rasterize({l}, H, W);
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) pool.push_back(i);
      if (!pool.empty()) pools.push_back(std::move(pool));
    }
    auto rng = stream(2);
    if (pools.empty()) {
      out.warnings.push_back(slide.id + ": no ITC lesion, 0 of " + std::to_string(counts.itc) + " ITC patches");
    } else {
      for (std::size_t i = 0; i < counts.itc; ++i) draw_from(pools[i % pools.size()], 1, rng, Provenance::itc);
    }
  }

  if (counts.boundary) {
    std::vector<std::size_t> pool;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto v = lesions[y * W + x];
        const bool edge = (y > 0 && lesions[(y - 1) * W + x] != v) || (y + 1 < H && lesions[(y + 1) * W + x] != v) ||
                          (x > 0 && lesions[y * W + x - 1] != v) || (x + 1 < W && lesions[y * W + x + 1] != v);
        if (edge) pool.push_back(y * W + x);
      }
    auto rng = stream(3);
    if (pool.empty()) {
      out.warnings.push_back(slide.id + ": no lesion boundary, 0 of " + std::to_string(counts.boundary) + " boundary patches");
    } else {
      draw_from(pool, counts.boundary, rng, Provenance::boundary);
    }
  }
  return out;
}

// ---- augmentation ------------------------------------------------------------

AugmentDraw AugmentDraw::random(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 1), quarter(0, 3);
  std::uniform_real_distribution<double> scale(0.9, 1.1), hue(-0.04, 0.04), sv(-0.1, 0.1);
  AugmentDraw d;
  d.flip_h = coin(rng) == 1;
  d.flip_v = coin(rng) == 1;
  d.rot90 = quarter(rng);
  d.scale = scale(rng);
  d.dh = hue(rng);
  d.ds = sv(rng);
  d.dv = sv(rng);
  return d;
}

namespace {

// Source index of output pixel (y, x) under flips then rot90 (inverse map).
void source_index(const AugmentDraw& d, std::size_t n, std::size_t y, std::size_t x, std::size_t& sy, std::size_t& sx) {
  // undo rotation: new[y][x] = old[x][n-1-y] per quarter turn
  for (int r = 0; r < ((d.rot90 % 4) + 4) % 4; ++r) {
    const std::size_t oy = x, ox = n - 1 - y;
    y = oy;
    x = ox;
  }
  if (d.flip_v) y = n - 1 - y;
  if (d.flip_h) x = n - 1 - x;
  sy = y;
  sx = x;
}

template <typename T, typename Get, typename Set>
void remap(std::size_t n, const AugmentDraw& d, T background, Get get, Set set) {
  const bool geometric = d.flip_h || d.flip_v || (d.rot90 % 4) != 0 || d.scale != 1.0;
  if (!geometric) return;
  const double c = 0.5 * static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      std::size_t ry = y, rx = x;
      if (d.scale != 1.0) {
        const double fy = std::floor(c + (static_cast<double>(y) + 0.5 - c) / d.scale);
        const double fx = std::floor(c + (static_cast<double>(x) + 0.5 - c) / d.scale);
        if (fy < 0 || fx < 0 || fy >= static_cast<double>(n) || fx >= static_cast<double>(n)) {
          set(y, x, background);
          continue;
        }
        ry = static_cast<std::size_t>(fy);
        rx = static_cast<std::size_t>(fx);
      }
      std::size_t sy, sx;
      source_index(d, n, ry, rx, sy, sx);
      set(y, x, get(sy, sx));
    }
  }
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0, 6.0) / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace

void augment(const AugmentDraw& draw, Tensor& patch, Mask& mask) {
  if (patch.rank() != 4 || patch.height() != patch.width()) throw DimensionError("augment: square [1,C,n,n] patch required");
  const std::size_t n = patch.height();
  {
    const Tensor src = patch;
    for (std::size_t c = 0; c < patch.channels(); ++c)
      remap<float>(n, draw, 1.0f, [&](std::size_t y, std::size_t x) { return src(0, c, y, x); },
                   [&](std::size_t y, std::size_t x, float v) { patch(0, c, y, x) = v; });
  }
  if (mask.rank() == 2) {
    if (mask.extent(0) != mask.extent(1)) throw DimensionError("augment: square mask required");
    const std::size_t m = mask.extent(0);
    const Mask src = mask;
    remap<std::uint8_t>(m, draw, 0, [&](std::size_t y, std::size_t x) { return src[y * m + x]; },
                        [&](std::size_t y, std::size_t x, std::uint8_t v) { mask[y * m + x] = v; });
  }
  if ((draw.dh != 0.0 || draw.ds != 0.0 || draw.dv != 0.0) && patch.channels() == 3) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double h, s, v, r, g, b;
        rgb_to_hsv(patch(0, 0, y, x), patch(0, 1, y, x), patch(0, 2, y, x), h, s, v);
        h += draw.dh;
        s = std::clamp(s + draw.ds, 0.0, 1.0);
        v = std::clamp(v + draw.dv, 0.0, 1.0);
        hsv_to_rgb(h, s, v, r, g, b);
        patch(0, 0, y, x) = static_cast<float>(r);
        patch(0, 1, y, x) = static_cast<float>(g);
        patch(0, 2, y, x) = static_cast<float>(b);
      }
  }
}

Polygon transform_polygon(const Polygon& poly, const AugmentDraw& draw, double extent) {
  Polygon out = poly;
  for (auto& p : out) {
    if (draw.flip_h) p.x = extent - p.x;
    if (draw.flip_v) p.y = extent - p.y;
    for (int r = 0; r < ((draw.rot90 % 4) + 4) % 4; ++r) {
      const Point q{p.y, extent - p.x};
      p = q;
    }
  }
  return out;
}

// ---- synthetic slides ----------------------------------------------------------

namespace {

Polygon ellipse_polygon(double cx, double cy, double a, double b, double theta, std::size_t vertices) {
  Polygon p;
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t i = 0; i < vertices; ++i) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(vertices);
    const double ex = a * std::cos(t), ey = b * std::sin(t);
    p.push_back({cx + ex * ct - ey * st, cy + ex * st + ey * ct});
  }
  return p;
}

std::uint8_t jitter(double base, double amp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-amp, amp);
  return static_cast<std::uint8_t>(std::clamp(std::lround(base + u(rng)), 0L, 255L));
}

}  // namespace

SyntheticSlide generate_synthetic_slide(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.height < 64 || spec.width < 64) throw ConfigError("synthetic slide must be at least 64 x 64");
  if (!(spec.spacing_um > 0)) throw ConfigError("synthetic slide spacing must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);

  // Tissue: one large rotated ellipse.
  const double ta = 0.46 * std::min(H, W) * (0.95 + 0.05 * u01(rng));
  const double tb = ta * (0.85 + 0.1 * u01(rng));
  const double tcx = 0.5 * W + (u01(rng) - 0.5) * 0.02 * W;
  const double tcy = 0.5 * H + (u01(rng) - 0.5) * 0.02 * H;
  const Polygon tissue_poly = ellipse_polygon(tcx, tcy, ta, tb, u01(rng) * std::numbers::pi, 96);

  SyntheticSlide out;
  out.annotations.slide_id = spec.slide_id;
  struct Placed { double x, y, r; };
  std::vector<Placed> placed;
  int next_id = 1;
  for (double d_mm : spec.lesion_diameters_mm) {
    if (!(d_mm > 0)) throw ConfigError("lesion diameter must be > 0");
    const double a = 0.5 * d_mm * 1000.0 / spec.spacing_um;
    const double b = a * (0.6 + 0.4 * u01(rng));
    const double theta = u01(rng) * std::numbers::pi;
    bool ok = false;
    for (int attempt = 0; attempt < 500 && !ok; ++attempt) {
      const double cx = tcx + (u01(rng) * 2 - 1) * ta, cy = tcy + (u01(rng) * 2 - 1) * ta;
      const Polygon poly = ellipse_polygon(cx, cy, a, b, theta, 48);
      const Polygon guard = ellipse_polygon(cx, cy, a + 8, b + 8, theta, 48);
      ok = std::all_of(guard.begin(), guard.end(), [&](const Point& p) { return point_in_polygon(tissue_poly, p.x, p.y); });
      for (const auto& q : placed)
        if (std::hypot(q.x - cx, q.y - cy) < q.r + a + 24) ok = false;
      if (ok) {
        placed.push_back({cx, cy, a});
        out.annotations.lesions.push_back({next_id++, poly});
      }
    }
    if (!ok) {
      throw ConfigError("lesion of " + std::to_string(d_mm) + " mm does not fit on synthetic slide " + spec.slide_id);
    }
  }

  out.tissue = rasterize({Lesion{0, tissue_poly}}, spec.height, spec.width);
  out.lesion = rasterize(out.annotations.lesions, spec.height, spec.width);
  out.slide.id = spec.slide_id;
  out.slide.spacing_um = spec.spacing_um;
  out.slide.image = RgbImage(spec.height, spec.width);
  std::uniform_real_distribution<double> dot(0.0, 1.0);
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const std::size_t i = y * spec.width + x;
      std::uint8_t* p = out.slide.image.pixel(y, x);
      const double r = dot(rng);
      if (out.lesion[i]) {
        // dense dark nuclei on a purple stroma
        const bool nucleus = r < 0.3;
        p[0] = jitter(nucleus ? 95 : 150, 12, rng);
        p[1] = jitter(nucleus ? 45 : 85, 12, rng);
        p[2] = jitter(nucleus ? 135 : 175, 12, rng);
      } else if (out.tissue[i]) {
        const bool nucleus = r < 0.03;
        p[0] = jitter(nucleus ? 120 : 228, 10, rng);
        p[1] = jitter(nucleus ? 70 : 160, 10, rng);
        p[2] = jitter(nucleus ? 150 : 200, 10, rng);
      } else {
        const std::uint8_t g = jitter(247, 4, rng);
        p[0] = p[1] = p[2] = g;
      }
    }
  }
  return out;
}

}  // namespace pfa
