#include "pfa/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "pfa/decoder.hpp"

namespace pfa {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ConfigError("network spec line " + std::to_string(line) + ": " + msg);
}

std::size_t to_size(std::string_view v, std::size_t line) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) fail(line, "expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

int to_int(std::string_view v, std::size_t line) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) fail(line, "expected an integer, got '" + std::string(v) + "'");
  return out;
}

double to_double(std::string_view v, std::size_t line) {
  try {
    std::size_t used = 0;
    const std::string s(v);
    const double d = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    fail(line, "expected a number, got '" + std::string(v) + "'");
  }
}

Fraction to_fraction(std::string_view v, std::size_t line) {
  const auto slash = v.find('/');
  if (slash == std::string_view::npos) fail(line, "expected a fraction like 1/4, got '" + std::string(v) + "'");
  return {to_size(v.substr(0, slash), line), to_size(v.substr(slash + 1), line)};
}

using KeyValues = std::map<std::string, std::string_view, std::less<>>;

KeyValues parse_args(const std::vector<std::string_view>& tokens, std::size_t line,
                     std::initializer_list<std::string_view> allowed) {
  KeyValues kv;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const auto eq = tokens[i].find('=');
    if (eq == std::string_view::npos) fail(line, "expected key=value, got '" + std::string(tokens[i]) + "'");
    const auto key = tokens[i].substr(0, eq);
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(line, "unknown key '" + std::string(key) + "' for '" + std::string(tokens[0]) + "'");
    }
    kv.emplace(std::string(key), tokens[i].substr(eq + 1));
  }
  return kv;
}

std::string_view require(const KeyValues& kv, std::string_view key, std::size_t line) {
  auto it = kv.find(key);
  if (it == kv.end()) fail(line, "missing key '" + std::string(key) + "'");
  return it->second;
}

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

constexpr std::string_view kDeskSpec = R"(# Desk-scale detector: every geometric property of the full-size network,
# at sizes where the brute-force patch oracle is cheap.
name = desk
input_channels = 3
patch_size = 52
native_stride = 64
reduced_channels = 16
mask_extent = 38
final_weight = 1
conv kernel=2 stride=2 out=16
conv kernel=3 stride=1 out=16
level 2
conv kernel=2 stride=2 out=16
level 3
conv kernel=2 stride=2 out=16
level 4
conv kernel=2 stride=2 out=16
level 5
pfe level=2 kernel=3
pfe level=3 kernel=3 crop=1/4 pool_stride=16
pfe level=4 kernel=3 crop=1/2 pool_stride=8
pfe level=5 kernel=3 crop=1/1 pool_stride=4
decoder level=5 bm_kernel=1 up_kernel=4 aux_weight=0
decoder level=4 bm_kernel=1 up_kernel=4 aux_weight=0.3
decoder level=3 bm_kernel=1 up_kernel=4 aux_weight=0.3
decoder level=2 bm_kernel=3 up_kernel=4 aux_weight=0
)";

constexpr std::string_view kFullSpec = R"(# Full-size geometry: 692 px patches, 2708 px ROIs at alpha = 16 give
# 64 x 64 probability tiles.
name = full
input_channels = 3
patch_size = 692
native_stride = 512
reduced_channels = 32
mask_extent = 374
final_weight = 1
conv kernel=2 stride=2 out=32
conv kernel=3 stride=1 out=32
level 2
conv kernel=2 stride=2 out=64
level 3
conv kernel=2 stride=2 out=128
level 4
conv kernel=2 stride=2 out=256
level 5
pfe level=2 kernel=15
pfe level=3 kernel=15 crop=1/4 pool_stride=128
pfe level=4 kernel=15 crop=1/2 pool_stride=64
pfe level=5 kernel=15 crop=1/1 pool_stride=32
decoder level=5 bm_kernel=3 up_kernel=4 aux_weight=0
decoder level=4 bm_kernel=3 up_kernel=4 aux_weight=0.3
decoder level=3 bm_kernel=3 up_kernel=4 aux_weight=0.3
decoder level=2 bm_kernel=3 up_kernel=4 aux_weight=0
)";

}  // namespace

std::size_t NetworkSpec::level_stride(int level) const {
  auto it = level_layer.find(level);
  if (it == level_layer.end()) throw ConfigError("network has no level " + std::to_string(level));
  std::size_t s = 1;
  for (std::size_t i = 0; i <= it->second; ++i) s *= trunk[i].stride;
  return s;
}

std::size_t NetworkSpec::level_channels(int level) const {
  auto it = level_layer.find(level);
  if (it == level_layer.end()) throw ConfigError("network has no level " + std::to_string(level));
  return trunk[it->second].out_channels;
}

const PfeLevel& NetworkSpec::pfe_level(int level) const {
  for (const auto& p : pfe)
    if (p.level == level) return p;
  throw ConfigError("network has no global convolution at level " + std::to_string(level));
}

bool NetworkSpec::has_pfe(int level) const {
  return std::any_of(pfe.begin(), pfe.end(), [&](const PfeLevel& p) { return p.level == level; });
}

std::vector<int> NetworkSpec::pooled_levels() const {
  std::vector<int> out;
  for (const auto& p : pfe)
    if (p.pooled()) out.push_back(p.level);
  return out;
}

NetworkSpec parse_network_spec(std::string_view text) {
  NetworkSpec spec;
  std::set<std::string> seen_scalars;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const auto tokens = split_ws(line);
    const auto& head = tokens[0];
    if (head == "conv") {
      const auto kv = parse_args(tokens, line_no, {"kernel", "stride", "out"});
      spec.trunk.push_back({to_size(require(kv, "kernel", line_no), line_no),
                            to_size(require(kv, "stride", line_no), line_no),
                            to_size(require(kv, "out", line_no), line_no)});
    } else if (head == "level") {
      if (tokens.size() != 2) fail(line_no, "expected 'level <index>'");
      if (spec.trunk.empty()) fail(line_no, "'level' must follow a conv layer");
      const int lv = to_int(tokens[1], line_no);
      if (!spec.level_layer.emplace(lv, spec.trunk.size() - 1).second) fail(line_no, "duplicate level");
    } else if (head == "pfe") {
      const auto kv = parse_args(tokens, line_no, {"level", "kernel", "crop", "pool_stride"});
      PfeLevel p;
      p.level = to_int(require(kv, "level", line_no), line_no);
      p.kernel = to_size(require(kv, "kernel", line_no), line_no);
      const bool has_crop = kv.count("crop") != 0, has_stride = kv.count("pool_stride") != 0;
      if (has_crop != has_stride) fail(line_no, "crop and pool_stride must be given together");
      if (has_crop) {
        p.crop = to_fraction(kv.at("crop"), line_no);
        p.pool_stride = to_size(kv.at("pool_stride"), line_no);
      }
      spec.pfe.push_back(p);
    } else if (head == "decoder") {
      const auto kv = parse_args(tokens, line_no, {"level", "bm_kernel", "up_kernel", "aux_weight"});
      DecoderLevel d;
      d.level = to_int(require(kv, "level", line_no), line_no);
      if (kv.count("bm_kernel")) d.bm_kernel = to_size(kv.at("bm_kernel"), line_no);
      if (kv.count("up_kernel")) d.up_kernel = to_size(kv.at("up_kernel"), line_no);
      if (kv.count("aux_weight")) d.aux_weight = to_double(kv.at("aux_weight"), line_no);
      spec.decoder.push_back(d);
    } else {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) fail(line_no, "unrecognised statement '" + std::string(line) + "'");
      const std::string key(trim(line.substr(0, eq)));
      const auto value = trim(line.substr(eq + 1));
      if (!seen_scalars.insert(key).second) fail(line_no, "duplicate key '" + key + "'");
      if (key == "name") {
        spec.name = std::string(value);
      } else if (key == "input_channels") {
        spec.input_channels = to_size(value, line_no);
      } else if (key == "patch_size") {
        spec.patch_size = to_size(value, line_no);
      } else if (key == "native_stride") {
        spec.native_stride = to_size(value, line_no);
      } else if (key == "reduced_channels") {
        spec.reduced_channels = to_size(value, line_no);
      } else if (key == "mask_extent") {
        spec.mask_extent = to_size(value, line_no);
      } else if (key == "final_weight") {
        spec.final_weight = to_double(value, line_no);
      } else {
        fail(line_no, "unknown key '" + key + "'");
      }
    }
  }
  std::sort(spec.pfe.begin(), spec.pfe.end(), [](const PfeLevel& a, const PfeLevel& b) { return a.level < b.level; });
  for (std::size_t i = 1; i < spec.pfe.size(); ++i)
    if (spec.pfe[i].level == spec.pfe[i - 1].level) throw ConfigError("duplicate pfe level " + std::to_string(spec.pfe[i].level));
  validate(spec);
  return spec;
}

NetworkSpec load_network_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open network spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_network_spec(ss.str());
}

std::string format_network_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "name = " << spec.name << "\n"
     << "input_channels = " << spec.input_channels << "\n"
     << "patch_size = " << spec.patch_size << "\n"
     << "native_stride = " << spec.native_stride << "\n"
     << "reduced_channels = " << spec.reduced_channels << "\n"
     << "mask_extent = " << spec.mask_extent << "\n"
     << "final_weight = " << format_double(spec.final_weight) << "\n";
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    const auto& l = spec.trunk[i];
    os << "conv kernel=" << l.kernel << " stride=" << l.stride << " out=" << l.out_channels << "\n";
    for (const auto& [lv, idx] : spec.level_layer)
      if (idx == i) os << "level " << lv << "\n";
  }
  for (const auto& p : spec.pfe) {
    os << "pfe level=" << p.level << " kernel=" << p.kernel;
    if (p.crop) os << " crop=" << p.crop->num << "/" << p.crop->den << " pool_stride=" << p.pool_stride;
    os << "\n";
  }
  for (const auto& d : spec.decoder) {
    os << "decoder level=" << d.level << " bm_kernel=" << d.bm_kernel << " up_kernel=" << d.up_kernel
       << " aux_weight=" << format_double(d.aux_weight) << "\n";
  }
  return os.str();
}

NetworkSpec desk_network_spec() { return parse_network_spec(kDeskSpec); }
NetworkSpec full_network_spec() { return parse_network_spec(kFullSpec); }

ShapeReport propagate_shapes(const NetworkSpec& spec, std::size_t input_extent) {
  ShapeReport r;
  r.input_extent = input_extent;
  std::size_t n = input_extent, rf = 1, jump = 1;
  double origin = 0.0;
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    const auto& l = spec.trunk[i];
    if (n < l.kernel) {
      throw GeometryError("trunk layer " + std::to_string(i) + ": extent " + std::to_string(n) +
                          " smaller than kernel " + std::to_string(l.kernel) + " (input extent " +
                          std::to_string(input_extent) + ")");
    }
    if ((n - l.kernel) % l.stride != 0) r.exact = false;
    origin += 0.5 * static_cast<double>((l.kernel - 1) * jump);
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
    n = (n - l.kernel) / l.stride + 1;
    r.layer_extent.push_back(n);
    for (const auto& [lv, idx] : spec.level_layer) {
      if (idx != i) continue;
      LevelShape ls;
      ls.extent = n;
      ls.receptive_field = rf;
      ls.lattice = {origin, static_cast<double>(jump)};
      if (spec.has_pfe(lv)) {
        const std::size_t k = spec.pfe_level(lv).kernel;
        if (n < k) {
          throw GeometryError("level " + std::to_string(lv) + ": extent " + std::to_string(n) +
                              " smaller than global-convolution kernel " + std::to_string(k));
        }
        ls.refined_extent = n - k + 1;
        ls.receptive_field = rf + (k - 1) * jump;
        ls.lattice.origin += 0.5 * static_cast<double>((k - 1) * jump);
      }
      r.levels.emplace(lv, ls);
    }
  }
  return r;
}

std::size_t dense_pool_stride(const PfeLevel& level, std::size_t alpha) {
  if (alpha == 0) throw ConfigError("dense coefficient alpha must be >= 1");
  if (!level.pooled()) throw ConfigError("level " + std::to_string(level.level) + " is not pooled");
  if (level.pool_stride % alpha != 0) {
    throw ConfigError("alpha " + std::to_string(alpha) + " does not divide pooling stride " +
                      std::to_string(level.pool_stride) + " at level " + std::to_string(level.level));
  }
  return level.pool_stride / alpha;
}

void check_alpha(const NetworkSpec& spec, std::size_t alpha) {
  if (alpha == 0) throw ConfigError("dense coefficient alpha must be >= 1");
  if (spec.native_stride % alpha != 0) {
    throw ConfigError("alpha " + std::to_string(alpha) + " does not divide native stride " +
                      std::to_string(spec.native_stride));
  }
  for (const auto& p : spec.pfe)
    if (p.pooled()) dense_pool_stride(p, alpha);
}

std::size_t roi_extent(const NetworkSpec& spec, std::size_t alpha, std::size_t tile) {
  check_alpha(spec, alpha);
  if (tile == 0) throw ConfigError("tile extent must be >= 1");
  return spec.patch_size + (tile - 1) * (spec.native_stride / alpha);
}

std::size_t global_conv_weight_count(std::size_t kernel, std::size_t in_channels, std::size_t out_channels) {
  // Each branch: 1xk (or kx1) from in to out, then kx1 (or 1xk) from out to out.
  return 2 * (kernel * in_channels * out_channels + kernel * out_channels * out_channels);
}

void validate(const NetworkSpec& spec) {
  if (spec.trunk.empty()) throw ConfigError("network has no trunk layers");
  if (spec.patch_size == 0 || spec.native_stride == 0) throw ConfigError("patch_size and native_stride must be set");
  if (spec.input_channels == 0 || spec.reduced_channels == 0) throw ConfigError("channel counts must be >= 1");
  for (const auto& l : spec.trunk)
    if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0) throw ConfigError("trunk layer with zero kernel/stride/channels");

  std::size_t prev_stride = 0;
  for (const auto& [lv, idx] : spec.level_layer) {
    const std::size_t s = spec.level_stride(lv);
    if (s <= prev_stride) throw ConfigError("level strides must increase with the level index");
    prev_stride = s;
  }
  for (const auto& p : spec.pfe) {
    if (!spec.level_layer.count(p.level)) throw ConfigError("pfe refers to unknown level " + std::to_string(p.level));
    if (p.kernel == 0) throw ConfigError("pfe kernel must be >= 1");
    if (p.pooled()) {
      if (p.pool_stride == 0) throw ConfigError("pool_stride must be >= 1");
      const std::size_t constant = spec.level_stride(p.level) * p.pool_stride;
      if (constant != spec.native_stride) {
        throw ConfigError("alignment constant at level " + std::to_string(p.level) + ": stride " +
                          std::to_string(spec.level_stride(p.level)) + " x pool_stride " +
                          std::to_string(p.pool_stride) + " = " + std::to_string(constant) +
                          ", expected native_stride " + std::to_string(spec.native_stride));
      }
    }
  }
  if (spec.pooled_levels().empty()) throw ConfigError("network has no pooled PFE level");

  const ShapeReport r = propagate_shapes(spec, spec.patch_size);
  if (!r.exact) throw ConfigError("trunk does not close exactly at patch_size " + std::to_string(spec.patch_size));

  // Union of the input footprints of all pooled windows must be the patch.
  std::size_t lo = spec.patch_size, hi = 0;
  for (int lv : spec.pooled_levels()) {
    const auto& ls = r.levels.at(lv);
    const auto& p = spec.pfe_level(lv);
    const CropWindow w = center_crop_window(ls.refined_extent, *p.crop);
    const std::size_t s = spec.level_stride(lv);
    const std::size_t start = w.offset * s;
    const std::size_t end = start + (w.size - 1) * s + ls.receptive_field;
    lo = std::min(lo, start);
    hi = std::max(hi, end);
  }
  if (lo != 0 || hi != spec.patch_size) {
    throw ConfigError("classifier receptive field spans [" + std::to_string(lo) + ", " + std::to_string(hi) +
                      ") instead of the patch [0, " + std::to_string(spec.patch_size) + ")");
  }

  if (spec.has_decoder()) {
    for (std::size_t i = 0; i < spec.decoder.size(); ++i) {
      const auto& d = spec.decoder[i];
      if (!spec.has_pfe(d.level)) {
        throw ConfigError("decoder level " + std::to_string(d.level) + " needs a global convolution (pfe line)");
      }
      if (i > 0 && d.level != spec.decoder[i - 1].level - 1) throw ConfigError("decoder levels must descend by one");
      if (d.bm_kernel == 0 || d.up_kernel == 0) throw ConfigError("decoder kernels must be >= 1");
      if (d.aux_weight < 0) throw ConfigError("aux_weight must be >= 0");
    }
    const DecoderShapes ds = decoder_shapes(spec, r);
    if (ds.final_extent != spec.mask_extent) {
      throw ConfigError("decoder output extent " + std::to_string(ds.final_extent) + " differs from mask_extent " +
                        std::to_string(spec.mask_extent));
    }
  }
}

// ---- parameters --------------------------------------------------------------

namespace param_names {
std::string trunk_weight(std::size_t layer) { return "trunk." + std::to_string(layer) + ".w"; }
std::string trunk_bias(std::size_t layer) { return "trunk." + std::to_string(layer) + ".b"; }
std::string gconv(int level, const char* part) { return "gconv." + std::to_string(level) + "." + part; }
std::string decoder(int level, const char* part) { return "dec." + std::to_string(level) + "." + part; }
}  // namespace param_names

template <typename T>
BasicTensor<T>& NetworkParams<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter tensor '" + name + "'");
  return it->second;
}

template <typename T>
const BasicTensor<T>& NetworkParams<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("missing parameter tensor '" + name + "'");
  return it->second;
}

template <typename T>
NetworkParams<T> NetworkParams<T>::zeros_like() const {
  NetworkParams out;
  for (const auto& [k, v] : tensors) out.tensors.emplace(k, BasicTensor<T>(v.shape()));
  return out;
}

template <typename T>
std::size_t NetworkParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : tensors) n += v.size();
  return n;
}

namespace {

// Expected parameter shapes, in a fixed order.
std::vector<std::pair<std::string, Shape>> param_layout(const NetworkSpec& spec, bool with_decoder) {
  namespace pn = param_names;
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t cin = spec.input_channels;
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    const auto& l = spec.trunk[i];
    out.push_back({pn::trunk_weight(i), {l.out_channels, cin, l.kernel, l.kernel}});
    out.push_back({pn::trunk_bias(i), {l.out_channels}});
    cin = l.out_channels;
  }
  const std::size_t c = spec.reduced_channels;
  for (const auto& p : spec.pfe) {
    if (!p.pooled() && !with_decoder) continue;
    const std::size_t ci = spec.level_channels(p.level), k = p.kernel;
    out.push_back({pn::gconv(p.level, "a1"), {c, ci, 1, k}});
    out.push_back({pn::gconv(p.level, "a2"), {c, c, k, 1}});
    out.push_back({pn::gconv(p.level, "b1"), {c, ci, k, 1}});
    out.push_back({pn::gconv(p.level, "b2"), {c, c, 1, k}});
    out.push_back({pn::gconv(p.level, "bias"), {c}});
  }
  out.push_back({pn::head_weight, {2, c, 1, 1}});
  out.push_back({pn::head_bias, {2}});
  if (with_decoder) {
    for (std::size_t i = 0; i < spec.decoder.size(); ++i) {
      const auto& d = spec.decoder[i];
      const bool last = i + 1 == spec.decoder.size();
      out.push_back({pn::decoder(d.level, "bm1.w"), {c, c, d.bm_kernel, d.bm_kernel}});
      out.push_back({pn::decoder(d.level, "bm1.b"), {c}});
      out.push_back({pn::decoder(d.level, "bm2.w"), {c, c, d.bm_kernel, d.bm_kernel}});
      out.push_back({pn::decoder(d.level, "bm2.b"), {c}});
      if (d.aux_weight > 0 && !last) {
        out.push_back({pn::decoder(d.level, "aux.w"), {2, c, 1, 1}});
        out.push_back({pn::decoder(d.level, "aux.b"), {2}});
      }
      // Transposed-conv weights use the forward-conv layout [Cx, Cout, k, k].
      if (!last) {
        out.push_back({pn::decoder(d.level, "up.w"), {c, c, d.up_kernel, d.up_kernel}});
        out.push_back({pn::decoder(d.level, "up.b"), {c}});
      } else {
        out.push_back({pn::decoder(d.level, "final.w"), {c, 2, d.up_kernel, d.up_kernel}});
        out.push_back({pn::decoder(d.level, "final.b"), {2}});
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed, bool with_decoder) {
  std::mt19937_64 rng(seed);
  NetworkParams<T> params;
  for (auto& [name, shape] : param_layout(spec, with_decoder && spec.has_decoder())) {
    BasicTensor<T> t(shape);
    if (shape.size() == 4) {
      // fan-in of the forward map; transposed convs scatter, so use fan-out/stride^2 ~ Cx*k*k/4.
      const bool transposed = name.find(".up.") != std::string::npos || name.find(".final.") != std::string::npos;
      const double fan_in = transposed ? static_cast<double>(shape[0] * shape[2] * shape[3]) / 4.0
                                       : static_cast<double>(shape[1] * shape[2] * shape[3]);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1.0, fan_in)));
      for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    }
    params.tensors.emplace(name, std::move(t));
  }
  return params;
}

template <typename T>
void check_params(const NetworkSpec& spec, const NetworkParams<T>& params, bool require_decoder) {
  for (auto& [name, shape] : param_layout(spec, require_decoder && spec.has_decoder())) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw ValidationError("weights are missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw ValidationError("tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                            to_string(shape));
    }
  }
}

NamedTensors to_bundle(const NetworkParams<float>& params) {
  NamedTensors out;
  for (const auto& [k, v] : params.tensors) out.emplace_back(k, v);
  return out;
}

NetworkParams<float> from_bundle(const NamedTensors& bundle) {
  NetworkParams<float> p;
  for (const auto& [k, v] : bundle)
    if (!p.tensors.emplace(k, v).second) throw IoError("duplicate tensor '" + k + "' in weights bundle");
  return p;
}

template struct NetworkParams<float>;
template struct NetworkParams<double>;
template NetworkParams<float> init_params<float>(const NetworkSpec&, std::uint64_t, bool);
template NetworkParams<double> init_params<double>(const NetworkSpec&, std::uint64_t, bool);
template void check_params<float>(const NetworkSpec&, const NetworkParams<float>&, bool);
template void check_params<double>(const NetworkSpec&, const NetworkParams<double>&, bool);

}  // namespace pfa
