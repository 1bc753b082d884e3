#pragma once

// Layer-graph description of the detector and its segmentation decoder,
// plus the learnable parameter set.
//
// Text format, one statement per line, '#' starts a comment:
//
//   name = desk
//   input_channels = 3
//   patch_size = 52          # training patch extent L_p (px)
//   native_stride = 64       # scanning stride S_p at alpha = 1 (px)
//   reduced_channels = 16    # channels after the global convolution
//   mask_extent = 38         # decoder output extent (0: no decoder)
//   conv kernel=2 stride=2 out=16
//   level 2                  # output of the preceding conv is pyramid level 2
//   pfe level=3 kernel=3 crop=1/4 pool_stride=16
//   pfe level=2 kernel=3     # global convolution only (decoder input)
//   decoder level=5 bm_kernel=1 up_kernel=4 aux_weight=0
//
// Trunk convolutions are valid (unpadded) and followed by ReLU.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pfa/ops.hpp"
#include "pfa/tensor.hpp"
#include "pfa/tensor_io.hpp"

namespace pfa {

struct TrunkLayer {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t out_channels = 16;
  friend bool operator==(const TrunkLayer&, const TrunkLayer&) = default;
};

/// Per-level feature extraction: a separable global convolution, and for
/// pooled levels a centered crop followed by (dense) average pooling.
struct PfeLevel {
  int level = 0;
  std::size_t kernel = 15;
  std::optional<Fraction> crop;
  std::size_t pool_stride = 0;  // training stride in feature cells

  bool pooled() const { return crop.has_value(); }
  friend bool operator==(const PfeLevel&, const PfeLevel&) = default;
};

struct DecoderLevel {
  int level = 0;
  std::size_t bm_kernel = 3;
  std::size_t up_kernel = 4;
  double aux_weight = 0.0;
  friend bool operator==(const DecoderLevel&, const DecoderLevel&) = default;
};

struct NetworkSpec {
  std::string name = "unnamed";
  std::size_t input_channels = 3;
  std::size_t patch_size = 0;
  std::size_t native_stride = 0;
  std::size_t reduced_channels = 16;
  std::size_t mask_extent = 0;
  double final_weight = 1.0;
  std::vector<TrunkLayer> trunk;
  std::map<int, std::size_t> level_layer;  // level -> index of the trunk layer producing it
  std::vector<PfeLevel> pfe;               // ascending level
  std::vector<DecoderLevel> decoder;       // descending level, consecutive

  /// Input pixels per feature cell at `level`.
  std::size_t level_stride(int level) const;
  std::size_t level_channels(int level) const;
  const PfeLevel& pfe_level(int level) const;
  bool has_pfe(int level) const;
  std::vector<int> pooled_levels() const;  // ascending
  bool has_decoder() const { return !decoder.empty(); }
  /// Levels whose global convolution is evaluated at inference.
  std::vector<int> inference_levels() const { return pooled_levels(); }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

NetworkSpec parse_network_spec(std::string_view text);
NetworkSpec load_network_spec(const std::filesystem::path& path);
std::string format_network_spec(const NetworkSpec& spec);

/// Built-in configurations (also shipped as configs/desk.net, configs/full.net).
NetworkSpec desk_network_spec();
NetworkSpec full_network_spec();

/// Lattice of a feature map expressed in input pixels: cell j is centred at
/// `origin + j * pitch`.
struct Lattice {
  double origin = 0.0;
  double pitch = 1.0;
};

struct LevelShape {
  std::size_t extent = 0;          // X_i
  std::size_t refined_extent = 0;  // X_i' (0 if the level has no global conv)
  std::size_t receptive_field = 0; // of one X_i' cell (X_i if no global conv), px
  Lattice lattice;                 // of X_i'
};

struct ShapeReport {
  std::size_t input_extent = 0;
  std::vector<std::size_t> layer_extent;  // per trunk layer
  std::map<int, LevelShape> levels;
  bool exact = true;                      // no layer drops trailing input
};

/// Propagates a square input extent through the trunk and global
/// convolutions. Throws GeometryError if any layer does not fit.
ShapeReport propagate_shapes(const NetworkSpec& spec, std::size_t input_extent);

/// Structural checks: level strides 2^(i-1)-style increasing, the alignment
/// constant s_i * pool_stride_i == native_stride, exact closure at the
/// patch size, classifier receptive field == patch size, decoder extents.
void validate(const NetworkSpec& spec);

/// Input extents accepted in dense mode: patch + (tile - 1) * pitch.
std::size_t roi_extent(const NetworkSpec& spec, std::size_t alpha, std::size_t tile);

/// Dense pooling stride at `level` for dense coefficient alpha; throws
/// ConfigError when alpha does not divide the training stride.
std::size_t dense_pool_stride(const PfeLevel& level, std::size_t alpha);
/// Checks alpha against every pooled level.
void check_alpha(const NetworkSpec& spec, std::size_t alpha);

/// Weight count of a separable global convolution (biases excluded).
std::size_t global_conv_weight_count(std::size_t kernel, std::size_t in_channels, std::size_t out_channels);

// ---- parameters --------------------------------------------------------------

template <typename T>
struct NetworkParams {
  std::map<std::string, BasicTensor<T>> tensors;

  BasicTensor<T>& at(const std::string& name);
  const BasicTensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  NetworkParams zeros_like() const;
  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }
  std::size_t count() const;
};

namespace param_names {
std::string trunk_weight(std::size_t layer);
std::string trunk_bias(std::size_t layer);
std::string gconv(int level, const char* part);  // part: a1, a2, b1, b2, bias
std::string decoder(int level, const char* part);
inline const char* head_weight = "head.w";
inline const char* head_bias = "head.b";
}  // namespace param_names

/// He-normal initialisation, zero biases; deterministic in `seed`.
template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed, bool with_decoder = true);

/// Checks that every tensor the detector (and optionally the decoder) needs
/// is present with the expected shape.
template <typename T>
void check_params(const NetworkSpec& spec, const NetworkParams<T>& params, bool require_decoder);

NamedTensors to_bundle(const NetworkParams<float>& params);
NetworkParams<float> from_bundle(const NamedTensors& bundle);

}  // namespace pfa
