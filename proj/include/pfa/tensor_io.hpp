#pragma once

// Binary tensor container.
//
//   "DSTN1" | rank: u64 | extents: rank x u64 | data: prod(extents) x f32
//
// All integers and floats are little-endian; data is row-major. A weights
// bundle is "DSTW1" | count: u64 | count x (name_len: u64 | name | tensor).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "pfa/tensor.hpp"

namespace pfa {

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_bundle(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_bundle(std::istream& in);

void save_bundle(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_bundle(const std::filesystem::path& path);

// Little-endian primitives shared with the other binary formats.
void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in);
void write_f32(std::ostream& out, std::span<const float> values);
void read_f32(std::istream& in, std::span<float> values);

}  // namespace pfa
