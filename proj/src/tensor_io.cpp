#include "pfa/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace pfa {

namespace {

constexpr std::array<char, 5> kTensorMagic{'D', 'S', 'T', 'N', '1'};
constexpr std::array<char, 5> kBundleMagic{'D', 'S', 'T', 'W', '1'};
// Sanity bound when decoding; no tensor in this project comes close.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

void expect_magic(std::istream& in, const std::array<char, 5>& magic) {
  std::array<char, 5> got{};
  in.read(got.data(), got.size());
  if (!in || got != magic) {
    throw IoError("bad magic: expected \"" + std::string(magic.begin(), magic.end()) + "\"");
  }
}

}  // namespace

void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<unsigned char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b.data()), b.size());
}

std::uint64_t read_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!in) throw IoError("unexpected end of stream reading u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

void write_f32(std::ostream& out, std::span<const float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<unsigned char>(bits >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f32(std::istream& in, std::span<float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError("unexpected end of stream reading float data");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= std::uint32_t{buf[4 * i + k]} << (8 * k);
    values[i] = std::bit_cast<float>(bits);
  }
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic.data(), kTensorMagic.size());
  write_u64(out, t.rank());
  for (std::size_t e : t.shape()) write_u64(out, e);
  write_f32(out, t.data());
  if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, kTensorMagic);
  const std::uint64_t rank = read_u64(in);
  if (rank == 0 || rank > 8) throw IoError("tensor rank " + std::to_string(rank) + " out of range");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& e : shape) {
    e = read_u64(in);
    if (e == 0) throw IoError("tensor extent of zero in header");
    count *= e;
    if (count > kMaxElements) throw IoError("tensor too large");
  }
  Tensor t(shape);
  read_f32(in, t.data());
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

void write_bundle(std::ostream& out, const NamedTensors& tensors) {
  out.write(kBundleMagic.data(), kBundleMagic.size());
  write_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  if (!out) throw IoError("failed writing tensor bundle");
}

NamedTensors read_bundle(std::istream& in) {
  expect_magic(in, kBundleMagic);
  const std::uint64_t count = read_u64(in);
  NamedTensors out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t len = read_u64(in);
    if (len > 4096) throw IoError("tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("unexpected end of stream reading tensor name");
    out.emplace_back(std::move(name), read_tensor(in));
  }
  return out;
}

void save_bundle(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_bundle(out, tensors);
}

NamedTensors load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_bundle(in);
}

}  // namespace pfa
