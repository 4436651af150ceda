#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/supernet.hpp"

namespace isonas {

/// Binary tensor archive (layout in docs/checkpoint.md):
///   magic "ISONASCK" | u32 version | u32 entry count
///   entries: u32 name length | name bytes | u64 offset | u64 count
///   payload: float64 values, little-endian; offsets in values from the payload start.
inline constexpr char kCheckpointMagic[8] = {'I', 'S', 'O', 'N', 'A', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorMap = std::map<std::string, std::vector<double>>;

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::vector<unsigned char>& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw ParseError("checkpoint truncated", pos);
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[pos + i]) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const TensorMap& tensors) {
  std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, values] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le<std::uint64_t>(out, offset);
    detail::put_le<std::uint64_t>(out, values.size());
    offset += values.size();
  }
  for (const auto& [name, values] : tensors)
    for (double v : values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline TensorMap decode_checkpoint(const std::vector<unsigned char>& buf) {
  if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) throw ParseError("bad checkpoint magic", 0);
  std::size_t pos = 8;
  const auto version = detail::get_le<std::uint32_t>(buf, pos);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 8);
  }
  const auto count = detail::get_le<std::uint32_t>(buf, pos);
  struct Entry {
    std::string name;
    std::uint64_t offset, count;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(buf, pos);
    if (pos + len > buf.size()) throw ParseError("checkpoint truncated in tensor name", pos);
    Entry e{std::string(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + len)), 0, 0};
    pos += len;
    e.offset = detail::get_le<std::uint64_t>(buf, pos);
    e.count = detail::get_le<std::uint64_t>(buf, pos);
    entries.push_back(std::move(e));
  }
  const std::size_t payload = pos;
  TensorMap out;
  for (const auto& e : entries) {
    std::size_t p = payload + static_cast<std::size_t>(e.offset) * 8;
    if (p + static_cast<std::size_t>(e.count) * 8 > buf.size()) throw ParseError("checkpoint payload truncated for '" + e.name + "'", p);
    std::vector<double> v(static_cast<std::size_t>(e.count));
    for (double& x : v) x = std::bit_cast<double>(detail::get_le<std::uint64_t>(buf, p));
    if (!out.emplace(e.name, std::move(v)).second) throw ParseError("duplicate tensor '" + e.name + "'", payload);
  }
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline TensorMap read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

namespace detail {

/// Visits every stored tensor of a network as (name, vector&).
template <typename Net, typename F>
void for_each_tensor(Net& net, F&& f) {
  auto layer = [&](auto& p) {
    f(p.name + ".weight", p.weights);
    if (!p.bias.empty()) f(p.name + ".bias", p.bias);
  };
  auto bn = [&](auto& b) {
    f(b.name + ".gamma", b.gamma);
    f(b.name + ".beta", b.beta);
    f(b.name + ".running_mean", b.running_mean);
    f(b.name + ".running_var", b.running_var);
  };
  layer(net.stem);
  bn(net.stem_bn);
  for (auto& row : net.blocks)
    for (auto& b : row) {
      for (auto& p : b.layers) layer(p);
      bn(b.indicator);
    }
  for (auto& u : net.layer_indicators)
    if (u) bn(*u);
  layer(net.head);
}

}  // namespace detail

inline TensorMap collect_tensors(const Supernet& net) {
  TensorMap out;
  detail::for_each_tensor(net, [&](const std::string& name, const std::vector<double>& v) {
    if (!out.emplace(name, v).second) throw ConfigError("duplicate tensor name '" + name + "'");
  });
  return out;
}

/// Overwrites every tensor of `net` from `tensors`; names and lengths must match exactly.
inline void restore_tensors(Supernet& net, const TensorMap& tensors) {
  std::size_t used = 0;
  detail::for_each_tensor(net, [&](const std::string& name, std::vector<double>& v) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    if (it->second.size() != v.size()) {
      throw DimensionError("tensor '" + name + "' has " + std::to_string(it->second.size()) + " values, expected " +
                           std::to_string(v.size()));
    }
    v = it->second;
    ++used;
  });
  if (used != tensors.size()) throw ConfigError("checkpoint holds tensors the network does not have");
}

}  // namespace isonas
