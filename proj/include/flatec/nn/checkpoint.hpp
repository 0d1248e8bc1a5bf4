#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flatec/error.hpp"
#include "flatec/nn/autograd.hpp"

namespace flatec::nn {

inline constexpr const char* kCheckpointMagic = "FLTC-CKPT-1";

/// Checkpoint layout:
///
///   FLTC-CKPT-1\n
///   config <model config line>\n
///   config_hash <16 hex digits>\n
///   params <count>\n
///   <id> <shape, e.g. 3x3x8x8> <byte offset> <element count>\n   (one per parameter)
///   data\n
///   <little-endian float32 arrays, offsets relative to the byte after "data\n">
struct Checkpoint {
  std::string config;
  std::uint64_t config_hash = 0;
  std::vector<std::pair<std::string, RealField<float>>> params;
};

namespace detail {

inline void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline Shape parse_shape(const std::string& s) {
  Shape shape;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) shape.push_back(std::stoi(part));
  return shape;
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const std::string& config, std::uint64_t config_hash, const ParameterStore<T>& store) {
  std::ostringstream head;
  head << kCheckpointMagic << '\n'
       << "config " << config << '\n'
       << "config_hash " << std::hex << std::setw(16) << std::setfill('0') << config_hash << std::dec << '\n'
       << "params " << store.all().size() << '\n';
  std::string data;
  for (const auto& p : store.all()) {
    head << p.id << ' ' << shape_string(p.var->value.shape) << ' ' << data.size() << ' ' << p.var->value.size()
         << '\n';
    for (T v : p.var->value.values) detail::put_f32(data, static_cast<float>(v));
  }
  head << "data\n";
  return head.str() + data;
}

template <class T>
void save_checkpoint(const std::string& path, const std::string& config, std::uint64_t config_hash,
                     const ParameterStore<T>& store) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ModelError("cannot write checkpoint '" + path + "'");
  const auto bytes = serialize_checkpoint(config, config_hash, store);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  auto line = [&]() {
    const auto end = bytes.find('\n', pos);
    if (end == std::string::npos) throw ModelError("checkpoint: truncated manifest at offset " + std::to_string(pos));
    std::string l = bytes.substr(pos, end - pos);
    pos = end + 1;
    return l;
  };
  if (line() != kCheckpointMagic) throw ModelError("checkpoint: bad magic (expected FLTC-CKPT-1)");
  auto l = line();
  if (l.rfind("config ", 0) != 0) throw ModelError("checkpoint: missing config line");
  ck.config = l.substr(7);
  l = line();
  if (l.rfind("config_hash ", 0) != 0) throw ModelError("checkpoint: missing config_hash line");
  ck.config_hash = std::stoull(l.substr(12), nullptr, 16);
  l = line();
  if (l.rfind("params ", 0) != 0) throw ModelError("checkpoint: missing params line");
  const auto count = std::stoull(l.substr(7));
  struct Entry {
    std::string id;
    Shape shape;
    std::size_t offset, n;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ss(line());
    Entry e;
    std::string shape;
    if (!(ss >> e.id >> shape >> e.offset >> e.n)) throw ModelError("checkpoint: malformed parameter line");
    e.shape = detail::parse_shape(shape);
    if (shape_product(e.shape) != e.n) throw ModelError("checkpoint: parameter '" + e.id + "' count/shape mismatch");
    entries.push_back(std::move(e));
  }
  if (line() != "data") throw ModelError("checkpoint: missing data marker");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  const std::size_t avail = bytes.size() - pos;
  for (const auto& e : entries) {
    if (e.offset + 4 * e.n > avail)
      throw ModelError("checkpoint: parameter '" + e.id + "' truncated at offset " + std::to_string(pos + e.offset));
    RealField<float> f(e.shape);
    for (std::size_t i = 0; i < e.n; ++i) f[i] = detail::get_f32(base + e.offset + 4 * i);
    ck.params.emplace_back(e.id, std::move(f));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

/// Copies checkpoint values into an identically structured store.
template <class T>
void apply_checkpoint(const Checkpoint& ck, ParameterStore<T>& store) {
  if (ck.params.size() != store.all().size())
    throw ModelError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, model expects " +
                     std::to_string(store.all().size()));
  for (const auto& [id, field] : ck.params) {
    if (!store.contains(id)) throw ModelError("checkpoint parameter '" + id + "' unknown to the model");
    auto var = store.get(id);
    if (var->value.shape != field.shape)
      throw ModelError("checkpoint parameter '" + id + "' has shape " + shape_string(field.shape) + ", model expects " +
                       shape_string(var->value.shape));
    for (std::size_t i = 0; i < field.size(); ++i) var->value[i] = static_cast<T>(field[i]);
  }
}

}  // namespace flatec::nn
