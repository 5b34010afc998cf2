#pragma once

// Binary archive of named float tensors plus a JSON header.
//
//   "MILESCKP" | u32 version | header json (u32 length + bytes) |
//   u32 entry count | per entry: name, u32 rank, u32 dims..., f32 data
//
// All integers and floats are little-endian, so a round trip is bit-exact.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

#include "miles/binio.hpp"
#include "miles/errors.hpp"
#include "miles/params.hpp"
#include "miles/tensor.hpp"

namespace miles {

inline constexpr char kArchiveMagic[8] = {'M', 'I', 'L', 'E', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Tensor<float>> entries;

  bool contains(const std::string& name) const { return entries.count(name) != 0; }
  const Tensor<float>& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw StateError("checkpoint has no entry '" + name + "'");
    return it->second;
  }
};

inline void write_archive(std::ostream& os, const Archive& a) {
  os.write(kArchiveMagic, sizeof(kArchiveMagic));
  binio::put_u32(os, kArchiveVersion);
  binio::put_bytes(os, a.header.dump());
  binio::put_u32(os, static_cast<std::uint32_t>(a.entries.size()));
  for (const auto& [name, t] : a.entries) {
    binio::put_bytes(os, name);
    binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) binio::put_u32(os, static_cast<std::uint32_t>(d));
    binio::put_f32s(os, t.raw(), t.size());
  }
}

inline Archive read_archive(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kArchiveMagic)) throw IoError("not a checkpoint archive (bad magic)");
  const std::uint32_t version = binio::get_u32(is);
  if (version != kArchiveVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Archive a;
  try {
    a.header = nlohmann::json::parse(binio::get_bytes(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::uint32_t n = binio::get_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = binio::get_bytes(is, 4096);
    const std::uint32_t rank = binio::get_u32(is);
    if (rank == 0 || rank > 8) throw IoError("entry '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = binio::get_u32(is);
    Tensor<float> t(shape);
    binio::get_f32s(is, t.raw(), t.size());
    if (!a.entries.emplace(std::move(name), std::move(t)).second) throw IoError("duplicate checkpoint entry");
  }
  return a;
}

/// Writes to a sibling temp file and renames, so a crash never leaves a
/// truncated archive under the final name.
inline void save_archive(const std::filesystem::path& path, const Archive& a) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    write_archive(os, a);
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Archive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_archive(is);
}

inline void put_store(Archive& a, const std::string& prefix, const ParamStore<float>& ps) {
  for (const auto& [name, p] : ps) a.entries[prefix + name] = p.value;
}

/// Every entry under `prefix`, with the prefix stripped.
inline ParamStore<float> get_store(const Archive& a, const std::string& prefix) {
  ParamStore<float> ps;
  for (auto it = a.entries.lower_bound(prefix); it != a.entries.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    ps.add(it->first.substr(prefix.size()), it->second);
  }
  return ps;
}

inline void put_tensors(Archive& a, const std::string& prefix, const std::map<std::string, Tensor<float>>& m) {
  for (const auto& [name, t] : m) a.entries[prefix + name] = t;
}

inline std::map<std::string, Tensor<float>> get_tensors(const Archive& a, const std::string& prefix) {
  std::map<std::string, Tensor<float>> m;
  for (auto it = a.entries.lower_bound(prefix); it != a.entries.end() && it->first.rfind(prefix, 0) == 0; ++it) {
    m.emplace(it->first.substr(prefix.size()), it->second);
  }
  return m;
}

}  // namespace miles
