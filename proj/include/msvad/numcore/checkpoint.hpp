#pragma once

#include "msvad/numcore/tape.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

/// Flat parameter container: ordered (path string -> matrix) entries plus a
/// free-form JSON metadata blob and a format version. Values round-trip
/// bit-exactly (raw IEEE doubles, native little-endian layout).
struct FlatContainer {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::string meta_json;
  std::vector<std::pair<std::string, Matrix>> entries;

  void add(const std::string& name, Matrix m) {
    entries.emplace_back(name, std::move(m));
  }

  const Matrix* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.first == name) return &e.second;
    return nullptr;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint save: cannot open " + path);
    auto w32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    f.write("MSVD", 4);
    w32(version);
    w64(meta_json.size());
    f.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    w64(entries.size());
    for (const auto& [name, m] : entries) {
      w64(name.size());
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      std::int32_t r = m.rows, c = m.cols;
      f.write(reinterpret_cast<const char*>(&r), 4);
      f.write(reinterpret_cast<const char*>(&c), 4);
      f.write(reinterpret_cast<const char*>(m.d.data()),
              static_cast<std::streamsize>(m.d.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint save: write failed " + path);
  }

  static FlatContainer load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MSVD", 4) != 0)
      throw std::runtime_error("checkpoint load: bad magic in " + path);
    FlatContainer out;
    auto r32 = [&]() {
      std::uint32_t v = 0;
      f.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    auto r64 = [&]() {
      std::uint64_t v = 0;
      f.read(reinterpret_cast<char*>(&v), 8);
      return v;
    };
    out.version = r32();
    if (out.version != kVersion)
      throw std::runtime_error("checkpoint load: unsupported version");
    const auto meta_len = r64();
    out.meta_json.resize(meta_len);
    f.read(out.meta_json.data(), static_cast<std::streamsize>(meta_len));
    const auto n = r64();
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto name_len = r64();
      std::string name(name_len, '\0');
      f.read(name.data(), static_cast<std::streamsize>(name_len));
      std::int32_t r = 0, c = 0;
      f.read(reinterpret_cast<char*>(&r), 4);
      f.read(reinterpret_cast<char*>(&c), 4);
      if (!f || r < 0 || c < 0) throw std::runtime_error("checkpoint load: corrupt entry");
      Matrix m(r, c);
      f.read(reinterpret_cast<char*>(m.d.data()),
             static_cast<std::streamsize>(m.d.size() * sizeof(double)));
      out.entries.emplace_back(std::move(name), std::move(m));
    }
    if (!f) throw std::runtime_error("checkpoint load: truncated file " + path);
    return out;
  }
};

inline void pack_params(FlatContainer& c, const ParamStore& params,
                        const std::string& prefix = "") {
  for (std::size_t i = 0; i < params.size(); ++i)
    c.add(prefix + params[i].name, params[i].value);
}

/// Restores values into an existing store; every store param must be present
/// with a matching shape.
inline void unpack_params(const FlatContainer& c, ParamStore& params,
                          const std::string& prefix = "") {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    const Matrix* m = c.find(prefix + p.name);
    if (!m) throw std::runtime_error("checkpoint: missing param " + p.name);
    if (m->rows != p.value.rows || m->cols != p.value.cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value = *m;
  }
}

}  // namespace msvad
