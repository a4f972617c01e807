#pragma once

// Single-file checkpoint: magic, version, a JSON header describing the
// architecture, then the named float64 arrays back to back (little endian).
//
//   bytes 0..7    "CFKDCKPT"
//   bytes 8..11   uint32 format version (1)
//   bytes 12..19  uint64 header length N
//   next N bytes  JSON header, must contain "arrays": [{"name","size"}...]
//   remainder     float64 values of every array in header order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cfkd/error.hpp"

namespace cfkd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>& array(const std::string& name) const {
    for (const auto& [n, v] : arrays)
      if (n == name) return v;
    throw ConfigError("checkpoint has no array '" + name + "'");
  }
};

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'K', 'D',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path,
                             const Checkpoint& ck) {
  nlohmann::json header = ck.header;
  header["arrays"] = nlohmann::json::array();
  for (const auto& [name, v] : ck.arrays)
    header["arrays"].push_back({{"name", name}, {"size", v.size()}});
  const std::string h = header.dump();

  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::uint32_t ver = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
  const std::uint64_t n = h.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, v] : ck.arrays)
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw ConfigError("failed writing checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ConfigError(path.string() + " is not a checkpoint file");
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof ver);
  if (ver != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version " +
                      std::to_string(ver));
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  std::string h(n, '\0');
  in.read(h.data(), static_cast<std::streamsize>(n));
  if (!in) throw ConfigError("truncated checkpoint header in " + path.string());

  Checkpoint ck;
  ck.header = nlohmann::json::parse(h);
  for (const auto& a : ck.header.at("arrays")) {
    std::vector<double> v(a.at("size").get<std::size_t>());
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw ConfigError("truncated checkpoint data in " + path.string());
    ck.arrays.emplace_back(a.at("name").get<std::string>(), std::move(v));
  }
  return ck;
}

}  // namespace cfkd
