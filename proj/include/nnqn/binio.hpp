#pragma once

// Minimal binary container shared by dataset and weight files:
//   4-byte magic | u32 version | u64 header bytes | JSON header
//   | u64 payload count | payload as little-endian float64

#include "nnqn/core.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace nnqn {

static_assert(std::endian::native == std::endian::little, "binary files assume a little-endian host");

struct BinaryBlob {
  nlohmann::json header;
  std::vector<double> payload;
};

inline void write_blob(const std::string& path, const char (&magic)[5], std::uint32_t version,
                       const nlohmann::json& header, const std::vector<double>& payload) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  const std::string h = header.dump();
  const std::uint64_t hn = h.size(), pn = payload.size();
  f.write(magic, 4);
  f.write(reinterpret_cast<const char*>(&version), sizeof version);
  f.write(reinterpret_cast<const char*>(&hn), sizeof hn);
  f.write(h.data(), static_cast<std::streamsize>(hn));
  f.write(reinterpret_cast<const char*>(&pn), sizeof pn);
  f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(pn * sizeof(double)));
  if (!f) throw ConfigError("write failed: " + path);
}

inline BinaryBlob read_blob(const std::string& path, const char (&magic)[5], std::uint32_t version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  auto fail = [&](const std::string& why) { return FormatError(path + ": " + why); };
  char m[4];
  std::uint32_t v = 0;
  std::uint64_t hn = 0, pn = 0;
  if (!f.read(m, 4) || std::memcmp(m, magic, 4) != 0) throw fail(std::string("not a ") + magic + " file");
  if (!f.read(reinterpret_cast<char*>(&v), sizeof v)) throw fail("truncated version");
  if (v != version) throw fail("unsupported version " + std::to_string(v));
  if (!f.read(reinterpret_cast<char*>(&hn), sizeof hn) || hn > (1u << 30)) throw fail("truncated header length");
  std::string h(hn, '\0');
  if (!f.read(h.data(), static_cast<std::streamsize>(hn))) throw fail("truncated header");
  BinaryBlob out;
  try {
    out.header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  if (!f.read(reinterpret_cast<char*>(&pn), sizeof pn)) throw fail("truncated payload length");
  if (pn > (std::uint64_t{1} << 34)) throw fail("implausible payload length");
  out.payload.resize(pn);
  if (!f.read(reinterpret_cast<char*>(out.payload.data()), static_cast<std::streamsize>(pn * sizeof(double))))
    throw fail("truncated payload");
  if (f.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes");
  return out;
}

}  // namespace nnqn
