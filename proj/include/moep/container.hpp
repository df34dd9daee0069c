// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Framed binary container shared by stats and mask files:
//
//   magic[8] | version u32 | manifest_len u64 | manifest (JSON text)
//   | payload_len u64 | payload | crc32 u32
//
// All integers little-endian. The CRC covers every preceding byte.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <json.hpp>

#include "moep/error.hpp"

namespace moep {

namespace bytes {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::string_view in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::string_view in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

inline double get_f64(std::string_view in, std::size_t off) { return std::bit_cast<double>(get_u64(in, off)); }

inline std::uint32_t crc32(std::string_view data) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - off, 1u << 30));
    c = ::crc32(c, reinterpret_cast<const Bytef*>(data.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace bytes

inline std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to `<path>.tmp` and renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write '" + tmp.string() + "'");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw StorageError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StorageError("cannot rename '" + tmp.string() + "': " + ec.message());
}

using Magic = std::array<char, 8>;

inline constexpr Magic kStatsMagic = {'M', 'O', 'E', 'P', 'S', 'T', 'A', 'T'};
inline constexpr Magic kMaskMagic = {'M', 'O', 'E', 'P', 'M', 'A', 'S', 'K'};

struct Container {
  nlohmann::ordered_json manifest;
  std::string payload;
};

inline std::string encode_container(const Magic& magic, std::uint32_t version, const Container& c) {
  const std::string manifest = c.manifest.dump();
  std::string out(magic.begin(), magic.end());
  bytes::put_u32(out, version);
  bytes::put_u64(out, manifest.size());
  out += manifest;
  bytes::put_u64(out, c.payload.size());
  out += c.payload;
  bytes::put_u32(out, bytes::crc32(out));
  return out;
}

inline Container decode_container(std::string_view raw, const Magic& magic, std::uint32_t version,
                                  const std::string& what = "container") {
  constexpr std::size_t kHeader = 8 + 4 + 8;
  if (raw.size() < kHeader + 8 + 4) throw FormatError(what + " is truncated");
  if (std::memcmp(raw.data(), magic.data(), magic.size()) != 0) {
    throw FormatError(what + " has wrong magic (expected '" + std::string(magic.begin(), magic.end()) + "')");
  }
  const std::uint32_t ver = bytes::get_u32(raw, 8);
  const std::uint64_t mlen = bytes::get_u64(raw, 12);
  if (mlen > raw.size() - kHeader - 12) throw FormatError(what + " is truncated (manifest)");
  const std::uint64_t plen = bytes::get_u64(raw, kHeader + mlen);
  if (plen != raw.size() - kHeader - mlen - 12) throw FormatError(what + " is truncated (payload)");
  const std::size_t body = raw.size() - 4;
  if (bytes::crc32(raw.substr(0, body)) != bytes::get_u32(raw, body)) {
    throw ChecksumError(what + " failed CRC32 verification");
  }
  if (ver != version) {
    throw VersionError(what + " has format version " + std::to_string(ver) + ", expected " +
                       std::to_string(version));
  }
  Container c;
  try {
    c.manifest = nlohmann::ordered_json::parse(raw.substr(kHeader, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + " manifest is not valid JSON: " + e.what());
  }
  c.payload = std::string(raw.substr(kHeader + mlen + 8, plen));
  return c;
}

}  // namespace moep
