// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint directory layout:
//   manifest.json  format version, model config, tensor index, file CRCs
//   tensors.bin    concatenated little-endian float64 parameters
//   masks.bin      optional; MOEPMASK container, bitmaps packed LSB-first,
//                  8 consecutive row-major entries per byte
// Binary files are renamed into place before the manifest, which is written last.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "moep/container.hpp"
#include "moep/error.hpp"
#include "moep/mask.hpp"
#include "moep/model.hpp"

namespace moep {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kMaskVersion = 1;

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},     {"n_experts", c.n_experts}, {"top_k", c.top_k},
          {"d_ff", c.d_ff},             {"seq_len", c.seq_len},     {"seed", c.seed},
          {"upcycle", c.upcycle}};
}

/// Fields absent from `j` keep the values already in `c`.
inline void merge_model_config(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_experts = j.value("n_experts", c.n_experts);
  c.top_k = j.value("top_k", c.top_k);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.seed = j.value("seed", c.seed);
  c.upcycle = j.value("upcycle", c.upcycle);
}

/// Zero-filled parameters with the shapes implied by `cfg`.
inline MoEModel allocate_model(const ModelConfig& cfg) {
  MoEModel m = init_model(cfg);
  for_each_parameter(m.params, [](const std::string&, Matrix& w) { w.fill(0.0); });
  return m;
}

inline std::string encode_masks(const MaskSet& masks) {
  Container c;
  c.manifest["format"] = "moep-masks";
  auto entries = nlohmann::ordered_json::array();
  for (const auto& [name, m] : masks) {
    const std::size_t len = (m.bits.size() + 7) / 8;
    entries.push_back({{"name", name}, {"shape", {m.rows, m.cols}}, {"offset", c.payload.size()}, {"length", len}});
    std::string packed(len, '\0');
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) packed[i / 8] = static_cast<char>(packed[i / 8] | (1u << (i % 8)));
    c.payload += packed;
  }
  c.manifest["entries"] = std::move(entries);
  return encode_container(kMaskMagic, kMaskVersion, c);
}

inline MaskSet decode_masks(std::string_view raw) {
  const Container c = decode_container(raw, kMaskMagic, kMaskVersion, "mask file");
  MaskSet out;
  try {
    for (const auto& e : c.manifest.at("entries")) {
      SparsityMask m(e.at("name").get<std::string>(), e.at("shape").at(0), e.at("shape").at(1));
      const std::size_t off = e.at("offset"), len = e.at("length");
      if (len != (m.bits.size() + 7) / 8 || off > c.payload.size() || len > c.payload.size() - off) {
        throw FormatError("mask entry '" + m.target + "' has inconsistent extent");
      }
      for (std::size_t i = 0; i < m.bits.size(); ++i)
        m.bits[i] = (static_cast<unsigned char>(c.payload[off + i / 8]) >> (i % 8)) & 1u;
      out.emplace(m.target, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed mask manifest: ") + e.what());
  }
  return out;
}

inline void save_masks(const MaskSet& masks, const std::filesystem::path& path) {
  write_file_atomic(path, encode_masks(masks));
}

inline MaskSet load_masks(const std::filesystem::path& path) { return decode_masks(read_binary_file(path)); }

/// `extra` is echoed into the manifest (command, run configuration).
inline void save_checkpoint(const MoEModel& m, const MaskSet* masks, const std::filesystem::path& dir,
                            const nlohmann::ordered_json& extra = nullptr) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw StorageError("cannot create checkpoint directory '" + dir.string() + "'");
  }

  nlohmann::ordered_json man;
  man["format"] = "moep-checkpoint";
  man["format_version"] = kCheckpointVersion;
  man["config"] = to_json(m.config);
  std::string blob;
  blob.reserve(m.parameter_count() * 8);
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  for_each_parameter(m.params, [&](const std::string& name, const Matrix& w) {
    index[name] = {{"shape", {w.rows(), w.cols()}}, {"offset", blob.size()}, {"length", w.size() * 8}};
    for (double v : w.values()) bytes::put_f64(blob, v);
  });
  man["tensors"] = std::move(index);
  man["files"]["tensors.bin"] = {{"bytes", blob.size()}, {"crc32", bytes::crc32(blob)}};
  write_file_atomic(dir / "tensors.bin", blob);

  if (masks) {
    const std::string mb = encode_masks(*masks);
    man["files"]["masks.bin"] = {{"bytes", mb.size()}, {"crc32", bytes::crc32(mb)}};
    write_file_atomic(dir / "masks.bin", mb);
  } else {
    std::filesystem::remove(dir / "masks.bin", ec);
  }
  if (!extra.is_null()) man["extra"] = extra;
  write_file_atomic(dir / "manifest.json", man.dump(2) + "\n");
}

struct LoadedCheckpoint {
  MoEModel model;
  std::optional<MaskSet> masks;
  nlohmann::ordered_json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto man_path = dir / "manifest.json";
  if (!std::filesystem::exists(man_path)) throw InputError("no checkpoint manifest at '" + man_path.string() + "'");
  nlohmann::ordered_json man;
  try {
    man = nlohmann::ordered_json::parse(read_binary_file(man_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    if (man.value("format", std::string()) != "moep-checkpoint") throw FormatError("not a moep checkpoint manifest");
    const std::uint32_t ver = man.at("format_version");
    if (ver != kCheckpointVersion) {
      throw VersionError("checkpoint format version " + std::to_string(ver) + " is not supported (expected " +
                         std::to_string(kCheckpointVersion) + ")");
    }
    ModelConfig cfg;
    merge_model_config(man.at("config"), cfg);
    cfg.validate();

    const std::string blob = read_binary_file(dir / "tensors.bin");
    const auto& tf = man.at("files").at("tensors.bin");
    if (blob.size() != tf.at("bytes").get<std::size_t>() || bytes::crc32(blob) != tf.at("crc32").get<std::uint32_t>()) {
      throw ChecksumError("tensors.bin does not match the CRC32 recorded in the manifest");
    }

    out.model = allocate_model(cfg);
    const auto& index = man.at("tensors");
    std::size_t seen = 0;
    for_each_parameter(out.model.params, [&](const std::string& name, Matrix& w) {
      if (!index.contains(name)) throw FormatError("checkpoint is missing parameter '" + name + "'");
      const auto& e = index.at(name);
      const std::size_t rows = e.at("shape").at(0), cols = e.at("shape").at(1);
      const std::size_t off = e.at("offset"), len = e.at("length");
      if (rows != w.rows() || cols != w.cols() || len != w.size() * 8 || off > blob.size() || len > blob.size() - off) {
        throw FormatError("parameter '" + name + "' has inconsistent shape or extent");
      }
      for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = bytes::get_f64(blob, off + 8 * i);
      ++seen;
    });
    if (seen != index.size()) throw FormatError("checkpoint lists parameters unknown to this architecture");

    const auto mask_path = dir / "masks.bin";
    if (std::filesystem::exists(mask_path)) {
      const std::string raw = read_binary_file(mask_path);
      const auto& files = man.at("files");
      if (!files.contains("masks.bin")) throw FormatError("masks.bin is not recorded in the manifest");
      if (bytes::crc32(raw) != files.at("masks.bin").at("crc32").get<std::uint32_t>()) {
        throw ChecksumError("masks.bin does not match the CRC32 recorded in the manifest");
      }
      MaskSet masks = decode_masks(raw);
      for (const auto& [name, mask] : masks) {
        const Matrix* w = out.model.find_parameter(name);
        if (!w) throw FormatError("mask for unknown parameter '" + name + "'");
        if (mask.rows != w->rows() || mask.cols != w->cols()) {
          throw FormatError("mask for '" + name + "' does not match parameter shape");
        }
        for (std::size_t i = 0; i < mask.bits.size(); ++i)
          if (!mask.bits[i] && w->data()[i] != 0.0) {
            throw ConsistencyError("mask for '" + name + "' marks nonzero weight at flat index " + std::to_string(i));
          }
      }
      out.masks = std::move(masks);
    }
    if (man.contains("extra")) out.extra = man["extra"];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return out;
}

}  // namespace moep
