// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Byte-level tokenization and corpus windowing.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "moep/error.hpp"
#include "moep/model.hpp"
#include "moep/numerics.hpp"

namespace moep {

inline TokenSeq tokenize(std::string_view text) {
  TokenSeq out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read corpus '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline TokenSeq load_corpus(const std::filesystem::path& path) { return tokenize(read_text_file(path)); }

/// Consecutive non-overlapping windows of `len` tokens; the tail remainder is dropped.
inline std::vector<TokenSeq> contiguous_windows(const TokenSeq& corpus, std::size_t len) {
  std::vector<TokenSeq> out;
  for (std::size_t off = 0; off + len <= corpus.size(); off += len) {
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                     corpus.begin() + static_cast<std::ptrdiff_t>(off + len));
  }
  return out;
}

/// `count` windows of `len` tokens at uniformly drawn offsets.
inline std::vector<TokenSeq> random_windows(const TokenSeq& corpus, std::size_t count, std::size_t len,
                                            SeededRng& rng) {
  if (corpus.size() < len) {
    throw InputError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one window of " +
                     std::to_string(len));
  }
  std::vector<TokenSeq> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = rng.uniform_int(corpus.size() - len + 1);
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                     corpus.begin() + static_cast<std::ptrdiff_t>(off + len));
  }
  return out;
}

/// Deterministic English-like text from a small template grammar. Used as a
/// stand-in pretraining corpus for desk-scale experiments.
inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array<std::string_view, 24> kNouns = {
      "cat",    "dog",   "river", "city",   "engine", "garden", "teacher", "model",
      "window", "storm", "bird",  "market", "forest", "child",  "letter",  "train",
      "farmer", "road",  "cloud", "mirror", "doctor", "song",   "island",  "lamp"};
  static constexpr std::array<std::string_view, 16> kVerbs = {
      "sees",   "finds",  "follows", "builds", "carries", "watches", "paints",  "opens",
      "hears",  "moves",  "counts",  "helps",  "reads",   "keeps",   "remembers", "leaves"};
  static constexpr std::array<std::string_view, 16> kAdjs = {
      "small", "quiet", "bright", "old",  "green", "heavy", "quick", "distant",
      "warm",  "cold",  "strange", "tall", "dark",  "gentle", "broken", "golden"};
  static constexpr std::array<std::string_view, 8> kAdverbs = {
      "slowly", "often", "again", "quietly", "never", "always", "today", "once"};
  static constexpr std::array<std::string_view, 8> kPreps = {
      "near", "under", "behind", "across", "beside", "inside", "above", "past"};
  static constexpr std::array<std::string_view, 6> kNames = {"anna", "boris", "chen", "dara", "emil", "fatima"};

  SeededRng rng(seed);
  auto pick = [&](const auto& list) { return list[rng.uniform_int(list.size())]; };
  auto noun_phrase = [&](std::string& s) {
    if (rng.uniform() < 0.15) {
      s += pick(kNames);
      return;
    }
    s += rng.uniform() < 0.7 ? "the " : "a ";
    if (rng.uniform() < 0.6) {
      s += pick(kAdjs);
      s += ' ';
    }
    s += pick(kNouns);
  };

  std::string text;
  text.reserve(bytes + 128);
  bool start = true;
  while (text.size() < bytes) {
    std::string s;
    noun_phrase(s);
    s += ' ';
    if (rng.uniform() < 0.3) {
      s += pick(kAdverbs);
      s += ' ';
    }
    s += pick(kVerbs);
    s += ' ';
    noun_phrase(s);
    if (rng.uniform() < 0.4) {
      s += ' ';
      s += pick(kPreps);
      s += ' ';
      noun_phrase(s);
    }
    if (rng.uniform() < 0.1) {
      s += " and ";
      s += std::to_string(rng.uniform_int(100));
      s += ' ';
      s += pick(kNouns);
      s += 's';
    }
    if (start) s[0] = static_cast<char>(s[0] - 'a' + 'A');
    s += rng.uniform() < 0.85 ? ". " : "? ";
    start = true;
    if (rng.uniform() < 0.08) s += '\n';
    text += s;
  }
  text.resize(bytes);
  return text;
}

}  // namespace moep
