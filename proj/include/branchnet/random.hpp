#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace branchnet {

/// Engine seeded from a tuple of integers. Equal keys give equal streams;
/// keys differing in any component give unrelated streams.
inline std::mt19937_64 keyed_engine(std::initializer_list<std::uint64_t> key) {
  std::vector<std::uint32_t> words;
  words.reserve(key.size() * 2 + 1);
  words.push_back(static_cast<std::uint32_t>(key.size()));
  for (auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace branchnet
