#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace tsgf {

/// FNV-1a over raw bytes. Stable across platforms; used for provenance hashes.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ull);

/// Hex rendering of a 64-bit hash.
std::string hash_hex(std::uint64_t h);

/// Hash of a file's full contents. Throws if the file cannot be read.
std::uint64_t hash_file(const std::filesystem::path& p);

/// Derives a stage-specific seed from the global seed. Deterministic; distinct
/// stage names give independent streams.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage);

/// The project-wide RNG. Every stochastic routine takes an explicit seed or
/// an Rng so runs replay bit-identically.
using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, std::string_view content);

/// Joins doubles with commas using round-trippable formatting (%.17g).
std::string csv_row(const std::vector<double>& values);
std::string format_double(double v);

}  // namespace tsgf
