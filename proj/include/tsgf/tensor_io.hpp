#pragma once

#include <filesystem>
#include <iosfwd>

#include "tsgf/tensor.hpp"

namespace tsgf {

/// Tensor file format: magic "TSGF", version u32, rank u32, extents u32[rank],
/// dtype tag u32 (1 = float64), then raw little-endian element bytes.
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& context);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace tsgf
