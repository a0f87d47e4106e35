#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "px3d/grid.hpp"

namespace px3d::io {

namespace fs = std::filesystem;

/// RVOL layout (all little-endian), header is exactly 64 bytes:
///   [0,8)   magic "RVOL1\0\0\0"
///   [8,12)  uint32 header size (64)
///   [12,24) uint32 dims, axis 0 first
///   [24,48) float64 spacing_mm per axis
///   [48,52) dtype tag "F32L"
///   [52,56) axis order tag "DHW\0" (axis 0 slowest)
///   [56,64) float32 min, float32 max of the payload
/// followed by dims[0]*dims[1]*dims[2] float32 values in C order.
inline constexpr std::size_t kRvolHeaderBytes = 64;

std::string encode_volume(const Volume& v);
Volume decode_volume(std::string_view bytes, const std::string& origin = "<memory>");

void write_volume(const Volume& v, const fs::path& path);
Volume read_volume(const fs::path& path);

/// 16-bit grayscale PNG, value = round(clamp(v,0,1) * 65535).
void write_png16(const Image& img, const fs::path& path);
Image read_png16(const fs::path& path);

/// Writes to a temporary sibling and renames it into place.
void atomic_write(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed = 14695981039346656037ULL);
std::uint64_t fnv1a64(std::string_view s);
std::string hex64(std::uint64_t h);

}  // namespace px3d::io
