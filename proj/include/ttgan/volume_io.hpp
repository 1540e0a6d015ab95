#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan {

// "TTV1" volume format: magic, u32 ndims, u32 dims[ndims], f32 payload.
// Everything little-endian, payload row-major.

std::vector<std::uint8_t> encode_volume(const DenseTensor& volume);
DenseTensor decode_volume(std::span<const std::uint8_t> bytes);

void save_volume(const std::filesystem::path& path, const DenseTensor& volume);
DenseTensor load_volume(const std::filesystem::path& path);

// Little-endian helpers shared by the binary formats.
namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_bytes(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> bytes);

/// Bounds-checked cursor; reads past the end raise FormatError with the offset.
class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
    std::uint32_t u32(const char* what);
    float f32(const char* what);
    double f64(const char* what);
    std::span<const std::uint8_t> bytes(std::size_t n, const char* what);
    void expect_magic(const char (&magic)[5]);
    void require(std::size_t n, const char* what) const;
    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ttgan
