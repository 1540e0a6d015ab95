#include "ttgan/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "ttgan/errors.hpp"

namespace ttgan {

namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::vector<std::uint8_t>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, std::span<const std::uint8_t> bytes) {
    out.insert(out.end(), bytes.begin(), bytes.end());
}

void Reader::require(std::size_t n, const char* what) const {
    if (remaining() < n) {
        throw FormatError(std::string("truncated ") + what + ": expected " + std::to_string(n) +
                              " bytes, found " + std::to_string(remaining()),
                          pos_);
    }
}

std::uint32_t Reader::u32(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

float Reader::f32(const char* what) { return std::bit_cast<float>(u32(what)); }

double Reader::f64(const char* what) {
    require(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
}

std::span<const std::uint8_t> Reader::bytes(std::size_t n, const char* what) {
    require(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
}

void Reader::expect_magic(const char (&magic)[5]) {
    require(4, "magic");
    if (std::memcmp(bytes_.data() + pos_, magic, 4) != 0) {
        throw FormatError(std::string("bad magic, expected \"") + magic + "\"", pos_);
    }
    pos_ += 4;
}

}  // namespace le

std::vector<std::uint8_t> encode_volume(const DenseTensor& volume) {
    std::vector<std::uint8_t> out{'T', 'T', 'V', '1'};
    le::put_u32(out, static_cast<std::uint32_t>(volume.rank()));
    for (auto d : volume.shape()) le::put_u32(out, static_cast<std::uint32_t>(d));
    out.reserve(out.size() + 4 * volume.size());
    for (double v : volume.data()) le::put_f32(out, static_cast<float>(v));
    return out;
}

DenseTensor decode_volume(std::span<const std::uint8_t> bytes) {
    le::Reader r(bytes);
    r.expect_magic("TTV1");
    const auto ndims = r.u32("header");
    if (ndims == 0) throw FormatError("volume has zero modes", r.offset() - 4);
    Shape shape(ndims);
    for (auto& d : shape) {
        d = r.u32("header");
        if (d == 0) throw FormatError("volume has a zero extent", r.offset() - 4);
    }
    const std::size_t count = shape_size(shape);
    const std::size_t payload = 4 * count;
    if (r.remaining() != payload) {
        throw FormatError("payload size mismatch: expected " + std::to_string(payload) +
                              " bytes, found " + std::to_string(r.remaining()),
                          r.offset());
    }
    std::vector<double> data(count);
    for (auto& v : data) v = r.f32("payload");
    return DenseTensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

void save_volume(const std::filesystem::path& path, const DenseTensor& volume) {
    write_file_bytes(path, encode_volume(volume));
}

DenseTensor load_volume(const std::filesystem::path& path) { return decode_volume(read_file_bytes(path)); }

}  // namespace ttgan
