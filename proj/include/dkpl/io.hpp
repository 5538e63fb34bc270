#ifndef DKPL_IO_HPP
#define DKPL_IO_HPP

// Raw little-endian array files, JSON headers, and 8-bit grayscale PNG
// previews.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "errors.hpp"

namespace dkpl::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "raw array I/O assumes a little-endian host");

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw FormatError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw Error("write failed for " + p.string());
}

inline void write_text(const fs::path& p, const std::string& s) { write_bytes(p, s.data(), s.size()); }

inline nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_text(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

template <typename T>
std::vector<T> read_raw(const fs::path& p, std::size_t expected, const std::string& array_id) {
    const std::string bytes = read_text(p);
    if (bytes.size() != expected * sizeof(T))
        throw FormatError("array '" + array_id + "' (" + p.filename().string() + ") holds " +
                          std::to_string(bytes.size()) + " bytes, header implies " +
                          std::to_string(expected * sizeof(T)));
    std::vector<T> out(expected);
    if (expected) std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

inline void write_f32(const fs::path& p, const std::vector<double>& values) {
    std::vector<float> f(values.begin(), values.end());
    write_bytes(p, f.data(), f.size() * sizeof(float));
}

inline void write_f64(const fs::path& p, const std::vector<double>& values) {
    write_bytes(p, values.data(), values.size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// Base64 and PNG

inline std::string base64_encode(const std::string& in) {
    static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const auto n = (std::uint32_t(std::uint8_t(in[i])) << 16) | (std::uint32_t(std::uint8_t(in[i + 1])) << 8) |
                       std::uint8_t(in[i + 2]);
        out += tbl[(n >> 18) & 63];
        out += tbl[(n >> 12) & 63];
        out += tbl[(n >> 6) & 63];
        out += tbl[n & 63];
    }
    if (i < in.size()) {
        std::uint32_t n = std::uint32_t(std::uint8_t(in[i])) << 16;
        if (i + 1 < in.size()) n |= std::uint32_t(std::uint8_t(in[i + 1])) << 8;
        out += tbl[(n >> 18) & 63];
        out += tbl[(n >> 12) & 63];
        out += i + 1 < in.size() ? tbl[(n >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int sh = 24; sh >= 0; sh -= 8) s += static_cast<char>((v >> sh) & 0xff);
}

inline void put_chunk(std::string& png, const char* type, const std::string& data) {
    put_u32(png, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    png += body;
    put_u32(png, static_cast<std::uint32_t>(
                     crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

} // namespace detail

/// 8-bit grayscale PNG of a row-major height x width buffer.
inline std::string encode_png_gray(const std::vector<std::uint8_t>& pixels, int height, int width) {
    if (pixels.size() != static_cast<std::size_t>(height) * width) throw InputError("PNG buffer size mismatch");
    std::string raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int r = 0; r < height; ++r) {
        raw += '\0';
        raw.append(reinterpret_cast<const char*>(pixels.data()) + static_cast<std::size_t>(r) * width,
                   static_cast<std::size_t>(width));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zlen, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw Error("zlib compression failed");
    z.resize(zlen);

    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::put_u32(ihdr, static_cast<std::uint32_t>(width));
    detail::put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5); // 8-bit, grayscale, deflate, no filter, no interlace
    detail::put_chunk(png, "IHDR", ihdr);
    detail::put_chunk(png, "IDAT", z);
    detail::put_chunk(png, "IEND", "");
    return png;
}

/// Min-max scale a row-major map to 8 bits (constant or non-finite -> mid-gray).
inline std::vector<std::uint8_t> to_gray8(const std::vector<double>& values) {
    double lo = INFINITY, hi = -INFINITY;
    for (double v : values)
        if (std::isfinite(v)) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    std::vector<std::uint8_t> out(values.size(), 128);
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (std::isfinite(values[i]))
            out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - lo) / (hi - lo)));
    return out;
}

inline void write_png_preview(const fs::path& p, const std::vector<double>& values, int height, int width) {
    write_text(p, encode_png_gray(to_gray8(values), height, width));
}

} // namespace dkpl::io

#endif
