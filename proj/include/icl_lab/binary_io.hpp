#pragma once

// Little-endian primitive readers/writers shared by the .icllib, .emb and
// .ckpt formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icl_lab/errors.hpp"

namespace icl::io {

namespace detail {

template <typename U>
constexpr U byteswap(U v) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    }
    return out;
}

template <typename U>
constexpr U to_little(U v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return byteswap(v);
    }
}

}  // namespace detail

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    const std::uint32_t le = detail::to_little(v);
    os.write(reinterpret_cast<const char*>(&le), sizeof le);
}

inline void write_f32(std::ostream& os, float v) {
    write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f32_span(std::ostream& os, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (float v : values) {
            write_f32(os, v);
        }
    }
}

inline void check_stream(const std::istream& is, std::string_view what) {
    if (!is) {
        throw IoError("truncated or unreadable input while reading " + std::string(what));
    }
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::array<char, 8> buf{};
    is.read(buf.data(), static_cast<std::streamsize>(magic.size()));
    check_stream(is, "magic bytes");
    if (std::string_view(buf.data(), magic.size()) != magic) {
        throw IoError("bad magic bytes, expected \"" + std::string(magic) + "\"");
    }
}

inline std::uint32_t read_u32(std::istream& is, std::string_view what = "u32") {
    std::uint32_t le = 0;
    is.read(reinterpret_cast<char*>(&le), sizeof le);
    check_stream(is, what);
    return detail::to_little(le);
}

inline float read_f32(std::istream& is, std::string_view what = "f32") {
    return std::bit_cast<float>(read_u32(is, what));
}

inline void read_f32_span(std::istream& is, std::span<float> out, std::string_view what) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
        check_stream(is, what);
    } else {
        for (float& v : out) {
            v = read_f32(is, what);
        }
    }
}

}  // namespace icl::io
