#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "finedeep/errors.hpp"

namespace finedeep::detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of file reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace finedeep::detail
