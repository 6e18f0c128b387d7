#ifndef DOME_IO_HPP
#define DOME_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dome/util.hpp"

namespace dome {

// Little-endian primitives for the OCCG / OCCS / OCCZ / DOMEckpt formats.
// Values are assembled byte-by-byte so the encoding is host-independent.

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename U>
void write_le(std::ostream& os, U v) {
    static_assert(std::is_unsigned_v<U>);
    unsigned char b[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    write_bytes(os, b, sizeof(U));
}

inline void write_u16(std::ostream& os, uint16_t v) { write_le(os, v); }
inline void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<uint32_t>(v)); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<uint64_t>(v)); }

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw FormatError(FormatErrorCode::Truncated, str("while reading ", what));
}

template <typename U>
U read_le(std::istream& is, const char* what) {
    static_assert(std::is_unsigned_v<U>);
    unsigned char b[sizeof(U)];
    read_bytes(is, b, sizeof(U), what);
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
}

inline uint16_t read_u16(std::istream& is, const char* what) { return read_le<uint16_t>(is, what); }
inline uint32_t read_u32(std::istream& is, const char* what) { return read_le<uint32_t>(is, what); }
inline uint64_t read_u64(std::istream& is, const char* what) { return read_le<uint64_t>(is, what); }
inline float read_f32(std::istream& is, const char* what) {
    return std::bit_cast<float>(read_le<uint32_t>(is, what));
}
inline double read_f64(std::istream& is, const char* what) {
    return std::bit_cast<double>(read_le<uint64_t>(is, what));
}

inline void expect_magic(std::istream& is, const char* magic, size_t len,
                         const std::string& what) {
    std::vector<char> buf(len);
    is.read(buf.data(), static_cast<std::streamsize>(len));
    if (static_cast<size_t>(is.gcount()) != len)
        throw FormatError(FormatErrorCode::Truncated, str("magic of ", what));
    if (std::memcmp(buf.data(), magic, len) != 0)
        throw FormatError(FormatErrorCode::BadMagic, str("expected \"", magic, "\" in ", what));
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(FormatErrorCode::OpenFailed, path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(FormatErrorCode::OpenFailed, path);
    return is;
}

}  // namespace dome

#endif  // DOME_IO_HPP
