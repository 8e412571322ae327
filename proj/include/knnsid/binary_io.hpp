#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "knnsid/errors.hpp"

namespace knnsid::io {

// All artifact formats are little-endian. Values are assembled byte by byte
// so the code is independent of host endianness.

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    os.write(b.data(), 4);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline void write_f32s(std::ostream& os, std::span<const float> values) {
    for (float v : values) write_f32(os, v);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

/// Reads from a stream and reports truncation with the caller-supplied
/// context ("layer 3", "block 12", ...).
class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    std::uint8_t u8(std::string_view what) {
        char c = 0;
        if (!is_.get(c)) truncated(what);
        return static_cast<std::uint8_t>(c);
    }

    std::uint32_t u32(std::string_view what) {
        std::array<unsigned char, 4> b{};
        if (!is_.read(reinterpret_cast<char*>(b.data()), 4)) truncated(what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    float f32(std::string_view what) {
        std::uint32_t bits = u32(what);
        float v = 0.0f;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    void f32s(std::span<float> out, std::string_view what) {
        for (float& v : out) v = f32(what);
    }

    void expect_magic(std::string_view magic, std::string_view file_kind) {
        std::string got(magic.size(), '\0');
        if (!is_.read(got.data(), static_cast<std::streamsize>(got.size())))
            truncated(std::string(file_kind) + " header");
        if (got != magic)
            throw MagicMismatchError(std::string(file_kind) + ": bad magic, expected '" +
                                     std::string(magic) + "'");
    }

    void expect_version(std::uint32_t supported, std::string_view file_kind) {
        const std::uint32_t v = u32(std::string(file_kind) + " header");
        if (v != supported)
            throw VersionMismatchError(std::string(file_kind) + ": format version " +
                                       std::to_string(v) + " not supported (expected " +
                                       std::to_string(supported) + ")");
    }

private:
    [[noreturn]] static void truncated(std::string_view what) {
        throw TruncatedFileError("file truncated while reading " + std::string(what));
    }

    std::istream& is_;
};

} // namespace knnsid::io
