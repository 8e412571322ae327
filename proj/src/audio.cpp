#include "knnsid/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "knnsid/binary_io.hpp"
#include "knnsid/errors.hpp"

namespace knnsid::dsp {

namespace {

std::uint16_t read_u16(io::Reader& r, std::string_view what) {
    const std::uint16_t lo = r.u8(what);
    const std::uint16_t hi = r.u8(what);
    return static_cast<std::uint16_t>(lo | (hi << 8));
}

void write_u16(std::ostream& os, std::uint16_t v) {
    io::write_u8(os, static_cast<std::uint8_t>(v & 0xFF));
    io::write_u8(os, static_cast<std::uint8_t>(v >> 8));
}

std::string read_tag(std::istream& is) {
    std::string tag(4, '\0');
    if (!is.read(tag.data(), 4)) return {};
    return tag;
}

} // namespace

AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open WAV file " + path.string());
    io::Reader r(is);
    const std::string name = path.string();

    if (read_tag(is) != "RIFF") throw MagicMismatchError(name + ": not a RIFF file");
    r.u32("RIFF size");
    if (read_tag(is) != "WAVE") throw MagicMismatchError(name + ": not a WAVE file");

    std::uint16_t format = 0;
    std::uint16_t channels = 0;
    std::uint32_t rate = 0;
    std::uint16_t bits = 0;
    bool have_fmt = false;

    for (;;) {
        const std::string tag = read_tag(is);
        if (tag.empty()) throw TruncatedFileError(name + ": no data chunk");
        const std::uint32_t size = r.u32("chunk size");
        if (tag == "fmt ") {
            format = read_u16(r, "fmt chunk");
            channels = read_u16(r, "fmt chunk");
            rate = r.u32("fmt chunk");
            r.u32("fmt chunk");
            read_u16(r, "fmt chunk");
            bits = read_u16(r, "fmt chunk");
            if (size > 16) is.ignore(size - 16);
            have_fmt = true;
        } else if (tag == "data") {
            if (!have_fmt) throw FormatError(name + ": data chunk before fmt chunk");
            if (format != 1 || bits != 16)
                throw FormatError(name + ": only 16-bit PCM WAV is supported");
            if (channels == 0 || rate == 0) throw FormatError(name + ": bad fmt chunk");
            const std::size_t frames = size / (2u * channels);
            AudioClip clip;
            clip.sample_rate = static_cast<int>(rate);
            clip.samples.resize(frames);
            for (std::size_t i = 0; i < frames; ++i) {
                double acc = 0.0;
                for (std::uint16_t c = 0; c < channels; ++c) {
                    const auto raw = static_cast<std::int16_t>(read_u16(r, "sample data"));
                    acc += raw / 32768.0;
                }
                clip.samples[i] = static_cast<float>(acc / channels);
            }
            return clip;
        } else {
            is.ignore(size + (size & 1u));
        }
    }
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    if (clip.sample_rate <= 0) throw ContractError("write_wav: sample rate must be positive");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write WAV file " + path.string());
    const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    io::write_magic(os, "RIFF");
    io::write_u32(os, 36 + data_bytes);
    io::write_magic(os, "WAVE");
    io::write_magic(os, "fmt ");
    io::write_u32(os, 16);
    write_u16(os, 1);
    write_u16(os, 1);
    io::write_u32(os, static_cast<std::uint32_t>(clip.sample_rate));
    io::write_u32(os, static_cast<std::uint32_t>(clip.sample_rate) * 2);
    write_u16(os, 2);
    write_u16(os, 16);
    io::write_magic(os, "data");
    io::write_u32(os, data_bytes);
    for (float s : clip.samples) {
        const double clipped = std::clamp(static_cast<double>(s), -1.0, 1.0);
        const auto q = static_cast<std::int16_t>(std::clamp<long>(std::lround(clipped * 32768.0), -32768, 32767));
        write_u16(os, static_cast<std::uint16_t>(q));
    }
    if (!os) throw IoError("failed writing " + path.string());
}

AudioClip resample_linear(const AudioClip& clip, int target_rate) {
    if (target_rate <= 0 || clip.sample_rate <= 0)
        throw ContractError("resample_linear: sample rates must be positive");
    if (clip.sample_rate == target_rate) return clip;
    AudioClip out;
    out.sample_rate = target_rate;
    if (clip.samples.empty()) return out;
    const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
    const auto n_out = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(clip.samples.size()) / ratio)));
    out.samples.resize(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = i * ratio;
        const auto i0 = std::min(static_cast<std::size_t>(pos), clip.samples.size() - 1);
        const std::size_t i1 = std::min(i0 + 1, clip.samples.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out.samples[i] = static_cast<float>((1.0 - frac) * clip.samples[i0] + frac * clip.samples[i1]);
    }
    return out;
}

} // namespace knnsid::dsp
