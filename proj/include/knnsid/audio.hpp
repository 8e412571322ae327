#pragma once

#include <filesystem>
#include <vector>

namespace knnsid::dsp {

/// Mono PCM audio, amplitudes nominally in [-1, 1].
struct AudioClip {
    std::vector<float> samples;
    int sample_rate = 0;

    double duration_seconds() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

/// Reads a 16-bit PCM WAV file. Multi-channel data is averaged to mono.
AudioClip read_wav(const std::filesystem::path& path);

/// Writes a mono 16-bit PCM WAV file. Samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

/// Linear-interpolation resampling. Returns the input unchanged when the rate
/// already matches.
AudioClip resample_linear(const AudioClip& clip, int target_rate);

} // namespace knnsid::dsp
