#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "knnsid/audio.hpp"

namespace knnsid::dsp {

/// Frames per network input block (one second at the default config).
inline constexpr int kBlockFrames = 32;

struct SpectrogramConfig {
    int sample_rate = 16000;
    int window_length = 1000;
    int hop_length = 500;
    int fft_size = 1024;
    int n_mels = 64;
    double f_min = 30.0;
    double f_max = 8000.0;
    double log_floor = 1e-10;

    int n_bins() const { return fft_size / 2 + 1; }

    /// Throws ConfigError on any violated constraint, including a block
    /// duration (kBlockFrames hops) more than 5% away from one second.
    void validate() const;

    bool operator==(const SpectrogramConfig&) const = default;
};

/// Dense row-major matrix of doubles used for spectra and filterbanks.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

/// 32 x n_mels log-mel block, row-major (time, mel).
struct MelBlock {
    std::vector<float> values;
    int n_mels = 0;
    std::string source_song;
    std::uint32_t block_index = 0;

    float at(int frame, int mel) const { return values[static_cast<std::size_t>(frame) * n_mels + mel]; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Periodic Hann window of the given length.
std::vector<double> hann_window(int length);

/// Power spectrogram (frame-major, fft_size/2+1 columns). A clip shorter than
/// one window yields a matrix with zero rows.
Matrix stft(const AudioClip& clip, const SpectrogramConfig& cfg);

/// Triangular mel filters with unit peaks, n_mels x (fft_size/2+1).
Matrix mel_filterbank(const SpectrogramConfig& cfg);

/// Centre frequencies (Hz) of the filters built by mel_filterbank.
std::vector<double> mel_center_frequencies(const SpectrogramConfig& cfg);

/// Groups frames into non-overlapping 32-frame blocks; a trailing partial
/// block is dropped. The clip is zero-padded by window - hop samples first, so
/// one second of audio is exactly one block.
std::vector<MelBlock> log_mel_blocks(const AudioClip& clip, const SpectrogramConfig& cfg,
                                     const std::string& song_id = {});

/// Reads a WAV file, resamples to cfg.sample_rate and computes its blocks.
std::vector<MelBlock> featurize_file(const std::filesystem::path& wav, const SpectrogramConfig& cfg,
                                     const std::string& song_id);

inline constexpr std::uint32_t kFeatureCacheVersion = 1;

void write_feature_cache(const std::filesystem::path& path, std::span<const MelBlock> blocks);
std::vector<MelBlock> read_feature_cache(const std::filesystem::path& path, const std::string& song_id);

} // namespace knnsid::dsp
