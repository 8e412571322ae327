#include "knnsid/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "knnsid/binary_io.hpp"
#include "knnsid/errors.hpp"

namespace knnsid::dsp {

namespace {

// FFTW planning is not thread-safe; execution is.
std::mutex fftw_planner_mutex;

double filter_weight(double f, double lo, double centre, double hi) {
    if (f <= lo || f >= hi) return 0.0;
    if (f <= centre) return (f - lo) / (centre - lo);
    return (hi - f) / (hi - centre);
}

std::vector<double> mel_edge_frequencies(const SpectrogramConfig& cfg) {
    const double mel_lo = hz_to_mel(cfg.f_min);
    const double mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (cfg.n_mels + 1));
    return edges;
}

} // namespace

void SpectrogramConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("spectrogram config: " + what); };
    if (sample_rate <= 0) fail("sample_rate must be positive");
    if (window_length <= 0 || hop_length <= 0) fail("window and hop must be positive");
    if (fft_size < window_length) fail("fft_size must be >= window_length");
    if (hop_length > window_length) fail("hop_length must be <= window_length");
    if (n_mels <= 0) fail("n_mels must be positive");
    if (!(f_min >= 0.0 && f_min < f_max)) fail("require 0 <= f_min < f_max");
    if (f_max > sample_rate / 2.0) fail("f_max must not exceed the Nyquist frequency");
    if (!(log_floor > 0.0)) fail("log_floor must be positive");
    const double block_seconds = static_cast<double>(kBlockFrames) * hop_length / sample_rate;
    if (std::abs(block_seconds - 1.0) > 0.05)
        fail("32 hops must span one second (got " + std::to_string(block_seconds) + " s)");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann_window(int length) {
    std::vector<double> w(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / length);
    return w;
}

Matrix stft(const AudioClip& clip, const SpectrogramConfig& cfg) {
    cfg.validate();
    if (clip.sample_rate != cfg.sample_rate)
        throw ContractError("stft: clip sample rate " + std::to_string(clip.sample_rate) +
                            " differs from config " + std::to_string(cfg.sample_rate));
    const auto len = clip.samples.size();
    const auto win = static_cast<std::size_t>(cfg.window_length);
    const auto hop = static_cast<std::size_t>(cfg.hop_length);
    if (len < win) return Matrix(0, static_cast<std::size_t>(cfg.n_bins()));

    const std::size_t n_frames = (len - win) / hop + 1;
    Matrix power(n_frames, static_cast<std::size_t>(cfg.n_bins()));
    const auto window = hann_window(cfg.window_length);
    const auto n_fft = static_cast<std::size_t>(cfg.fft_size);
    double* in = fftw_alloc_real(n_fft);
    fftw_complex* out = fftw_alloc_complex(n_fft / 2 + 1);
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex);
        plan = fftw_plan_dft_r2c_1d(cfg.fft_size, in, out, FFTW_ESTIMATE);
    }
    for (std::size_t f = 0; f < n_frames; ++f) {
        std::fill(in, in + n_fft, 0.0);
        for (std::size_t i = 0; i < win; ++i) in[i] = clip.samples[f * hop + i] * window[i];
        fftw_execute(plan);
        auto row = power.row(f);
        for (std::size_t k = 0; k < row.size(); ++k) row[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    }
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex);
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return power;
}

std::vector<double> mel_center_frequencies(const SpectrogramConfig& cfg) {
    auto edges = mel_edge_frequencies(cfg);
    return {edges.begin() + 1, edges.end() - 1};
}

Matrix mel_filterbank(const SpectrogramConfig& cfg) {
    cfg.validate();
    const auto edges = mel_edge_frequencies(cfg);
    const auto n_bins = static_cast<std::size_t>(cfg.n_bins());
    Matrix fb(static_cast<std::size_t>(cfg.n_mels), n_bins);
    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.fft_size;
    for (std::size_t m = 0; m < fb.rows; ++m) {
        bool any = false;
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double w = filter_weight(k * bin_hz, edges[m], edges[m + 1], edges[m + 2]);
            fb.at(m, k) = w;
            any = any || w > 0.0;
        }
        if (!any)
            throw ConfigError("mel filter " + std::to_string(m) + " covers no FFT bin; n_mels=" +
                              std::to_string(cfg.n_mels) + " is too large for fft_size=" +
                              std::to_string(cfg.fft_size));
    }
    return fb;
}

std::vector<MelBlock> log_mel_blocks(const AudioClip& clip, const SpectrogramConfig& cfg,
                                     const std::string& song_id) {
    // Tail padding of window - hop samples: n * hop samples give n frames.
    AudioClip padded{clip.samples, clip.sample_rate};
    padded.samples.resize(clip.samples.size() + static_cast<std::size_t>(cfg.window_length - cfg.hop_length), 0.0f);
    const Matrix power = stft(padded, cfg);
    const std::size_t n_blocks = power.rows / kBlockFrames;
    if (n_blocks == 0) return {};
    const Matrix fb = mel_filterbank(cfg);
    const double floor_log = std::log(cfg.log_floor);

    std::vector<MelBlock> blocks(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        MelBlock& blk = blocks[b];
        blk.n_mels = cfg.n_mels;
        blk.source_song = song_id;
        blk.block_index = static_cast<std::uint32_t>(b);
        blk.values.resize(static_cast<std::size_t>(kBlockFrames) * cfg.n_mels);
        for (int t = 0; t < kBlockFrames; ++t) {
            const auto spec = power.row(b * kBlockFrames + static_cast<std::size_t>(t));
            for (int m = 0; m < cfg.n_mels; ++m) {
                const auto filt = fb.row(static_cast<std::size_t>(m));
                double e = 0.0;
                for (std::size_t k = 0; k < spec.size(); ++k) e += filt[k] * spec[k];
                const double v = e > cfg.log_floor ? std::log(e) : floor_log;
                // Rounding to float must not dip below the floor.
                float fv = static_cast<float>(v);
                if (static_cast<double>(fv) < floor_log) fv = std::nextafter(fv, 0.0f);
                blk.values[static_cast<std::size_t>(t) * cfg.n_mels + m] = fv;
            }
        }
    }
    return blocks;
}

std::vector<MelBlock> featurize_file(const std::filesystem::path& wav, const SpectrogramConfig& cfg,
                                     const std::string& song_id) {
    const AudioClip clip = resample_linear(read_wav(wav), cfg.sample_rate);
    return log_mel_blocks(clip, cfg, song_id);
}

void write_feature_cache(const std::filesystem::path& path, std::span<const MelBlock> blocks) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write feature cache " + path.string());
    const std::uint32_t n_mels = blocks.empty() ? 0u : static_cast<std::uint32_t>(blocks.front().n_mels);
    io::write_magic(os, "TKNN");
    io::write_u32(os, kFeatureCacheVersion);
    io::write_u32(os, static_cast<std::uint32_t>(blocks.size()));
    io::write_u32(os, n_mels);
    for (const auto& b : blocks) {
        if (static_cast<std::uint32_t>(b.n_mels) != n_mels ||
            b.values.size() != static_cast<std::size_t>(kBlockFrames) * n_mels)
            throw DimensionError("write_feature_cache: inconsistent block shapes");
        io::write_f32s(os, b.values);
    }
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<MelBlock> read_feature_cache(const std::filesystem::path& path, const std::string& song_id) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open feature cache " + path.string());
    io::Reader r(is);
    r.expect_magic("TKNN", "feature cache " + path.string());
    r.expect_version(kFeatureCacheVersion, "feature cache " + path.string());
    const std::uint32_t n_blocks = r.u32("feature cache header");
    const std::uint32_t n_mels = r.u32("feature cache header");
    std::vector<MelBlock> blocks(n_blocks);
    for (std::uint32_t b = 0; b < n_blocks; ++b) {
        blocks[b].n_mels = static_cast<int>(n_mels);
        blocks[b].source_song = song_id;
        blocks[b].block_index = b;
        blocks[b].values.resize(static_cast<std::size_t>(kBlockFrames) * n_mels);
        r.f32s(blocks[b].values, "block " + std::to_string(b));
    }
    return blocks;
}

} // namespace knnsid::dsp
