#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "knnsid/audio.hpp"
#include "knnsid/eval.hpp"

namespace knnsid::synth {

inline constexpr int kPartials = 12;

/// Timbre and pitch behaviour of one synthetic voice.
struct SingerProfile {
    std::string singer_id;
    int index = 0;
    bool high_regime = false;
    std::array<double, kPartials> partial_gains{};
    double tilt_db_per_octave = 0.0;
    double vibrato_rate_hz = 5.0;
    double vibrato_depth_cents = 0.0;
    int pitch_low = 48; // MIDI, inclusive
    int pitch_high = 60;
    std::array<double, 2> formants_hz{};

    double pitch_center() const { return 0.5 * (pitch_low + pitch_high); }
};

struct SongSpec {
    SingerProfile profile;
    double duration = 6.0;
    std::uint64_t melody_seed = 0;
    double accompaniment_gain = 0.5; // [0, 1)
    double noise_floor = 0.003;
};

struct Note {
    double start = 0.0;
    double length = 0.0;
    int midi = 60;
};

/// Deterministic per (index, n_singers, seed). Indices below n_singers/2 use
/// the low pitch regime.
SingerProfile make_profile(int singer_index, int n_singers, std::uint64_t master_seed);

/// Melody notes covering the whole song, drawn from the profile's range.
std::vector<Note> melody(const SongSpec& spec);

double midi_to_hz(double midi);

struct Rendering {
    dsp::AudioClip clip;
    /// Instantaneous vocal fundamental per sample, 0 where the voice is off.
    std::vector<float> f0;
};

Rendering render_song_detailed(const SongSpec& spec, int sample_rate = 16000);

/// voice + gain * accompaniment + noise, peak-normalised to 0.9.
dsp::AudioClip render_song(const SongSpec& spec, int sample_rate = 16000);

/// Writes <out_dir>/wav/*.wav and <out_dir>/manifest.jsonl, split 8:1:1 per
/// singer.
eval::DatasetManifest generate_corpus(int n_singers, int songs_per_singer, double duration,
                                      std::uint64_t master_seed, const std::filesystem::path& out_dir,
                                      unsigned jobs = 1);

/// Song specs for a corpus without rendering audio.
std::vector<SongSpec> corpus_specs(int n_singers, int songs_per_singer, double duration, std::uint64_t master_seed);

std::string song_id(int singer_index, int song_index);

} // namespace knnsid::synth
