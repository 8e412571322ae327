#include "knnsid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "knnsid/errors.hpp"
#include "knnsid/parallel.hpp"
#include "knnsid/random.hpp"

namespace knnsid::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kPeak = 0.9;
constexpr double kMaxPartialHz = 7600.0;

double formant_boost(double hz, const std::array<double, 2>& formants) {
    const double a = (hz - formants[0]) / 150.0;
    const double b = (hz - formants[1]) / 220.0;
    return 1.0 + 3.0 * std::exp(-a * a) + 3.0 * std::exp(-b * b);
}

/// Linear fade at both ends of a segment of the given length.
double edge_envelope(double t, double length, double attack, double release) {
    if (t < 0.0 || t > length) return 0.0;
    double e = 1.0;
    if (t < attack) e = t / attack;
    if (length - t < release) e = std::min(e, (length - t) / release);
    return e;
}

void normalise_rms(std::vector<double>& x) {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    const double rms = std::sqrt(acc / static_cast<double>(std::max<std::size_t>(x.size(), 1)));
    if (rms > 0.0)
        for (double& v : x) v /= rms;
}

std::vector<double> render_voice(const SongSpec& spec, int sr, std::vector<float>& f0) {
    const auto& p = spec.profile;
    const auto n = static_cast<std::size_t>(std::llround(spec.duration * sr));
    const auto notes = melody(spec);
    Rng rng(mix_seed(spec.melody_seed, 11));
    const double vib_phase = rng.uniform(0.0, kTwoPi);

    std::vector<double> out(n, 0.0);
    f0.assign(n, 0.0f);
    std::array<double, kPartials> phase{};
    std::array<double, kPartials> gain{};
    std::size_t note_idx = 0;
    std::size_t gains_for = SIZE_MAX;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        while (note_idx + 1 < notes.size() && t >= notes[note_idx].start + notes[note_idx].length) ++note_idx;
        const Note& note = notes[note_idx];
        const double nominal = midi_to_hz(note.midi);
        if (gains_for != note_idx) {
            for (int h = 0; h < kPartials; ++h) {
                const double hz = nominal * (h + 1);
                const double tilt = std::pow(10.0, p.tilt_db_per_octave * std::log2(h + 1.0) / 20.0);
                gain[h] = hz * 1.06 > kMaxPartialHz ? 0.0 : p.partial_gains[h] * tilt * formant_boost(hz, p.formants_hz);
            }
            gains_for = note_idx;
        }
        const double env = edge_envelope(t - note.start, note.length, 0.03, 0.05);
        const double f = nominal * std::exp2(p.vibrato_depth_cents / 1200.0 *
                                             std::sin(kTwoPi * p.vibrato_rate_hz * t + vib_phase));
        double s = 0.0;
        for (int h = 0; h < kPartials; ++h) {
            phase[h] += kTwoPi * f * (h + 1) / sr;
            if (phase[h] > kTwoPi) phase[h] -= kTwoPi;
            if (gain[h] > 0.0) s += gain[h] * std::sin(phase[h]);
        }
        out[i] = env * s;
        if (env > 0.0) f0[i] = static_cast<float>(f);
    }
    return out;
}

std::vector<double> render_accompaniment(const SongSpec& spec, int sr) {
    const auto n = static_cast<std::size_t>(std::llround(spec.duration * sr));
    std::vector<double> out(n, 0.0);
    Rng rng(mix_seed(spec.melody_seed, 77));

    // Chord pad: I, IV, V, vi triads over a random key.
    static constexpr std::array<std::array<int, 3>, 4> kTriads{{{0, 4, 7}, {5, 9, 12}, {7, 11, 14}, {9, 12, 16}}};
    static constexpr int kPadHarmonics = 4;
    const int root = 40 + static_cast<int>(rng.below(12));
    const double chord_len = rng.uniform(1.2, 2.0);
    std::vector<int> progression;
    for (double t = 0.0; t < spec.duration; t += chord_len) progression.push_back(static_cast<int>(rng.below(4)));
    std::array<double, 3 * kPadHarmonics> phase{};
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const auto chord = static_cast<std::size_t>(t / chord_len);
        const double env = edge_envelope(t - chord * chord_len, chord_len, 0.02, 0.02);
        const auto& triad = kTriads[static_cast<std::size_t>(progression[std::min(chord, progression.size() - 1)])];
        double s = 0.0;
        for (int v = 0; v < 3; ++v) {
            const double f = midi_to_hz(root + triad[v]);
            for (int h = 0; h < kPadHarmonics; ++h) {
                double& ph = phase[v * kPadHarmonics + h];
                ph += kTwoPi * f * (h + 1) / sr;
                if (ph > kTwoPi) ph -= kTwoPi;
                s += std::sin(ph) / std::pow(h + 1.0, 1.5);
            }
        }
        out[i] = env * s;
    }

    // Percussion: hats on every beat, kicks on every other beat.
    const double beat = 60.0 / rng.uniform(90.0, 140.0);
    const double offset = rng.uniform(0.0, beat);
    std::size_t b = 0;
    for (double start = offset; start < spec.duration; start += beat, ++b) {
        const auto s0 = static_cast<std::size_t>(start * sr);
        const double hat_gain = rng.uniform(1.0, 2.5);
        for (std::size_t i = s0; i < std::min(n, s0 + static_cast<std::size_t>(0.12 * sr)); ++i) {
            const double dt = static_cast<double>(i - s0) / sr;
            double v = hat_gain * rng.uniform(-1.0, 1.0) * std::exp(-dt / 0.03);
            if (b % 2 == 0) v += 3.0 * std::sin(kTwoPi * 55.0 * dt) * std::exp(-dt / 0.08);
            out[i] += v;
        }
    }
    return out;
}

} // namespace

double midi_to_hz(double midi) { return 440.0 * std::exp2((midi - 69.0) / 12.0); }

std::string song_id(int singer_index, int song_index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%02d_song%03d", singer_index, song_index);
    return buf;
}

SingerProfile make_profile(int singer_index, int n_singers, std::uint64_t master_seed) {
    if (singer_index < 0 || n_singers < 1) throw ContractError("make_profile: invalid singer index");
    Rng rng(mix_seed(master_seed, 1000 + static_cast<std::uint64_t>(singer_index)));
    SingerProfile p;
    char buf[32];
    std::snprintf(buf, sizeof buf, "singer_%02d", singer_index);
    p.singer_id = buf;
    p.index = singer_index;
    p.high_regime = 2 * singer_index >= n_singers;
    const int center = p.high_regime ? 62 + static_cast<int>(rng.below(6)) : 47 + static_cast<int>(rng.below(6));
    p.pitch_low = center - 5;
    p.pitch_high = center + 5;
    for (double& g : p.partial_gains) g = rng.uniform(0.15, 1.0);
    p.tilt_db_per_octave = rng.uniform(-10.0, -3.0);
    p.vibrato_rate_hz = rng.uniform(4.0, 7.5);
    p.vibrato_depth_cents = rng.uniform(15.0, 50.0);
    p.formants_hz = {rng.uniform(350.0, 900.0), rng.uniform(1100.0, 3000.0)};
    return p;
}

std::vector<Note> melody(const SongSpec& spec) {
    const auto& p = spec.profile;
    if (p.pitch_high < p.pitch_low) throw ContractError("melody: empty pitch range");
    Rng rng(spec.melody_seed);
    std::vector<Note> notes;
    int pitch = p.pitch_low + static_cast<int>(rng.below(static_cast<std::uint64_t>(p.pitch_high - p.pitch_low + 1)));
    for (double t = 0.0; t < spec.duration;) {
        const double len = rng.uniform(0.25, 0.6);
        notes.push_back({t, len, pitch});
        t += len;
        pitch = std::clamp(pitch + static_cast<int>(rng.below(7)) - 3, p.pitch_low, p.pitch_high);
    }
    return notes;
}

Rendering render_song_detailed(const SongSpec& spec, int sample_rate) {
    if (spec.duration <= 0.0) throw ContractError("render_song: duration must be positive");
    if (spec.accompaniment_gain < 0.0 || spec.accompaniment_gain >= 1.0)
        throw ContractError("render_song: accompaniment gain must lie in [0, 1)");
    Rendering r;
    std::vector<double> voice = render_voice(spec, sample_rate, r.f0);
    normalise_rms(voice);
    if (spec.accompaniment_gain > 0.0) {
        std::vector<double> acc = render_accompaniment(spec, sample_rate);
        normalise_rms(acc);
        for (std::size_t i = 0; i < voice.size(); ++i) voice[i] += spec.accompaniment_gain * acc[i];
    }
    if (spec.noise_floor > 0.0) {
        Rng noise(mix_seed(spec.melody_seed, 99));
        for (double& v : voice) v += spec.noise_floor * noise.uniform(-1.0, 1.0);
    }
    double peak = 0.0;
    for (double v : voice) peak = std::max(peak, std::abs(v));
    r.clip.sample_rate = sample_rate;
    r.clip.samples.resize(voice.size());
    const double scale = peak > 0.0 ? kPeak / peak : 0.0;
    for (std::size_t i = 0; i < voice.size(); ++i) r.clip.samples[i] = static_cast<float>(voice[i] * scale);
    return r;
}

dsp::AudioClip render_song(const SongSpec& spec, int sample_rate) {
    return render_song_detailed(spec, sample_rate).clip;
}

std::vector<SongSpec> corpus_specs(int n_singers, int songs_per_singer, double duration, std::uint64_t master_seed) {
    if (n_singers < 2) throw ConfigError("corpus: at least two singers are required");
    if (songs_per_singer < 3) throw ConfigError("corpus: at least three songs per singer are required");
    if (duration < 2.0) throw ConfigError("corpus: songs must last at least 2 s");
    std::vector<SongSpec> specs;
    for (int s = 0; s < n_singers; ++s) {
        const SingerProfile profile = make_profile(s, n_singers, master_seed);
        for (int j = 0; j < songs_per_singer; ++j) {
            const auto idx = static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(songs_per_singer) + j;
            Rng rng(mix_seed(master_seed ^ 0x5EEDull, idx));
            SongSpec spec;
            spec.profile = profile;
            spec.duration = duration;
            spec.melody_seed = mix_seed(master_seed, idx);
            spec.accompaniment_gain = rng.uniform(0.3, 0.7);
            spec.noise_floor = 0.003;
            specs.push_back(spec);
        }
    }
    return specs;
}

eval::DatasetManifest generate_corpus(int n_singers, int songs_per_singer, double duration,
                                      std::uint64_t master_seed, const std::filesystem::path& out_dir,
                                      unsigned jobs) {
    const auto specs = corpus_specs(n_singers, songs_per_singer, duration, master_seed);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "wav", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "wav").string() + ": " + ec.message());

    std::vector<eval::SongRecord> records(specs.size());
    parallel_for(specs.size(), jobs, [&](std::size_t i) {
        const int s = specs[i].profile.index;
        const int j = static_cast<int>(i) % songs_per_singer;
        eval::SongRecord& rec = records[i];
        rec.song_id = song_id(s, j);
        rec.path = "wav/" + rec.song_id + ".wav";
        rec.singer_id = specs[i].profile.singer_id;
        rec.album_id = "album_" + std::to_string(j % 6);
        dsp::write_wav(out_dir / rec.path, render_song(specs[i]));
    });
    eval::DatasetManifest manifest = eval::split_random(std::move(records), {8, 1, 1}, master_seed);
    eval::write_manifest(out_dir / "manifest.jsonl", manifest);
    return manifest;
}

} // namespace knnsid::synth
