#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "helpers.hpp"
#include "knnsid/audio.hpp"
#include "knnsid/errors.hpp"
#include "knnsid/features.hpp"
#include "knnsid/synth.hpp"

using namespace knnsid;
using namespace knnsid::synth;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

double median(std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
}

} // namespace

TEST_CASE("profiles are deterministic, distinct and follow the regime rule") {
    for (std::uint64_t seed : {7ull, 123ull}) {
        const int N = 8;
        std::vector<SingerProfile> ps;
        for (int i = 0; i < N; ++i) {
            const auto a = make_profile(i, N, seed), b = make_profile(i, N, seed);
            CHECK(a.partial_gains == b.partial_gains);
            CHECK(a.formants_hz == b.formants_hz);
            CHECK(a.pitch_low == b.pitch_low);
            CHECK(a.high_regime == (i >= N / 2));
            CHECK(a.pitch_low <= a.pitch_high);
            CHECK(a.vibrato_rate_hz >= 3.0);
            CHECK(a.vibrato_rate_hz <= 9.0);
            for (double g : a.partial_gains) CHECK(g >= 0.0);
            ps.push_back(a);
        }
        for (int i = 0; i < N; ++i)
            for (int j = i + 1; j < N; ++j) {
                double d = 0;
                for (int h = 0; h < kPartials; ++h) d += std::pow(ps[i].partial_gains[h] - ps[j].partial_gains[h], 2);
                CHECK(d > 0.0);
                CHECK(ps[i].singer_id != ps[j].singer_id);
            }
        double low_max = 0, high_min = 1e9;
        for (const auto& p : ps) {
            if (p.high_regime) high_min = std::min(high_min, p.pitch_center());
            else low_max = std::max(low_max, p.pitch_center());
        }
        CHECK(low_max < high_min);
    }
    CHECK_THROWS_AS(make_profile(-1, 4, 7), ContractError);
}

TEST_CASE("melody covers the song within the pitch range") {
    SongSpec spec;
    spec.profile = make_profile(1, 4, 7);
    spec.duration = 5.0;
    spec.melody_seed = 99;
    const auto notes = melody(spec);
    REQUIRE_FALSE(notes.empty());
    CHECK(notes.front().start == 0.0);
    CHECK(notes.back().start + notes.back().length >= spec.duration);
    for (std::size_t i = 0; i < notes.size(); ++i) {
        CHECK(notes[i].midi >= spec.profile.pitch_low);
        CHECK(notes[i].midi <= spec.profile.pitch_high);
        if (i > 0) CHECK(notes[i].start == doctest::Approx(notes[i - 1].start + notes[i - 1].length));
    }
    CHECK(midi_to_hz(69) == 440.0);
    CHECK(midi_to_hz(81) == doctest::Approx(880.0));
}

TEST_CASE("rendering is normalised and bit-identical") {
    for (int i = 0; i < 6; ++i) {
        SongSpec spec;
        spec.profile = make_profile(i, 6, 3);
        spec.duration = 2.0 + i * 0.5;
        spec.melody_seed = 1000 + i;
        spec.accompaniment_gain = 0.15 * i;
        const auto a = render_song(spec), b = render_song(spec);
        CHECK(a.samples.size() == static_cast<std::size_t>(std::llround(spec.duration * 16000)));
        CHECK(a.samples == b.samples);
        float peak = 0;
        for (float v : a.samples) peak = std::max(peak, std::abs(v));
        CHECK(peak <= 0.9f + 1e-6f);
        CHECK(peak >= 0.9f - 1e-6f);
    }
    SongSpec bad;
    bad.profile = make_profile(0, 2, 1);
    bad.accompaniment_gain = 1.0;
    CHECK_THROWS_AS(render_song(bad), ContractError);
}

TEST_CASE("a dry voice concentrates its energy at the partials") {
    dsp::SpectrogramConfig cfg;
    for (int i = 0; i < 4; ++i) {
        SongSpec spec;
        spec.profile = make_profile(i, 4, 11);
        spec.duration = 3.0;
        spec.melody_seed = 50 + i;
        spec.accompaniment_gain = 0.0;
        spec.noise_floor = 0.0;
        const auto r = render_song_detailed(spec);
        const auto S = dsp::stft(r.clip, cfg);
        double near = 0, total = 0;
        for (std::size_t t = 0; t < S.rows; ++t) {
            std::vector<char> mask(S.cols, 0);
            const std::size_t s0 = t * static_cast<std::size_t>(cfg.hop_length);
            for (std::size_t s = s0; s < s0 + static_cast<std::size_t>(cfg.window_length); ++s) {
                if (r.f0[s] <= 0.0f) continue;
                for (int h = 1; h <= kPartials; ++h) {
                    const long c = std::lround(h * r.f0[s] * cfg.fft_size / cfg.sample_rate);
                    for (long b = c - 2; b <= c + 2; ++b)
                        if (b >= 0 && b < static_cast<long>(S.cols)) mask[static_cast<std::size_t>(b)] = 1;
                }
            }
            for (std::size_t b = 0; b < S.cols; ++b) {
                total += S.at(t, b);
                if (mask[b]) near += S.at(t, b);
            }
        }
        CHECK(near / total > 0.8);
    }
}

TEST_CASE("corpus generation") {
    testutil::TempDir a("corpus_a"), b("corpus_b");
    const auto m = generate_corpus(4, 20, 2.0, 7, a.path(), 2);
    generate_corpus(4, 20, 2.0, 7, b.path(), 1);
    CHECK(m.records.size() == 80);
    std::size_t wavs = 0;
    for (const auto& e : std::filesystem::directory_iterator(a / "wav")) wavs += e.path().extension() == ".wav";
    CHECK(wavs == 80);
    std::map<eval::Split, int> counts;
    for (const auto& r : m.records) counts[r.split]++;
    CHECK(counts[eval::Split::train] == 64);
    CHECK(counts[eval::Split::val] == 8);
    CHECK(counts[eval::Split::test] == 8);
    m.validate();
    CHECK(eval::read_manifest(a / "manifest.jsonl").records == m.records);

    CHECK(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"));
    bool identical = true;
    for (const auto& r : m.records) identical = identical && slurp(a.path() / r.path) == slurp(b.path() / r.path);
    CHECK(identical);

    const auto clip = dsp::read_wav(a.path() / m.records[0].path);
    CHECK(clip.sample_rate == 16000);
    CHECK(clip.samples.size() == 32000);

    CHECK_THROWS_AS(generate_corpus(1, 20, 2.0, 7, a / "x"), ConfigError);
    CHECK_THROWS_AS(generate_corpus(2, 20, 1.0, 7, a / "x"), ConfigError);
}

TEST_CASE("songs of one singer differ in melody and accompaniment") {
    const auto specs = corpus_specs(3, 10, 6.0, 7);
    REQUIRE(specs.size() == 30);
    std::set<std::uint64_t> seeds;
    std::set<double> gains;
    for (const auto& s : specs) {
        seeds.insert(s.melody_seed);
        gains.insert(s.accompaniment_gain);
        CHECK(s.accompaniment_gain >= 0.0);
        CHECK(s.accompaniment_gain < 1.0);
    }
    CHECK(seeds.size() == 30);
    CHECK(gains.size() == 30);
}

TEST_CASE("low-regime singers sing lower than high-regime singers") {
    for (std::uint64_t seed : {1ull, 7ull, 42ull, 1000ull}) {
        const int N = 6;
        const auto specs = corpus_specs(N, 3, 2.0, seed);
        std::vector<double> low, high;
        for (const auto& s : specs) {
            const auto r = render_song_detailed(s);
            auto& dst = s.profile.high_regime ? high : low;
            for (std::size_t i = 0; i < r.f0.size(); i += 40)
                if (r.f0[i] > 0.0f) dst.push_back(r.f0[i]);
        }
        CHECK(median(low) < median(high));
    }
}
