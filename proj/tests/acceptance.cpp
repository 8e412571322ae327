// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "knnsid/attention.hpp"
#include "knnsid/eval.hpp"
#include "knnsid/knn_head.hpp"
#include "knnsid/network.hpp"
#include "knnsid/pipeline.hpp"
#include "knnsid/random.hpp"
#include "knnsid/synth.hpp"

using namespace knnsid;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void report(int id, const char* title, double limit_s, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = limit_s <= 0 || s <= limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    if (id > 0)
        std::printf("%s  %d. %s: %s [%.2f s", pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), s);
    else
        std::printf("%s  -. %s: %s [%.2f s", pass ? "PASS" : "FAIL", title, o.detail.c_str(), s);
    if (limit_s > 0) std::printf(" / limit %.0f s", limit_s);
    std::printf("]\n");
    std::fflush(stdout);
}

std::string f(const char* fmt, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

// ---------------------------------------------------------------- 1

Outcome knn_equivalence() {
    Rng rng(101);
    const std::size_t dims[] = {4, 32, 128};
    const std::size_t refs[] = {10, 500};
    int mismatches = 0, comparisons = 0;
    double worst = 0;
    for (int n = 0; n < 1000; ++n) {
        const std::size_t D = dims[n % 3], R = refs[(n / 3) % 2];
        std::vector<std::vector<float>> cols(R, std::vector<float>(D));
        for (auto& c : cols)
            for (float& v : c) v = static_cast<float>(rng.normal());
        std::vector<float> q(D);
        for (float& v : q) v = static_cast<float>(rng.normal());
        const auto ref = knn::build_reference_matrix(cols, std::vector<knn::SingerId>(R, 0));
        const auto scores = knn::knn_layer_scores(q, ref);

        long double qn = 0;
        for (float v : q) qn += (long double)v * v;
        qn = std::sqrt(qn);
        std::vector<long double> cosine(R);
        for (std::size_t r = 0; r < R; ++r) {
            long double d = 0, wn = 0;
            for (std::size_t i = 0; i < D; ++i) {
                d += (long double)q[i] * cols[r][i];
                wn += (long double)cols[r][i] * cols[r][i];
            }
            cosine[r] = d / (qn * std::sqrt(wn));
            worst = std::max(worst, static_cast<double>(std::abs(scores[r] / qn - cosine[r])));
        }
        std::vector<std::size_t> order(R);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cosine[a] > cosine[b]; });
        for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{11}, R}) {
            const std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<long>(std::min(k, R)));
            mismatches += knn::top_k(scores, k).indices != want;
            ++comparisons;
        }
    }
    return {mismatches == 0 && worst <= 1e-6, std::to_string(mismatches) + "/" + std::to_string(comparisons) +
                                                  " top-k mismatches, max |score/|q| - cos| " + f("%.2e", worst)};
}

// ---------------------------------------------------------------- 2

Outcome attention_contracts() {
    Rng rng(202);
    double worst_sum = 0, worst_out = 0;
    int shift_breaks = 0;
    for (int n = 0; n < 1000; ++n) {
        const std::size_t N = 1 + rng.below(16), D = 1 + rng.below(32), A = 1 + rng.below(32);
        nn::AttentionParams<float> p{nn::Tensor({D, A}), nn::Tensor({D, A}), nn::Tensor({A})};
        for (auto* t : {&p.w_s, &p.w_h, &p.v})
            for (float& v : t->data()) v = static_cast<float>(rng.normal());
        nn::Tensor h({N, D});
        for (float& v : h.data()) v = static_cast<float>(2.0 * rng.normal());
        const auto c = nn::attention_forward(h, p);
        double sum = 0;
        for (float a : c.alpha) sum += a;
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        for (std::size_t d = 0; d < D; ++d) {
            float lo = h[d], hi = h[d];
            for (std::size_t j = 1; j < N; ++j) {
                lo = std::min(lo, h[j * D + d]);
                hi = std::max(hi, h[j * D + d]);
            }
            worst_out = std::max({worst_out, double(lo) - c.pooled[d], double(c.pooled[d]) - hi});
        }
        std::vector<double> s(c.scores.begin(), c.scores.end()), shifted = s;
        const double shift = static_cast<double>(static_cast<long>(rng.below(2001)) - 1000);
        for (double& v : shifted) v += shift;
        shift_breaks += nn::attention_weights<double>(s) != nn::attention_weights<double>(shifted);
    }
    return {worst_sum <= 1e-6 && worst_out <= 1e-6 && shift_breaks == 0,
            "max |sum alpha - 1| " + f("%.2e", worst_sum) + ", max excursion outside row range " +
                f("%.2e", std::max(0.0, worst_out)) + ", " + std::to_string(shift_breaks) + " shift mismatches"};
}

// ---------------------------------------------------------------- 3

Outcome gradient_check() {
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
        const auto seed = mix_seed(7, static_cast<std::uint64_t>(i));
        const auto rep = nn::grad_check(nn::build_toy_network(seed), nn::toy_input(seed), static_cast<std::size_t>(i % 3));
        worst = std::max(worst, rep.max_relative_error);
    }
    return {worst < 1e-4, "max relative error " + f("%.2e", worst) + " over 20 networks"};
}

// ---------------------------------------------------------------- 6

Outcome metric_oracle() {
    Rng rng(606);
    int bad = 0, zero_den = 0;
    for (int n = 0; n < 50; ++n) {
        const std::size_t C = 2 + rng.below(7);
        std::vector<std::string> names;
        for (std::size_t c = 0; c < C; ++c) names.push_back("c" + std::to_string(c));
        eval::ConfusionMatrix cm(names);
        const std::size_t hole = rng.below(C);
        for (std::size_t t = 0; t < C; ++t)
            for (std::size_t p = 0; p < C; ++p)
                cm.at(t, p) = (n % 3 == 0 && (t == hole || p == hole)) ? 0 : rng.below(15);
        if (cm.total() == 0) cm.at(0, 0) = 1;
        const auto m = eval::metrics(cm);
        std::uint64_t total = 0, diag = 0;
        for (std::size_t t = 0; t < C; ++t)
            for (std::size_t p = 0; p < C; ++p) {
                total += cm.at(t, p);
                diag += t == p ? cm.at(t, p) : 0;
            }
        // accuracy as an exact rational: correct/total with the double equal to the rounded quotient
        bad += m.correct != diag || m.total != total || m.accuracy != double(diag) / double(total);
        long double mp = 0, mr = 0, mf = 0;
        for (std::size_t c = 0; c < C; ++c) {
            std::uint64_t row = 0, col = 0;
            for (std::size_t j = 0; j < C; ++j) {
                row += cm.at(c, j);
                col += cm.at(j, c);
            }
            zero_den += (row == 0) + (col == 0);
            const long double p = col ? (long double)cm.at(c, c) / col : 0.0L;
            const long double r = row ? (long double)cm.at(c, c) / row : 0.0L;
            const long double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0L;
            bad += std::abs(m.per_class[c].precision - (double)p) > 1e-12 ||
                   std::abs(m.per_class[c].recall - (double)r) > 1e-12 ||
                   std::abs(m.per_class[c].f1 - (double)f1) > 1e-12 || m.per_class[c].precision_undefined != (col == 0) ||
                   m.per_class[c].recall_undefined != (row == 0);
            mp += p;
            mr += r;
            mf += f1;
        }
        bad += std::abs(m.macro_precision - (double)(mp / C)) > 1e-12 ||
               std::abs(m.macro_recall - (double)(mr / C)) > 1e-12 || std::abs(m.macro_f1 - (double)(mf / C)) > 1e-12;
    }
    return {bad == 0 && zero_den > 0,
            std::to_string(bad) + " disagreements over 50 matrices (" + std::to_string(zero_den) + " zero denominators)"};
}

// ---------------------------------------------------------------- 7

Outcome split_integrity() {
    std::vector<eval::SongRecord> songs;
    for (int s = 0; s < 5; ++s)
        for (int j = 0; j < 70; ++j)
            songs.push_back({"s" + std::to_string(s) + "_" + std::to_string(j), "", "singer" + std::to_string(s),
                             std::nullopt, eval::Split::train});
    const auto m = eval::split_random(songs, {8, 1, 1}, 7);
    std::map<std::string, std::array<int, 3>> counts;
    for (const auto& r : m.records) counts[r.singer_id][static_cast<int>(r.split)]++;
    bool ratio_ok = m.records.size() == songs.size();
    for (const auto& [s, c] : counts) ratio_ok = ratio_ok && c[0] == 56 && c[1] == 7 && c[2] == 7;

    Rng rng(707);
    int leaks = 0, lost = 0;
    for (int t = 0; t < 100; ++t) {
        std::vector<eval::SongRecord> fx;
        const int singers = 2 + static_cast<int>(rng.below(4));
        for (int s = 0; s < singers; ++s) {
            const int albums = 6 + static_cast<int>(rng.below(3));
            const int n = albums + static_cast<int>(rng.below(30));
            for (int i = 0; i < n; ++i) {
                const int album = i < albums ? i : static_cast<int>(rng.below(albums));
                fx.push_back({"t" + std::to_string(s) + "_" + std::to_string(i), "", "singer" + std::to_string(s),
                              "al" + std::to_string(s) + "_" + std::to_string(album), eval::Split::train});
            }
        }
        const auto am = eval::split_by_album(fx, 4, rng.next_u64());
        std::map<std::string, std::set<eval::Split>> where;
        std::set<std::string> ids;
        for (const auto& r : am.records) {
            where[*r.album_id].insert(r.split);
            ids.insert(r.song_id);
        }
        for (const auto& [a, s] : where) leaks += s.size() != 1;
        lost += ids.size() != fx.size();
    }
    return {ratio_ok && leaks == 0 && lost == 0, std::string("56/7/7 per singer ") + (ratio_ok ? "yes" : "NO") + ", " +
                                                     std::to_string(leaks) + " leaked albums over 100 fixtures"};
}

// ------------------------------------------------------- 4, 5, 8, 9

struct Corpus {
    testutil::TempDir dir{"acceptance"};
    pipeline::FeatureSet features;
    pipeline::KnnNet net;
    double softmax_acc = 0, knn_acc = 0;
    std::size_t test_songs = 0;
    int best_epoch = 0, epochs = 0;
};

double song_accuracy(const Corpus& c, const std::function<pipeline::Prediction(const pipeline::SongFeatures&)>& pred) {
    std::size_t ok = 0, n = 0;
    for (const auto& s : c.features.songs) {
        if (s.split != eval::Split::test) continue;
        ok += pred(s).predicted == c.features.class_of(s.singer_id);
        ++n;
    }
    return double(ok) / double(n);
}

Outcome end_to_end(Corpus& c) {
    const auto manifest = synth::generate_corpus(8, 20, 6.0, 7, c.dir.path());
    c.features = pipeline::featurize_manifest(manifest, c.dir.path(), dsp::SpectrogramConfig{});
    pipeline::TrainConfig cfg;
    cfg.seed = 7;
    auto extractor = pipeline::train_stage1(c.features, cfg);
    c.best_epoch = extractor.best_epoch;
    c.epochs = static_cast<int>(extractor.history.size());
    c.net = pipeline::build_knn_net(std::move(extractor), c.features);
    c.knn_acc = song_accuracy(c, [&](const auto& s) { return pipeline::predict_song(c.net, s.blocks); });
    c.softmax_acc =
        song_accuracy(c, [&](const auto& s) { return pipeline::predict_song_softmax(c.net.extractor, s.blocks); });
    return {c.knn_acc >= 0.9 && c.knn_acc >= c.softmax_acc - 0.05,
            "KNN song accuracy " + f("%.4f", c.knn_acc) + ", softmax " + f("%.4f", c.softmax_acc) + ", best epoch " +
                std::to_string(c.best_epoch) + " of " + std::to_string(c.epochs)};
}

Outcome self_retrieval(const Corpus& c) {
    pipeline::KnnNet k1 = c.net;
    k1.k = 1;
    std::size_t col = 0, hits = 0;
    for (const auto& s : c.features.songs) {
        if (s.split != eval::Split::train) continue;
        for (const auto& b : s.blocks) hits += pipeline::predict_block(k1, b).neighbors.indices[0] == col++;
    }
    return {col == c.net.head.columns() && hits == col,
            std::to_string(hits) + "/" + std::to_string(col) + " training blocks at rank 1"};
}

Outcome serialization(const Corpus& c) {
    const auto path = c.dir / "bundle";
    pipeline::save_bundle(path, c.net);
    const auto loaded = pipeline::load_bundle(path);
    const auto specs = synth::corpus_specs(10, 10, 3.0, 4242);
    int differ = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        const auto blocks = dsp::log_mel_blocks(synth::render_song(specs[i]), c.features.config, synth::song_id(0, int(i)));
        differ += !(pipeline::predict_song(c.net, blocks) == pipeline::predict_song(loaded, blocks));
    }
    return {differ == 0, std::to_string(differ) + " of 100 songs predicted differently after reload"};
}

Outcome compression(const Corpus& c) {
    pipeline::KnnNet small = c.net;
    small.head = knn::compress_reference(c.net.head, 4, 7);
    small.head.round_to_storage_precision();
    const double acc = song_accuracy(c, [&](const auto& s) { return pipeline::predict_song(small, s.blocks); });
    const double ratio = double(c.net.head.columns()) / double(small.head.columns());
    return {c.knn_acc - acc <= 0.05 + 1e-12 && ratio >= 10.0,
            std::to_string(c.net.head.columns()) + " -> " + std::to_string(small.head.columns()) + " columns (" +
                f("%.1fx", ratio) + "), song accuracy " + f("%.4f", acc) + " vs " + f("%.4f", c.knn_acc)};
}

Outcome separability(const Corpus& c) {
    const std::size_t C = c.features.singers.size(), M = static_cast<std::size_t>(c.features.config.n_mels);
    auto mean_vec = [&](const pipeline::SongFeatures& s) {
        std::vector<double> v(M, 0.0);
        for (const auto& b : s.blocks)
            for (int t = 0; t < dsp::kBlockFrames; ++t)
                for (std::size_t m = 0; m < M; ++m) v[m] += b.at(t, static_cast<int>(m));
        for (double& x : v) x /= double(s.blocks.size() * dsp::kBlockFrames);
        return v;
    };
    std::vector<std::vector<double>> centroid(C, std::vector<double>(M, 0.0));
    std::vector<int> count(C, 0);
    for (const auto& s : c.features.songs) {
        if (s.split != eval::Split::train) continue;
        const auto v = mean_vec(s);
        const auto k = c.features.class_of(s.singer_id);
        for (std::size_t m = 0; m < M; ++m) centroid[k][m] += v[m];
        ++count[k];
    }
    for (std::size_t k = 0; k < C; ++k)
        for (double& x : centroid[k]) x /= count[k];
    std::size_t ok = 0, n = 0;
    for (const auto& s : c.features.songs) {
        if (s.split != eval::Split::test) continue;
        const auto v = mean_vec(s);
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t k = 0; k < C; ++k) {
            double d = 0;
            for (std::size_t m = 0; m < M; ++m) d += (v[m] - centroid[k][m]) * (v[m] - centroid[k][m]);
            if (d < bd) {
                bd = d;
                best = k;
            }
        }
        ok += best == c.features.class_of(s.singer_id);
        ++n;
    }
    const double acc = double(ok) / double(n);
    return {acc < c.knn_acc, "nearest-centroid baseline " + f("%.4f", acc) + " vs KNN " + f("%.4f", c.knn_acc)};
}

} // namespace

int main() {
    report(1, "dense/KNN equivalence", 10, knn_equivalence);
    report(2, "attention contracts", 5, attention_contracts);
    report(3, "gradient verification", 60, gradient_check);
    Corpus corpus;
    bool trained = false;
    report(4, "synthetic end-to-end (8 singers x 20 songs x 6 s)", 600, [&] {
        auto o = end_to_end(corpus);
        trained = true;
        return o;
    });
    auto needs_model = [&](auto fn) {
        return [&, fn]() -> Outcome { return trained ? fn(corpus) : Outcome{false, "no trained model"}; };
    };
    report(5, "self-retrieval", 30, needs_model(self_retrieval));
    report(6, "metric oracle", 0, metric_oracle);
    report(7, "split integrity", 0, split_integrity);
    report(8, "bundle serialization", 0, needs_model(serialization));
    report(9, "reference compression", 0, needs_model(compression));
    report(0, "corpus separability", 0, needs_model(separability));
    std::printf("%s: %d failing\n", failures ? "FAILED" : "ALL PASSED", failures);
    return failures ? 1 : 0;
}
