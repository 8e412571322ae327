#include "knnsid/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <iterator>
#include <numeric>
#include <sstream>

#include "knnsid/attention.hpp"
#include "knnsid/errors.hpp"
#include "knnsid/eval.hpp"
#include "knnsid/features.hpp"
#include "knnsid/knn_head.hpp"
#include "knnsid/network.hpp"
#include "knnsid/random.hpp"

namespace knnsid::check {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

CheckResult gradient_check(int instances, std::uint64_t seed, bool sabotage) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(i));
        const auto net = nn::build_toy_network(s);
        nn::GradCheckOptions opt;
        if (sabotage) opt.tamper = [](nn::Gradients<double>& g) { g[1][0][3] += 0.05; };
        const auto rep = nn::grad_check(net, nn::toy_input(s), static_cast<std::size_t>(i % 3), opt);
        worst = std::max(worst, rep.max_relative_error);
    }
    return {"gradient-check", worst < 1e-4, "max relative error " + fmt(worst) + " over " + std::to_string(instances) + " networks"};
}

// Brute force: normalise both sides, dot, stable sort.
std::vector<std::size_t> oracle_top(const std::vector<float>& q, const std::vector<std::vector<float>>& cols,
                                    std::size_t k, std::vector<double>& cos_out) {
    double qn = 0.0;
    for (float v : q) qn += double(v) * v;
    qn = std::sqrt(qn);
    cos_out.assign(cols.size(), 0.0);
    for (std::size_t r = 0; r < cols.size(); ++r) {
        double d = 0.0, wn = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            d += double(q[i]) * cols[r][i];
            wn += double(cols[r][i]) * cols[r][i];
        }
        cos_out[r] = d / (qn * std::sqrt(wn));
    }
    std::vector<std::size_t> idx(cols.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return cos_out[a] > cos_out[b]; });
    idx.resize(k);
    return idx;
}

CheckResult knn_equivalence(int instances, std::uint64_t seed, bool sabotage) {
    Rng rng(mix_seed(seed, 0x4b4e4e));
    const std::size_t dims[] = {4, 32, 128};
    const std::size_t refs[] = {10, 500};
    int mismatches = 0;
    double worst = 0.0;
    for (int n = 0; n < instances; ++n) {
        const std::size_t D = dims[n % 3];
        const std::size_t R = refs[(n / 3) % 2];
        std::vector<std::vector<float>> cols(R, std::vector<float>(D));
        std::vector<knn::SingerId> labels(R);
        for (std::size_t r = 0; r < R; ++r) {
            for (float& v : cols[r]) v = static_cast<float>(rng.normal());
            labels[r] = static_cast<knn::SingerId>(r % 4);
        }
        std::vector<float> q(D);
        for (float& v : q) v = static_cast<float>(rng.normal());
        const auto ref = knn::build_reference_matrix(cols, labels);
        auto scores = knn::knn_layer_scores(q, ref);
        if (sabotage) std::reverse(scores.begin(), scores.end());
        double qn = 0.0;
        for (float v : q) qn += double(v) * v;
        qn = std::sqrt(qn);
        for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{11}, R}) {
            std::vector<double> cosines;
            const auto want = oracle_top(q, cols, std::min(k, R), cosines);
            const auto got = knn::top_k(scores, k);
            if (got.indices != want) ++mismatches;
            for (std::size_t r = 0; r < R; ++r) worst = std::max(worst, std::abs(scores[r] / qn - cosines[r]));
        }
    }
    return {"knn-equivalence", mismatches == 0 && worst <= 1e-6,
            std::to_string(mismatches) + " top-k mismatches, max score gap " + fmt(worst) + " over " +
                std::to_string(instances) + " instances"};
}

CheckResult attention_contracts(int instances, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xA77));
    int bad = 0;
    double worst_sum = 0.0;
    for (int n = 0; n < instances; ++n) {
        const std::size_t N = 1 + rng.below(12), D = 1 + rng.below(8), A = 1 + rng.below(8);
        nn::AttentionParams<float> p{nn::Tensor({D, A}), nn::Tensor({D, A}), nn::Tensor({A})};
        for (auto* t : {&p.w_s, &p.w_h, &p.v})
            for (float& v : t->data()) v = static_cast<float>(rng.normal());
        nn::Tensor h({N, D});
        for (float& v : h.data()) v = static_cast<float>(3.0 * rng.normal());
        const auto cache = nn::attention_forward(h, p);
        double sum = 0.0;
        for (float a : cache.alpha) sum += a;
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        for (std::size_t d = 0; d < D; ++d) {
            float lo = h[d], hi = h[d];
            for (std::size_t j = 0; j < N; ++j) {
                lo = std::min(lo, h[j * D + d]);
                hi = std::max(hi, h[j * D + d]);
            }
            const float c = cache.pooled[d];
            const float slack = 1e-5f * std::max(1.0f, std::max(std::abs(lo), std::abs(hi)));
            if (c < lo - slack || c > hi + slack) ++bad;
        }
    }
    return {"attention-contracts", bad == 0 && worst_sum <= 1e-6,
            std::to_string(bad) + " pooled coordinates outside the row range, max |sum-1| " + fmt(worst_sum)};
}

CheckResult metric_oracle(int instances, std::uint64_t seed, bool sabotage) {
    int bad = 0;
    {
        eval::ConfusionMatrix cm({"a", "b"});
        cm.at(0, 0) = 8;
        cm.at(0, 1) = 2;
        cm.at(1, 0) = 3;
        cm.at(1, 1) = 7;
        const auto m = eval::metrics(cm);
        if (m.accuracy != 0.75 || std::abs(m.per_class[0].precision - 8.0 / 11.0) > 1e-12 ||
            std::abs(m.per_class[0].recall - 0.8) > 1e-12)
            ++bad;
    }
    Rng rng(mix_seed(seed, 0x3E7));
    for (int n = 0; n < instances; ++n) {
        const std::size_t C = 2 + rng.below(6);
        std::vector<std::string> names;
        for (std::size_t c = 0; c < C; ++c) names.push_back("c" + std::to_string(c));
        eval::ConfusionMatrix cm(names);
        for (auto& v : cm.counts) v = rng.below(4) == 0 ? 0 : rng.below(20);
        cm.at(0, 0) += 1;
        const auto m = eval::metrics(cm);
        double f1_sum = 0.0, p_sum = 0.0, r_sum = 0.0;
        std::uint64_t total = 0, diag = 0;
        for (std::size_t t = 0; t < C; ++t)
            for (std::size_t p = 0; p < C; ++p) {
                total += cm.at(t, p);
                if (t == p) diag += cm.at(t, p);
            }
        for (std::size_t c = 0; c < C; ++c) {
            std::uint64_t row = 0, col = 0;
            for (std::size_t j = 0; j < C; ++j) {
                row += cm.at(c, j);
                col += cm.at(j, c);
            }
            const double p = col ? double(cm.at(c, c)) / double(col) : 0.0;
            const double r = row ? double(cm.at(c, c)) / double(row) : 0.0;
            const double f = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
            if (std::abs(m.per_class[c].precision - p) > 1e-12 || std::abs(m.per_class[c].recall - r) > 1e-12 ||
                std::abs(m.per_class[c].f1 - f) > 1e-12)
                ++bad;
            p_sum += p;
            r_sum += r;
            f1_sum += f;
        }
        double expected_acc = double(diag) / double(total);
        if (sabotage) expected_acc += 0.01;
        if (m.correct != diag || m.total != total || m.accuracy != expected_acc ||
            std::abs(m.macro_f1 - f1_sum / C) > 1e-12 || std::abs(m.macro_precision - p_sum / C) > 1e-12 ||
            std::abs(m.macro_recall - r_sum / C) > 1e-12)
            ++bad;
    }
    return {"metric-oracle", bad == 0, std::to_string(bad) + " of " + std::to_string(instances + 1) + " matrices disagree"};
}

CheckResult stft_peak() {
    dsp::SpectrogramConfig cfg;
    const int bin = 64;
    const double f = bin * double(cfg.sample_rate) / cfg.fft_size;
    dsp::AudioClip clip{std::vector<float>(cfg.sample_rate), cfg.sample_rate};
    for (std::size_t i = 0; i < clip.samples.size(); ++i)
        clip.samples[i] = static_cast<float>(std::sin(2.0 * M_PI * f * double(i) / cfg.sample_rate));
    const auto spec = dsp::stft(clip, cfg);
    double worst = 1.0;
    bool argmax_ok = true;
    for (std::size_t r = 0; r < spec.rows; ++r) {
        const auto row = spec.row(r);
        const double total = std::accumulate(row.begin(), row.end(), 0.0);
        const double near = row[bin - 1] + row[bin] + row[bin + 1];
        worst = std::min(worst, near / total);
        argmax_ok = argmax_ok && std::max_element(row.begin(), row.end()) - row.begin() == bin;
    }
    return {"stft-peak", argmax_ok && worst >= 0.95, "min energy share near the tone bin " + fmt(worst)};
}

CheckResult split_integrity(std::uint64_t seed) {
    std::vector<eval::SongRecord> songs;
    for (int s = 0; s < 3; ++s)
        for (int j = 0; j < 70; ++j)
            songs.push_back({"s" + std::to_string(s) + "_" + std::to_string(j), "", "singer" + std::to_string(s),
                             "album" + std::to_string(j % 7), eval::Split::train});
    const auto m = eval::split_random(songs, {8, 1, 1}, seed);
    bool ok = m.records.size() == songs.size();
    for (const auto& singer : m.singers()) {
        int c[3] = {0, 0, 0};
        for (const auto& r : m.records)
            if (r.singer_id == singer) ++c[static_cast<int>(r.split)];
        ok = ok && c[0] == 56 && c[1] == 7 && c[2] == 7;
    }
    return {"split-integrity", ok, "8:1:1 on 70 songs per singer"};
}

} // namespace

std::vector<CheckResult> run_selfchecks(const SelfcheckOptions& o) {
    static const char* const kFaultable[] = {"metric-oracle", "knn-equivalence", "gradient-check"};
    if (!o.inject_fault.empty() &&
        std::none_of(std::begin(kFaultable), std::end(kFaultable), [&](const char* n) { return o.inject_fault == n; }))
        throw ConfigError("unknown fault '" + o.inject_fault + "'");
    const bool q = o.quick;
    auto fault = [&](const char* name) { return o.inject_fault == name; };
    std::vector<CheckResult> out;
    out.push_back(metric_oracle(q ? 10 : 50, o.seed, fault("metric-oracle")));
    out.push_back(attention_contracts(q ? 100 : 1000, o.seed));
    out.push_back(knn_equivalence(q ? 30 : 1000, o.seed, fault("knn-equivalence")));
    out.push_back(gradient_check(q ? 1 : 20, o.seed, fault("gradient-check")));
    if (!q) {
        out.push_back(stft_peak());
        out.push_back(split_integrity(o.seed));
    }
    return out;
}

} // namespace knnsid::check
