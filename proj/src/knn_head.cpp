#include "knnsid/knn_head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "knnsid/binary_io.hpp"
#include "knnsid/errors.hpp"
#include "knnsid/random.hpp"

namespace knnsid::knn {

namespace {

template <class A, class B>
double dot(std::span<const A> a, std::span<const B> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

template <class A>
double norm(std::span<const A> a) {
    return std::sqrt(dot(a, a));
}

template <class A, class B>
double cosine(std::span<const A> q, std::span<const B> w) {
    if (q.size() != w.size())
        throw DimensionError("cosine_similarity: dimensions " + std::to_string(q.size()) + " and " +
                             std::to_string(w.size()) + " differ");
    const double nq = norm(q);
    const double nw = norm(w);
    if (nq == 0.0 || nw == 0.0) throw DegenerateVectorError("cosine_similarity: zero-norm vector");
    return std::clamp(dot(q, w) / (nq * nw), -1.0, 1.0);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

void check_query(std::span<const float> q, const ReferenceMatrix& ref) {
    if (!ref.norms_applied) throw ContractError("knn_layer_scores: reference columns are not normalised");
    if (q.size() != ref.dim)
        throw DimensionError("knn_layer_scores: query has dimension " + std::to_string(q.size()) +
                             ", reference matrix has " + std::to_string(ref.dim));
}

/// k-means over unit vectors of one singer. Returns centroid means.
std::vector<std::vector<double>> kmeans(const std::vector<std::span<const double>>& points, std::size_t k,
                                        std::uint64_t seed) {
    const std::size_t dim = points.front().size();
    Rng rng(seed);
    std::vector<std::vector<double>> centroids;
    {
        const auto& first = points[rng.below(points.size())];
        centroids.emplace_back(first.begin(), first.end());
    }
    std::vector<double> d2(points.size());
    while (centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) best = std::min(best, squared_distance(points[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) break; // fewer distinct points than k
        double target = rng.uniform() * total;
        std::size_t pick = points.size() - 1;
        for (std::size_t i = 0; i < points.size(); ++i) {
            target -= d2[i];
            if (target < 0.0 && d2[i] > 0.0) {
                pick = i;
                break;
            }
        }
        centroids.emplace_back(points[pick].begin(), points[pick].end());
    }

    std::vector<std::size_t> assign(points.size(), 0);
    for (int iter = 0; iter < 50; ++iter) {
        for (std::size_t i = 0; i < points.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < centroids.size(); ++c) {
                const double d = squared_distance(points[i], centroids[c]);
                if (d < best) {
                    best = d;
                    assign[i] = c;
                }
            }
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < centroids.size(); ++c) {
            std::vector<double> mean(dim, 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < points.size(); ++i) {
                if (assign[i] != c) continue;
                for (std::size_t d = 0; d < dim; ++d) mean[d] += points[i][d];
                ++count;
            }
            if (count == 0) continue; // empty cluster keeps its position
            for (double& m : mean) m /= static_cast<double>(count);
            shift = std::max(shift, std::sqrt(squared_distance(mean, centroids[c])));
            centroids[c] = std::move(mean);
        }
        if (shift < 1e-6) break;
    }

    // Only non-empty clusters survive.
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < centroids.size(); ++c)
        if (std::find(assign.begin(), assign.end(), c) != assign.end()) out.push_back(centroids[c]);
    return out;
}

} // namespace

void ReferenceMatrix::round_to_storage_precision() {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
}

double cosine_similarity(std::span<const double> q, std::span<const double> w) { return cosine(q, w); }
double cosine_similarity(std::span<const float> q, std::span<const float> w) { return cosine(q, w); }

ReferenceMatrix build_reference_matrix(std::span<const std::vector<float>> embeddings,
                                       std::span<const SingerId> labels,
                                       std::span<const std::string> block_names) {
    if (embeddings.empty()) throw ContractError("build_reference_matrix: no embeddings");
    if (labels.size() != embeddings.size())
        throw ContractError("build_reference_matrix: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(embeddings.size()) + " embeddings");
    ReferenceMatrix ref;
    ref.dim = embeddings.front().size();
    if (ref.dim == 0) throw DimensionError("build_reference_matrix: zero-dimensional embeddings");
    ref.data.resize(ref.dim * embeddings.size());
    ref.labels.assign(labels.begin(), labels.end());
    for (std::size_t r = 0; r < embeddings.size(); ++r) {
        const auto& e = embeddings[r];
        if (e.size() != ref.dim)
            throw DimensionError("build_reference_matrix: embedding " + std::to_string(r) + " has dimension " +
                                 std::to_string(e.size()) + ", expected " + std::to_string(ref.dim));
        const double n = norm(std::span<const float>(e));
        if (!(n > 0.0) || !std::isfinite(n)) {
            const std::string name = r < block_names.size() ? block_names[r] : "#" + std::to_string(r);
            throw DegenerateVectorError("build_reference_matrix: training block " + name +
                                        " has a zero-norm or non-finite embedding");
        }
        for (std::size_t d = 0; d < ref.dim; ++d) ref.data[r * ref.dim + d] = e[d] / n;
    }
    ref.norms_applied = true;
    return ref;
}

std::vector<double> knn_layer_scores(std::span<const float> q, const ReferenceMatrix& ref) {
    check_query(q, ref);
    if (norm(q) == 0.0) throw DegenerateVectorError("knn_layer_scores: zero-norm query");
    std::vector<double> scores(ref.columns());
    for (std::size_t r = 0; r < scores.size(); ++r) scores[r] = dot(q, ref.column(r));
    return scores;
}

std::vector<double> knn_layer_scores_batch(std::span<const float> queries, std::size_t batch,
                                           const ReferenceMatrix& ref) {
    if (queries.size() != batch * ref.dim)
        throw DimensionError("knn_layer_scores_batch: " + std::to_string(queries.size()) + " values for " +
                             std::to_string(batch) + " queries of dimension " + std::to_string(ref.dim));
    std::vector<double> out(batch * ref.columns());
    for (std::size_t b = 0; b < batch; ++b) {
        const auto q = queries.subspan(b * ref.dim, ref.dim);
        check_query(q, ref);
        if (norm(q) == 0.0)
            throw DegenerateVectorError("knn_layer_scores_batch: zero-norm query " + std::to_string(b));
    }
    // Column-outer order keeps each reference column hot across the batch.
    for (std::size_t r = 0; r < ref.columns(); ++r) {
        const auto w = ref.column(r);
        for (std::size_t b = 0; b < batch; ++b) out[b * ref.columns() + r] = dot(queries.subspan(b * ref.dim, ref.dim), w);
    }
    return out;
}

NeighborSet top_k(std::span<const double> scores, std::size_t k) {
    if (k == 0) throw ContractError("top_k: k must be at least 1");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(k, scores.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    NeighborSet n;
    n.k = k;
    n.indices.assign(order.begin(), order.begin() + static_cast<long>(take));
    for (std::size_t i : n.indices) n.scores.push_back(scores[i]);
    return n;
}

SingerId vote(const NeighborSet& neighbors, const ReferenceMatrix& ref) {
    if (neighbors.indices.empty()) throw ContractError("vote: empty neighbor set");
    struct Tally {
        std::size_t count = 0;
        double similarity = 0.0;
    };
    std::map<SingerId, Tally> tally;
    for (std::size_t i = 0; i < neighbors.indices.size(); ++i) {
        const std::size_t col = neighbors.indices[i];
        if (col >= ref.columns()) throw ContractError("vote: neighbor index out of range");
        Tally& t = tally[ref.labels[col]];
        ++t.count;
        t.similarity += neighbors.scores[i];
    }
    // std::map iterates ids ascending, so strict comparisons keep the
    // smaller id on a full tie.
    auto best = tally.begin();
    for (auto it = std::next(tally.begin()); it != tally.end(); ++it) {
        if (it->second.count > best->second.count ||
            (it->second.count == best->second.count && it->second.similarity > best->second.similarity))
            best = it;
    }
    return best->first;
}

ReferenceMatrix compress_reference(const ReferenceMatrix& ref, std::size_t centroids_per_singer, std::uint64_t seed) {
    if (centroids_per_singer == 0) throw ContractError("compress_reference: centroids_per_singer must be >= 1");
    if (!ref.norms_applied) throw ContractError("compress_reference: reference columns are not normalised");
    std::map<SingerId, std::vector<std::span<const double>>> by_singer;
    for (std::size_t r = 0; r < ref.columns(); ++r) by_singer[ref.labels[r]].push_back(ref.column(r));
    if (by_singer.empty()) throw ContractError("compress_reference: empty reference matrix");

    ReferenceMatrix out;
    out.dim = ref.dim;
    for (const auto& [singer, points] : by_singer) {
        if (points.empty()) throw ContractError("compress_reference: singer " + std::to_string(singer) + " has no columns");
        const std::size_t k = std::min(centroids_per_singer, points.size());
        for (const auto& c : kmeans(points, k, mix_seed(seed, singer))) {
            const double n = norm(std::span<const double>(c));
            if (!(n > 0.0))
                throw DegenerateVectorError("compress_reference: centroid of singer " + std::to_string(singer) +
                                            " has zero norm");
            for (double v : c) out.data.push_back(v / n);
            out.labels.push_back(singer);
        }
    }
    out.norms_applied = true;
    return out;
}

void save_reference(const std::filesystem::path& path, const ReferenceMatrix& ref) {
    if (!ref.norms_applied) throw ContractError("save_reference: reference columns are not normalised");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write reference file " + path.string());
    io::write_magic(os, "TKNR");
    io::write_u32(os, kReferenceFormatVersion);
    io::write_u32(os, static_cast<std::uint32_t>(ref.dim));
    io::write_u32(os, static_cast<std::uint32_t>(ref.columns()));
    for (SingerId id : ref.labels) io::write_u32(os, id);
    for (double v : ref.data) io::write_f32(os, static_cast<float>(v));
    if (!os) throw IoError("failed writing " + path.string());
}

ReferenceMatrix load_reference(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open reference file " + path.string());
    io::Reader r(is);
    r.expect_magic("TKNR", "reference file");
    r.expect_version(kReferenceFormatVersion, "reference file");
    ReferenceMatrix ref;
    ref.dim = r.u32("reference header");
    const std::uint32_t n_cols = r.u32("reference header");
    if (ref.dim == 0 || n_cols == 0 || std::uint64_t{ref.dim} * n_cols > (std::uint64_t{1} << 28))
        throw FormatError("reference file: implausible size " + std::to_string(ref.dim) + " x " + std::to_string(n_cols));
    ref.labels.resize(n_cols);
    for (auto& id : ref.labels) id = r.u32("reference labels");
    ref.data.resize(ref.dim * n_cols);
    for (std::size_t c = 0; c < n_cols; ++c) {
        const std::string where = "reference column " + std::to_string(c);
        for (std::size_t d = 0; d < ref.dim; ++d) ref.data[c * ref.dim + d] = r.f32(where);
        if (std::abs(norm(ref.column(c)) - 1.0) > 1e-5) throw FormatError(where + " is not unit norm");
    }
    ref.norms_applied = true;
    return ref;
}

} // namespace knnsid::knn
