#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace knnsid::knn {

using SingerId = std::uint32_t;

/// K of the KNN head unless overridden.
inline constexpr std::size_t kDefaultK = 11;

/// D x R matrix of unit-norm columns, one per reference embedding, stored
/// column-major so each column is contiguous.
struct ReferenceMatrix {
    std::size_t dim = 0;
    std::vector<double> data;
    std::vector<SingerId> labels;
    bool norms_applied = false;

    std::size_t columns() const { return labels.size(); }
    std::span<const double> column(std::size_t r) const { return {data.data() + r * dim, dim}; }

    /// Rounds every entry to the nearest float, the precision of the on-disk
    /// format. After this, save/load is lossless.
    void round_to_storage_precision();
};

struct NeighborSet {
    std::vector<std::size_t> indices;
    std::vector<double> scores; // descending
    std::size_t k = 0;
};

/// (q . w) / (|q| |w|). Throws DegenerateVectorError on a zero-norm input.
double cosine_similarity(std::span<const double> q, std::span<const double> w);
double cosine_similarity(std::span<const float> q, std::span<const float> w);

/// Normalises each embedding into a column. `block_names`, when given, is
/// used to name an offending zero-norm embedding in the error.
ReferenceMatrix build_reference_matrix(std::span<const std::vector<float>> embeddings,
                                       std::span<const SingerId> labels,
                                       std::span<const std::string> block_names = {});

/// The KNN layer: a bias-free linear map with the reference matrix as
/// weights, so score_r = q . W[:, r] = |q| cos(q, w_r).
std::vector<double> knn_layer_scores(std::span<const float> q, const ReferenceMatrix& ref);

/// Scores B row-major queries at once; row b equals
/// knn_layer_scores(query b) bit for bit.
std::vector<double> knn_layer_scores_batch(std::span<const float> queries, std::size_t batch,
                                           const ReferenceMatrix& ref);

/// Indices of the k largest scores, descending, ties to the lower index.
NeighborSet top_k(std::span<const double> scores, std::size_t k);

/// Most frequent neighbor label; ties go to the larger summed similarity,
/// then to the smaller singer id.
SingerId vote(const NeighborSet& neighbors, const ReferenceMatrix& ref);

/// Per-singer k-means (k-means++ seeding) replacing each singer's columns
/// with at most `centroids_per_singer` renormalised centroids.
ReferenceMatrix compress_reference(const ReferenceMatrix& ref, std::size_t centroids_per_singer,
                                   std::uint64_t seed = 7);

// Reference file "TKNR": magic, version u32, D u32, R u32, R singer ids u32,
// then column-major f32 data.
inline constexpr std::uint32_t kReferenceFormatVersion = 1;

void save_reference(const std::filesystem::path& path, const ReferenceMatrix& ref);
ReferenceMatrix load_reference(const std::filesystem::path& path);

} // namespace knnsid::knn
