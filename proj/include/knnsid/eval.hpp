#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace knnsid::eval {

enum class Split { train, val, test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct SongRecord {
    std::string song_id;
    std::string path;
    std::string singer_id;
    std::optional<std::string> album_id;
    Split split = Split::train;

    bool operator==(const SongRecord&) const = default;
};

struct DatasetManifest {
    std::vector<SongRecord> records;

    /// Sorted distinct singer ids; a singer's position is its class index.
    std::vector<std::string> singers() const;
    std::vector<SongRecord> in_split(Split split) const;

    /// Throws DatasetError on duplicate song ids or a singer absent from train.
    void validate() const;
};

/// JSON lines: {"song_id", "path", "singer_id", "album_id"?, "split"}.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Per-singer stratified split. The validation and test shares are rounded
/// and kept at one song minimum; train takes the remainder. Output records
/// are sorted by song id.
DatasetManifest split_random(std::vector<SongRecord> songs, std::array<int, 3> ratio = {8, 1, 1},
                             std::uint64_t seed = 7);

/// Per singer, `train_albums` seeded-random albums go to train; of the rest,
/// the lexicographically first album goes to validation, the others to test.
DatasetManifest split_by_album(std::vector<SongRecord> songs, int train_albums = 4, std::uint64_t seed = 7);

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
    std::vector<std::string> classes;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::vector<std::string> class_names = {});

    std::size_t size() const { return classes.size(); }
    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * size() + p]; }
    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * size() + p]; }
    std::uint64_t total() const;
    std::uint64_t trace() const;
    std::uint64_t row_sum(std::size_t t) const;
    std::uint64_t col_sum(std::size_t p) const;

    /// Elementwise sum, for combining partial results from workers.
    void merge(const ConfusionMatrix& other);
};

ConfusionMatrix confusion(const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                          std::vector<std::string> class_names);

struct ClassMetrics {
    std::string name;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::uint64_t support = 0;
    bool precision_undefined = false; // class never predicted
    bool recall_undefined = false;    // class never occurs
};

struct MetricReport {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::uint64_t correct = 0;
    std::uint64_t total = 0;
    std::vector<ClassMetrics> per_class;
};

/// Zero-denominator classes contribute 0 and are flagged.
MetricReport metrics(const ConfusionMatrix& cm);

nlohmann::json report_to_json(const MetricReport& report, const ConfusionMatrix& cm, const std::string& level);
MetricReport report_from_json(const nlohmann::json& j);
std::string report_to_text(const MetricReport& report, const std::string& level);
std::string confusion_to_csv(const ConfusionMatrix& cm);

} // namespace knnsid::eval
