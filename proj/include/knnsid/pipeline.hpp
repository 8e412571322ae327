#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnsid/eval.hpp"
#include "knnsid/features.hpp"
#include "knnsid/knn_head.hpp"
#include "knnsid/network.hpp"

namespace knnsid::pipeline {

struct SongFeatures {
    std::string song_id;
    std::string singer_id;
    eval::Split split = eval::Split::train;
    std::vector<dsp::MelBlock> blocks;
};

/// Cached features for every song of a manifest.
struct FeatureSet {
    dsp::SpectrogramConfig config;
    std::vector<std::string> singers; // class index -> singer id
    std::vector<SongFeatures> songs;

    std::size_t class_of(const std::string& singer_id) const;
    std::size_t block_count(eval::Split split) const;
};

/// Featurises every record; relative paths resolve against `base_dir`.
/// Songs shorter than one block keep an empty block list.
FeatureSet featurize_manifest(const eval::DatasetManifest& manifest, const std::filesystem::path& base_dir,
                              const dsp::SpectrogramConfig& cfg, unsigned jobs = 1);

/// One "<song_id>.tknn" per song plus feature_config.json.
void write_feature_dir(const std::filesystem::path& dir, const FeatureSet& features);
FeatureSet load_feature_dir(const std::filesystem::path& dir, const eval::DatasetManifest& manifest);

nlohmann::json config_to_json(const dsp::SpectrogramConfig& cfg);
dsp::SpectrogramConfig config_from_json(const nlohmann::json& j);

/// Network input for a block: [1, 32, n_mels], standardised to zero mean and
/// unit variance over the block.
nn::Tensor block_input(const dsp::MelBlock& block);

struct TrainConfig {
    nn::ArchitectureConfig arch;
    nn::AdamConfig adam;
    int max_epochs = 30;
    int batch_size = 16;
    int patience = 5;
    std::uint64_t seed = 7;
    /// Called after every epoch; may be empty.
    std::function<void(int epoch, double loss, double train_acc, double val_acc)> on_epoch;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

/// Attention-CRNN with its softmax head, plus training metadata.
struct TrainedExtractor {
    nn::Network<float> model;
    std::vector<std::string> singers;
    dsp::SpectrogramConfig features;
    nn::ArchitectureConfig arch;
    std::vector<EpochRecord> history;
    double initial_loss = 0.0;
    int best_epoch = 0;
    bool frozen = false;

    /// Attention output for one block.
    std::vector<float> embed(const dsp::MelBlock& block) const;
    std::vector<float> logits(const dsp::MelBlock& block) const;
    std::size_t embedding_dim() const;
};

/// Stage 1: trains extractor + softmax head on the train split and keeps the
/// checkpoint with the best validation block accuracy.
TrainedExtractor train_stage1(const FeatureSet& data, const TrainConfig& cfg);

/// Stage-1 checkpoint: model file plus "<path>.json" metadata.
void save_checkpoint(const std::filesystem::path& path, const TrainedExtractor& extractor);
TrainedExtractor load_checkpoint(const std::filesystem::path& path);
nlohmann::json history_to_json(const TrainedExtractor& extractor);

struct KnnNet {
    TrainedExtractor extractor;
    knn::ReferenceMatrix head;
    std::size_t k = knn::kDefaultK;
};

/// Stage 2: freezes the extractor and builds the reference matrix from every
/// train-split block embedding. No weights change.
KnnNet build_knn_net(TrainedExtractor extractor, const FeatureSet& data, std::size_t k = knn::kDefaultK,
                     unsigned jobs = 1);

/// Embeddings and labels of every train-split block, in reference order.
struct EmbeddedBlocks {
    std::vector<std::vector<float>> embeddings;
    std::vector<knn::SingerId> labels;
    std::vector<std::string> names;
};
EmbeddedBlocks embed_split(const TrainedExtractor& extractor, const FeatureSet& data, eval::Split split,
                           unsigned jobs = 1);

struct BlockPrediction {
    knn::SingerId singer = 0;
    knn::NeighborSet neighbors; // scores rescaled to cosine similarity
};

BlockPrediction predict_block(const KnnNet& net, const dsp::MelBlock& block);

struct Prediction {
    std::string song_id;
    knn::SingerId predicted = 0;
    std::vector<knn::SingerId> block_predictions;
    /// Similarity backing each block vote (best cosine among the winning neighbors, or top
    /// probability for the softmax head).
    std::vector<double> block_confidence;
    std::vector<knn::NeighborSet> block_neighbors;

    bool operator==(const Prediction& other) const;
};

/// Most frequent block label; ties go to the larger summed confidence, then
/// to the smaller singer id.
knn::SingerId vote_blocks(std::span<const knn::SingerId> labels, std::span<const double> confidence);

Prediction predict_song(const KnnNet& net, std::span<const dsp::MelBlock> blocks, const std::string& song_id = {});

/// The stage-1 softmax head applied to the same embeddings, for comparison.
Prediction predict_song_softmax(const TrainedExtractor& extractor, std::span<const dsp::MelBlock> blocks,
                                const std::string& song_id = {});

inline constexpr std::uint32_t kBundleFormatVersion = 1;

/// Directory with model.tknm, reference.tknr and meta.json.
void save_bundle(const std::filesystem::path& dir, const KnnNet& net);
KnnNet load_bundle(const std::filesystem::path& dir);

} // namespace knnsid::pipeline
