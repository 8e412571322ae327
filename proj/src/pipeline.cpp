#include "knnsid/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "knnsid/errors.hpp"
#include "knnsid/parallel.hpp"
#include "knnsid/random.hpp"

namespace knnsid::pipeline {

using nlohmann::json;

namespace {

constexpr std::uint32_t kFeatureDirVersion = 1;
constexpr std::uint32_t kCheckpointMetaVersion = 1;

json arch_to_json(const nn::ArchitectureConfig& a) {
    json pools = json::array();
    for (const auto& [t, f] : a.pools) pools.push_back({t, f});
    return {{"n_mels", a.n_mels},           {"block_frames", a.block_frames}, {"conv_channels", a.conv_channels},
            {"kernel", a.kernel},           {"pools", pools},                 {"gru_hidden", a.gru_hidden},
            {"attn_dim", a.attn_dim}};
}

nn::ArchitectureConfig arch_from_json(const json& j) {
    nn::ArchitectureConfig a;
    a.n_mels = j.at("n_mels").get<int>();
    a.block_frames = j.at("block_frames").get<int>();
    a.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    a.kernel = j.at("kernel").get<int>();
    a.pools.clear();
    for (const auto& p : j.at("pools")) a.pools.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    a.gru_hidden = j.at("gru_hidden").get<int>();
    a.attn_dim = j.at("attn_dim").get<int>();
    return a;
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw IoError("failed writing " + path.string());
}

void check_version(const json& meta, const char* key, std::uint32_t expected, const std::string& what) {
    const auto v = meta.at(key).get<std::uint32_t>();
    if (v != expected)
        throw VersionMismatchError(what + ": " + key + " " + std::to_string(v) + " not supported (expected " +
                                   std::to_string(expected) + ")");
}

struct Sample {
    nn::Tensor input;
    std::size_t label = 0;
};

std::vector<Sample> samples_for(const FeatureSet& data, eval::Split split) {
    std::vector<Sample> out;
    for (const auto& song : data.songs) {
        if (song.split != split) continue;
        const std::size_t label = data.class_of(song.singer_id);
        for (const auto& b : song.blocks) out.push_back({block_input(b), label});
    }
    return out;
}

std::size_t argmax(std::span<const float> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double block_accuracy(const nn::Network<float>& model, const std::vector<Sample>& samples) {
    if (samples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& s : samples) {
        const nn::Tensor logits = nn::forward_output(model, s.input, model.layers.size());
        if (argmax(logits.data()) == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

void accumulate(nn::Gradients<float>& into, const nn::Gradients<float>& g) {
    for (std::size_t l = 0; l < into.size(); ++l)
        for (std::size_t t = 0; t < into[l].size(); ++t)
            for (std::size_t k = 0; k < into[l][t].size(); ++k) into[l][t][k] += g[l][t][k];
}

void scale(nn::Gradients<float>& g, float s) {
    for (auto& layer : g)
        for (auto& t : layer)
            for (float& v : t.data()) v *= s;
}

bool same_neighbors(const knn::NeighborSet& a, const knn::NeighborSet& b) {
    return a.k == b.k && a.indices == b.indices && a.scores == b.scores;
}

} // namespace

// ---------------------------------------------------------------- features

std::size_t FeatureSet::class_of(const std::string& singer_id) const {
    const auto it = std::lower_bound(singers.begin(), singers.end(), singer_id);
    if (it == singers.end() || *it != singer_id) throw DatasetError("unknown singer '" + singer_id + "'");
    return static_cast<std::size_t>(it - singers.begin());
}

std::size_t FeatureSet::block_count(eval::Split split) const {
    std::size_t n = 0;
    for (const auto& s : songs)
        if (s.split == split) n += s.blocks.size();
    return n;
}

json config_to_json(const dsp::SpectrogramConfig& c) {
    return {{"sample_rate", c.sample_rate}, {"window_length", c.window_length}, {"hop_length", c.hop_length},
            {"fft_size", c.fft_size},       {"n_mels", c.n_mels},               {"f_min", c.f_min},
            {"f_max", c.f_max},             {"log_floor", c.log_floor}};
}

dsp::SpectrogramConfig config_from_json(const json& j) {
    dsp::SpectrogramConfig c;
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.window_length = j.value("window_length", c.window_length);
    c.hop_length = j.value("hop_length", c.hop_length);
    c.fft_size = j.value("fft_size", c.fft_size);
    c.n_mels = j.value("n_mels", c.n_mels);
    c.f_min = j.value("f_min", c.f_min);
    c.f_max = j.value("f_max", c.f_max);
    c.log_floor = j.value("log_floor", c.log_floor);
    c.validate();
    return c;
}

FeatureSet featurize_manifest(const eval::DatasetManifest& manifest, const std::filesystem::path& base_dir,
                              const dsp::SpectrogramConfig& cfg, unsigned jobs) {
    cfg.validate();
    FeatureSet fs;
    fs.config = cfg;
    fs.singers = manifest.singers();
    fs.songs.resize(manifest.records.size());
    parallel_for(manifest.records.size(), jobs, [&](std::size_t i) {
        const auto& rec = manifest.records[i];
        std::filesystem::path path = rec.path;
        if (path.is_relative()) path = base_dir / path;
        fs.songs[i] = {rec.song_id, rec.singer_id, rec.split, dsp::featurize_file(path, cfg, rec.song_id)};
    });
    return fs;
}

void write_feature_dir(const std::filesystem::path& dir, const FeatureSet& features) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (const auto& s : features.songs) dsp::write_feature_cache(dir / (s.song_id + ".tknn"), s.blocks);
    write_json_file(dir / "feature_config.json", {{"format_version", kFeatureDirVersion},
                                                  {"feature_cache_version", dsp::kFeatureCacheVersion},
                                                  {"config", config_to_json(features.config)}});
}

FeatureSet load_feature_dir(const std::filesystem::path& dir, const eval::DatasetManifest& manifest) {
    const json meta = read_json_file(dir / "feature_config.json");
    check_version(meta, "format_version", kFeatureDirVersion, "feature directory");
    check_version(meta, "feature_cache_version", dsp::kFeatureCacheVersion, "feature directory");
    FeatureSet fs;
    fs.config = config_from_json(meta.at("config"));
    fs.singers = manifest.singers();
    for (const auto& rec : manifest.records) {
        auto blocks = dsp::read_feature_cache(dir / (rec.song_id + ".tknn"), rec.song_id);
        for (const auto& b : blocks)
            if (b.n_mels != fs.config.n_mels)
                throw DatasetError("feature cache for '" + rec.song_id + "' has " + std::to_string(b.n_mels) +
                                   " mel bins, config says " + std::to_string(fs.config.n_mels));
        fs.songs.push_back({rec.song_id, rec.singer_id, rec.split, std::move(blocks)});
    }
    return fs;
}

nn::Tensor block_input(const dsp::MelBlock& block) {
    const std::size_t n = block.values.size();
    if (n != static_cast<std::size_t>(dsp::kBlockFrames) * static_cast<std::size_t>(block.n_mels) || n == 0)
        throw DimensionError("block_input: block must be 32 x n_mels");
    double mean = 0.0;
    for (float v : block.values) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : block.values) var += (v - mean) * (v - mean);
    const double inv_std = 1.0 / std::sqrt(var / static_cast<double>(n) + 1e-6);
    nn::Tensor t({1, static_cast<std::size_t>(dsp::kBlockFrames), static_cast<std::size_t>(block.n_mels)});
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<float>((block.values[i] - mean) * inv_std);
    return t;
}

// ---------------------------------------------------------------- stage 1

void TrainConfig::validate() const {
    if (max_epochs < 1) throw ConfigError("training: epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("training: batch size must be at least 1");
    if (patience < 1) throw ConfigError("training: patience must be at least 1");
    if (!(adam.lr > 0.0) || !(adam.eps > 0.0) || adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 ||
        adam.beta2 >= 1.0)
        throw ConfigError("training: invalid optimizer hyperparameters");
}

std::vector<float> TrainedExtractor::embed(const dsp::MelBlock& block) const {
    const nn::Tensor e = nn::forward_output(model, block_input(block), nn::embedding_layer(model) + 1);
    return {e.data().begin(), e.data().end()};
}

std::vector<float> TrainedExtractor::logits(const dsp::MelBlock& block) const {
    const nn::Tensor e = nn::forward_output(model, block_input(block), model.layers.size());
    return {e.data().begin(), e.data().end()};
}

std::size_t TrainedExtractor::embedding_dim() const {
    return static_cast<std::size_t>(model.layers[nn::embedding_layer(model)].spec.inputs);
}

TrainedExtractor train_stage1(const FeatureSet& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.singers.size() < 2) throw DatasetError("training needs at least two singers");
    for (const auto& singer : data.singers) {
        bool present = false;
        for (const auto& s : data.songs) present = present || (s.singer_id == singer && s.split == eval::Split::train && !s.blocks.empty());
        if (!present) throw DatasetError("singer '" + singer + "' has no training blocks");
    }
    const std::vector<Sample> train = samples_for(data, eval::Split::train);
    const std::vector<Sample> val = samples_for(data, eval::Split::val);
    if (val.empty()) throw DatasetError("training needs a non-empty validation split");

    TrainedExtractor out;
    out.singers = data.singers;
    out.features = data.config;
    out.arch = cfg.arch;
    out.arch.n_mels = data.config.n_mels;
    out.arch.block_frames = dsp::kBlockFrames;
    nn::Network<float> model = nn::build_attention_crnn(out.arch, static_cast<int>(data.singers.size()), cfg.seed);

    double loss0 = 0.0;
    for (const auto& s : train) loss0 += nn::loss_only(model, s.input, s.label);
    out.initial_loss = loss0 / static_cast<double>(train.size());

    Rng rng(mix_seed(cfg.seed, 0xBA7C4ull));
    nn::AdamState<float> state = nn::AdamState<float>::init(model);
    nn::Network<float> best = model;
    double best_acc = -1.0;
    int since_best = 0;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            nn::Gradients<float> grads = nn::zero_gradients(model);
            for (std::size_t i = start; i < stop; ++i) {
                const Sample& s = train[order[i]];
                auto lg = nn::loss_and_gradients(model, s.input, s.label);
                loss_sum += lg.loss;
                if (argmax(lg.probs.data()) == s.label) ++correct;
                accumulate(grads, lg.grads);
            }
            scale(grads, 1.0f / static_cast<float>(stop - start));
            nn::adam_step(model, grads, state, cfg.adam);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(train.size());
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
        rec.val_accuracy = block_accuracy(model, val);
        out.history.push_back(rec);
        if (cfg.on_epoch) cfg.on_epoch(epoch, rec.train_loss, rec.train_accuracy, rec.val_accuracy);
        if (rec.val_accuracy > best_acc) {
            best_acc = rec.val_accuracy;
            best = model;
            out.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    out.model = std::move(best);
    return out;
}

json history_to_json(const TrainedExtractor& e) {
    json epochs = json::array();
    for (const auto& h : e.history)
        epochs.push_back({{"epoch", h.epoch},
                          {"train_loss", h.train_loss},
                          {"train_accuracy", h.train_accuracy},
                          {"val_accuracy", h.val_accuracy}});
    return {{"initial_loss", e.initial_loss}, {"best_epoch", e.best_epoch}, {"epochs", std::move(epochs)}};
}

void save_checkpoint(const std::filesystem::path& path, const TrainedExtractor& e) {
    nn::save_model(path, e.model);
    json meta = {{"format_version", kCheckpointMetaVersion},
                 {"model_format_version", nn::kModelFormatVersion},
                 {"singers", e.singers},
                 {"feature_config", config_to_json(e.features)},
                 {"architecture", arch_to_json(e.arch)},
                 {"frozen", e.frozen},
                 {"seed", e.model.rng_seed},
                 {"history", history_to_json(e)}};
    write_json_file(path.string() + ".json", meta);
}

TrainedExtractor load_checkpoint(const std::filesystem::path& path) {
    const json meta = read_json_file(path.string() + ".json");
    check_version(meta, "format_version", kCheckpointMetaVersion, "checkpoint metadata");
    check_version(meta, "model_format_version", nn::kModelFormatVersion, "checkpoint metadata");
    TrainedExtractor e;
    e.model = nn::load_model(path);
    e.model.rng_seed = meta.value("seed", std::uint64_t{0});
    e.singers = meta.at("singers").get<std::vector<std::string>>();
    e.features = config_from_json(meta.at("feature_config"));
    e.arch = arch_from_json(meta.at("architecture"));
    e.frozen = meta.value("frozen", false);
    const json& h = meta.at("history");
    e.initial_loss = h.value("initial_loss", 0.0);
    e.best_epoch = h.value("best_epoch", 0);
    for (const auto& r : h.at("epochs"))
        e.history.push_back({r.at("epoch").get<int>(), r.at("train_loss").get<double>(),
                             r.at("train_accuracy").get<double>(), r.at("val_accuracy").get<double>()});
    return e;
}

// ---------------------------------------------------------------- stage 2

EmbeddedBlocks embed_split(const TrainedExtractor& extractor, const FeatureSet& data, eval::Split split,
                           unsigned jobs) {
    struct Ref {
        const dsp::MelBlock* block;
        knn::SingerId label;
    };
    std::vector<Ref> refs;
    for (const auto& song : data.songs) {
        if (song.split != split) continue;
        const auto label = static_cast<knn::SingerId>(data.class_of(song.singer_id));
        for (const auto& b : song.blocks) refs.push_back({&b, label});
    }
    EmbeddedBlocks out;
    out.embeddings.resize(refs.size());
    parallel_for(refs.size(), jobs, [&](std::size_t i) { out.embeddings[i] = extractor.embed(*refs[i].block); });
    for (const auto& r : refs) {
        out.labels.push_back(r.label);
        out.names.push_back(r.block->source_song + "#" + std::to_string(r.block->block_index));
    }
    return out;
}

KnnNet build_knn_net(TrainedExtractor extractor, const FeatureSet& data, std::size_t k, unsigned jobs) {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (!(extractor.features == data.config))
        throw ConfigError("feature config of the features (n_mels=" + std::to_string(data.config.n_mels) +
                          ", hop=" + std::to_string(data.config.hop_length) +
                          ") does not match the one the model was trained on (n_mels=" +
                          std::to_string(extractor.features.n_mels) +
                          ", hop=" + std::to_string(extractor.features.hop_length) + ")");
    if (extractor.singers != data.singers)
        throw DatasetError("singer set of the manifest differs from the one the model was trained on");
    for (auto& layer : extractor.model.layers) layer.frozen = true;
    extractor.frozen = true;

    EmbeddedBlocks train = embed_split(extractor, data, eval::Split::train, jobs);
    if (train.embeddings.empty()) throw DatasetError("no training blocks to build the reference matrix from");
    KnnNet net;
    net.head = knn::build_reference_matrix(train.embeddings, train.labels, train.names);
    net.head.round_to_storage_precision();
    net.extractor = std::move(extractor);
    net.k = k;
    return net;
}

BlockPrediction predict_block(const KnnNet& net, const dsp::MelBlock& block) {
    const std::vector<float> q = net.extractor.embed(block);
    std::vector<double> scores;
    try {
        scores = knn::knn_layer_scores(q, net.head);
    } catch (const DegenerateVectorError&) {
        throw DegenerateVectorError("block " + block.source_song + "#" + std::to_string(block.block_index) +
                                    " produced a zero-norm embedding");
    }
    double qn = 0.0;
    for (float v : q) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    BlockPrediction p;
    p.neighbors = knn::top_k(scores, net.k);
    for (double& s : p.neighbors.scores) s /= qn;
    p.singer = knn::vote(p.neighbors, net.head);
    return p;
}

knn::SingerId vote_blocks(std::span<const knn::SingerId> labels, std::span<const double> confidence) {
    if (labels.empty()) throw ContractError("vote_blocks: no block predictions");
    if (confidence.size() != labels.size()) throw ContractError("vote_blocks: one confidence per block required");
    std::map<knn::SingerId, std::pair<std::size_t, double>> tally;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[labels[i]];
        ++t.first;
        t.second += confidence[i];
    }
    auto best = tally.begin();
    for (auto it = std::next(tally.begin()); it != tally.end(); ++it)
        if (it->second.first > best->second.first ||
            (it->second.first == best->second.first && it->second.second > best->second.second))
            best = it;
    return best->first;
}

bool Prediction::operator==(const Prediction& o) const {
    if (song_id != o.song_id || predicted != o.predicted || block_predictions != o.block_predictions ||
        block_confidence != o.block_confidence || block_neighbors.size() != o.block_neighbors.size())
        return false;
    for (std::size_t i = 0; i < block_neighbors.size(); ++i)
        if (!same_neighbors(block_neighbors[i], o.block_neighbors[i])) return false;
    return true;
}

Prediction predict_song(const KnnNet& net, std::span<const dsp::MelBlock> blocks, const std::string& song_id) {
    if (blocks.empty()) throw ContractError("predict_song: song '" + song_id + "' has no blocks");
    Prediction p;
    p.song_id = song_id;
    for (const auto& b : blocks) {
        BlockPrediction bp = predict_block(net, b);
        p.block_predictions.push_back(bp.singer);
        // Top-1 similarity among neighbors that voted for the winning label.
        double conf = 0.0;
        for (std::size_t i = 0; i < bp.neighbors.indices.size(); ++i)
            if (net.head.labels[bp.neighbors.indices[i]] == bp.singer) {
                conf = bp.neighbors.scores[i];
                break;
            }
        p.block_confidence.push_back(conf);
        p.block_neighbors.push_back(std::move(bp.neighbors));
    }
    p.predicted = vote_blocks(p.block_predictions, p.block_confidence);
    return p;
}

Prediction predict_song_softmax(const TrainedExtractor& extractor, std::span<const dsp::MelBlock> blocks,
                                const std::string& song_id) {
    if (blocks.empty()) throw ContractError("predict_song_softmax: song '" + song_id + "' has no blocks");
    Prediction p;
    p.song_id = song_id;
    for (const auto& b : blocks) {
        const std::vector<float> logits = extractor.logits(b);
        const nn::Tensor probs = nn::softmax(nn::Tensor({logits.size()}, logits));
        const std::size_t best = argmax(probs.data());
        p.block_predictions.push_back(static_cast<knn::SingerId>(best));
        p.block_confidence.push_back(probs[best]);
    }
    p.predicted = vote_blocks(p.block_predictions, p.block_confidence);
    return p;
}

void save_bundle(const std::filesystem::path& dir, const KnnNet& net) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    nn::save_model(dir / "model.tknm", net.extractor.model);
    knn::save_reference(dir / "reference.tknr", net.head);
    json meta = {{"format_version", kBundleFormatVersion},
                 {"model_format_version", nn::kModelFormatVersion},
                 {"reference_format_version", knn::kReferenceFormatVersion},
                 {"k", net.k},
                 {"feature_config", config_to_json(net.extractor.features)},
                 {"architecture", arch_to_json(net.extractor.arch)},
                 {"singers", net.extractor.singers},
                 {"embedding_dim", net.head.dim},
                 {"reference_columns", net.head.columns()},
                 {"seed", net.extractor.model.rng_seed},
                 {"history", history_to_json(net.extractor)}};
    write_json_file(dir / "meta.json", meta);
}

KnnNet load_bundle(const std::filesystem::path& dir) {
    const json meta = read_json_file(dir / "meta.json");
    check_version(meta, "format_version", kBundleFormatVersion, "bundle");
    check_version(meta, "model_format_version", nn::kModelFormatVersion, "bundle");
    check_version(meta, "reference_format_version", knn::kReferenceFormatVersion, "bundle");
    KnnNet net;
    net.k = meta.at("k").get<std::size_t>();
    if (net.k == 0) throw FormatError("bundle: k must be at least 1");
    TrainedExtractor& e = net.extractor;
    e.model = nn::load_model(dir / "model.tknm");
    e.model.rng_seed = meta.value("seed", std::uint64_t{0});
    e.features = config_from_json(meta.at("feature_config"));
    e.arch = arch_from_json(meta.at("architecture"));
    e.singers = meta.at("singers").get<std::vector<std::string>>();
    e.frozen = true;
    net.head = knn::load_reference(dir / "reference.tknr");
    if (net.head.dim != e.embedding_dim())
        throw FormatError("bundle: reference dimension " + std::to_string(net.head.dim) +
                          " does not match embedding dimension " + std::to_string(e.embedding_dim()));
    for (auto id : net.head.labels)
        if (id >= e.singers.size()) throw FormatError("bundle: reference label " + std::to_string(id) + " out of range");
    return net;
}

} // namespace knnsid::pipeline
