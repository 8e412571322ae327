#include "knnsid/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "knnsid/errors.hpp"
#include "knnsid/eval.hpp"
#include "knnsid/parallel.hpp"
#include "knnsid/pipeline.hpp"
#include "knnsid/selfcheck.hpp"
#include "knnsid/synth.hpp"

namespace knnsid::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint32_t kReportFormatVersion = 1;

// Values from --config; flags override them one by one.
struct RunConfig {
    std::uint64_t seed = 7;
    unsigned jobs = 1;
    std::size_t k = knn::kDefaultK;
    std::size_t centroids = 0;
    dsp::SpectrogramConfig features;
    bool features_given = false;
    int epochs = 30;
    int batch_size = 16;
    int patience = 5;
    double lr = 1e-3;
    int singers = 8;
    int songs = 20;
    double duration = 6.0;
};

template <class T>
T take(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config: bad value for '") + key + "'");
    }
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (const auto& [k, v] : j.items())
        if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; }))
            throw ConfigError("config: unknown key '" + k + "' in " + where);
}

RunConfig load_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path + ": expected a JSON object");
    reject_unknown(j, {"seed", "jobs", "k", "centroids", "features", "training", "synth"}, "top level");
    c.seed = take(j, "seed", c.seed);
    c.jobs = take(j, "jobs", c.jobs);
    c.k = take(j, "k", c.k);
    c.centroids = take(j, "centroids", c.centroids);
    if (j.contains("features")) {
        reject_unknown(j["features"], {"sample_rate", "window_length", "hop_length", "fft_size", "n_mels", "f_min",
                                       "f_max", "log_floor"},
                       "features");
        c.features = pipeline::config_from_json(j["features"]);
        c.features_given = true;
    }
    if (j.contains("training")) {
        const json& t = j["training"];
        reject_unknown(t, {"epochs", "batch_size", "patience", "lr"}, "training");
        c.epochs = take(t, "epochs", c.epochs);
        c.batch_size = take(t, "batch_size", c.batch_size);
        c.patience = take(t, "patience", c.patience);
        c.lr = take(t, "lr", c.lr);
    }
    if (j.contains("synth")) {
        const json& s = j["synth"];
        reject_unknown(s, {"singers", "songs", "duration"}, "synth");
        c.singers = take(s, "singers", c.singers);
        c.songs = take(s, "songs", c.songs);
        c.duration = take(s, "duration", c.duration);
    }
    return c;
}

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> jobs;
    std::string out;

    RunConfig resolve() const {
        RunConfig c = load_config(config);
        if (seed) c.seed = *seed;
        if (jobs) c.jobs = *jobs;
        if (c.jobs == 0) throw ConfigError("--jobs must be at least 1");
        return c;
    }
};

void add_common(CLI::App* cmd, Common& c, bool out_required, const std::string& out_help) {
    cmd->add_option("--config", c.config, "JSON run configuration; flags take precedence");
    cmd->add_option("--seed", c.seed, "Master seed");
    cmd->add_option("--jobs", c.jobs, "Worker threads");
    auto* o = cmd->add_option("--out", c.out, out_help);
    if (out_required) o->required();
}

template <class T>
void override(T& slot, const std::optional<T>& flag) {
    if (flag) slot = *flag;
}

fs::path manifest_dir(const std::string& manifest) {
    return fs::absolute(fs::path(manifest)).parent_path();
}

pipeline::FeatureSet features_for(const eval::DatasetManifest& manifest, const std::string& manifest_path,
                                  const std::string& feature_dir, const dsp::SpectrogramConfig& cfg,
                                  unsigned jobs) {
    if (feature_dir.empty()) return pipeline::featurize_manifest(manifest, manifest_dir(manifest_path), cfg, jobs);
    auto set = pipeline::load_feature_dir(feature_dir, manifest);
    if (!(set.config == cfg))
        throw ConfigError("feature cache " + feature_dir + " was computed with a different feature config (n_mels=" +
                          std::to_string(set.config.n_mels) + ", hop=" + std::to_string(set.config.hop_length) +
                          "), expected n_mels=" + std::to_string(cfg.n_mels) +
                          ", hop=" + std::to_string(cfg.hop_length));
    return set;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
    Common common;
    std::optional<int> singers, songs;
    std::optional<double> duration;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
    RunConfig c = a.common.resolve();
    override(c.singers, a.singers);
    override(c.songs, a.songs);
    override(c.duration, a.duration);
    if (c.singers < 2) throw ConfigError("--singers must be at least 2");
    if (c.songs < 3) throw ConfigError("--songs must be at least 3 for an 8:1:1 split");
    if (c.duration < 2.0) throw ConfigError("--duration must be at least 2 seconds");
    synth::generate_corpus(c.singers, c.songs, c.duration, c.seed, a.common.out, c.jobs);
    out << (fs::path(a.common.out) / "manifest.jsonl").string() << '\n';
    return kOk;
}

// -------------------------------------------------------------- featurize

struct FeaturizeArgs {
    Common common;
    std::string manifest;
};

int cmd_featurize(const FeaturizeArgs& a, std::ostream& out) {
    const RunConfig c = a.common.resolve();
    const auto manifest = eval::read_manifest(a.manifest);
    const auto set = pipeline::featurize_manifest(manifest, manifest_dir(a.manifest), c.features, c.jobs);
    pipeline::write_feature_dir(a.common.out, set);
    std::size_t blocks = 0;
    for (const auto& s : set.songs) blocks += s.blocks.size();
    out << set.songs.size() << " songs, " << blocks << " blocks -> " << a.common.out << '\n';
    return kOk;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
    Common common;
    std::string manifest, features;
    std::optional<int> epochs, batch_size, patience;
    std::optional<double> lr;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig c = a.common.resolve();
    override(c.epochs, a.epochs);
    override(c.batch_size, a.batch_size);
    override(c.patience, a.patience);
    override(c.lr, a.lr);
    pipeline::TrainConfig tc;
    tc.max_epochs = c.epochs;
    tc.batch_size = c.batch_size;
    tc.patience = c.patience;
    tc.adam.lr = c.lr;
    tc.seed = c.seed;
    tc.validate();

    const auto manifest = eval::read_manifest(a.manifest);
    manifest.validate();
    if (manifest.in_split(eval::Split::val).empty()) throw DatasetError("manifest has no validation split");
    auto data = features_for(manifest, a.manifest, a.features, c.features, c.jobs);
    if (!a.quiet)
        tc.on_epoch = [&out](int epoch, double loss, double tr, double va) {
            out << "epoch " << epoch << "  loss " << loss << "  train_acc " << tr << "  val_acc " << va << '\n';
        };
    const auto extractor = pipeline::train_stage1(data, tc);
    const fs::path path = a.common.out;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    pipeline::save_checkpoint(path, extractor);
    write_text(path.string() + ".history.json", pipeline::history_to_json(extractor).dump(2) + "\n");
    out << "best epoch " << extractor.best_epoch << ", checkpoint " << path.string() << '\n';
    return kOk;
}

// -------------------------------------------------------------- build-ref

struct BuildRefArgs {
    Common common;
    std::string checkpoint, manifest, features;
    std::optional<std::size_t> k, centroids;
};

int cmd_build_ref(const BuildRefArgs& a, std::ostream& out) {
    RunConfig c = a.common.resolve();
    override(c.k, a.k);
    override(c.centroids, a.centroids);
    if (c.k == 0) throw ConfigError("--k must be at least 1");
    auto extractor = pipeline::load_checkpoint(a.checkpoint);
    if (c.features_given && !(c.features == extractor.features))
        throw ConfigError("feature config in " + a.common.config + " differs from the one the checkpoint was trained with");
    const auto manifest = eval::read_manifest(a.manifest);
    auto data = features_for(manifest, a.manifest, a.features, extractor.features, c.jobs);
    auto net = pipeline::build_knn_net(std::move(extractor), data, c.k, c.jobs);
    const std::size_t full = net.head.columns();
    if (c.centroids > 0) {
        net.head = knn::compress_reference(net.head, c.centroids, c.seed);
        net.head.round_to_storage_precision();
    }
    pipeline::save_bundle(a.common.out, net);
    out << "reference " << net.head.columns() << " columns";
    if (c.centroids > 0) out << " (from " << full << ")";
    out << ", k " << net.k << " -> " << a.common.out << '\n';
    return kOk;
}

// ---------------------------------------------------------------- predict

struct SongInput {
    std::string song_id;
    std::optional<std::string> truth;
    fs::path path;
    std::vector<dsp::MelBlock> blocks;
};

std::vector<SongInput> gather_inputs(const std::string& manifest_path, const std::string& split,
                                     const std::vector<std::string>& wavs, const dsp::SpectrogramConfig& cfg,
                                     unsigned jobs, std::ostream& err) {
    std::vector<SongInput> songs;
    if (!manifest_path.empty()) {
        const auto manifest = eval::read_manifest(manifest_path);
        const fs::path base = manifest_dir(manifest_path);
        const std::optional<eval::Split> want =
            split == "all" ? std::nullopt : std::optional<eval::Split>(eval::parse_split(split));
        for (const auto& r : manifest.records) {
            if (want && r.split != *want) continue;
            fs::path p = r.path;
            if (p.is_relative()) p = base / p;
            songs.push_back({r.song_id, r.singer_id, p, {}});
        }
    }
    for (const auto& w : wavs) songs.push_back({fs::path(w).stem().string(), std::nullopt, w, {}});
    parallel_for(songs.size(), jobs, [&](std::size_t i) { songs[i].blocks = dsp::featurize_file(songs[i].path, cfg, songs[i].song_id); });
    std::vector<SongInput> kept;
    for (auto& s : songs) {
        if (s.blocks.empty()) {
            err << "warning: " << s.path.string() << " is shorter than one block, skipped\n";
            continue;
        }
        kept.push_back(std::move(s));
    }
    return kept;
}

std::vector<pipeline::Prediction> predict_all(const pipeline::KnnNet& net, const std::vector<SongInput>& songs,
                                              bool softmax, unsigned jobs) {
    std::vector<pipeline::Prediction> preds(songs.size());
    parallel_for(songs.size(), jobs, [&](std::size_t i) {
        preds[i] = softmax ? pipeline::predict_song_softmax(net.extractor, songs[i].blocks, songs[i].song_id)
                           : pipeline::predict_song(net, songs[i].blocks, songs[i].song_id);
    });
    return preds;
}

json prediction_json(const pipeline::KnnNet& net, const SongInput& song, const pipeline::Prediction& p, bool detail) {
    const auto& names = net.extractor.singers;
    json j = {{"song_id", p.song_id}, {"predicted", names.at(p.predicted)}};
    if (song.truth) j["true"] = *song.truth;
    json labels = json::array();
    for (auto b : p.block_predictions) labels.push_back(names.at(b));
    j["block_predictions"] = std::move(labels);
    if (detail) {
        json blocks = json::array();
        for (std::size_t b = 0; b < p.block_predictions.size(); ++b) {
            json nb = json::array();
            if (b < p.block_neighbors.size()) {
                const auto& n = p.block_neighbors[b];
                for (std::size_t i = 0; i < n.indices.size(); ++i)
                    nb.push_back({{"column", n.indices[i]},
                                  {"singer", names.at(net.head.labels[n.indices[i]])},
                                  {"score", n.scores[i]}});
            }
            blocks.push_back({{"index", song.blocks[b].block_index},
                              {"predicted", names.at(p.block_predictions[b])},
                              {"confidence", p.block_confidence[b]},
                              {"neighbors", std::move(nb)}});
        }
        j["blocks"] = std::move(blocks);
    }
    return j;
}

struct PredictArgs {
    Common common;
    std::string bundle, manifest, split = "test", head = "knn";
    std::vector<std::string> wavs;
    bool detail = false;
};

int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig c = a.common.resolve();
    if (a.manifest.empty() && a.wavs.empty()) throw ConfigError("predict needs --manifest or WAV files");
    const auto net = pipeline::load_bundle(a.bundle);
    const auto songs = gather_inputs(a.manifest, a.split, a.wavs, net.extractor.features, c.jobs, err);
    const auto preds = predict_all(net, songs, a.head == "softmax", c.jobs);
    std::ofstream file;
    if (!a.common.out.empty()) {
        file.open(a.common.out);
        if (!file) throw IoError("cannot write " + a.common.out);
    }
    std::ostream& sink = a.common.out.empty() ? out : file;
    for (std::size_t i = 0; i < preds.size(); ++i) sink << prediction_json(net, songs[i], preds[i], a.detail).dump() << '\n';
    if (!sink) throw IoError("failed writing predictions");
    return kOk;
}

// --------------------------------------------------------------- evaluate

struct Outcome {
    std::string truth, predicted;
    std::vector<std::string> block_predictions;
};

std::vector<Outcome> outcomes_from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open predictions " + path);
    std::vector<Outcome> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            if (!j.contains("true"))
                throw DatasetError(path + ":" + std::to_string(n) + ": record has no \"true\" label");
            Outcome o{j.at("true").get<std::string>(), j.at("predicted").get<std::string>(), {}};
            if (j.contains("block_predictions"))
                o.block_predictions = j["block_predictions"].get<std::vector<std::string>>();
            out.push_back(std::move(o));
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

struct EvaluateArgs {
    Common common;
    std::string bundle, manifest, predictions, split = "test", head = "knn";
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig c = a.common.resolve();
    std::vector<Outcome> outcomes;
    std::vector<std::string> classes;
    if (!a.predictions.empty()) {
        outcomes = outcomes_from_file(a.predictions);
        for (const auto& o : outcomes) {
            classes.push_back(o.truth);
            classes.push_back(o.predicted);
            classes.insert(classes.end(), o.block_predictions.begin(), o.block_predictions.end());
        }
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    } else {
        if (a.bundle.empty() || a.manifest.empty())
            throw ConfigError("evaluate needs --predictions, or --bundle with --manifest");
        const auto net = pipeline::load_bundle(a.bundle);
        const auto songs = gather_inputs(a.manifest, a.split, {}, net.extractor.features, c.jobs, err);
        const auto preds = predict_all(net, songs, a.head == "softmax", c.jobs);
        classes = net.extractor.singers;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            Outcome o{*songs[i].truth, classes.at(preds[i].predicted), {}};
            for (auto b : preds[i].block_predictions) o.block_predictions.push_back(classes.at(b));
            outcomes.push_back(std::move(o));
        }
    }
    if (outcomes.empty()) throw DatasetError("nothing to evaluate");
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < classes.size(); ++i) index[classes[i]] = i;
    auto class_of = [&](const std::string& name) {
        const auto it = index.find(name);
        if (it == index.end()) throw DatasetError("singer '" + name + "' is not known to the model");
        return it->second;
    };
    std::vector<std::pair<std::size_t, std::size_t>> song_pairs, block_pairs;
    for (const auto& o : outcomes) {
        const std::size_t t = class_of(o.truth);
        song_pairs.emplace_back(t, class_of(o.predicted));
        for (const auto& b : o.block_predictions) block_pairs.emplace_back(t, class_of(b));
    }
    const auto song_cm = eval::confusion(song_pairs, classes);
    const auto song_report = eval::metrics(song_cm);
    json report = {{"format_version", kReportFormatVersion}, {"song", eval::report_to_json(song_report, song_cm, "song")}};
    std::string text;
    if (!block_pairs.empty()) {
        const auto block_cm = eval::confusion(block_pairs, classes);
        const auto block_report = eval::metrics(block_cm);
        report["block"] = eval::report_to_json(block_report, block_cm, "block");
        text += eval::report_to_text(block_report, "block") + "\n";
        if (!a.common.out.empty()) {
            fs::create_directories(a.common.out);
            write_text(fs::path(a.common.out) / "confusion_block.csv", eval::confusion_to_csv(block_cm));
        }
    }
    text += eval::report_to_text(song_report, "song");
    out << text;
    if (!a.common.out.empty()) {
        const fs::path dir = a.common.out;
        fs::create_directories(dir);
        write_text(dir / "report.json", report.dump(2) + "\n");
        write_text(dir / "report.txt", text);
        write_text(dir / "confusion_song.csv", eval::confusion_to_csv(song_cm));
    }
    return kOk;
}

// -------------------------------------------------------------- selfcheck

int cmd_selfcheck(const check::SelfcheckOptions& o, std::ostream& out) {
    const auto results = check::run_selfchecks(o);
    bool ok = true;
    for (const auto& r : results) {
        out << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << '\n';
        ok = ok && r.passed;
    }
    return ok ? kOk : kCheckFailed;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Singer identification with an attention-CRNN embedding and a KNN head"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Render a synthetic multi-singer corpus");
    add_common(s, synth.common, true, "Corpus directory");
    s->add_option("--singers", synth.singers, "Number of singers");
    s->add_option("--songs", synth.songs, "Songs per singer");
    s->add_option("--duration", synth.duration, "Song length in seconds");

    FeaturizeArgs feat;
    auto* f = app.add_subcommand("featurize", "Compute log-mel block caches for a manifest");
    add_common(f, feat.common, true, "Feature cache directory");
    f->add_option("--manifest", feat.manifest, "Manifest (JSON lines)")->required();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train the embedding network with a softmax head");
    add_common(t, train.common, true, "Checkpoint path");
    t->add_option("--manifest", train.manifest, "Manifest (JSON lines)")->required();
    t->add_option("--features", train.features, "Feature cache directory from 'featurize'");
    t->add_option("--epochs", train.epochs, "Maximum epochs");
    t->add_option("--batch-size", train.batch_size, "Mini-batch size");
    t->add_option("--patience", train.patience, "Early-stopping patience in epochs");
    t->add_option("--lr", train.lr, "Adam learning rate");
    t->add_flag("--quiet", train.quiet, "No per-epoch lines");

    BuildRefArgs ref;
    auto* b = app.add_subcommand("build-ref", "Freeze a checkpoint and build the KNN reference bundle");
    add_common(b, ref.common, true, "Bundle directory");
    b->add_option("--checkpoint", ref.checkpoint, "Checkpoint from 'train'")->required();
    b->add_option("--manifest", ref.manifest, "Manifest (JSON lines)")->required();
    b->add_option("--features", ref.features, "Feature cache directory from 'featurize'");
    b->add_option("--k", ref.k, "Neighbors per vote");
    b->add_option("--centroids", ref.centroids, "Compress to N k-means centroids per singer");

    PredictArgs pred;
    auto* p = app.add_subcommand("predict", "Predict singers for songs (JSON lines)");
    add_common(p, pred.common, false, "Output file (default stdout)");
    p->add_option("--bundle", pred.bundle, "Bundle from 'build-ref'")->required();
    p->add_option("--manifest", pred.manifest, "Manifest (JSON lines)");
    p->add_option("--split", pred.split, "Manifest split: train, val, test or all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    p->add_option("--head", pred.head, "knn or softmax")->check(CLI::IsMember({"knn", "softmax"}));
    p->add_flag("--detail", pred.detail, "Include per-block neighbor sets");
    p->add_option("wavs", pred.wavs, "WAV files");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Block- and song-level metrics");
    add_common(e, ev.common, false, "Report directory");
    e->add_option("--bundle", ev.bundle, "Bundle from 'build-ref'");
    e->add_option("--manifest", ev.manifest, "Manifest (JSON lines)");
    e->add_option("--predictions", ev.predictions, "Prediction file from 'predict'");
    e->add_option("--split", ev.split, "Manifest split: train, val, test or all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    e->add_option("--head", ev.head, "knn or softmax")->check(CLI::IsMember({"knn", "softmax"}));

    Common chk_common;
    check::SelfcheckOptions chk;
    auto* c = app.add_subcommand("selfcheck", "Run built-in oracle checks");
    add_common(c, chk_common, false, "Unused");
    c->add_flag("--quick", chk.quick, "Sub-second subset");
    c->add_option("--inject-fault", chk.inject_fault)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << '\n';
        auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return kUsage;
    }

    try {
        if (*s) return cmd_synth(synth, out);
        if (*f) return cmd_featurize(feat, out);
        if (*t) return cmd_train(train, out);
        if (*b) return cmd_build_ref(ref, out);
        if (*p) return cmd_predict(pred, out, err);
        if (*e) return cmd_evaluate(ev, out, err);
        if (*c) {
            chk.seed = chk_common.resolve().seed;
            return cmd_selfcheck(chk, out);
        }
    } catch (const ConfigError& ex) {
        err << "config error: " << ex.what() << '\n';
        return kUsage;
    } catch (const FormatError& ex) {
        err << "data error: " << ex.what() << '\n';
        return kDataError;
    } catch (const IoError& ex) {
        err << "I/O error: " << ex.what() << '\n';
        return kIoError;
    } catch (const fs::filesystem_error& ex) {
        err << "I/O error: " << ex.what() << '\n';
        return kIoError;
    } catch (const Error& ex) {
        err << "data error: " << ex.what() << '\n';
        return kDataError;
    }
    return kUsage;
}

} // namespace knnsid::cli
