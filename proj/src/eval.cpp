#include "knnsid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "knnsid/errors.hpp"
#include "knnsid/random.hpp"

namespace knnsid::eval {

using nlohmann::json;

std::string to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "val" || text == "validation") return Split::val;
    if (text == "test") return Split::test;
    throw DatasetError("unknown split '" + text + "'");
}

std::vector<std::string> DatasetManifest::singers() const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.singer_id);
    return {s.begin(), s.end()};
}

std::vector<SongRecord> DatasetManifest::in_split(Split split) const {
    std::vector<SongRecord> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r);
    return out;
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    std::set<std::string> trained;
    for (const auto& r : records) {
        if (r.song_id.empty()) throw DatasetError("manifest record without song_id");
        if (!ids.insert(r.song_id).second) throw DatasetError("duplicate song_id '" + r.song_id + "'");
        if (r.split == Split::train) trained.insert(r.singer_id);
    }
    for (const auto& s : singers())
        if (!trained.count(s)) throw DatasetError("singer '" + s + "' has no songs in the train split");
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest " + path.string());
    DatasetManifest m;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            SongRecord r;
            r.song_id = j.at("song_id").get<std::string>();
            r.path = j.value("path", std::string{});
            const json& singer = j.at("singer_id");
            r.singer_id = singer.is_string() ? singer.get<std::string>() : singer.dump();
            if (j.contains("album_id") && !j["album_id"].is_null()) {
                const json& album = j["album_id"];
                r.album_id = album.is_string() ? album.get<std::string>() : album.dump();
            }
            r.split = parse_split(j.value("split", std::string{"train"}));
            m.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest " + path.string());
    for (const auto& r : manifest.records) {
        json j = {{"song_id", r.song_id}, {"path", r.path}, {"singer_id", r.singer_id}};
        if (r.album_id) j["album_id"] = *r.album_id;
        j["split"] = to_string(r.split);
        os << j.dump() << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
}

namespace {

std::map<std::string, std::vector<SongRecord>> group_by_singer(std::vector<SongRecord> songs) {
    std::sort(songs.begin(), songs.end(), [](const auto& a, const auto& b) { return a.song_id < b.song_id; });
    std::map<std::string, std::vector<SongRecord>> groups;
    for (auto& s : songs) groups[s.singer_id].push_back(std::move(s));
    return groups;
}

DatasetManifest sorted_manifest(std::vector<SongRecord> records) {
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.song_id < b.song_id; });
    DatasetManifest m{std::move(records)};
    return m;
}

} // namespace

DatasetManifest split_random(std::vector<SongRecord> songs, std::array<int, 3> ratio, std::uint64_t seed) {
    const int parts = ratio[0] + ratio[1] + ratio[2];
    if (ratio[0] <= 0 || ratio[1] <= 0 || ratio[2] <= 0) throw ConfigError("split ratio entries must be positive");
    std::vector<SongRecord> out;
    for (auto& [singer, group] : group_by_singer(std::move(songs))) {
        const auto n = static_cast<long>(group.size());
        if (n < 3)
            throw DatasetError("singer '" + singer + "' has " + std::to_string(n) + " songs; at least 3 are needed");
        const long n_val = std::max(1L, std::lround(static_cast<double>(n) * ratio[1] / parts));
        const long n_test = std::max(1L, std::lround(static_cast<double>(n) * ratio[2] / parts));
        if (n - n_val - n_test < 1)
            throw DatasetError("singer '" + singer + "' has too few songs for the requested ratio");
        Rng rng(mix_seed(seed, hash_string(singer)));
        rng.shuffle(group.begin(), group.end());
        for (long i = 0; i < n; ++i) {
            group[i].split = i < n - n_val - n_test ? Split::train : (i < n - n_test ? Split::val : Split::test);
            out.push_back(std::move(group[i]));
        }
    }
    return sorted_manifest(std::move(out));
}

DatasetManifest split_by_album(std::vector<SongRecord> songs, int train_albums, std::uint64_t seed) {
    if (train_albums < 1) throw ConfigError("split_by_album: train_albums must be >= 1");
    std::vector<SongRecord> out;
    for (auto& [singer, group] : group_by_singer(std::move(songs))) {
        std::set<std::string> album_set;
        for (const auto& s : group) {
            if (!s.album_id) throw DatasetError("song '" + s.song_id + "' has no album_id");
            album_set.insert(*s.album_id);
        }
        std::vector<std::string> albums(album_set.begin(), album_set.end());
        if (albums.size() < static_cast<std::size_t>(train_albums) + 2)
            throw DatasetError("singer '" + singer + "' has " + std::to_string(albums.size()) + " albums; " +
                               std::to_string(train_albums + 2) + " are needed");
        Rng rng(mix_seed(seed, hash_string(singer)));
        rng.shuffle(albums.begin(), albums.end());
        std::map<std::string, Split> assignment;
        for (std::size_t i = 0; i < albums.size(); ++i)
            assignment[albums[i]] = i < static_cast<std::size_t>(train_albums) ? Split::train : Split::test;
        std::vector<std::string> held(albums.begin() + train_albums, albums.end());
        assignment[*std::min_element(held.begin(), held.end())] = Split::val;
        for (auto& s : group) {
            s.split = assignment.at(*s.album_id);
            out.push_back(std::move(s));
        }
    }
    return sorted_manifest(std::move(out));
}

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_names)
    : classes(std::move(class_names)), counts(classes.size() * classes.size(), 0) {}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

std::uint64_t ConfusionMatrix::trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < size(); ++i) t += at(i, i);
    return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < size(); ++p) s += at(t, p);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < size(); ++t) s += at(t, p);
    return s;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes != classes) throw ContractError("ConfusionMatrix::merge: class sets differ");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

ConfusionMatrix confusion(const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                          std::vector<std::string> class_names) {
    ConfusionMatrix cm(std::move(class_names));
    for (const auto& [t, p] : pairs) {
        if (t >= cm.size() || p >= cm.size())
            throw ContractError("confusion: label pair (" + std::to_string(t) + ", " + std::to_string(p) +
                                ") outside " + std::to_string(cm.size()) + " classes");
        ++cm.at(t, p);
    }
    return cm;
}

MetricReport metrics(const ConfusionMatrix& cm) {
    MetricReport r;
    r.total = cm.total();
    if (r.total == 0) throw ContractError("metrics: confusion matrix is empty");
    r.correct = cm.trace();
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
    const std::size_t n = cm.size();
    for (std::size_t c = 0; c < n; ++c) {
        ClassMetrics m;
        m.name = cm.classes[c];
        const auto tp = static_cast<double>(cm.at(c, c));
        const std::uint64_t predicted = cm.col_sum(c);
        m.support = cm.row_sum(c);
        m.precision_undefined = predicted == 0;
        m.recall_undefined = m.support == 0;
        m.precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
        m.recall = m.support ? tp / static_cast<double>(m.support) : 0.0;
        m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
        r.macro_precision += m.precision;
        r.macro_recall += m.recall;
        r.macro_f1 += m.f1;
        r.per_class.push_back(std::move(m));
    }
    r.macro_precision /= static_cast<double>(n);
    r.macro_recall /= static_cast<double>(n);
    r.macro_f1 /= static_cast<double>(n);
    return r;
}

json report_to_json(const MetricReport& report, const ConfusionMatrix& cm, const std::string& level) {
    json classes = json::array();
    for (const auto& c : report.per_class)
        classes.push_back({{"name", c.name},
                           {"precision", c.precision},
                           {"recall", c.recall},
                           {"f1", c.f1},
                           {"support", c.support},
                           {"precision_undefined", c.precision_undefined},
                           {"recall_undefined", c.recall_undefined}});
    json matrix = json::array();
    for (std::size_t t = 0; t < cm.size(); ++t) {
        json row = json::array();
        for (std::size_t p = 0; p < cm.size(); ++p) row.push_back(cm.at(t, p));
        matrix.push_back(std::move(row));
    }
    return {{"level", level},
            {"accuracy", report.accuracy},
            {"macro_precision", report.macro_precision},
            {"macro_recall", report.macro_recall},
            {"macro_f1", report.macro_f1},
            {"correct", report.correct},
            {"total", report.total},
            {"classes", std::move(classes)},
            {"confusion", std::move(matrix)}};
}

MetricReport report_from_json(const json& j) {
    MetricReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_precision = j.at("macro_precision").get<double>();
    r.macro_recall = j.at("macro_recall").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.correct = j.at("correct").get<std::uint64_t>();
    r.total = j.at("total").get<std::uint64_t>();
    for (const auto& c : j.at("classes")) {
        ClassMetrics m;
        m.name = c.at("name").get<std::string>();
        m.precision = c.at("precision").get<double>();
        m.recall = c.at("recall").get<double>();
        m.f1 = c.at("f1").get<double>();
        m.support = c.at("support").get<std::uint64_t>();
        m.precision_undefined = c.at("precision_undefined").get<bool>();
        m.recall_undefined = c.at("recall_undefined").get<bool>();
        r.per_class.push_back(std::move(m));
    }
    return r;
}

std::string report_to_text(const MetricReport& report, const std::string& level) {
    std::size_t width = 5;
    for (const auto& c : report.per_class) width = std::max(width, c.name.size());
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << level << "-level: accuracy " << report.accuracy << " (" << report.correct << "/" << report.total << ")\n";
    os << std::left << std::setw(static_cast<int>(width)) << "class" << std::right << std::setw(11) << "precision"
       << std::setw(9) << "recall" << std::setw(9) << "f1" << std::setw(9) << "support" << '\n';
    for (const auto& c : report.per_class) {
        os << std::left << std::setw(static_cast<int>(width)) << c.name << std::right << std::setw(10) << c.precision
           << (c.precision_undefined ? "*" : " ") << std::setw(8) << c.recall << (c.recall_undefined ? "*" : " ")
           << std::setw(9) << c.f1 << std::setw(9) << c.support << '\n';
    }
    os << std::left << std::setw(static_cast<int>(width)) << "macro" << std::right << std::setw(10)
       << report.macro_precision << ' ' << std::setw(8) << report.macro_recall << ' ' << std::setw(9)
       << report.macro_f1 << '\n';
    bool flagged = false;
    for (const auto& c : report.per_class) flagged = flagged || c.precision_undefined || c.recall_undefined;
    if (flagged) os << "* zero denominator, counted as 0\n";
    return os.str();
}

std::string confusion_to_csv(const ConfusionMatrix& cm) {
    auto quote = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    };
    std::ostringstream os;
    os << "true\\predicted";
    for (const auto& c : cm.classes) os << ',' << quote(c);
    os << '\n';
    for (std::size_t t = 0; t < cm.size(); ++t) {
        os << quote(cm.classes[t]);
        for (std::size_t p = 0; p < cm.size(); ++p) os << ',' << cm.at(t, p);
        os << '\n';
    }
    return os.str();
}

} // namespace knnsid::eval
