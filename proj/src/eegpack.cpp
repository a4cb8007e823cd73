#include "restl/eegpack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace restl {

namespace {

json entry_to_json(const ManifestEntry& e) {
    json j{{"id", e.id},
           {"subject", e.subject},
           {"session", e.session},
           {"kind", kind_name(e.kind)},
           {"file", e.file},
           {"shape", {e.channels, e.samples}}};
    if (e.label.has_value()) j["label"] = *e.label;
    return j;
}

ManifestEntry entry_from_json(const json& j) {
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.subject = j.at("subject").get<std::string>();
    e.session = j.at("session").get<std::string>();
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "RS")
        e.kind = TrialKind::RS;
    else if (kind == "TS")
        e.kind = TrialKind::TS;
    else
        data_error("manifest: unknown trial kind '" + kind + "'");
    if (j.contains("label")) e.label = j.at("label").get<int>();
    e.file = j.at("file").get<std::string>();
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 2) data_error("manifest: shape of '" + e.id + "' must be [C, T]");
    e.channels = shape[0].get<int>();
    e.samples = shape[1].get<int>();
    return e;
}

}  // namespace

DatasetManifest write_pack(const std::vector<Trial>& trials, const fs::path& dir,
                           const std::string& name, int num_classes) {
    if (trials.empty()) data_error("write_pack: trial list is empty");

    const int C = trials.front().channels;
    const double fs_hz = trials.front().fs;
    int max_label = -1;
    std::map<std::string, int> seen_ids;
    for (const auto& t : trials) {
        t.validate("write_pack");
        if (t.channels != C)
            data_error("write_pack: heterogeneous channel counts (" + std::to_string(C) + " vs " +
                       std::to_string(t.channels) + " in trial '" + t.id + "')");
        if (t.fs != fs_hz)
            data_error("write_pack: heterogeneous sampling rates in trial '" + t.id + "'");
        if (seen_ids.count(t.id)) data_error("write_pack: duplicate trial id '" + t.id + "'");
        seen_ids[t.id] = 1;
        if (t.label.has_value()) max_label = std::max(max_label, *t.label);
    }
    int K = num_classes >= 0 ? num_classes : max_label + 1;
    if (max_label >= K) data_error("write_pack: label " + std::to_string(max_label) + " >= K=" + std::to_string(K));

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) data_error("write_pack: cannot create directory '" + dir.string() + "': " + ec.message());

    DatasetManifest m;
    m.name = name;
    m.num_classes = K;
    m.channels = C;
    m.fs = fs_hz;

    for (const auto& t : trials) {
        ManifestEntry e;
        e.id = t.id;
        e.subject = t.subject;
        e.session = t.session;
        e.kind = t.kind;
        e.label = t.label;
        e.file = t.id + ".f32";
        e.channels = t.channels;
        e.samples = t.samples;

        std::ofstream out(dir / e.file, std::ios::binary | std::ios::trunc);
        if (!out) data_error("write_pack: cannot open '" + (dir / e.file).string() + "' for writing");
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!out) data_error("write_pack: short write to '" + (dir / e.file).string() + "'");
        m.trials.push_back(std::move(e));
    }

    json j{{"name", m.name}, {"K", m.num_classes}, {"channels", m.channels}, {"fs", m.fs}};
    j["trials"] = json::array();
    for (const auto& e : m.trials) j["trials"].push_back(entry_to_json(e));

    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) data_error("write_pack: cannot write manifest in '" + dir.string() + "'");
    mf << j.dump(2) << "\n";
    return m;
}

std::pair<DatasetManifest, std::vector<Trial>> read_pack(const fs::path& dir) {
    fs::path mf_path = dir / "manifest.json";
    std::ifstream mf(mf_path);
    if (!mf) data_error("read_pack: cannot open manifest '" + mf_path.string() + "'");
    json j;
    try {
        mf >> j;
    } catch (const json::exception& e) {
        data_error("read_pack: manifest parse failure: " + std::string(e.what()));
    }

    DatasetManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.num_classes = j.at("K").get<int>();
        m.channels = j.at("channels").get<int>();
        m.fs = j.at("fs").get<double>();
        for (const auto& je : j.at("trials")) m.trials.push_back(entry_from_json(je));
    } catch (const json::exception& e) {
        data_error("read_pack: malformed manifest: " + std::string(e.what()));
    }

    std::map<std::string, int> seen;
    std::vector<Trial> trials;
    trials.reserve(m.trials.size());
    for (const auto& e : m.trials) {
        if (seen.count(e.id)) data_error("read_pack: duplicate trial id '" + e.id + "' in manifest");
        seen[e.id] = 1;
        if (e.channels != m.channels)
            data_error("read_pack: trial '" + e.id + "' channel count differs from manifest header");
        if (e.kind == TrialKind::TS && e.label.has_value() && *e.label >= m.num_classes)
            data_error("read_pack: trial '" + e.id + "' label out of range");

        fs::path fp = dir / e.file;
        std::ifstream in(fp, std::ios::binary | std::ios::ate);
        if (!in) data_error("read_pack: missing data file '" + fp.string() + "' for trial '" + e.id + "'");
        auto nbytes = static_cast<size_t>(in.tellg());
        size_t expect = static_cast<size_t>(e.channels) * e.samples * sizeof(float);
        if (nbytes != expect)
            data_error("read_pack: trial '" + e.id + "' shape mismatch: file has " + std::to_string(nbytes) +
                       " bytes, manifest implies " + std::to_string(expect));
        in.seekg(0);

        Trial t;
        t.id = e.id;
        t.subject = e.subject;
        t.session = e.session;
        t.kind = e.kind;
        t.label = e.label;
        t.fs = m.fs;
        t.channels = e.channels;
        t.samples = e.samples;
        t.data.resize(static_cast<size_t>(e.channels) * e.samples);
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(expect));
        if (!in) data_error("read_pack: short read from '" + fp.string() + "'");
        for (float v : t.data) {
            if (!std::isfinite(v)) data_error("read_pack: trial '" + e.id + "' contains non-finite values");
        }
        trials.push_back(std::move(t));
    }
    return {std::move(m), std::move(trials)};
}

Split loso_split(const DatasetManifest& manifest, const SplitSpec& spec) {
    auto subs = manifest.subjects();
    if (subs.size() < 2) data_error("loso_split: need at least 2 subjects, manifest has " + std::to_string(subs.size()));
    if (std::find(subs.begin(), subs.end(), spec.target_subject) == subs.end())
        data_error("loso_split: target subject '" + spec.target_subject + "' not in manifest");
    if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0))
        config_error("loso_split: val_fraction must be in (0,1)");

    Split out;
    // Strata keyed by (subject, kind, label); map gives a deterministic order.
    std::map<std::string, std::vector<std::string>> strata;
    size_t n_rest = 0;
    for (const auto& e : manifest.trials) {
        if (e.subject == spec.target_subject) {
            out.test_ids.push_back(e.id);
            continue;
        }
        std::string key = e.subject + "|" + kind_name(e.kind) + "|" +
                          (e.label.has_value() ? std::to_string(*e.label) : "-");
        strata[key].push_back(e.id);
        ++n_rest;
    }

    size_t val_total = static_cast<size_t>(std::llround(spec.val_fraction * static_cast<double>(n_rest)));
    val_total = std::min(val_total, n_rest);

    // Largest-remainder allocation of val_total across strata.
    struct Alloc {
        const std::string* key;
        std::vector<std::string>* ids;
        size_t base;
        double frac;
    };
    std::vector<Alloc> allocs;
    size_t assigned = 0;
    for (auto& [key, ids] : strata) {
        double exact = spec.val_fraction * static_cast<double>(ids.size());
        size_t base = static_cast<size_t>(exact);
        base = std::min(base, ids.size());
        assigned += base;
        allocs.push_back({&key, &ids, base, exact - static_cast<double>(base)});
    }
    std::sort(allocs.begin(), allocs.end(), [](const Alloc& a, const Alloc& b) {
        if (a.frac != b.frac) return a.frac > b.frac;
        return *a.key < *b.key;
    });
    size_t remainder = val_total > assigned ? val_total - assigned : 0;
    for (auto& a : allocs) {
        if (remainder > 0 && a.base < a.ids->size()) {
            ++a.base;
            --remainder;
        }
    }
    // Over-assignment can only come from clamping; trim deterministically.
    size_t total_base = 0;
    for (auto& a : allocs) total_base += a.base;
    for (auto it = allocs.rbegin(); it != allocs.rend() && total_base > val_total; ++it) {
        while (it->base > 0 && total_base > val_total) {
            --it->base;
            --total_base;
        }
    }

    for (auto& a : allocs) {
        Rng rng(derive_seed(spec.seed, fnv1a64(a.key->data(), a.key->size())));
        std::vector<std::string> ids = *a.ids;
        rng.shuffle(ids);
        for (size_t i = 0; i < ids.size(); ++i) {
            (i < a.base ? out.val_ids : out.train_ids).push_back(ids[i]);
        }
    }
    std::sort(out.train_ids.begin(), out.train_ids.end());
    std::sort(out.val_ids.begin(), out.val_ids.end());
    return out;
}

}  // namespace restl
