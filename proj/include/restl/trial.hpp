#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "restl/common.hpp"

namespace restl {

enum class TrialKind { RS, TS };

inline const char* kind_name(TrialKind k) { return k == TrialKind::RS ? "RS" : "TS"; }

// One EEG epoch: C x T samples in microvolts plus acquisition metadata.
struct Trial {
    std::string id;
    std::string subject;
    std::string session;
    TrialKind kind = TrialKind::TS;
    std::optional<int> label;  // present iff kind == TS
    double fs = 0.0;
    int channels = 0;
    int samples = 0;
    std::vector<float> data;  // row-major [channel][sample]

    float& at(int c, int t) { return data[static_cast<size_t>(c) * samples + t]; }
    float at(int c, int t) const { return data[static_cast<size_t>(c) * samples + t]; }

    // Throws on any broken invariant; `where` names the caller in messages.
    void validate(const std::string& where) const;
};

struct ManifestEntry {
    std::string id;
    std::string subject;
    std::string session;
    TrialKind kind = TrialKind::TS;
    std::optional<int> label;
    std::string file;  // relative to the pack directory
    int channels = 0;
    int samples = 0;
};

struct DatasetManifest {
    std::string name;
    int num_classes = 0;
    int channels = 0;
    double fs = 0.0;
    std::vector<ManifestEntry> trials;

    std::vector<std::string> subjects() const;
};

struct SplitSpec {
    std::string target_subject;
    uint64_t seed = 0;
    double val_fraction = 0.2;
};

struct Split {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

// In-memory trial collection with instrumented access, so tests can prove
// which subjects a training stage touched.
class TrialStore {
public:
    TrialStore() = default;
    explicit TrialStore(std::vector<Trial> trials);

    void add(Trial t);
    const Trial& get(const std::string& id) const;
    bool contains(const std::string& id) const { return index_.count(id) > 0; }
    size_t size() const { return trials_.size(); }
    const std::vector<Trial>& all() const { return trials_; }

    const std::set<std::string>& subjects_read() const { return subjects_read_; }
    void reset_access_log() { subjects_read_.clear(); }

private:
    std::vector<Trial> trials_;
    std::map<std::string, size_t> index_;
    mutable std::set<std::string> subjects_read_;
};

}  // namespace restl
