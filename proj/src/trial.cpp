#include "restl/trial.hpp"

#include <algorithm>
#include <cmath>

namespace restl {

void Trial::validate(const std::string& where) const {
    if (id.empty()) data_error(where + ": trial id is empty");
    if (fs <= 0.0) data_error(where + ": trial '" + id + "' has non-positive sampling rate");
    if (channels < 1 || samples < 1)
        data_error(where + ": trial '" + id + "' has empty shape");
    if (data.size() != static_cast<size_t>(channels) * samples)
        data_error(where + ": trial '" + id + "' data size does not match shape");
    if (kind == TrialKind::TS && !label.has_value())
        data_error(where + ": TS trial '" + id + "' is missing a label");
    if (kind == TrialKind::RS && label.has_value())
        data_error(where + ": RS trial '" + id + "' carries a label");
    for (float v : data) {
        if (!std::isfinite(v)) data_error(where + ": trial '" + id + "' contains non-finite samples");
    }
}

std::vector<std::string> DatasetManifest::subjects() const {
    std::vector<std::string> out;
    for (const auto& e : trials) {
        if (std::find(out.begin(), out.end(), e.subject) == out.end()) out.push_back(e.subject);
    }
    return out;
}

TrialStore::TrialStore(std::vector<Trial> trials) {
    for (auto& t : trials) add(std::move(t));
}

void TrialStore::add(Trial t) {
    if (index_.count(t.id)) data_error("TrialStore: duplicate trial id '" + t.id + "'");
    index_[t.id] = trials_.size();
    trials_.push_back(std::move(t));
}

const Trial& TrialStore::get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) data_error("TrialStore: unknown trial id '" + id + "'");
    const Trial& t = trials_[it->second];
    subjects_read_.insert(t.subject);
    return t;
}

}  // namespace restl
