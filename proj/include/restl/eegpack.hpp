#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "restl/trial.hpp"

namespace restl {

// Directory container: manifest.json plus one little-endian float32 file per
// trial, row-major [channel][sample]. This is the interchange format for
// externally converted BCI IV-2a/2b/OpenBMI recordings.

DatasetManifest write_pack(const std::vector<Trial>& trials, const std::filesystem::path& dir,
                           const std::string& name = "pack", int num_classes = -1);

std::pair<DatasetManifest, std::vector<Trial>> read_pack(const std::filesystem::path& dir);

// LOSO split: all target-subject trials become the test set; the rest are
// partitioned into train/val, stratified by (subject, kind, label) with a
// largest-remainder allocation so |val| = round(val_fraction * n) exactly.
Split loso_split(const DatasetManifest& manifest, const SplitSpec& spec);

}  // namespace restl
