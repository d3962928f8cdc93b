#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctseg/config.hpp"
#include "ctseg/trainer.hpp"

// On-disk dataset layout:
//   <dir>/manifest.json
//   <dir>/images/<id>.vol3      labeled intensity volumes (train and val)
//   <dir>/masks/<id>.vol3       matching binary masks
//   <dir>/unlabeled/<id>.vol3   intensity volumes without masks
namespace ctseg::data {

struct CaseEntry {
    std::string id;
    std::string split;  // "train" | "val" | "unlabeled"
    bool labeled = false;
};

struct Manifest {
    std::vector<CaseEntry> cases;

    void save(const std::filesystem::path& dir) const;
    static Manifest load(const std::filesystem::path& dir);
};

// Generates a seeded synthetic dataset per the config; returns the manifest.
Manifest write_synthetic_dataset(const std::filesystem::path& dir, const cfg::RunConfig& cfg);

// Loads every case named by the manifest, applying the intensity window to
// the images. Missing files are collected and reported together.
train::TrainData load_train_data(const std::filesystem::path& dir, double window_lo,
                                 double window_hi);

}  // namespace ctseg::data
