#pragma once

#include <filesystem>
#include <string>

#include "ctseg/network.hpp"
#include "ctseg/trainer.hpp"
#include "ctseg/volume.hpp"

namespace ctseg::cfg {

// One flat configuration shared by all commands. File format is `key = value`
// lines with '#' comments; unknown keys are rejected. CLI flags override
// file values.
struct RunConfig {
    // paths
    std::string data_dir;
    std::string out_dir = "out";

    // intensity window applied to every input volume (identity for data
    // already in [0,1]: set 0 and 1)
    double window_lo = -1000.0;
    double window_hi = 400.0;

    // network; patch is stored internally as (D,H,W)
    int base_channels = 8;
    int aux_factor_j = 2;
    int aux_factor_k = 4;
    vol::Shape3 patch{32, 32, 32};

    // training
    double lr = 3e-4;
    long long iters = 5000;
    int batch_labeled = 2;
    int batch_unlabeled = 2;
    double ema_beta = 0.99;
    double lambda_max = 5.0;
    double sigma_noise = 10.0 / 1400.0;
    double fg_bias = 0.5;
    uint64_t seed = 1;
    long long checkpoint_every = 0;
    long long val_every = 25;
    bool perturb_consistency = true;
    bool supervised_only = false;

    // inference / evaluation
    double threshold = 0.5;
    double tau_mm = 3.0;
    bool teacher_infer = false;
    bool save_probability = false;

    // synthetic dataset generation
    int n_labeled = 12;
    int n_unlabeled = 12;
    int n_val = 4;
    vol::Shape3 synth_dims{64, 64, 64};
    vol::Spacing3 synth_spacing{1.0, 1.0, 1.0};
    int n_blobs = 3;
    double synth_noise = 0.03;

    net::NetworkConfig network() const {
        net::NetworkConfig nc;
        nc.base_channels = base_channels;
        nc.aux_factor_j = aux_factor_j;
        nc.aux_factor_k = aux_factor_k;
        nc.patch = patch;
        return nc;
    }

    train::TrainConfig training() const {
        train::TrainConfig tc;
        tc.lr = lr;
        tc.i_max = iters;
        tc.batch_labeled = batch_labeled;
        tc.batch_unlabeled = batch_unlabeled;
        tc.ema_beta = ema_beta;
        tc.lambda_max = lambda_max;
        tc.sigma_noise = sigma_noise;
        tc.fg_bias = fg_bias;
        tc.seed = seed;
        tc.checkpoint_every = checkpoint_every;
        tc.val_every = val_every;
        tc.perturb_consistency = perturb_consistency;
        tc.supervised_only = supervised_only;
        return tc;
    }
};

// Apply one key/value pair; throws ConfigError on unknown keys or bad values.
void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value);

// Parse a config file on top of `base`.
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

}  // namespace ctseg::cfg
