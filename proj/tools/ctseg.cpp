#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ctseg/config.hpp"
#include "ctseg/dataset.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/plot.hpp"
#include "ctseg/sliding.hpp"
#include "ctseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace ctseg;

namespace {

// Flag overrides are collected as strings and pushed through the same
// strict key=value path as the config file; flags win over the file.
struct Overrides {
    std::vector<std::pair<std::string, std::string>> kv;

    void add_if(CLI::Option* opt, const std::string& key, const std::string& value) {
        if (opt->count() > 0) kv.emplace_back(key, value);
    }
};

cfg::RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
    cfg::RunConfig rc;
    if (!config_path.empty()) rc = cfg::load_config_file(config_path);
    for (const auto& [k, v] : ov.kv) cfg::apply_kv(rc, k, v);
    return rc;
}

tile::TileFn make_tile_fn(net::MdaCnn<float>& network) {
    return [&network](const Tensor<float>& block) {
        nn::Graph<float> g(false);
        auto fw = network.forward(g, block);
        return fw.preds[0]->val;  // P1 is the designated output
    };
}

int cmd_synth(const cfg::RunConfig& rc) {
    fs::create_directories(rc.out_dir);
    const auto manifest = data::write_synthetic_dataset(rc.out_dir, rc);
    size_t labeled = 0, unlabeled = 0, val = 0;
    for (const auto& c : manifest.cases) {
        if (c.split == "train") ++labeled;
        else if (c.split == "val") ++val;
        else ++unlabeled;
    }
    std::cout << "wrote " << labeled << " labeled + " << val << " validation + " << unlabeled
              << " unlabeled cases to " << rc.out_dir << "\n";
    return 0;
}

int cmd_train(const cfg::RunConfig& rc, const std::string& resume,
              bool net_flags_given) {
    if (rc.data_dir.empty()) throw ConfigError("train: data_dir is required");
    const auto data = data::load_train_data(rc.data_dir, rc.window_lo, rc.window_hi);
    std::cout << "dataset: " << data.labeled.size() << " labeled, " << data.unlabeled.size()
              << " unlabeled, " << data.validation.size() << " validation\n";

    fs::create_directories(rc.out_dir);
    std::unique_ptr<train::NetworkState<float>> st;
    train::CurveLog log;
    if (!resume.empty()) {
        st = train::load_checkpoint<float>(resume);
        if (net_flags_given && !(st->net_cfg == rc.network()))
            throw ConfigMismatch("resume: network flags do not match the checkpoint");
        st->cfg.i_max = rc.iters;  // allow extending a finished run
        const auto curves = fs::path(rc.out_dir) / "curves.csv";
        if (fs::exists(curves)) {
            log = train::CurveLog::read_csv(curves);
            std::erase_if(log.records,
                          [&](const train::CurveRecord& r) { return r.iter > st->iter; });
        }
        std::cout << "resumed from " << resume << " at iteration " << st->iter << "\n";
    } else {
        st = std::make_unique<train::NetworkState<float>>(rc.network(), rc.training());
    }

    const auto t0 = std::chrono::steady_clock::now();
    train::train(*st, data, log, rc.out_dir);
    const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    log.write_csv(fs::path(rc.out_dir) / "curves.csv");
    train::save_checkpoint(*st, fs::path(rc.out_dir) / "checkpoint_final.ckpt");
    std::cout << "trained to iteration " << st->iter << " in " << dt << " s; artifacts in "
              << rc.out_dir << "\n";
    return 0;
}

int cmd_infer(const cfg::RunConfig& rc, const std::string& checkpoint,
              const std::vector<std::string>& volumes) {
    if (volumes.empty()) throw ConfigError("infer: no input volumes given");
    auto st = train::load_checkpoint<float>(checkpoint);
    net::MdaCnn<float>* network = st->student.get();
    if (rc.teacher_infer) {
        if (!st->teacher) throw ConfigMismatch("infer: checkpoint has no teacher network");
        network = st->teacher.get();
    }
    fs::create_directories(rc.out_dir);

    const tile::TileFn fn = make_tile_fn(*network);
    tile::PredictOptions opts;
    opts.threshold = rc.threshold;
    for (const auto& path : volumes) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto raw = vol::load_volume(path);
        const auto v = vol::window_normalize(raw, rc.window_lo, rc.window_hi);
        const auto pred = tile::predict_volume(v, fn, st->net_cfg.patch, opts);
        const auto stem = fs::path(path).stem().string();
        vol::save_mask(pred.mask, fs::path(rc.out_dir) / (stem + ".vol3"));
        if (rc.save_probability)
            vol::save_volume(pred.probability, fs::path(rc.out_dir) / (stem + "_prob.vol3"));
        const auto dt =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << stem << ": " << vol::to_string(v.dims()) << " -> "
                  << pred.mask.foreground_count() << " fg voxels, " << dt << " s\n";
    }
    return 0;
}

std::string csv_cell(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

int cmd_evaluate(const cfg::RunConfig& rc, const std::string& pred_dir,
                 const std::string& gt_dir, const std::string& out_csv) {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(gt_dir))
        if (e.path().extension() == ".vol3") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw MissingCase("evaluate: no .vol3 masks in " + gt_dir);

    std::vector<std::string> missing;
    for (const auto& id : ids)
        if (!fs::exists(fs::path(pred_dir) / (id + ".vol3"))) missing.push_back(id);
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += (list.empty() ? "" : ", ") + s;
        throw MissingCase("evaluate: missing predictions for: " + list);
    }

    std::vector<metrics::MetricsReport> reports;
    std::ostringstream csv;
    csv << "case_id,dice,jaccard,nsd,adb_mm,hd95_mm,flags\n";
    for (const auto& id : ids) {
        const auto gt = vol::load_mask(fs::path(gt_dir) / (id + ".vol3"));
        const auto pd = vol::load_mask(fs::path(pred_dir) / (id + ".vol3"));
        const auto r = metrics::evaluate_case(pd, gt, rc.tau_mm);
        reports.push_back(r);
        csv << id << ',' << csv_cell(r.dice) << ',' << csv_cell(r.jaccard) << ','
            << csv_cell(r.nsd) << ',' << csv_cell(r.adb_mm) << ',' << csv_cell(r.hd95_mm) << ','
            << r.flags() << '\n';
    }
    const auto agg = metrics::aggregate(reports);
    csv << "aggregate_mean," << csv_cell(agg.dice.mean) << ',' << csv_cell(agg.jaccard.mean)
        << ',' << csv_cell(agg.nsd.mean) << ',' << csv_cell(agg.adb_mm.mean) << ','
        << csv_cell(agg.hd95_mm.mean) << ','
        << (agg.adb_mm.excluded ? "distance_excluded=" + std::to_string(agg.adb_mm.excluded)
                                : "")
        << '\n';
    csv << "aggregate_variance," << csv_cell(agg.dice.variance) << ','
        << csv_cell(agg.jaccard.variance) << ',' << csv_cell(agg.nsd.variance) << ','
        << csv_cell(agg.adb_mm.variance) << ',' << csv_cell(agg.hd95_mm.variance) << ",\n";

    std::cout << csv.str();
    if (!out_csv.empty()) {
        std::ofstream os(out_csv, std::ios::trunc);
        if (!os) throw IOFailure("cannot write " + out_csv);
        os << csv.str();
    }
    return 0;
}

int cmd_plot(const std::string& curves_csv, const std::string& out_image) {
    const auto log = train::CurveLog::read_csv(curves_csv);
    plot::write_loss_curves_svg(log, out_image);
    std::cout << "wrote " << out_image << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctseg: semi-supervised 3D CT infection segmentation toolkit"};
    app.require_subcommand(1);

    // synth ------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "generate a synthetic .vol3 dataset");
    std::string synth_config, synth_out, synth_seed, synth_nl, synth_nu, synth_nv;
    auto* sc = synth->add_option("--config", synth_config, "config file");
    auto* so = synth->add_option("--out", synth_out, "output dataset directory");
    auto* ss = synth->add_option("--seed", synth_seed, "rng seed");
    auto* snl = synth->add_option("--n-labeled", synth_nl, "labeled case count");
    auto* snu = synth->add_option("--n-unlabeled", synth_nu, "unlabeled case count");
    auto* snv = synth->add_option("--n-val", synth_nv, "validation case count");

    // train ------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "train on a dataset directory");
    std::string tr_config, tr_data, tr_out, tr_seed, tr_iters, tr_resume, tr_base, tr_patch;
    bool tr_sup_only = false;
    auto* tc = tr->add_option("--config", tr_config, "config file");
    auto* td = tr->add_option("--data", tr_data, "dataset directory");
    auto* to = tr->add_option("--out", tr_out, "output directory");
    auto* tseed = tr->add_option("--seed", tr_seed, "rng seed");
    auto* titer = tr->add_option("--iters", tr_iters, "training iterations");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    auto* tbase = tr->add_option("--base-channels", tr_base, "network width at scale 1");
    auto* tpatch = tr->add_option("--patch", tr_patch, "training block H,W,D");
    auto* tsup = tr->add_flag("--supervised-only", tr_sup_only, "drop the consistency term");

    // infer ------------------------------------------------------------
    auto* inf = app.add_subcommand("infer", "sliding-window inference on volumes");
    std::string inf_config, inf_ckpt, inf_out, inf_thresh, inf_wlo, inf_whi;
    std::vector<std::string> inf_volumes;
    bool inf_teacher = false, inf_prob = false;
    auto* ic = inf->add_option("--config", inf_config, "config file");
    inf->add_option("--checkpoint", inf_ckpt, "trained checkpoint")->required();
    auto* io = inf->add_option("--out", inf_out, "output directory");
    auto* it = inf->add_option("--threshold", inf_thresh, "binarization threshold");
    auto* iwl = inf->add_option("--window-lo", inf_wlo, "intensity window low (HU)");
    auto* iwh = inf->add_option("--window-hi", inf_whi, "intensity window high (HU)");
    inf->add_flag("--teacher-infer", inf_teacher, "use the teacher network");
    inf->add_flag("--save-prob", inf_prob, "also write probability volumes");
    inf->add_option("volumes", inf_volumes, "input volumes (.vol3 or .nii)")->required();

    // evaluate ----------------------------------------------------------
    auto* ev = app.add_subcommand("evaluate", "volume-wise metrics: predictions vs ground truth");
    std::string ev_config, ev_pred, ev_gt, ev_tau, ev_out;
    auto* ec = ev->add_option("--config", ev_config, "config file");
    ev->add_option("--pred", ev_pred, "directory of predicted masks")->required();
    ev->add_option("--gt", ev_gt, "directory of ground-truth masks")->required();
    auto* et = ev->add_option("--tau-mm", ev_tau, "NSD tolerance in mm");
    ev->add_option("--out", ev_out, "metrics CSV path");

    // plot --------------------------------------------------------------
    auto* pl = app.add_subcommand("plot", "loss-curve figure from curves.csv");
    std::string pl_curves, pl_out;
    pl->add_option("--curves", pl_curves, "curves.csv from training")->required();
    pl->add_option("--out", pl_out, "output SVG path")->required();

    try {
        app.parse(argc, argv);

        if (*synth) {
            Overrides ov;
            ov.add_if(so, "out_dir", synth_out);
            ov.add_if(ss, "seed", synth_seed);
            ov.add_if(snl, "n_labeled", synth_nl);
            ov.add_if(snu, "n_unlabeled", synth_nu);
            ov.add_if(snv, "n_val", synth_nv);
            (void)sc;
            return cmd_synth(resolve_config(synth_config, ov));
        }
        if (*tr) {
            Overrides ov;
            ov.add_if(td, "data_dir", tr_data);
            ov.add_if(to, "out_dir", tr_out);
            ov.add_if(tseed, "seed", tr_seed);
            ov.add_if(titer, "iters", tr_iters);
            ov.add_if(tbase, "base_channels", tr_base);
            ov.add_if(tpatch, "patch", tr_patch);
            if (tsup->count() > 0) ov.kv.emplace_back("supervised_only", "true");
            (void)tc;
            const bool net_flags = tbase->count() > 0 || tpatch->count() > 0;
            return cmd_train(resolve_config(tr_config, ov), tr_resume, net_flags);
        }
        if (*inf) {
            Overrides ov;
            ov.add_if(io, "out_dir", inf_out);
            ov.add_if(it, "threshold", inf_thresh);
            ov.add_if(iwl, "window_lo", inf_wlo);
            ov.add_if(iwh, "window_hi", inf_whi);
            if (inf_teacher) ov.kv.emplace_back("teacher_infer", "true");
            if (inf_prob) ov.kv.emplace_back("save_probability", "true");
            (void)ic;
            return cmd_infer(resolve_config(inf_config, ov), inf_ckpt, inf_volumes);
        }
        if (*ev) {
            Overrides ov;
            ov.add_if(et, "tau_mm", ev_tau);
            (void)ec;
            return cmd_evaluate(resolve_config(ev_config, ov), ev_pred, ev_gt, ev_out);
        }
        if (*pl) return cmd_plot(pl_curves, pl_out);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
