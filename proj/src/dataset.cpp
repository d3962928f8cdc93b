#include "ctseg/dataset.hpp"

#include <fstream>

#include <json.hpp>

namespace ctseg::data {

void Manifest::save(const std::filesystem::path& dir) const {
    nlohmann::json j;
    j["cases"] = nlohmann::json::array();
    for (const auto& c : cases)
        j["cases"].push_back({{"id", c.id}, {"split", c.split}, {"labeled", c.labeled}});
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw IOFailure("cannot write manifest in " + dir.string());
    os << j.dump(2) << '\n';
}

Manifest Manifest::load(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream is(path);
    if (!is) throw IOFailure("cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile(path.string() + ": " + e.what());
    }
    Manifest m;
    try {
        for (const auto& c : j.at("cases"))
            m.cases.push_back({c.at("id").get<std::string>(), c.at("split").get<std::string>(),
                               c.at("labeled").get<bool>()});
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile(path.string() + ": " + e.what());
    }
    return m;
}

Manifest write_synthetic_dataset(const std::filesystem::path& dir, const cfg::RunConfig& cfg) {
    if (cfg.n_labeled < 1)
        throw ConfigError("synthetic dataset needs n_labeled >= 1 (training needs labels)");
    std::error_code ec;
    std::filesystem::create_directories(dir / "images", ec);
    std::filesystem::create_directories(dir / "masks", ec);
    std::filesystem::create_directories(dir / "unlabeled", ec);

    vol::SyntheticParams params;
    params.dims = cfg.synth_dims;
    params.spacing = cfg.synth_spacing;
    params.n_blobs = cfg.n_blobs;
    params.noise = cfg.synth_noise;

    Rng rng(cfg.seed);
    Rng synth_rng = rng.fork(0x3d);

    Manifest m;
    char buf[32];
    auto case_id = [&buf](const char* prefix, int i) {
        std::snprintf(buf, sizeof(buf), "%s_%03d", prefix, i);
        return std::string(buf);
    };

    for (int i = 0; i < cfg.n_labeled + cfg.n_val; ++i) {
        const bool val = i >= cfg.n_labeled;
        const auto id = case_id(val ? "val" : "case", val ? i - cfg.n_labeled : i);
        auto [image, mask] = vol::make_synthetic_case(synth_rng, params);
        vol::save_volume(image, dir / "images" / (id + ".vol3"));
        vol::save_mask(mask, dir / "masks" / (id + ".vol3"));
        m.cases.push_back({id, val ? "val" : "train", true});
    }
    for (int i = 0; i < cfg.n_unlabeled; ++i) {
        const auto id = case_id("unlab", i);
        auto [image, mask] = vol::make_synthetic_case(synth_rng, params);
        (void)mask;  // generated but withheld: this is the unlabeled pool
        vol::save_volume(image, dir / "unlabeled" / (id + ".vol3"));
        m.cases.push_back({id, "unlabeled", false});
    }
    m.save(dir);
    return m;
}

train::TrainData load_train_data(const std::filesystem::path& dir, double window_lo,
                                 double window_hi) {
    const Manifest m = Manifest::load(dir);
    std::vector<std::string> missing;
    for (const auto& c : m.cases) {
        const auto img = c.labeled ? dir / "images" / (c.id + ".vol3")
                                   : dir / "unlabeled" / (c.id + ".vol3");
        if (!std::filesystem::exists(img)) missing.push_back(img.string());
        if (c.labeled) {
            const auto msk = dir / "masks" / (c.id + ".vol3");
            if (!std::filesystem::exists(msk)) missing.push_back(msk.string());
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& s : missing) list += "\n  " + s;
        throw MissingCase("dataset files missing:" + list);
    }

    train::TrainData data;
    for (const auto& c : m.cases) {
        if (!c.labeled) {
            auto v = vol::load_volume(dir / "unlabeled" / (c.id + ".vol3"));
            data.unlabeled.push_back({c.id, vol::window_normalize(v, window_lo, window_hi)});
            continue;
        }
        auto v = vol::load_volume(dir / "images" / (c.id + ".vol3"));
        auto mk = vol::load_mask(dir / "masks" / (c.id + ".vol3"));
        if (mk.dims() != v.dims())
            throw MalformedFile("case " + c.id + ": mask dims do not match image dims");
        train::LabeledCase lc{c.id, vol::window_normalize(v, window_lo, window_hi),
                              std::move(mk)};
        if (c.split == "val")
            data.validation.push_back(std::move(lc));
        else
            data.labeled.push_back(std::move(lc));
    }
    return data;
}

}  // namespace ctseg::data
