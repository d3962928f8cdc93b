#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "ctseg/trainer.hpp"

// Checkpoint archive: "VCKP" | u32 version | u64 manifest length | manifest
// JSON | u64 tensor count | per tensor: u32 name length, name, u8 dtype
// (4=f32, 8=f64), u32 rank, u32 dims..., raw payload. The manifest echoes
// the network/training configs and the sampling state.
namespace ctseg::train {

namespace ckpt_detail {

constexpr char kMagic[4] = {'V', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_tag() {
    return sizeof(T) == 4 ? 4 : 8;
}
template <typename T>
constexpr const char* scalar_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    const uint32_t nl = uint32_t(name.size());
    os.write(reinterpret_cast<const char*>(&nl), 4);
    os.write(name.data(), nl);
    const uint8_t dt = dtype_tag<T>();
    os.write(reinterpret_cast<const char*>(&dt), 1);
    const uint32_t rank = uint32_t(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (int i = 0; i < t.rank(); ++i) {
        const uint32_t d = uint32_t(t.dim(i));
        os.write(reinterpret_cast<const char*>(&d), 4);
    }
    os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * sizeof(T)));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& is, const std::string& file) {
    uint32_t nl = 0;
    is.read(reinterpret_cast<char*>(&nl), 4);
    if (!is || nl > 4096) throw MalformedFile(file + ": bad tensor name length");
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    uint8_t dt = 0;
    is.read(reinterpret_cast<char*>(&dt), 1);
    if (dt != dtype_tag<T>())
        throw ConfigMismatch(file + ": checkpoint scalar width " + std::to_string(int(dt) * 8) +
                             "-bit does not match this build");
    uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 4);
    if (!is || rank == 0 || rank > 8) throw MalformedFile(file + ": bad tensor rank");
    std::vector<int> dims(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        if (!is || v == 0 || v > (1u << 24)) throw MalformedFile(file + ": bad tensor dim");
        dims[i] = int(v);
    }
    Tensor<T> t(dims);
    is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * sizeof(T)));
    if (!is) throw MalformedFile(file + ": truncated tensor payload for " + name);
    return {std::move(name), std::move(t)};
}

inline nlohmann::json net_to_json(const NetworkConfig& c) {
    return {{"base_channels", c.base_channels},
            {"aux_factor_j", c.aux_factor_j},
            {"aux_factor_k", c.aux_factor_k},
            {"patch", {c.patch.d, c.patch.h, c.patch.w}}};
}

inline NetworkConfig net_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.base_channels = j.at("base_channels").get<int>();
    c.aux_factor_j = j.at("aux_factor_j").get<int>();
    c.aux_factor_k = j.at("aux_factor_k").get<int>();
    const auto& p = j.at("patch");
    c.patch = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
    return c;
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"i_max", c.i_max},
            {"batch_labeled", c.batch_labeled},
            {"batch_unlabeled", c.batch_unlabeled},
            {"ema_beta", c.ema_beta},
            {"lambda_max", c.lambda_max},
            {"sigma_noise", c.sigma_noise},
            {"fg_bias", c.fg_bias},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"val_every", c.val_every},
            {"perturb_consistency", c.perturb_consistency},
            {"supervised_only", c.supervised_only}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.i_max = j.at("i_max").get<long long>();
    c.batch_labeled = j.at("batch_labeled").get<int>();
    c.batch_unlabeled = j.at("batch_unlabeled").get<int>();
    c.ema_beta = j.at("ema_beta").get<double>();
    c.lambda_max = j.at("lambda_max").get<double>();
    c.sigma_noise = j.at("sigma_noise").get<double>();
    c.fg_bias = j.at("fg_bias").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<long long>();
    c.val_every = j.at("val_every").get<long long>();
    c.perturb_consistency = j.at("perturb_consistency").get<bool>();
    c.supervised_only = j.at("supervised_only").get<bool>();
    return c;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const NetworkState<T>& st, const std::filesystem::path& path) {
    namespace cd = ckpt_detail;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IOFailure("cannot write checkpoint " + path.string());

    nlohmann::json manifest{
        {"version", cd::kVersion},
        {"scalar", cd::scalar_name<T>()},
        {"iter", st.iter},
        {"net", cd::net_to_json(st.net_cfg)},
        {"train", cd::train_to_json(st.cfg)},
        {"adam_t", st.opt.t},
        {"sampler", st.sampler.serialize()},
        {"labeled_order", st.labeled_order},
        {"labeled_cursor", st.labeled_cursor},
        {"unlabeled_order", st.unlabeled_order},
        {"unlabeled_cursor", st.unlabeled_cursor},
    };
    const std::string mj = manifest.dump();

    os.write(cd::kMagic, 4);
    const uint32_t ver = cd::kVersion;
    os.write(reinterpret_cast<const char*>(&ver), 4);
    const uint64_t mlen = mj.size();
    os.write(reinterpret_cast<const char*>(&mlen), 8);
    os.write(mj.data(), std::streamsize(mj.size()));

    const auto& sp = st.student->params();
    uint64_t count = sp.size() * 3 + (st.teacher ? sp.size() : 0);
    os.write(reinterpret_cast<const char*>(&count), 8);
    for (size_t i = 0; i < sp.size(); ++i) {
        cd::write_tensor(os, "student/" + sp[i]->name, sp[i]->value);
        cd::write_tensor(os, "adam_m/" + sp[i]->name, st.opt.m[i]);
        cd::write_tensor(os, "adam_v/" + sp[i]->name, st.opt.v[i]);
    }
    if (st.teacher)
        for (const auto* p : st.teacher->params())
            cd::write_tensor(os, "teacher/" + p->name, p->value);
    if (!os) throw IOFailure("write failed: " + path.string());
}

template <typename T>
std::unique_ptr<NetworkState<T>> load_checkpoint(const std::filesystem::path& path) {
    namespace cd = ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open checkpoint " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, cd::kMagic, 4) != 0)
        throw MalformedFile(path.string() + ": not a checkpoint file");
    uint32_t ver = 0;
    is.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != cd::kVersion)
        throw UnsupportedFormat(path.string() + ": checkpoint version " + std::to_string(ver));
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 8);
    if (!is || mlen > (64u << 20)) throw MalformedFile(path.string() + ": bad manifest length");
    std::string mj(mlen, '\0');
    is.read(mj.data(), std::streamsize(mlen));
    if (!is) throw MalformedFile(path.string() + ": truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mj);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile(path.string() + ": manifest parse error: " + e.what());
    }
    if (manifest.at("scalar").get<std::string>() != cd::scalar_name<T>())
        throw ConfigMismatch(path.string() + ": checkpoint scalar " +
                             manifest.at("scalar").get<std::string>() +
                             " does not match this build (" + cd::scalar_name<T>() + ")");

    const NetworkConfig nc = cd::net_from_json(manifest.at("net"));
    const TrainConfig tc = cd::train_from_json(manifest.at("train"));
    auto st = std::make_unique<NetworkState<T>>(nc, tc);
    st->iter = manifest.at("iter").get<long long>();
    st->opt.t = manifest.at("adam_t").get<long long>();
    st->sampler.restore(manifest.at("sampler").get<std::array<uint64_t, 4>>());
    st->labeled_order = manifest.at("labeled_order").get<std::vector<int>>();
    st->labeled_cursor = manifest.at("labeled_cursor").get<size_t>();
    st->unlabeled_order = manifest.at("unlabeled_order").get<std::vector<int>>();
    st->unlabeled_cursor = manifest.at("unlabeled_cursor").get<size_t>();

    std::map<std::string, Tensor<T>*> slots;
    const auto& sp = st->student->params();
    for (size_t i = 0; i < sp.size(); ++i) {
        slots["student/" + sp[i]->name] = &sp[i]->value;
        slots["adam_m/" + sp[i]->name] = &st->opt.m[i];
        slots["adam_v/" + sp[i]->name] = &st->opt.v[i];
    }
    if (st->teacher)
        for (auto* p : st->teacher->params()) slots["teacher/" + p->name] = &p->value;

    uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is || count != slots.size())
        throw MalformedFile(path.string() + ": tensor count " + std::to_string(count) +
                            " does not match architecture (" + std::to_string(slots.size()) + ")");
    for (uint64_t i = 0; i < count; ++i) {
        auto [name, t] = cd::read_tensor<T>(is, path.string());
        auto it = slots.find(name);
        if (it == slots.end())
            throw ConfigMismatch(path.string() + ": unexpected tensor " + name);
        if (!it->second->same_shape(t))
            throw ConfigMismatch(path.string() + ": shape mismatch for " + name);
        *it->second = std::move(t);
        slots.erase(it);
    }
    if (!slots.empty())
        throw MalformedFile(path.string() + ": missing tensor " + slots.begin()->first);
    return st;
}

}  // namespace ctseg::train
