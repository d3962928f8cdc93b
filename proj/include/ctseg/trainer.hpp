#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctseg/losses.hpp"
#include "ctseg/network.hpp"
#include "ctseg/volume.hpp"

// Student/teacher training loop: supervised multi-scale dice on labeled
// patches, multi-scale MSE consistency between the student and the EMA
// teacher on unlabeled patches, Adam on the student only. All randomness
// flows through one serializable generator so a checkpoint resume replays
// the exact run.
namespace ctseg::train {

using losses::LossBreakdown;
using net::MdaCnn;
using net::NetworkConfig;
using nn::Param;
using vol::Shape3;

struct TrainConfig {
    double lr = 3e-4;
    long long i_max = 5000;
    int batch_labeled = 2;
    int batch_unlabeled = 2;
    double ema_beta = 0.99;
    double lambda_max = 5.0;
    double sigma_noise = 10.0 / 1400.0;  // HU sigma 10 rescaled to the [0,1] window
    double fg_bias = 0.5;
    uint64_t seed = 1;
    long long checkpoint_every = 0;  // 0: final checkpoint only
    long long val_every = 25;        // 0: no validation records
    bool perturb_consistency = true;  // independent noise for student/teacher views
    bool supervised_only = false;     // ablation: no teacher, no consistency term

    void validate() const {
        if (!(lr > 0)) throw ConfigError("lr must be > 0");
        if (i_max < 1) throw ConfigError("i_max must be >= 1");
        if (batch_labeled < 1 || batch_unlabeled < 1)
            throw ConfigError("batch sizes must be >= 1");
        if (ema_beta < 0.0 || ema_beta >= 1.0) throw ConfigError("ema_beta must be in [0,1)");
        if (sigma_noise < 0.0) throw ConfigError("sigma_noise must be >= 0");
        if (fg_bias < 0.0 || fg_bias > 1.0) throw ConfigError("fg_bias must be in [0,1]");
    }
};

struct LabeledCase {
    std::string id;
    vol::Volume3D image;
    vol::Mask3D mask;
};

struct UnlabeledCase {
    std::string id;
    vol::Volume3D image;
};

struct TrainData {
    std::vector<LabeledCase> labeled;
    std::vector<UnlabeledCase> unlabeled;
    std::vector<LabeledCase> validation;
};

struct CurveRecord {
    long long iter = 0;
    double epoch = 0.0;
    double sup = 0.0;
    double cons = 0.0;
    double lambda = 0.0;
    double total = 0.0;
    std::optional<double> val;
};

struct CurveLog {
    std::vector<CurveRecord> records;

    void write_csv(const std::filesystem::path& path) const;
    static CurveLog read_csv(const std::filesystem::path& path);
};

// --- parameter-space ops ----------------------------------------------------

// teacher <- beta * teacher + (1 - beta) * student, element-wise.
template <typename T>
void ema_update(const std::vector<Param<T>*>& teacher, const std::vector<Param<T>*>& student,
                double beta) {
    if (beta < 0.0 || beta >= 1.0) throw DomainError("ema_update: beta must be in [0,1)");
    if (teacher.size() != student.size())
        throw ShapeError("ema_update: parameter lists differ in length");
    for (size_t i = 0; i < teacher.size(); ++i) {
        Param<T>& t = *teacher[i];
        const Param<T>& s = *student[i];
        if (t.name != s.name || !t.value.same_shape(s.value))
            throw ShapeError("ema_update: parameter mismatch at " + t.name);
        const T b = T(beta), ib = T(1.0 - beta);
        for (size_t j = 0; j < t.value.numel(); ++j)
            t.value[j] = b * t.value[j] + ib * s.value[j];
    }
}

template <typename T>
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<Tensor<T>> m, v;

    void init(const std::vector<Param<T>*>& params) {
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
        t = 0;
    }

    void step(const std::vector<Param<T>*>& params, double lr) {
        ++t;
        const T b1 = T(beta1), b2 = T(beta2);
        const T c1 = T(1.0 / (1.0 - std::pow(beta1, double(t))));
        const T c2 = T(1.0 / (1.0 - std::pow(beta2, double(t))));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& val = params[i]->value;
            const Tensor<T>& g = params[i]->grad;
            Tensor<T>& mi = m[i];
            Tensor<T>& vi = v[i];
            for (size_t j = 0; j < val.numel(); ++j) {
                mi[j] = b1 * mi[j] + (T(1) - b1) * g[j];
                vi[j] = b2 * vi[j] + (T(1) - b2) * g[j] * g[j];
                val[j] -= T(lr) * (mi[j] * c1) / (std::sqrt(vi[j] * c2) + T(eps));
            }
        }
    }
};

// --- network state ------------------------------------------------------------

template <typename T>
struct NetworkState {
    NetworkConfig net_cfg;
    TrainConfig cfg;
    std::unique_ptr<MdaCnn<T>> student;
    std::unique_ptr<MdaCnn<T>> teacher;  // null in supervised-only mode
    AdamState<T> opt;
    long long iter = 0;

    // sampling state, serialized so resume replays the run exactly
    Rng sampler;
    std::vector<int> labeled_order, unlabeled_order;
    size_t labeled_cursor = 0, unlabeled_cursor = 0;

    NetworkState(const NetworkConfig& nc, const TrainConfig& tc)
        : net_cfg(nc), cfg(tc), sampler(Rng(tc.seed).fork(0x5a)) {
        cfg.validate();
        student = std::make_unique<MdaCnn<T>>(nc, tc.seed);
        if (!tc.supervised_only) {
            teacher = std::make_unique<MdaCnn<T>>(nc, tc.seed);
            teacher->copy_params_from(*student);
        }
        opt.init(student->params());
    }
};

// --- data conversion -----------------------------------------------------------

template <typename T>
Tensor<T> image_tensor(const vol::Volume3D& v) {
    const Shape3 d = v.dims();
    Tensor<T> t({1, d.d, d.h, d.w});
    for (size_t i = 0; i < v.voxels().size(); ++i) t[i] = T(v.voxels()[i]);
    return t;
}

template <typename T>
std::array<Tensor<T>, losses::kScales> target_tensors(const vol::Mask3D& mask) {
    const auto ms = vol::downsample_mask(mask);
    std::array<Tensor<T>, losses::kScales> out;
    for (int k = 0; k < losses::kScales; ++k) {
        const auto& m = ms.targets[size_t(k)];
        const Shape3 d = m.dims();
        Tensor<T> t({1, d.d, d.h, d.w});
        for (size_t i = 0; i < m.labels().size(); ++i) t[i] = T(m.labels()[i]);
        out[size_t(k)] = std::move(t);
    }
    return out;
}

template <typename T>
struct LabeledBatchItem {
    Tensor<T> image;
    std::array<Tensor<T>, losses::kScales> targets;
};

template <typename T>
struct UnlabeledBatchItem {
    Tensor<T> student_view;
    Tensor<T> teacher_view;
};

// --- one optimization step -----------------------------------------------------

template <typename T>
LossBreakdown train_step(NetworkState<T>& st, const std::vector<LabeledBatchItem<T>>& labeled,
                         const std::vector<UnlabeledBatchItem<T>>& unlabeled) {
    if (labeled.empty()) throw EmptyInput("train_step: labeled batch is empty");
    const long long it = st.iter + 1;  // 1-based iteration being computed
    LossBreakdown bd;
    bd.lambda = losses::ramp_weight(it, st.cfg.i_max, st.cfg.lambda_max);

    st.student->zero_grad();

    const double wl = 1.0 / double(labeled.size());
    for (const auto& item : labeled) {
        nn::Graph<T> g(true);
        auto fw = st.student->forward(g, item.image);
        for (int k = 0; k < losses::kScales; ++k) {
            auto& pk = *fw.preds[size_t(k)];
            const double d = losses::dice_loss(pk.val, item.targets[size_t(k)]);
            bd.per_scale_supervised[size_t(k)] += wl * d;
            losses::dice_loss_grad(pk.val, item.targets[size_t(k)], wl, pk.grad);
        }
        g.backward();
    }
    for (double d : bd.per_scale_supervised) bd.supervised += d;

    const bool use_consistency = !st.cfg.supervised_only && !unlabeled.empty();
    if (use_consistency) {
        const double wu = 1.0 / double(unlabeled.size());
        for (const auto& item : unlabeled) {
            nn::Graph<T> gt(false);
            auto tfw = st.teacher->forward(gt, item.teacher_view);
            nn::Graph<T> gs(true);
            auto sfw = st.student->forward(gs, item.student_view);
            for (int k = 0; k < losses::kScales; ++k) {
                auto& sk = *sfw.preds[size_t(k)];
                const auto& tk = tfw.preds[size_t(k)]->val;
                const double d = losses::mse_loss(sk.val, tk);
                bd.per_scale_consistency[size_t(k)] += wu * d;
                // teacher is a constant target; gradient reaches the student only
                losses::mse_loss_grad(sk.val, tk, bd.lambda * wu, sk.grad);
            }
            gs.backward();
        }
        for (double d : bd.per_scale_consistency) bd.consistency += d;
    }

    bd.total = losses::total_loss(bd.supervised, bd.consistency, bd.lambda);
    if (!std::isfinite(bd.total))
        throw NonFiniteLoss("iteration " + std::to_string(it) + ": total=" +
                            std::to_string(bd.total) + " sup=" + std::to_string(bd.supervised) +
                            " cons=" + std::to_string(bd.consistency));

    st.opt.step(st.student->params(), st.cfg.lr);
    if (st.teacher) ema_update(st.teacher->params(), st.student->params(), st.cfg.ema_beta);
    st.iter = it;
    return bd;
}

// --- full training loop ----------------------------------------------------------

namespace detail {

template <typename T>
int next_index(NetworkState<T>& st, std::vector<int>& order, size_t& cursor, size_t n) {
    if (order.size() != n) {
        order.resize(n);
        for (size_t i = 0; i < n; ++i) order[i] = int(i);
        cursor = n;  // force reshuffle below
    }
    if (cursor >= n) {
        for (size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[st.sampler.uniform_index(i)]);
        cursor = 0;
    }
    return order[cursor++];
}

template <typename T>
LabeledBatchItem<T> make_labeled_item(NetworkState<T>& st, const LabeledCase& c) {
    auto patch = vol::sample_patch(c.image, &c.mask, st.net_cfg.patch, st.sampler,
                                   st.cfg.fg_bias);
    patch = vol::augment_flip(patch, st.sampler);
    patch = vol::augment_noise(patch, st.cfg.sigma_noise, st.sampler);
    return LabeledBatchItem<T>{image_tensor<T>(patch.image), target_tensors<T>(*patch.mask)};
}

template <typename T>
UnlabeledBatchItem<T> make_unlabeled_item(NetworkState<T>& st, const UnlabeledCase& c) {
    auto patch = vol::sample_patch(c.image, nullptr, st.net_cfg.patch, st.sampler, 0.0);
    patch = vol::augment_flip(patch, st.sampler);
    UnlabeledBatchItem<T> item;
    if (st.cfg.perturb_consistency) {
        item.student_view =
            image_tensor<T>(vol::augment_noise(patch, st.cfg.sigma_noise, st.sampler).image);
        item.teacher_view =
            image_tensor<T>(vol::augment_noise(patch, st.cfg.sigma_noise, st.sampler).image);
    } else {
        auto shared = vol::augment_noise(patch, st.cfg.sigma_noise, st.sampler);
        item.student_view = image_tensor<T>(shared.image);
        item.teacher_view = item.student_view;
    }
    return item;
}

}  // namespace detail

// Mean supervised loss over deterministic centre patches of the held-out
// labeled cases.
template <typename T>
double validation_loss(NetworkState<T>& st, const std::vector<LabeledCase>& validation) {
    double acc = 0.0;
    for (const auto& c : validation) {
        const Shape3 p = st.net_cfg.patch;
        const auto img = vol::pad_to(c.image, p);
        const auto msk = vol::pad_to(c.mask, p);
        const Shape3 d = img.dims();
        const int z0 = (d.d - p.d) / 2, y0 = (d.h - p.h) / 2, x0 = (d.w - p.w) / 2;
        std::vector<float> pv(p.numel());
        std::vector<uint8_t> mv(p.numel());
        for (int z = 0; z < p.d; ++z)
            for (int y = 0; y < p.h; ++y)
                for (int x = 0; x < p.w; ++x) {
                    pv[(size_t(z) * p.h + y) * p.w + x] = img.at(z0 + z, y0 + y, x0 + x);
                    mv[(size_t(z) * p.h + y) * p.w + x] = msk.at(z0 + z, y0 + y, x0 + x);
                }
        const auto image = image_tensor<T>(vol::Volume3D(p, img.spacing(), std::move(pv)));
        const auto targets = target_tensors<T>(vol::Mask3D(p, msk.spacing(), std::move(mv)));
        nn::Graph<T> g(false);
        auto fw = st.student->forward(g, image);
        for (int k = 0; k < losses::kScales; ++k)
            acc += losses::dice_loss(fw.preds[size_t(k)]->val, targets[size_t(k)]);
    }
    return validation.empty() ? 0.0 : acc / double(validation.size());
}

template <typename T>
void save_checkpoint(const NetworkState<T>& st, const std::filesystem::path& path);
template <typename T>
std::unique_ptr<NetworkState<T>> load_checkpoint(const std::filesystem::path& path);

// Runs from st.iter to cfg.i_max, appending one record per iteration.
// checkpoint_dir may be empty to disable periodic checkpoints.
template <typename T>
void train(NetworkState<T>& st, const TrainData& data, CurveLog& log,
           const std::filesystem::path& checkpoint_dir = {}) {
    if (data.labeled.empty()) throw EmptyInput("train: labeled set is empty");
    const auto& cfg = st.cfg;

    while (st.iter < cfg.i_max) {
        std::vector<LabeledBatchItem<T>> lb;
        lb.reserve(size_t(cfg.batch_labeled));
        for (int i = 0; i < cfg.batch_labeled; ++i) {
            const int idx = detail::next_index(st, st.labeled_order, st.labeled_cursor,
                                               data.labeled.size());
            lb.push_back(detail::make_labeled_item<T>(st, data.labeled[size_t(idx)]));
        }
        std::vector<UnlabeledBatchItem<T>> ub;
        if (!cfg.supervised_only && !data.unlabeled.empty()) {
            ub.reserve(size_t(cfg.batch_unlabeled));
            for (int i = 0; i < cfg.batch_unlabeled; ++i) {
                const int idx = detail::next_index(st, st.unlabeled_order, st.unlabeled_cursor,
                                                   data.unlabeled.size());
                ub.push_back(detail::make_unlabeled_item<T>(st, data.unlabeled[size_t(idx)]));
            }
        }

        const LossBreakdown bd = train_step(st, lb, ub);

        CurveRecord rec;
        rec.iter = st.iter;
        rec.epoch = double(st.iter) * double(cfg.batch_labeled) / double(data.labeled.size());
        rec.sup = bd.supervised;
        rec.cons = bd.consistency;
        rec.lambda = bd.lambda;
        rec.total = bd.total;
        if (cfg.val_every > 0 && (st.iter % cfg.val_every == 0 || st.iter == cfg.i_max) &&
            !data.validation.empty())
            rec.val = validation_loss(st, data.validation);
        log.records.push_back(rec);

        if (!checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
            st.iter % cfg.checkpoint_every == 0 && st.iter < cfg.i_max)
            save_checkpoint(st, checkpoint_dir /
                                    ("checkpoint_" + std::to_string(st.iter) + ".ckpt"));
    }
}

}  // namespace ctseg::train

#include "ctseg/trainer_io.hpp"
