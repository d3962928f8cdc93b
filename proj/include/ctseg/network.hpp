#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "ctseg/nn.hpp"
#include "ctseg/rng.hpp"
#include "ctseg/volume.hpp"

// Three-branch attention segmentation network. The input volume runs through
// a full-resolution branch plus two branches on in-plane down-sampled copies;
// per scale, channel attention derived from the auxiliary branches gates the
// main branch features, the gated features are merged U-Net style, and every
// decoder level emits a sigmoid probability map (P1 full resolution .. P5
// coarsest). P1 is the segmentation output.
namespace ctseg::net {

using nn::Act;
using nn::Graph;
using nn::Param;
using vol::Shape3;

struct NetworkConfig {
    int base_channels = 8;
    int aux_factor_j = 2;
    int aux_factor_k = 4;
    Shape3 patch;  // (D,H,W)

    static constexpr int n_scales = 5;

    int channels(int scale) const { return base_channels << (scale - 1); }  // scale 1..5

    void validate() const {
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (aux_factor_j < 1 || aux_factor_k < 1)
            throw ConfigError("aux factors must be >= 1");
        if (patch.d % 16 || patch.h % 16 || patch.w % 16)
            throw ConfigError("patch dims must be divisible by 16 (five scales), got " +
                              vol::to_string(patch));
        if (patch.h % aux_factor_j || patch.w % aux_factor_j || patch.h % aux_factor_k ||
            patch.w % aux_factor_k)
            throw ConfigError("patch in-plane dims must be divisible by the aux factors");
    }

    bool operator==(const NetworkConfig&) const = default;
};

// In-plane (H,W) average pooling; depth is deliberately left untouched
// because it is the thin axis of CT volumes.
template <typename T>
Tensor<T> avg_pool_inplane(const Tensor<T>& x, int factor) {
    if (x.rank() != 4) throw ShapeError("avg_pool_inplane: expected (C,D,H,W)");
    if (factor == 1) return x;
    const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % factor || w % factor)
        throw ShapeError("avg_pool_inplane: dims " + x.shape_str() + " not divisible by " +
                         std::to_string(factor));
    const int oh = h / factor, ow = w / factor;
    Tensor<T> y({c, d, oh, ow});
    const T inv = T(1) / T(factor * factor);
    for (int ch = 0; ch < c; ++ch)
        for (int z = 0; z < d; ++z)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    T s = 0;
                    for (int fy = 0; fy < factor; ++fy) {
                        const T* row = x.data() + ((size_t(ch) * d + z) * h + yy * factor + fy) * w +
                                       size_t(xx) * factor;
                        for (int fx = 0; fx < factor; ++fx) s += row[fx];
                    }
                    y.at4(ch, z, yy, xx) = s * inv;
                }
    return y;
}

namespace detail {

template <typename T>
void init_fan_in_uniform(Tensor<T>& w, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (size_t i = 0; i < w.numel(); ++i) w[i] = T(rng.uniform(-bound, bound));
}

}  // namespace detail

// conv(3x3x3) + instance norm + relu, twice; the first conv optionally
// strided for downsampling.
template <typename T>
struct ConvBlock {
    Param<T> w1, b1, g1, be1;
    Param<T> w2, b2, g2, be2;
    int stride1 = 1;

    ConvBlock() = default;

    ConvBlock(const std::string& prefix, int in_ch, int out_ch, int stride_first)
        : w1(prefix + ".c1.w", {out_ch, in_ch, 3, 3, 3}),
          b1(prefix + ".c1.b", {out_ch}),
          g1(prefix + ".n1.g", {out_ch}),
          be1(prefix + ".n1.b", {out_ch}),
          w2(prefix + ".c2.w", {out_ch, out_ch, 3, 3, 3}),
          b2(prefix + ".c2.b", {out_ch}),
          g2(prefix + ".n2.g", {out_ch}),
          be2(prefix + ".n2.b", {out_ch}),
          stride1(stride_first) {}

    void init(Rng& rng) {
        detail::init_fan_in_uniform(w1.value, w1.value.dim(1) * 27, rng);
        detail::init_fan_in_uniform(w2.value, w2.value.dim(1) * 27, rng);
        g1.value.fill(T(1));
        g2.value.fill(T(1));
    }

    Act<T>& run(Graph<T>& g, Act<T>& x) {
        Act<T>& a = nn::relu(g, nn::instance_norm(g, nn::conv3d(g, x, w1, b1, stride1), g1, be1));
        return nn::relu(g, nn::instance_norm(g, nn::conv3d(g, a, w2, b2, 1), g2, be2));
    }

    void collect(std::vector<Param<T>*>& out) {
        for (Param<T>* p : {&w1, &b1, &g1, &be1, &w2, &b2, &g2, &be2}) out.push_back(p);
    }
};

// Channel attention: GAP -> FC -> sigmoid on each auxiliary branch, applied
// multiplicatively (x + a(.)x) to the main branch. The two gates act in
// sequence: H = gate(F_I, A2 from F_J), AMF = gate(H, A3 from F_K).
template <typename T>
struct AttentionModule {
    Param<T> wj, bj, wk, bk;

    AttentionModule() = default;

    AttentionModule(const std::string& prefix, int channels)
        : wj(prefix + ".fc_j.w", {channels, channels}),
          bj(prefix + ".fc_j.b", {channels}),
          wk(prefix + ".fc_k.w", {channels, channels}),
          bk(prefix + ".fc_k.b", {channels}) {}

    void init(Rng& rng) {
        detail::init_fan_in_uniform(wj.value, wj.value.dim(1), rng);
        detail::init_fan_in_uniform(wk.value, wk.value.dim(1), rng);
    }

    struct Fused {
        Act<T>* a2 = nullptr;   // channel gate from F_J, in (0,1)
        Act<T>* a3 = nullptr;   // channel gate from F_K, in (0,1)
        Act<T>* h = nullptr;    // gated main features
        Act<T>* amf = nullptr;  // output
    };

    Fused fuse(Graph<T>& g, Act<T>& f_i, Act<T>& f_j, Act<T>& f_k) {
        if (f_i.val.dim(0) != f_j.val.dim(0) || f_i.val.dim(0) != f_k.val.dim(0))
            throw ShapeError("attention fuse: branch channel counts differ");
        Fused r;
        r.a2 = &nn::sigmoid(g, nn::fc(g, nn::gap(g, f_j), wj, bj));
        r.h = &nn::channel_gate(g, f_i, *r.a2);
        r.a3 = &nn::sigmoid(g, nn::fc(g, nn::gap(g, f_k), wk, bk));
        r.amf = &nn::channel_gate(g, *r.h, *r.a3);
        return r;
    }

    void collect(std::vector<Param<T>*>& out) {
        for (Param<T>* p : {&wj, &bj, &wk, &bk}) out.push_back(p);
    }
};

// Side-output head: three 3x3x3 conv+relu, a 1x1x1 projection, sigmoid.
template <typename T>
struct Head {
    Param<T> w1, b1, w2, b2, w3, b3, wp, bp;

    Head() = default;

    Head(const std::string& prefix, int channels)
        : w1(prefix + ".h1.w", {channels, channels, 3, 3, 3}),
          b1(prefix + ".h1.b", {channels}),
          w2(prefix + ".h2.w", {channels, channels, 3, 3, 3}),
          b2(prefix + ".h2.b", {channels}),
          w3(prefix + ".h3.w", {channels, channels, 3, 3, 3}),
          b3(prefix + ".h3.b", {channels}),
          wp(prefix + ".out.w", {1, channels}),
          bp(prefix + ".out.b", {1}) {}

    void init(Rng& rng) {
        detail::init_fan_in_uniform(w1.value, w1.value.dim(1) * 27, rng);
        detail::init_fan_in_uniform(w2.value, w2.value.dim(1) * 27, rng);
        detail::init_fan_in_uniform(w3.value, w3.value.dim(1) * 27, rng);
        detail::init_fan_in_uniform(wp.value, wp.value.dim(1), rng);
    }

    Act<T>& run(Graph<T>& g, Act<T>& x) {
        Act<T>& a1 = nn::relu(g, nn::conv3d(g, x, w1, b1, 1));
        Act<T>& a2 = nn::relu(g, nn::conv3d(g, a1, w2, b2, 1));
        Act<T>& a3 = nn::relu(g, nn::conv3d(g, a2, w3, b3, 1));
        return nn::sigmoid(g, nn::conv1x1(g, a3, wp, bp));
    }

    void collect(std::vector<Param<T>*>& out) {
        for (Param<T>* p : {&w1, &b1, &w2, &b2, &w3, &b3, &wp, &bp}) out.push_back(p);
    }
};

template <typename T>
struct Branch {
    std::array<ConvBlock<T>, NetworkConfig::n_scales> stages;

    Branch() = default;

    Branch(const std::string& prefix, const NetworkConfig& cfg) {
        stages[0] = ConvBlock<T>(prefix + ".s1", 1, cfg.channels(1), 1);
        for (int k = 2; k <= NetworkConfig::n_scales; ++k)
            stages[size_t(k - 1)] =
                ConvBlock<T>(prefix + ".s" + std::to_string(k), cfg.channels(k - 1),
                             cfg.channels(k), 2);
    }

    void init(Rng& rng) {
        for (auto& s : stages) s.init(rng);
    }

    std::array<Act<T>*, NetworkConfig::n_scales> run(Graph<T>& g, Act<T>& x) {
        std::array<Act<T>*, NetworkConfig::n_scales> out{};
        Act<T>* cur = &x;
        for (size_t k = 0; k < stages.size(); ++k) {
            cur = &stages[k].run(g, *cur);
            out[k] = cur;
        }
        return out;
    }

    void collect(std::vector<Param<T>*>& out) {
        for (auto& s : stages) s.collect(out);
    }
};

template <typename T>
class MdaCnn {
public:
    MdaCnn(const NetworkConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        branch_i_ = Branch<T>("enc_i", cfg_);
        branch_j_ = Branch<T>("enc_j", cfg_);
        branch_k_ = Branch<T>("enc_k", cfg_);
        for (int k = 1; k <= NetworkConfig::n_scales; ++k) {
            att_[size_t(k - 1)] =
                AttentionModule<T>("att" + std::to_string(k), cfg_.channels(k));
            heads_[size_t(k - 1)] = Head<T>("head" + std::to_string(k), cfg_.channels(k));
        }
        // Decoder level k consumes upsample(D_{k+1}) ++ AMF_k.
        for (int k = 1; k <= NetworkConfig::n_scales - 1; ++k)
            dec_[size_t(k - 1)] = ConvBlock<T>("dec" + std::to_string(k),
                                               cfg_.channels(k + 1) + cfg_.channels(k),
                                               cfg_.channels(k), 1);

        branch_i_.collect(params_);
        branch_j_.collect(params_);
        branch_k_.collect(params_);
        for (auto& a : att_) a.collect(params_);
        for (auto& d : dec_) d.collect(params_);
        for (auto& h : heads_) h.collect(params_);

        Rng rng(init_seed);
        Rng wr = rng.fork(0x77u);
        branch_i_.init(wr);
        branch_j_.init(wr);
        branch_k_.init(wr);
        for (auto& a : att_) a.init(wr);
        for (auto& d : dec_) d.init(wr);
        for (auto& h : heads_) h.init(wr);
    }

    MdaCnn(const MdaCnn&) = delete;
    MdaCnn& operator=(const MdaCnn&) = delete;

    const NetworkConfig& config() const { return cfg_; }

    struct ScaleFeatures {
        Act<T>* f_i = nullptr;
        Act<T>* f_j = nullptr;
        Act<T>* f_k = nullptr;
        Act<T>* a2 = nullptr;
        Act<T>* a3 = nullptr;
        Act<T>* h = nullptr;
        Act<T>* amf = nullptr;
    };

    struct Forward {
        std::array<Act<T>*, NetworkConfig::n_scales> preds{};  // P1..P5
        std::array<ScaleFeatures, NetworkConfig::n_scales> scales{};
    };

    // patch is (1,D,H,W) and must match the configured patch dims.
    Forward forward(Graph<T>& g, const Tensor<T>& patch) {
        if (patch.rank() != 4 || patch.dim(0) != 1 || patch.dim(1) != cfg_.patch.d ||
            patch.dim(2) != cfg_.patch.h || patch.dim(3) != cfg_.patch.w)
            throw ShapeError("forward: patch " + patch.shape_str() + " does not match config " +
                             vol::to_string(cfg_.patch));

        Act<T>& xi = g.leaf(patch);
        Act<T>& xj = g.leaf(avg_pool_inplane(patch, cfg_.aux_factor_j));
        Act<T>& xk = g.leaf(avg_pool_inplane(patch, cfg_.aux_factor_k));

        Forward fw;
        const auto fi = branch_i_.run(g, xi);
        const auto fj = branch_j_.run(g, xj);
        const auto fk = branch_k_.run(g, xk);

        std::array<Act<T>*, NetworkConfig::n_scales> amf{};
        for (size_t k = 0; k < NetworkConfig::n_scales; ++k) {
            auto fused = att_[k].fuse(g, *fi[k], *fj[k], *fk[k]);
            amf[k] = fused.amf;
            fw.scales[k] = {fi[k], fj[k], fk[k], fused.a2, fused.a3, fused.h, fused.amf};
        }

        Act<T>* d = amf[NetworkConfig::n_scales - 1];
        fw.preds[NetworkConfig::n_scales - 1] = &heads_[NetworkConfig::n_scales - 1].run(g, *d);
        for (int k = NetworkConfig::n_scales - 1; k >= 1; --k) {
            Act<T>& up = nn::upsample2(g, *d, amf[size_t(k - 1)]->val.dim(1),
                                       amf[size_t(k - 1)]->val.dim(2),
                                       amf[size_t(k - 1)]->val.dim(3));
            Act<T>& cat = nn::concat_c(g, up, *amf[size_t(k - 1)]);
            d = &dec_[size_t(k - 1)].run(g, cat);
            fw.preds[size_t(k - 1)] = &heads_[size_t(k - 1)].run(g, *d);
        }
        return fw;
    }

    const std::vector<Param<T>*>& params() const { return params_; }

    size_t param_count() const {
        size_t n = 0;
        for (const auto* p : params_) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto* p : params_) p->grad.zero();
    }

    void copy_params_from(const MdaCnn& other) {
        if (!(cfg_ == other.cfg_)) throw ConfigMismatch("copy_params_from: configs differ");
        for (size_t i = 0; i < params_.size(); ++i) params_[i]->value = other.params_[i]->value;
    }

    AttentionModule<T>& attention(int scale) { return att_[size_t(scale - 1)]; }

private:
    NetworkConfig cfg_;
    Branch<T> branch_i_, branch_j_, branch_k_;
    std::array<AttentionModule<T>, NetworkConfig::n_scales> att_{};
    std::array<ConvBlock<T>, NetworkConfig::n_scales - 1> dec_{};
    std::array<Head<T>, NetworkConfig::n_scales> heads_{};
    std::vector<Param<T>*> params_;
};

// Expected side-output dims for a patch: every scale halves all three axes
// (ceil division).
inline Shape3 scale_dims(const Shape3& patch, int scale) {
    Shape3 s = patch;
    for (int i = 1; i < scale; ++i) s = {(s.d + 1) / 2, (s.h + 1) / 2, (s.w + 1) / 2};
    return s;
}

}  // namespace ctseg::net
