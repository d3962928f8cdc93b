#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <numeric>

#include "ctseg/losses.hpp"
#include "ctseg/network.hpp"
#include "gradcheck.hpp"

using namespace ctseg;
using net::MdaCnn;
using net::NetworkConfig;
using nn::Graph;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, const std::vector<int>& shape, double lo = 0.0,
                        double hi = 1.0) {
    Tensor<T> t(shape);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(lo, hi));
    return t;
}

NetworkConfig tiny_config(int base, vol::Shape3 patch) {
    NetworkConfig cfg;
    cfg.base_channels = base;
    cfg.patch = patch;
    return cfg;
}

}  // namespace

TEST_CASE("auxiliary volume pooling") {
    // constant input stays constant under average pooling
    Tensor<float> c({1, 8, 8, 8});
    c.fill(3.25f);
    const auto j = net::avg_pool_inplane(c, 2);
    CHECK(j.shape() == std::vector<int>{1, 8, 4, 4});
    for (size_t i = 0; i < j.numel(); ++i) CHECK(j[i] == 3.25f);

    // paper-style dims: H,W 64 with depth 32 -> J halves in-plane only
    Tensor<float> x({1, 32, 64, 64});
    const auto jj = net::avg_pool_inplane(x, 2);
    CHECK(jj.shape() == std::vector<int>{1, 32, 32, 32});
    const auto kk = net::avg_pool_inplane(x, 4);
    CHECK(kk.shape() == std::vector<int>{1, 32, 16, 16});

    // checkerboard 0/1 in-plane averages to exactly 0.5
    Tensor<float> cb({1, 2, 4, 4});
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x2 = 0; x2 < 4; ++x2) cb.at4(0, z, y, x2) = float((y + x2) % 2);
    const auto pooled = net::avg_pool_inplane(cb, 2);
    for (size_t i = 0; i < pooled.numel(); ++i) CHECK(pooled[i] == 0.5f);

    Tensor<float> odd({1, 4, 6, 6});
    CHECK_THROWS_AS(net::avg_pool_inplane(odd, 4), ShapeError);
}

TEST_CASE("attention module: closed-form gates and zero propagation") {
    Rng rng(5);
    const int C = 4;
    net::AttentionModule<double> att("att", C);  // weights default to zero

    Graph<double> g(false);
    auto& fi = g.leaf(random_tensor<double>(rng, {C, 4, 4, 4}));
    auto& fj = g.leaf(random_tensor<double>(rng, {C, 4, 2, 2}));
    auto& fk = g.leaf(random_tensor<double>(rng, {C, 4, 1, 1}));

    auto fused = att.fuse(g, fi, fj, fk);
    for (size_t i = 0; i < fused.a2->val.numel(); ++i) {
        CHECK(fused.a2->val[i] == doctest::Approx(0.5));
        CHECK(fused.a3->val[i] == doctest::Approx(0.5));
    }
    // zero FC -> gates 0.5 -> AMF = 1.5^2 * F_I
    for (size_t i = 0; i < fi.val.numel(); ++i)
        CHECK(fused.amf->val[i] == doctest::Approx(2.25 * fi.val[i]).epsilon(1e-12));

    // F_I = 0 forces AMF = 0 for any gate values
    net::AttentionModule<double> att2("att2", C);
    att2.init(rng);
    Graph<double> g2(false);
    auto& zero = g2.leaf(Tensor<double>({C, 4, 4, 4}));
    auto fused2 = att2.fuse(g2, zero, fj, fk);
    for (size_t i = 0; i < fused2.amf->val.numel(); ++i) CHECK(fused2.amf->val[i] == 0.0);
    // gates strictly inside (0,1)
    for (size_t i = 0; i < fused2.a2->val.numel(); ++i) {
        CHECK(fused2.a2->val[i] > 0.0);
        CHECK(fused2.a2->val[i] < 1.0);
    }

    Tensor<double> wrong({C + 1, 4, 2, 2});
    Graph<double> g3(false);
    auto& bad = g3.leaf(wrong);
    CHECK_THROWS_AS(att2.fuse(g3, fi, bad, fk), ShapeError);
}

TEST_CASE("attention is invariant to spatial permutations of the gate source") {
    Rng rng(6);
    const int C = 3;
    net::AttentionModule<double> att("att", C);
    att.init(rng);

    auto fi = random_tensor<double>(rng, {C, 4, 4, 4});
    auto fj = random_tensor<double>(rng, {C, 2, 4, 4});
    auto fk = random_tensor<double>(rng, {C, 2, 2, 2});

    Graph<double> g(false);
    auto base = att.fuse(g, g.leaf(fi), g.leaf(fj), g.leaf(fk));

    const size_t vox = fj.numel() / size_t(C);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<size_t> perm(vox);
        std::iota(perm.begin(), perm.end(), size_t{0});
        for (size_t i = vox; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
        Tensor<double> fj_perm(fj.shape());
        for (int ch = 0; ch < C; ++ch)
            for (size_t i = 0; i < vox; ++i)
                fj_perm[size_t(ch) * vox + i] = fj[size_t(ch) * vox + perm[i]];

        Graph<double> g2(false);
        auto out = att.fuse(g2, g2.leaf(fi), g2.leaf(fj_perm), g2.leaf(fk));
        for (size_t i = 0; i < out.amf->val.numel(); ++i)
            CHECK(out.amf->val[i] == doctest::Approx(base.amf->val[i]).epsilon(1e-12));
    }
}

TEST_CASE("forward shape schedule and channel plan") {
    const auto cfg = tiny_config(2, {16, 32, 32});  // (D,H,W)
    MdaCnn<float> network(cfg, 1);
    Rng rng(7);
    const auto patch = random_tensor<float>(rng, {1, 16, 32, 32});

    Graph<float> g(false);
    const auto fw = network.forward(g, patch);

    // five side outputs, halving schedule on all three axes
    vol::Shape3 want{16, 32, 32};
    for (int k = 0; k < 5; ++k) {
        const auto& p = fw.preds[size_t(k)]->val;
        CHECK(p.dim(0) == 1);
        CHECK(p.dim(1) == want.d);
        CHECK(p.dim(2) == want.h);
        CHECK(p.dim(3) == want.w);
        want = {(want.d + 1) / 2, (want.h + 1) / 2, (want.w + 1) / 2};
        // probabilities in [0,1]
        for (size_t i = 0; i < p.numel(); ++i) {
            CHECK(p[i] >= 0.0f);
            CHECK(p[i] <= 1.0f);
        }
        // fused features carry the doubling channel plan
        CHECK(fw.scales[size_t(k)].amf->val.dim(0) == cfg.channels(k + 1));
        // gated features share the main branch spatial dims
        for (int dim = 1; dim < 4; ++dim)
            CHECK(fw.scales[size_t(k)].amf->val.dim(dim) ==
                  fw.scales[size_t(k)].f_i->val.dim(dim));
    }

    // patch dims must match the configured shape
    Tensor<float> wrong({1, 16, 32, 16});
    CHECK_THROWS_AS(network.forward(g, wrong), ShapeError);
}

TEST_CASE("determinism: seeds fix parameters and outputs") {
    const auto cfg = tiny_config(2, {16, 16, 16});
    MdaCnn<float> a(cfg, 99), b(cfg, 99), c(cfg, 100);
    const auto& pa = a.params();
    const auto& pb = b.params();
    const auto& pc = c.params();
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_diff_c = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        for (size_t j = 0; j < pa[i]->value.numel(); ++j) {
            if (pa[i]->value[j] != pb[i]->value[j]) all_equal = false;
            if (pa[i]->value[j] != pc[i]->value[j]) any_diff_c = true;
        }
    }
    CHECK(all_equal);
    CHECK(any_diff_c);

    Rng rng(3);
    const auto patch = random_tensor<float>(rng, {1, 16, 16, 16});
    Graph<float> g1(false), g2(false);
    const auto f1 = a.forward(g1, patch);
    const auto f2 = a.forward(g2, patch);
    for (int k = 0; k < 5; ++k)
        for (size_t i = 0; i < f1.preds[size_t(k)]->val.numel(); ++i)
            CHECK(f1.preds[size_t(k)]->val[i] == f2.preds[size_t(k)]->val[i]);
}

TEST_CASE("all-zero parameters produce all-zero fused features") {
    const auto cfg = tiny_config(2, {16, 16, 16});
    MdaCnn<float> network(cfg, 1);
    for (auto* p : network.params()) p->value.zero();
    Rng rng(8);
    const auto patch = random_tensor<float>(rng, {1, 16, 16, 16});
    Graph<float> g(false);
    const auto fw = network.forward(g, patch);
    for (int k = 0; k < 5; ++k)
        for (size_t i = 0; i < fw.scales[size_t(k)].amf->val.numel(); ++i)
            CHECK(fw.scales[size_t(k)].amf->val[i] == 0.0f);
}

TEST_CASE("parameter count is stable and nontrivial") {
    const auto cfg = tiny_config(2, {16, 16, 16});
    MdaCnn<float> network(cfg, 1);
    CHECK(network.param_count() > 10000);
    MdaCnn<float> again(cfg, 2);
    CHECK(network.param_count() == again.param_count());
}

TEST_CASE("network gradients match finite differences (64-bit)") {
    const auto cfg = tiny_config(2, {16, 16, 16});
    MdaCnn<double> network(cfg, 11);
    Rng rng(12);
    const auto patch = random_tensor<double>(rng, {1, 16, 16, 16});

    // binary targets at the five scales
    std::vector<Tensor<double>> targets;
    vol::Shape3 dims = cfg.patch;
    for (int k = 0; k < 5; ++k) {
        Tensor<double> t({1, dims.d, dims.h, dims.w});
        for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(0.35) ? 1.0 : 0.0;
        targets.push_back(std::move(t));
        dims = {(dims.d + 1) / 2, (dims.h + 1) / 2, (dims.w + 1) / 2};
    }

    auto loss_value = [&] {
        Graph<double> g(false);
        const auto fw = network.forward(g, patch);
        double L = 0.0;
        for (int k = 0; k < 5; ++k)
            L += losses::dice_loss(fw.preds[size_t(k)]->val, targets[size_t(k)]);
        return L;
    };

    network.zero_grad();
    {
        Graph<double> g(true);
        const auto fw = network.forward(g, patch);
        for (int k = 0; k < 5; ++k) {
            auto& p = *fw.preds[size_t(k)];
            losses::dice_loss_grad(p.val, targets[size_t(k)], 1.0, p.grad);
        }
        g.backward();
    }

    // probe a few parameters from every group
    const auto& params = network.params();
    int checked = 0;
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); pi += 7) {
        auto& p = *params[size_t(pi)];
        const size_t j = rng.uniform_index(p.value.numel());
        const double analytic = p.grad[j];
        const double numeric = gradcheck::central_diff(p.value[j], 1e-6, loss_value);
        worst = std::max(worst, gradcheck::rel_error(analytic, numeric));
        ++checked;
    }
    CHECK(checked >= 20);
    CHECK(worst < 1e-4);
}

TEST_CASE("tiny-network forward runs under a second") {
    const auto cfg = tiny_config(4, {32, 32, 32});
    MdaCnn<float> network(cfg, 1);
    Rng rng(9);
    const auto patch = random_tensor<float>(rng, {1, 32, 32, 32});
    const auto t0 = std::chrono::steady_clock::now();
    Graph<float> g(false);
    (void)network.forward(g, patch);
    const double dt =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(dt < 1.0);
}
