#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctseg/trainer.hpp"

using namespace ctseg;
using namespace ctseg::train;

namespace fs = std::filesystem;

namespace {

net::NetworkConfig tiny_net(int base = 2) {
    net::NetworkConfig nc;
    nc.base_channels = base;
    nc.patch = {16, 16, 16};
    return nc;
}

TrainConfig tiny_train(long long i_max = 10) {
    TrainConfig tc;
    tc.i_max = i_max;
    tc.lr = 1e-3;
    tc.seed = 5;
    tc.val_every = 0;
    return tc;
}

template <typename T>
Tensor<T> random_patch(Rng& rng, const vol::Shape3& p) {
    Tensor<T> t({1, p.d, p.h, p.w});
    for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform01());
    return t;
}

template <typename T>
LabeledBatchItem<T> random_labeled(Rng& rng, const vol::Shape3& p) {
    LabeledBatchItem<T> item;
    item.image = random_patch<T>(rng, p);
    vol::Shape3 dims = p;
    for (int k = 0; k < losses::kScales; ++k) {
        Tensor<T> t({1, dims.d, dims.h, dims.w});
        for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.bernoulli(0.3));
        item.targets[size_t(k)] = std::move(t);
        dims = {(dims.d + 1) / 2, (dims.h + 1) / 2, (dims.w + 1) / 2};
    }
    return item;
}

// two-volume synthetic dataset for loop-level tests
TrainData tiny_data(int n_labeled, int n_unlabeled, uint64_t seed) {
    TrainData data;
    Rng rng(seed);
    vol::SyntheticParams params;
    params.dims = {16, 16, 16};
    params.n_blobs = 1;
    params.noise = 0.02;
    for (int i = 0; i < n_labeled; ++i) {
        auto [v, m] = vol::make_synthetic_case(rng, params);
        data.labeled.push_back({"l" + std::to_string(i), std::move(v), std::move(m)});
    }
    for (int i = 0; i < n_unlabeled; ++i) {
        auto [v, m] = vol::make_synthetic_case(rng, params);
        (void)m;
        data.unlabeled.push_back({"u" + std::to_string(i), std::move(v)});
    }
    return data;
}

}  // namespace

TEST_CASE("ema update arithmetic") {
    net::NetworkConfig nc = tiny_net();
    TrainConfig tc = tiny_train();
    NetworkState<double> st(nc, tc);

    // teacher = 0, student = 1, beta 0.99 -> 0.01
    for (auto* p : st.student->params()) p->value.fill(1.0);
    for (auto* p : st.teacher->params()) p->value.fill(0.0);
    ema_update(st.teacher->params(), st.student->params(), 0.99);
    for (auto* p : st.teacher->params())
        for (size_t i = 0; i < p->value.numel(); ++i)
            CHECK(p->value[i] == doctest::Approx(0.01).epsilon(1e-12));

    // fixed point: teacher == student == w stays w
    for (auto* p : st.teacher->params()) p->value.fill(1.0);
    ema_update(st.teacher->params(), st.student->params(), 0.99);
    for (auto* p : st.teacher->params())
        for (size_t i = 0; i < p->value.numel(); ++i) CHECK(p->value[i] == 1.0);

    // frozen student: after n updates teacher = s + beta^n (t0 - s)
    const double s = 0.25, t0 = 2.0, beta = 0.99;
    const int n = 10;
    for (auto* p : st.student->params()) p->value.fill(s);
    for (auto* p : st.teacher->params()) p->value.fill(t0);
    for (int i = 0; i < n; ++i) ema_update(st.teacher->params(), st.student->params(), beta);
    const double want = s + std::pow(beta, n) * (t0 - s);
    for (auto* p : st.teacher->params())
        for (size_t i = 0; i < p->value.numel(); ++i)
            CHECK(std::abs(p->value[i] - want) < 1e-12);

    CHECK_THROWS_AS(ema_update(st.teacher->params(), st.student->params(), 1.0), DomainError);
}

TEST_CASE("train config validation") {
    TrainConfig tc = tiny_train();
    tc.lr = 0.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = tiny_train();
    tc.ema_beta = 1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = tiny_train();
    tc.i_max = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = tiny_train();
    tc.batch_labeled = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("train_step: EMA contract and lambda schedule (64-bit)") {
    const auto nc = tiny_net();
    auto tc = tiny_train(100);
    NetworkState<double> st(nc, tc);
    Rng rng(17);

    std::vector<LabeledBatchItem<double>> lb;
    lb.push_back(random_labeled<double>(rng, nc.patch));
    std::vector<UnlabeledBatchItem<double>> ub;
    UnlabeledBatchItem<double> u;
    u.student_view = random_patch<double>(rng, nc.patch);
    u.teacher_view = random_patch<double>(rng, nc.patch);
    ub.push_back(std::move(u));

    // snapshot teacher before the step
    std::vector<Tensor<double>> teacher_before;
    for (auto* p : st.teacher->params()) teacher_before.push_back(p->value);

    const auto bd = train_step(st, lb, ub);
    CHECK(st.iter == 1);
    CHECK(bd.lambda == doctest::Approx(losses::ramp_weight(1, tc.i_max, tc.lambda_max))
                           .epsilon(1e-15));
    CHECK(bd.total == doctest::Approx(bd.supervised + bd.lambda * bd.consistency)
                          .epsilon(1e-12));
    double sup_sum = 0, cons_sum = 0;
    for (int k = 0; k < 5; ++k) {
        sup_sum += bd.per_scale_supervised[size_t(k)];
        cons_sum += bd.per_scale_consistency[size_t(k)];
    }
    CHECK(bd.supervised == doctest::Approx(sup_sum).epsilon(1e-15));
    CHECK(bd.consistency == doctest::Approx(cons_sum).epsilon(1e-15));

    // teacher received exactly one EMA update of the post-step student
    const auto& sp = st.student->params();
    const auto& tp = st.teacher->params();
    for (size_t i = 0; i < tp.size(); ++i)
        for (size_t j = 0; j < tp[i]->value.numel(); ++j) {
            const double want =
                tc.ema_beta * teacher_before[i][j] + (1.0 - tc.ema_beta) * sp[i]->value[j];
            CHECK(std::abs(tp[i]->value[j] - want) < 1e-12);
        }
}

TEST_CASE("train_step: loss breakdown matches recomputation from pre-step params") {
    const auto nc = tiny_net();
    auto tc = tiny_train(50);
    NetworkState<double> st(nc, tc);
    NetworkState<double> reference(nc, tc);  // same seed: identical params

    Rng rng(23);
    std::vector<LabeledBatchItem<double>> lb;
    lb.push_back(random_labeled<double>(rng, nc.patch));
    lb.push_back(random_labeled<double>(rng, nc.patch));
    std::vector<UnlabeledBatchItem<double>> ub;
    UnlabeledBatchItem<double> u;
    u.student_view = random_patch<double>(rng, nc.patch);
    u.teacher_view = random_patch<double>(rng, nc.patch);
    ub.push_back(std::move(u));

    const auto bd = train_step(st, lb, ub);

    // recompute with the untouched clone
    double sup = 0.0;
    for (const auto& item : lb) {
        nn::Graph<double> g(false);
        auto fw = reference.student->forward(g, item.image);
        for (int k = 0; k < 5; ++k)
            sup += losses::dice_loss(fw.preds[size_t(k)]->val, item.targets[size_t(k)]) /
                   double(lb.size());
    }
    double cons = 0.0;
    {
        nn::Graph<double> gs(false), gt(false);
        auto sfw = reference.student->forward(gs, ub[0].student_view);
        auto tfw = reference.teacher->forward(gt, ub[0].teacher_view);
        for (int k = 0; k < 5; ++k)
            cons += losses::mse_loss(sfw.preds[size_t(k)]->val, tfw.preds[size_t(k)]->val);
    }
    CHECK(bd.supervised == doctest::Approx(sup).epsilon(1e-12));
    CHECK(bd.consistency == doctest::Approx(cons).epsilon(1e-12));
}

TEST_CASE("train_step: zero-perturbation consistency adds no gradient at t=0") {
    const auto nc = tiny_net();
    auto tc = tiny_train(50);

    Rng rng(31);
    std::vector<LabeledBatchItem<double>> lb;
    lb.push_back(random_labeled<double>(rng, nc.patch));
    auto shared_view = random_patch<double>(rng, nc.patch);
    std::vector<UnlabeledBatchItem<double>> ub;
    ub.push_back(UnlabeledBatchItem<double>{shared_view, shared_view});

    // teacher == student at t=0 and identical views: consistency grads vanish,
    // so the step equals a supervised-only step on the same batch
    NetworkState<double> semi(nc, tc);
    (void)train_step(semi, lb, ub);

    auto tc_sup = tc;
    tc_sup.supervised_only = true;
    NetworkState<double> sup(nc, tc_sup);
    (void)train_step(sup, lb, {});

    const auto& a = semi.student->params();
    const auto& b = sup.student->params();
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < a[i]->value.numel(); ++j)
            CHECK(a[i]->value[j] == b[i]->value[j]);
}

TEST_CASE("train_step rejects non-finite losses with diagnostics") {
    const auto nc = tiny_net();
    NetworkState<double> st(nc, tiny_train());
    Rng rng(37);
    auto item = random_labeled<double>(rng, nc.patch);
    item.image[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<LabeledBatchItem<double>> lb;
    lb.push_back(std::move(item));
    CHECK_THROWS_AS((void)train_step(st, lb, {}), NonFiniteLoss);
}

TEST_CASE("training loop basics") {
    const auto nc = tiny_net();
    auto tc = tiny_train(1);
    const auto data = tiny_data(2, 2, 41);

    NetworkState<float> st(nc, tc);
    CurveLog log;
    ctseg::train::train(st, data, log);
    CHECK(log.records.size() == 1);  // i_max 1 -> exactly one record
    CHECK(log.records[0].iter == 1);

    // no unlabeled data: consistency identically zero
    auto tc5 = tiny_train(5);
    NetworkState<float> st2(nc, tc5);
    CurveLog log2;
    TrainData no_unlab = tiny_data(2, 0, 42);
    ctseg::train::train(st2, no_unlab, log2);
    CHECK(log2.records.size() == 5);
    for (const auto& r : log2.records) {
        CHECK(r.cons == 0.0);
        CHECK(std::isfinite(r.total));
        CHECK(r.lambda ==
              doctest::Approx(losses::ramp_weight(r.iter, 5, tc5.lambda_max)).epsilon(1e-15));
    }

    // iteration index strictly increasing
    for (size_t i = 1; i < log2.records.size(); ++i)
        CHECK(log2.records[i].iter == log2.records[i - 1].iter + 1);
}

TEST_CASE("fixed seed reproduces the curve log exactly") {
    const auto nc = tiny_net();
    const auto tc = tiny_train(4);
    const auto data = tiny_data(2, 2, 43);

    CurveLog a, b;
    {
        NetworkState<float> st(nc, tc);
        ctseg::train::train(st, data, a);
    }
    {
        NetworkState<float> st(nc, tc);
        ctseg::train::train(st, data, b);
    }
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].sup == b.records[i].sup);
        CHECK(a.records[i].cons == b.records[i].cons);
        CHECK(a.records[i].total == b.records[i].total);
    }
}

TEST_CASE("supervised-only mode equals training with an empty unlabeled set") {
    const auto nc = tiny_net();
    const auto data = tiny_data(2, 0, 44);

    auto tc = tiny_train(4);
    CurveLog a;
    {
        NetworkState<float> st(nc, tc);
        ctseg::train::train(st, data, a);
    }
    auto tc_sup = tc;
    tc_sup.supervised_only = true;
    CurveLog b;
    {
        NetworkState<float> st(nc, tc_sup);
        ctseg::train::train(st, data, b);
    }
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].sup == b.records[i].sup);
        CHECK(a.records[i].cons == 0.0);
        CHECK(b.records[i].cons == 0.0);
        CHECK(a.records[i].total == b.records[i].total);
    }
}

TEST_CASE("checkpoint round trip and resume equivalence") {
    const auto dir = fs::temp_directory_path() / "ctseg_trainer_test";
    fs::create_directories(dir);
    const auto nc = tiny_net();
    const auto data = tiny_data(3, 2, 45);

    // uninterrupted 6-iteration run
    auto tc = tiny_train(6);
    CurveLog full;
    NetworkState<float> st_full(nc, tc);
    ctseg::train::train(st_full, data, full);

    // 3 iterations, checkpoint, reload, 3 more
    auto tc3 = tiny_train(3);
    CurveLog part1;
    NetworkState<float> st_a(nc, tc3);
    ctseg::train::train(st_a, data, part1);
    const auto ckpt = dir / "mid.ckpt";
    save_checkpoint(st_a, ckpt);

    auto st_b = load_checkpoint<float>(ckpt);
    CHECK(st_b->iter == 3);
    // bit-identical state after reload
    for (size_t i = 0; i < st_a.student->params().size(); ++i) {
        const auto& x = st_a.student->params()[i]->value;
        const auto& y = st_b->student->params()[i]->value;
        for (size_t j = 0; j < x.numel(); ++j) CHECK(x[j] == y[j]);
        const auto& mx = st_a.opt.m[i];
        const auto& my = st_b->opt.m[i];
        for (size_t j = 0; j < mx.numel(); ++j) CHECK(mx[j] == my[j]);
    }
    CHECK(st_a.opt.t == st_b->opt.t);

    st_b->cfg.i_max = 6;
    CurveLog part2;
    ctseg::train::train(*st_b, data, part2);

    REQUIRE(part1.records.size() + part2.records.size() == full.records.size());
    for (size_t i = 0; i < part2.records.size(); ++i) {
        const auto& want = full.records[part1.records.size() + i];
        CHECK(part2.records[i].iter == want.iter);
        CHECK(part2.records[i].sup == want.sup);
        CHECK(part2.records[i].cons == want.cons);
        CHECK(part2.records[i].total == want.total);
    }
    // final parameters identical too
    for (size_t i = 0; i < st_full.student->params().size(); ++i) {
        const auto& x = st_full.student->params()[i]->value;
        const auto& y = st_b->student->params()[i]->value;
        for (size_t j = 0; j < x.numel(); ++j) CHECK(x[j] == y[j]);
    }

    // corrupt checkpoint: truncation is detected
    {
        std::ifstream is(ckpt, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)), {});
        bytes.resize(bytes.size() / 2);
        std::ofstream os(dir / "broken.ckpt", std::ios::binary);
        os.write(bytes.data(), std::streamsize(bytes.size()));
    }
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "broken.ckpt"), MalformedFile);
    CHECK_THROWS_AS(load_checkpoint<double>(ckpt), ConfigMismatch);
}

TEST_CASE("curve log CSV round trip and validation") {
    const auto dir = fs::temp_directory_path() / "ctseg_trainer_test";
    fs::create_directories(dir);

    CurveLog log;
    for (int i = 1; i <= 3; ++i) {
        CurveRecord r;
        r.iter = i;
        r.epoch = 0.5 * i;
        r.sup = 1.0 / i;
        r.cons = 0.01 * i;
        r.lambda = losses::ramp_weight(i, 3, 5.0);
        r.total = r.sup + r.lambda * r.cons;
        if (i == 2) r.val = 0.75;
        log.records.push_back(r);
    }
    const auto path = dir / "curves.csv";
    log.write_csv(path);
    const auto back = CurveLog::read_csv(path);
    REQUIRE(back.records.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back.records[i].iter == log.records[i].iter);
        CHECK(back.records[i].sup == log.records[i].sup);      // %.17g round trip
        CHECK(back.records[i].total == log.records[i].total);
        CHECK(back.records[i].val.has_value() == log.records[i].val.has_value());
    }
    CHECK(*back.records[1].val == 0.75);

    std::ofstream bad(dir / "bad.csv");
    bad << "iter,epoch,sup_loss\n1,0.5,0.3\n";
    bad.close();
    CHECK_THROWS_AS(CurveLog::read_csv(dir / "bad.csv"), MalformedFile);
}

TEST_CASE("a few optimizer steps reduce the supervised loss on a fixed batch") {
    const auto nc = tiny_net();
    auto tc = tiny_train(1000);
    tc.lr = 3e-3;
    NetworkState<double> st(nc, tc);
    Rng rng(53);
    std::vector<LabeledBatchItem<double>> lb;
    lb.push_back(random_labeled<double>(rng, nc.patch));

    const double first = train_step(st, lb, {}).supervised;
    double last = first;
    for (int i = 0; i < 15; ++i) last = train_step(st, lb, {}).supervised;
    CHECK(last < first);
}
