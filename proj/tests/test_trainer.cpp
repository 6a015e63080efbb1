#include <doctest.h>

#include <cmath>
#include <random>

#include "sampled_sae/errors.hpp"
#include "sampled_sae/trainer.hpp"
#include "test_util.hpp"

using namespace sampled_sae;

namespace {

double row_norm(const Matrix<float>& w, std::size_t j) {
    double s = 0;
    for (float v : w.row(j)) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

GateConfig smoke_gate() {
    GateConfig g;
    g.input_dim = 16;
    g.dict_size = 64;
    g.k = 4;
    g.ell = 2;
    return g;
}

TrainConfig smoke_train() {
    TrainConfig t;
    t.steps = 200;
    t.batch_size = 64;
    t.warmup_steps = 20;
    t.threshold_start = 50;
    t.dead_window = 30;
    t.log_every = 10;
    t.seed = 5;
    return t;
}

Matrix<float> smoke_data(std::size_t n, std::size_t d, std::uint64_t seed) {
    // Sparse nonnegative mixtures of a few fixed directions.
    std::mt19937_64 rng(seed);
    const auto atoms = testutil::random_matrix<float>(24, d, rng);
    Matrix<float> x(n, d);
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t a = 0; a < 24; ++a)
            if (u(rng) < 0.15) {
                const double c = u(rng) * 2;
                for (std::size_t i = 0; i < d; ++i) x(r, i) += static_cast<float>(c * atoms(a, i));
            }
    return x;
}

}  // namespace

// --- geometric median ------------------------------------------------------

TEST_CASE("geometric_median: identical points") {
    Matrix<double> p(5, 3);
    for (std::size_t r = 0; r < 5; ++r) {
        p(r, 0) = 1.5;
        p(r, 1) = -2;
        p(r, 2) = 7;
    }
    const auto m = geometric_median(p);
    CHECK(m[0] == doctest::Approx(1.5));
    CHECK(m[1] == doctest::Approx(-2));
    CHECK(m[2] == doctest::Approx(7));
}

TEST_CASE("geometric_median: equilateral triangle gives its centroid") {
    const double s = std::sqrt(3.0) / 2;
    Matrix<double> p(3, 2, std::vector<double>{1, 0, -0.5, s, -0.5, -s});
    const auto m = geometric_median(p);
    CHECK(m[0] == doctest::Approx(0).epsilon(1e-9));
    CHECK(m[1] == doctest::Approx(0).epsilon(1e-9));
}

TEST_CASE("geometric_median: 1-D points reduce to the median") {
    Matrix<double> p(3, 1, std::vector<double>{0, 0, 10});
    CHECK(std::abs(geometric_median(p, 1e-10, 10000)[0]) < 1e-3);
}

TEST_CASE("geometric_median: empty input is an error") {
    CHECK_THROWS_AS(geometric_median(Matrix<double>(0, 3)), InputError);
}

TEST_CASE("geometric_median: result is no worse than the mean") {
    std::mt19937_64 rng(9);
    auto p = testutil::random_matrix<double>(40, 3, rng);
    for (std::size_t i = 0; i < 3; ++i) p(0, i) = 100;  // outlier
    auto cost = [&](const std::vector<double>& y) {
        double s = 0;
        for (std::size_t r = 0; r < 40; ++r) {
            double d2 = 0;
            for (std::size_t i = 0; i < 3; ++i) d2 += std::pow(p(r, i) - y[i], 2);
            s += std::sqrt(d2);
        }
        return s;
    };
    std::vector<double> mean(3, 0);
    for (std::size_t r = 0; r < 40; ++r)
        for (std::size_t i = 0; i < 3; ++i) mean[i] += p(r, i) / 40;
    CHECK(cost(geometric_median(p)) < cost(mean));
}

// --- init ------------------------------------------------------------------

TEST_CASE("init_params: unit decoder rows, tied encoder, zero b_enc") {
    std::mt19937_64 rng(1);
    const auto batch = testutil::random_matrix<float>(32, 16, rng);
    const auto p = init_params(batch, smoke_gate(), 3);
    for (std::size_t j = 0; j < 64; ++j) CHECK(std::abs(row_norm(p.w_dec, j) - 1) <= 1e-6);
    CHECK(p.w_enc == p.w_dec);
    for (float v : p.b_enc) CHECK(v == 0.0f);
    CHECK(p.theta == 0.0f);
    CHECK(init_params(batch, smoke_gate(), 3) == p);
    CHECK(!(init_params(batch, smoke_gate(), 4) == p));
}

TEST_CASE("init_params: b_dec of a symmetric two-point batch is the midpoint") {
    GateConfig g = smoke_gate();
    g.input_dim = 3;
    Matrix<double> batch(2, 3, std::vector<double>{1, 2, -3, -1, -2, 3});
    const auto p = init_params(batch, g, 0);
    const auto ref = geometric_median(batch);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(p.b_dec[i] == ref[i]);
        CHECK(std::abs(p.b_dec[i]) < 1e-12);
    }
}

// --- backward --------------------------------------------------------------

TEST_CASE("backward: zero residual and no dead features gives zero gradients") {
    std::mt19937_64 rng(2);
    GateConfig g = smoke_gate();
    g.input_dim = 4;
    g.dict_size = 8;
    g.k = 2;
    g.ell = 4;
    const auto p = testutil::random_params<double>(8, 4, rng);
    const auto x = testutil::random_matrix<double>(3, 4, rng);
    auto tr = forward_train(x, p, g, {});
    tr.recon = x;  // exact reconstruction on the frozen support
    const auto grads = backward(tr, x, p, g);
    for (auto v : grads.w_enc.flat()) CHECK(v == 0.0);
    for (auto v : grads.w_dec.flat()) CHECK(v == 0.0);
    for (auto v : grads.b_enc) CHECK(v == 0.0);
    for (auto v : grads.b_dec) CHECK(v == 0.0);
}

TEST_CASE("backward: features outside the support receive no encoder gradient") {
    std::mt19937_64 rng(3);
    GateConfig g;
    g.input_dim = 6;
    g.dict_size = 20;
    g.k = 1;
    g.ell = 3;
    const auto p = testutil::random_params<double>(20, 6, rng);
    const auto x = testutil::random_matrix<double>(4, 6, rng);
    const auto tr = forward_train(x, p, g, {});
    const auto grads = backward(tr, x, p, g);
    for (std::size_t j = 0; j < 20; ++j) {
        bool fired = false;
        for (std::size_t b = 0; b < 4; ++b) fired |= tr.codes(b, j) != 0;
        if (fired) continue;
        CHECK(grads.b_enc[j] == 0.0);
        for (double v : grads.w_enc.row(j)) CHECK(v == 0.0);
        for (double v : grads.w_dec.row(j)) CHECK(v == 0.0);
    }
}

TEST_CASE("backward: a stale trace is rejected") {
    std::mt19937_64 rng(4);
    GateConfig g;
    g.input_dim = 4;
    g.dict_size = 8;
    g.k = 2;
    auto p = testutil::random_params<double>(8, 4, rng);
    const auto x = testutil::random_matrix<double>(3, 4, rng);
    const auto tr = forward_train(x, p, g, {});
    p.b_enc[0] += 1e-3;
    CHECK_THROWS_AS(backward(tr, x, p, g), ContractViolation);
}

TEST_CASE("backward: matches central finite differences with masks pinned") {
    for (auto rule : kAllScoringRules)
        for (std::uint64_t s = 0; s < 10; ++s) {
            const auto r = testutil::finite_difference_check(rule, 100 + s);
            CAPTURE(to_string(rule));
            CAPTURE(s);
            CHECK(r.checked == 8 * 4 * 2 + 8 + 4);
            CHECK(r.max_rel_error < 1e-4);
        }
}

// --- Adam ------------------------------------------------------------------

TEST_CASE("adam_step: zero gradients leave parameters unchanged") {
    std::mt19937_64 rng(5);
    auto p = testutil::random_params<float>(8, 4, rng);
    const auto before = p;
    auto opt = OptState<float>::fresh(p);
    TrainConfig cfg;
    const auto info = adam_step(p, SaeTensors<float>::zeros_like(p), opt, cfg);
    CHECK(info.grad_norm == 0.0);
    CHECK(p == before);
    CHECK(opt.step == 1);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(row_norm(p.w_dec, j) - 1) <= 1e-6);
}

TEST_CASE("adam_step: first step moves each coordinate by about lr_1") {
    SaeParams<double> p;
    p.w_enc = Matrix<double>(1, 1, std::vector<double>{0.5});
    p.w_dec = Matrix<double>(1, 1, std::vector<double>{1.0});
    p.b_enc = {0.0};
    p.b_dec = {0.0};
    auto opt = OptState<double>::fresh(p);
    TrainConfig cfg;
    cfg.grad_clip = 1e9;
    auto g = SaeTensors<double>::zeros_like(p);
    g.w_enc(0, 0) = 0.37;
    g.b_enc[0] = -2.0;
    const auto info = adam_step(p, g, opt, cfg);
    const double lr1 = cfg.lr / cfg.warmup_steps;
    CHECK(info.lr == lr1);
    CHECK(p.w_enc(0, 0) == doctest::Approx(0.5 - lr1 * 0.37 / (0.37 + cfg.adam_eps)).epsilon(1e-12));
    CHECK(p.b_enc[0] == doctest::Approx(lr1 * 2.0 / (2.0 + cfg.adam_eps)).epsilon(1e-12));
    CHECK(p.b_dec[0] == 0.0);
}

TEST_CASE("adam_step: global-norm clipping rescales the gradient before the moments") {
    SaeParams<double> p;
    p.w_enc = Matrix<double>(1, 2);
    p.w_dec = Matrix<double>(1, 2, std::vector<double>{1, 0});
    p.b_enc = {0};
    p.b_dec = {0, 0};
    auto opt = OptState<double>::fresh(p);
    TrainConfig cfg;
    auto g = SaeTensors<double>::zeros_like(p);
    g.w_enc(0, 0) = 6;
    g.w_enc(0, 1) = 8;  // norm 10
    const auto info = adam_step(p, g, opt, cfg);
    CHECK(info.grad_norm == doctest::Approx(10));
    CHECK(opt.m1.w_enc(0, 0) == doctest::Approx((1 - cfg.beta1) * 0.6).epsilon(1e-12));
    CHECK(opt.m1.w_enc(0, 1) == doctest::Approx((1 - cfg.beta1) * 0.8).epsilon(1e-12));
    CHECK(opt.m2.w_enc(0, 1) == doctest::Approx((1 - cfg.beta2) * 0.64).epsilon(1e-12));
}

TEST_CASE("adam_step: the radial decoder gradient is removed before the moments") {
    SaeParams<double> p;
    p.w_enc = Matrix<double>(1, 2);
    p.w_dec = Matrix<double>(1, 2, std::vector<double>{1, 0});
    p.b_enc = {0};
    p.b_dec = {0, 0};
    auto opt = OptState<double>::fresh(p);
    TrainConfig cfg;
    auto g = SaeTensors<double>::zeros_like(p);
    g.w_dec(0, 0) = 0.5;  // purely radial
    g.w_dec(0, 1) = 0.1;
    adam_step(p, g, opt, cfg);
    CHECK(opt.m1.w_dec(0, 0) == 0.0);
    CHECK(opt.m1.w_dec(0, 1) == doctest::Approx((1 - cfg.beta1) * 0.1));
    CHECK(row_norm(matrix_cast<float>(p.w_dec), 0) == doctest::Approx(1).epsilon(1e-7));
    CHECK(p.w_dec(0, 1) < 0);
}

TEST_CASE("adam_step: non-finite gradients abort") {
    std::mt19937_64 rng(6);
    auto p = testutil::random_params<float>(4, 3, rng);
    auto opt = OptState<float>::fresh(p);
    auto g = SaeTensors<float>::zeros_like(p);
    g.b_dec[1] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(adam_step(p, g, opt, TrainConfig{}), NumericError);
}

TEST_CASE("warmup: lr(t) = lr * (t+1) / warmup before warmup ends") {
    TrainConfig cfg;
    cfg.lr = 3e-4;
    cfg.warmup_steps = 1000;
    for (std::int64_t t : {0, 1, 10, 499, 998}) CHECK(warmup_lr(cfg, t) == cfg.lr * (t + 1) / 1000.0);
    CHECK(warmup_lr(cfg, 999) == cfg.lr);
    CHECK(warmup_lr(cfg, 50000) == cfg.lr);
}

// --- threshold -------------------------------------------------------------

TEST_CASE("update_threshold: inactive before the start step") {
    TrainConfig cfg;
    cfg.threshold_start = 10;
    Matrix<float> f(1, 2, std::vector<float>{0.5f, 2.0f});
    const auto s = update_threshold(ThresholdState{}, f, 9, cfg);
    CHECK(s.value == 0.0);
    CHECK(!s.started);
}

TEST_CASE("update_threshold: first active step takes the minimum directly, then EMA") {
    TrainConfig cfg;
    cfg.threshold_start = 0;
    cfg.threshold_beta = 0.999;
    Matrix<float> f(2, 2, std::vector<float>{0, 2, 3, 0});
    auto s = update_threshold(ThresholdState{}, f, 0, cfg);
    CHECK(s.started);
    CHECK(s.value == 2.0);
    s = update_threshold(ThresholdState{1.0, true}, f, 5, cfg);
    CHECK(s.value == doctest::Approx(1.001).epsilon(1e-15));
}

TEST_CASE("update_threshold: empty codes leave theta unchanged") {
    TrainConfig cfg;
    cfg.threshold_start = 0;
    const ThresholdState in{0.75, true};
    CHECK(update_threshold(in, Matrix<float>(3, 3), 100, cfg) == in);
}

TEST_CASE("update_threshold: beta = 0 tracks the latest minimum") {
    TrainConfig cfg;
    cfg.threshold_start = 0;
    cfg.threshold_beta = 0;
    ThresholdState s{};
    for (float a : {3.0f, 1.0f, 2.5f}) {
        s = update_threshold(s, Matrix<float>(1, 2, std::vector<float>{a, a + 1}), 1, cfg);
        CHECK(s.value == a);
    }
}

TEST_CASE("update_threshold: constant input is a fixed point and history bounds hold") {
    TrainConfig cfg;
    cfg.threshold_start = 0;
    cfg.threshold_beta = 0.9;
    ThresholdState s{};
    const Matrix<float> f(1, 1, std::vector<float>{0.625f});
    for (int t = 0; t < 100; ++t) {
        s = update_threshold(s, f, t, cfg);
        CHECK(s.value == 0.625);
    }
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.5, 4);
    double lo = 1e9, hi = -1e9;
    s = {};
    for (int t = 0; t < 300; ++t) {
        const float a = static_cast<float>(u(rng));
        lo = std::min(lo, static_cast<double>(a));
        hi = std::max(hi, static_cast<double>(a));
        s = update_threshold(s, Matrix<float>(1, 1, std::vector<float>{a}), t, cfg);
        CHECK(s.value >= lo - 1e-12);
        CHECK(s.value <= hi + 1e-12);
    }
}

// --- dead tracking ---------------------------------------------------------

TEST_CASE("dead tracking: firing features are never dead") {
    std::vector<std::int64_t> last(2, 0);
    OptState<float> opt;
    opt.last_fired = last;
    for (std::int64_t t = 0; t < 3000; ++t) {
        update_dead_tracking(opt, Matrix<float>(1, 2, std::vector<float>{1, 0}), t);
        const auto dead = dead_mask(opt.last_fired, t + 1, 1000);
        CHECK(dead[0] == 0);
    }
}

TEST_CASE("dead tracking: a feature that fired at t=0 is dead exactly from t=1001") {
    OptState<float> opt;
    opt.last_fired.assign(1, 0);
    update_dead_tracking(opt, Matrix<float>(1, 1, std::vector<float>{1}), 0);
    CHECK(dead_mask(opt.last_fired, 1000, 1000)[0] == 0);
    CHECK(dead_mask(opt.last_fired, 1001, 1000)[0] == 1);
}

TEST_CASE("dead tracking: a feature that never fires is dead after window + 1 steps") {
    OptState<float> opt;
    opt.last_fired.assign(1, 0);
    const std::int64_t window = 7;
    for (std::int64_t t = 0; t <= window; ++t) CHECK(dead_mask(opt.last_fired, t, window)[0] == 0);
    CHECK(dead_mask(opt.last_fired, window + 1, window)[0] == 1);
}

// --- training loop ---------------------------------------------------------

TEST_CASE("train: smoke run keeps finite losses and unit-norm decoder rows") {
    const auto data = smoke_data(2000, 16, 1);
    MatrixSource src(data, 1);
    std::vector<MetricsRow> seen;
    TrainHooks hooks;
    hooks.on_log = [&](const MetricsRow& r) { seen.push_back(r); };
    const auto res = train(src, smoke_gate(), smoke_train(), std::nullopt, hooks);
    CHECK(res.state.opt.step == 200);
    REQUIRE(res.log.size() == 20);
    CHECK(seen.size() == 20);
    for (const auto& r : res.log) {
        CHECK(std::isfinite(r.loss_recon));
        CHECK(std::isfinite(r.loss_aux));
        CHECK(r.l0_mean <= 4.0 + 1e-12);
        CHECK(r.step % 10 == 0);
    }
    CHECK(res.log.back().loss_recon < res.log.front().loss_recon);
    CHECK(res.log.back().theta > 0);
    for (std::size_t j = 0; j < 64; ++j) CHECK(std::abs(row_norm(res.state.params.w_dec, j) - 1) <= 1e-6);
    for (auto f : res.state.opt.last_fired) CHECK(f <= res.state.opt.step);
}

TEST_CASE("train: same seed reproduces the metrics log bit for bit") {
    const auto data = smoke_data(1000, 16, 2);
    MatrixSource src(data, 2);
    auto cfg = smoke_train();
    cfg.steps = 60;
    for (auto rule : kAllScoringRules) {
        auto g = smoke_gate();
        g.rule = rule;
        const auto a = train(src, g, cfg);
        const auto b = train(src, g, cfg);
        REQUIRE(a.log.size() == b.log.size());
        for (std::size_t i = 0; i < a.log.size(); ++i)
            CHECK(metrics_csv_row(a.log[i]) == metrics_csv_row(b.log[i]));
        CHECK(a.state.params == b.state.params);
        CHECK(a.state.opt == b.state.opt);
    }
}

TEST_CASE("train: resuming from a mid-run state reproduces the trajectory") {
    const auto data = smoke_data(1000, 16, 3);
    MatrixSource src(data, 3);
    auto g = smoke_gate();
    g.rule = ScoringRule::Uniform;
    auto cfg = smoke_train();
    cfg.steps = 80;
    std::optional<TrainState> snapshot;
    TrainHooks hooks;
    hooks.checkpoint_every = 30;
    hooks.on_checkpoint = [&](const TrainState& s) {
        if (s.opt.step == 30) snapshot = s;
    };
    const auto full = train(src, g, cfg, std::nullopt, hooks);
    REQUIRE(snapshot.has_value());
    const auto resumed = train(src, g, cfg, snapshot);
    CHECK(resumed.state.params == full.state.params);
    CHECK(resumed.state.opt == full.state.opt);
    REQUIRE(!resumed.log.empty());
    CHECK(metrics_csv_row(resumed.log.back()) == metrics_csv_row(full.log.back()));
}

TEST_CASE("train: configuration errors are reported") {
    const auto data = smoke_data(100, 16, 4);
    MatrixSource src(data, 4);
    auto cfg = smoke_train();
    cfg.threshold_beta = 1.0;
    CHECK_THROWS_AS(train(src, smoke_gate(), cfg), ConfigError);
    auto g = smoke_gate();
    g.input_dim = 8;
    CHECK_THROWS_AS(train(src, g, smoke_train()), ConfigError);
}

TEST_CASE("train: divergence surfaces as a numeric error") {
    auto data = smoke_data(100, 16, 5);
    for (std::size_t r = 0; r < data.rows(); ++r) data(r, 0) = std::numeric_limits<float>::infinity();
    MatrixSource src(data, 5);
    CHECK_THROWS(train(src, smoke_gate(), smoke_train()));
}

TEST_CASE("metrics CSV header") {
    CHECK(metrics_csv_header() == "step,loss_recon,loss_aux,fvu,l0_mean,dead,theta");
    MetricsRow r;
    r.step = 50;
    r.loss_recon = 0.5;
    r.dead = 3;
    CHECK(metrics_csv_row(r) == "50,0.5,0,0,0,3,0");
}

TEST_CASE("MatrixSource batches depend only on (seed, stream, index)") {
    const auto data = smoke_data(300, 16, 6);
    MatrixSource a(data, 11), b(data, 11), c(data, 12);
    CHECK(a.batch(streams::kBatch, 7, 32) == b.batch(streams::kBatch, 7, 32));
    CHECK(!(a.batch(streams::kBatch, 7, 32) == a.batch(streams::kBatch, 8, 32)));
    CHECK(!(a.batch(streams::kBatch, 7, 32) == c.batch(streams::kBatch, 7, 32)));
}
