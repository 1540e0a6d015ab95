#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numbers>

#include "ttgan/checkpoint.hpp"
#include "ttgan/errors.hpp"
#include "ttgan/gan.hpp"
#include "ttgan/volume_io.hpp"

using namespace ttgan;
namespace fs = std::filesystem;

namespace {

constexpr double kLn2 = std::numbers::ln2;

GanConfig tiny_config() {
    GanConfig c = smoke_config();
    c.c_growth = 2;
    c.d_growth = 2;
    c.c_rank = 3;
    c.d_rank = 3;
    c.g_channels = 4;
    c.latent_dim = 8;
    c.batch_size = 4;
    c.epochs = 2;
    return c;
}

DatasetSplit tiny_data(std::uint64_t seed = 1) { return split(make_synthetic(2, 10, {8, 8, 8}, seed), 0.5, seed); }

struct Batch {
    DenseTensor x_l, x_u;
    std::vector<std::size_t> y_l;
};

Batch first_batch(const DatasetSplit& d, std::size_t n) {
    std::vector<const VolumeSample*> lb, ub;
    Batch b;
    for (const auto& x : d.train) {
        if (x.label && lb.size() < n) {
            lb.push_back(&x);
            b.y_l.push_back(*x.label);
        } else if (!x.label && ub.size() < n) {
            ub.push_back(&x);
        }
    }
    b.x_l = stack_volumes(lb);
    b.x_u = stack_volumes(ub);
    return b;
}

bool bitwise_equal(const std::vector<DenseTensor>& a, const std::vector<DenseTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape() != b[i].shape()) return false;
        if (std::memcmp(a[i].data().data(), b[i].data().data(), a[i].size() * sizeof(double)) != 0) return false;
    }
    return true;
}

bool same_state(ThreePlayerState& a, ThreePlayerState& b) {
    const auto sa = snapshot(a), sb = snapshot(b);
    return sa.values == sb.values && sa.epoch == sb.epoch;
}

}  // namespace

// ---- losses ----------------------------------------------------------------------------

TEST(DiscriminatorLoss, Fixtures) {
    const double eps = 1e-7;
    const std::vector<double> hi{1 - eps, 1 - eps}, lo{eps, eps}, half{0.5, 0.5};
    EXPECT_NEAR(discriminator_loss(hi, lo, lo, 0.5), -2 * std::log(1 - eps), 1e-12);
    EXPECT_LT(discriminator_loss(hi, lo, lo, 0.5), 1e-6);
    EXPECT_NEAR(discriminator_loss(half, half, half, 0.5), 2 * kLn2, 1e-12);
    // alpha = 0 drops the classifier-pair term.
    const std::vector<double> dc{0.9, 0.3};
    EXPECT_NEAR(discriminator_loss(half, dc, half, 0.0), 2 * kLn2, 1e-12);
    EXPECT_NEAR(discriminator_loss(std::vector<double>{0.8}, std::vector<double>{0.3}, std::vector<double>{0.4}, 0.25),
                -(std::log(0.8) + 0.25 * std::log(0.7) + 0.75 * std::log(0.6)), 1e-12);
    EXPECT_THROW(discriminator_loss({}, half, half, 0.5), ArgumentError);
}

TEST(DiscriminatorLoss, EquilibriumValue) {
    const double alpha = 0.3;
    const std::vector<double> p_c{0.1, 0.4, 0.2, 0.3}, p_g{0.25, 0.25, 0.4, 0.1};
    std::vector<double> p_real, d;
    for (std::size_t i = 0; i < 4; ++i) {
        p_real.push_back(alpha * p_c[i] + (1 - alpha) * p_g[i]);
        d.push_back(p_real[i] / (p_real[i] + alpha * p_c[i] + (1 - alpha) * p_g[i]));
        EXPECT_EQ(d.back(), 0.5);
    }
    EXPECT_NEAR(discriminator_objective(p_real, p_c, p_g, d, alpha), 2 * kLn2, 1e-12);
    // Away from equilibrium the optimal discriminator value is lower than 2 ln 2.
    std::vector<double> q_real{0.7, 0.1, 0.1, 0.1}, q_d;
    for (std::size_t i = 0; i < 4; ++i) q_d.push_back(q_real[i] / (q_real[i] + alpha * p_c[i] + (1 - alpha) * p_g[i]));
    EXPECT_LT(discriminator_objective(q_real, p_c, p_g, q_d, alpha), 2 * kLn2);
}

TEST(ClassifierLoss, Fixtures) {
    const DenseTensor onehot({2, 2}, std::vector<double>{1, 0, 0, 1});
    const DenseTensor uniform({2, 2}, 0.5);
    const std::vector<std::size_t> y{0, 1};
    EXPECT_NEAR(classifier_loss(onehot, y, onehot, y, {}, 0.05, 100, 60).r_l, -std::log(1 - 1e-7), 1e-15);
    auto u = classifier_loss(uniform, y, uniform, y, {}, 0.05, 100, 60);
    EXPECT_NEAR(u.r_l, kLn2, 1e-12);
    EXPECT_NEAR(u.r_p, kLn2, 1e-12);
    EXPECT_NEAR(u.total, kLn2 * 1.05, 1e-12);
    const std::vector<double> dc{0.5, 0.5};
    auto gated = classifier_loss(uniform, y, uniform, y, dc, 0.05, 59, 60);
    EXPECT_EQ(gated.r_p, 0.0);
    EXPECT_NEAR(gated.unsup, -kLn2, 1e-12);
    EXPECT_NEAR(gated.total, 0.0, 1e-12);
    EXPECT_THROW(classifier_loss(uniform, std::vector<std::size_t>{0, 2}, uniform, y, {}, 0.05, 0, 0), ArgumentError);
    EXPECT_THROW(classifier_loss(DenseTensor({1, 2}, 0.6), std::vector<std::size_t>{0}, uniform, y, {}, 0.05, 0, 0),
                 ArgumentError);
}

TEST(GeneratorLoss, Fixtures) {
    DenseTensor x({2, 2}, std::vector<double>{0.1, -0.5, 0.7, 0.0});
    DenseTensor z({2, 2}, std::vector<double>{0.3, -0.5, 0.2, 0.0});
    const std::vector<double> half{0.5, 0.5};
    EXPECT_NEAR(generator_loss(half, x, x, 0.01), std::log(0.5), 1e-12);
    EXPECT_NEAR(generator_loss(half, x, z, 0.0), std::log(0.5), 1e-12);
    EXPECT_NEAR(generator_loss(half, x, z, 0.5), std::log(0.5) + 0.5 * (0.2 + 0.5) / 4, 1e-12);
    EXPECT_NEAR(generator_loss(std::vector<double>{1.0}, DenseTensor({1}), DenseTensor({1}), 0.0),
                std::log(1.0 - (1.0 - 1e-7)), 1e-12);
    EXPECT_THROW(generator_loss(half, x, DenseTensor({4}), 0.1), ShapeError);
}

// ---- config and schedule --------------------------------------------------------------

TEST(GanConfig, DefaultsAndValidation) {
    GanConfig c;
    EXPECT_EQ(c.alpha, 0.5);
    EXPECT_EQ(c.alpha_p, 0.05);
    EXPECT_EQ(c.lambda_l1, 0.01);
    EXPECT_EQ(c.lr, 0.01);
    EXPECT_EQ(c.momentum, 0.9);
    EXPECT_EQ(c.weight_decay, 1e-4);
    EXPECT_EQ(c.batch_size, 7u);
    EXPECT_EQ(c.epochs, 150u);
    EXPECT_NO_THROW(c.validate());
    for (auto mutate : std::vector<std::function<void(GanConfig&)>>{
             [](GanConfig& g) { g.alpha = 1.0; }, [](GanConfig& g) { g.alpha_p = -0.1; },
             [](GanConfig& g) { g.lambda_l1 = -1; }, [](GanConfig& g) { g.rp_start_epoch = 151; },
             [](GanConfig& g) { g.volume_extent = 12; }, [](GanConfig& g) { g.gsp_position = 0; },
             [](GanConfig& g) { g.c_depth = 13; }, [](GanConfig& g) { g.lr_factors = {0.1}; }}) {
        GanConfig g;
        mutate(g);
        EXPECT_THROW(g.validate(), ConfigError);
    }
}

TEST(GanConfig, TextRoundTripAndUnknownKeys) {
    GanConfig c = tiny_config();
    c.alpha = 0.3;
    c.lr_factors = {0.5, 0.25};
    c.seed = 1234567890123ull;
    const auto text = config_to_text(c);
    EXPECT_EQ(config_to_text(config_from_text(text)), text);
    EXPECT_THROW(set_config_key(c, "nosuch", "1"), ConfigError);
    EXPECT_THROW(set_config_key(c, "epochs", "-3"), ConfigError);
    EXPECT_THROW(set_config_key(c, "alpha", "half"), ConfigError);
    set_config_key(c, "lr_milestones", "5,9");
    EXPECT_EQ(c.lr_milestones, (std::vector<std::size_t>{5, 9}));
}

TEST(Schedule, ScalesWithRunLength) {
    GanConfig c;
    EXPECT_EQ(rp_start(c), 60u);
    EXPECT_EQ(learning_rate(c, 74), 0.01);
    EXPECT_DOUBLE_EQ(learning_rate(c, 75), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(c, 110), 1e-4);
    c.epochs = 20;
    EXPECT_EQ(rp_start(c), 8u);
    EXPECT_EQ(scaled_epoch(c, 75), 10u);
    EXPECT_EQ(scaled_epoch(c, 110), 14u);
    EXPECT_EQ(learning_rate(c, 9), 0.01);
    EXPECT_DOUBLE_EQ(learning_rate(c, 10), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(c, 19), 1e-4);
}

// ---- optimizer -------------------------------------------------------------------------

TEST(Nesterov, ClosedFormStepWithWeightDecay) {
    Param w{"w", DenseTensor({1}, 2.0), true};
    Param b{"b", DenseTensor({1}, 2.0), false};
    ParamRefs ps{&w, &b};
    std::vector<DenseTensor> vel{DenseTensor({1}, 0.5), DenseTensor({1}, 0.5)};
    const std::vector<DenseTensor> g{DenseTensor({1}, 3.0), DenseTensor({1}, 3.0)};
    const double lr = 0.1, mu = 0.9, wd = 0.01;
    nesterov_update(ps, g, vel, lr, mu, wd);
    const double gw = 3.0 + wd * 2.0;
    const double vw = mu * 0.5 - lr * gw;
    EXPECT_DOUBLE_EQ(vel[0][0], vw);
    EXPECT_DOUBLE_EQ(w.value[0], 2.0 + mu * vw - lr * gw);
    const double vb = mu * 0.5 - lr * 3.0;
    EXPECT_DOUBLE_EQ(vel[1][0], vb);
    EXPECT_DOUBLE_EQ(b.value[0], 2.0 + mu * vb - lr * 3.0);
}

// ---- steps -----------------------------------------------------------------------------

TEST(TrainStep, ZeroLearningRateLeavesStateUnchanged) {
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    ThreePlayerState s(tiny_config()), ref(tiny_config());
    train_step(s, b.x_l, b.y_l, b.x_u, 0.0, 7);
    s.counters = {};
    EXPECT_TRUE(same_state(s, ref));
}

TEST(TrainStep, BitReproducibleAndConsumesUnlabeled) {
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    ThreePlayerState s1(tiny_config()), s2(tiny_config());
    auto r1 = train_step(s1, b.x_l, b.y_l, b.x_u, 0.01, 7);
    auto r2 = train_step(s2, b.x_l, b.y_l, b.x_u, 0.01, 7);
    EXPECT_TRUE(same_state(s1, s2));
    EXPECT_EQ(r1.loss_d, r2.loss_d);
    EXPECT_EQ(r1.loss_g, r2.loss_g);
    EXPECT_EQ(s1.counters.unlabeled_batches, 1u);
    EXPECT_EQ(s1.counters.unlabeled_samples, 4u);
    EXPECT_EQ(r1.unlabeled_used, 4u);
    EXPECT_GT(r1.grad_norm_d, 0.0);
    EXPECT_GT(r1.grad_norm_c, 0.0);
    EXPECT_GT(r1.grad_norm_g, 0.0);
}

TEST(TrainStep, ReportedLossesMatchPlainFormulas) {
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    GanConfig cfg = tiny_config();
    ThreePlayerState s(cfg);
    s.epoch = rp_start(cfg);
    auto r = train_step(s, b.x_l, b.y_l, b.x_u, 0.01, 3);
    EXPECT_NEAR(r.loss_d, discriminator_loss(r.d_real, r.d_c, r.d_g, cfg.alpha), 1e-12);
    EXPECT_NEAR(r.loss_c, r.r_l + cfg.alpha_p * r.r_p + r.unsup, 1e-12);
    EXPECT_GT(r.r_p, 0.0);
    GanConfig long_run = cfg;
    long_run.epochs = 150;
    ThreePlayerState early(long_run);
    auto e = train_step(early, b.x_l, b.y_l, b.x_u, 0.01, 3);
    EXPECT_EQ(e.r_p, 0.0);
}

TEST(TrainStep, DiscriminatorDescentOnFrozenPlayers) {
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    ThreePlayerState s(tiny_config());
    const auto batch = prepare_step(s, b.x_l, b.y_l, b.x_u, 5);
    double prev = discriminator_update(s, batch, 0.002);
    for (int i = 0; i < 6; ++i) {
        const double cur = discriminator_update(s, batch, 0.002);
        EXPECT_LT(cur, prev) << "step " << i;
        prev = cur;
    }
}

TEST(TrainStep, NonFiniteRollsBackWithPlayerTag) {
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    struct Case {
        const char* player;
        std::function<Param&(ThreePlayerState&)> pick;
    };
    for (const Case& c : std::vector<Case>{
             {"discriminator", [](ThreePlayerState& s) -> Param& { return *s.discriminator().params().front(); }},
             {"classifier", [](ThreePlayerState& s) -> Param& { return *s.classifier().params().front(); }},
             {"generator", [](ThreePlayerState& s) -> Param& { return *s.generator().params().front(); }}}) {
        ThreePlayerState s(tiny_config());
        for (auto& v : c.pick(s).value.data()) v = std::numeric_limits<double>::quiet_NaN();
        const auto before = snapshot(s);
        try {
            train_step(s, b.x_l, b.y_l, b.x_u, 0.01, 1);
            ADD_FAILURE() << "no error for " << c.player;
        } catch (const StepError& e) {
            EXPECT_EQ(e.player(), c.player);
        }
        const auto after = snapshot(s);
        EXPECT_TRUE(bitwise_equal(after.values, before.values)) << c.player;
        EXPECT_EQ(s.counters.steps, 0u);
    }
}

// ---- training loop --------------------------------------------------------------------

TEST(Train, ZeroEpochsIsIdentity) {
    auto cfg = tiny_config();
    cfg.epochs = 0;
    ThreePlayerState s(cfg), ref(cfg);
    auto r = train(s, tiny_data());
    EXPECT_TRUE(r.history.empty());
    EXPECT_TRUE(same_state(s, ref));
}

TEST(Train, HistoryLengthAndResumeMatchesUninterrupted) {
    auto data = tiny_data();
    auto cfg = tiny_config();
    ThreePlayerState full(cfg);
    auto r = train(full, data);
    ASSERT_FALSE(r.failure.has_value());
    ASSERT_EQ(r.history.size(), cfg.epochs);
    for (std::size_t e = 0; e < cfg.epochs; ++e) EXPECT_EQ(r.history[e].epoch, e);
    const std::size_t per_epoch = (data.labeled_count() + cfg.batch_size - 1) / cfg.batch_size;
    EXPECT_EQ(full.counters.steps, cfg.epochs * per_epoch);
    EXPECT_TRUE(r.best.has_value());

    auto path = fs::temp_directory_path() / "ttgan_gan_resume.ttg";
    ThreePlayerState first(cfg);
    TrainOptions stop_after_one;
    stop_after_one.on_epoch = [&](const EpochRecord& rec, ThreePlayerState& st) {
        if (rec.epoch == 0) save_state(path, st);
    };
    train(first, data, stop_after_one);
    auto resumed = load_state(path);
    EXPECT_EQ(resumed->epoch, 1u);
    EXPECT_EQ(resumed->counters.steps, per_epoch);
    auto rest = train(*resumed, data);
    ASSERT_EQ(rest.history.size(), 1u);
    EXPECT_EQ(rest.history[0].epoch, 1u);
    EXPECT_EQ(rest.history[0].loss_d, r.history[1].loss_d);
    EXPECT_EQ(rest.history[0].val_auc, r.history[1].val_auc);
    EXPECT_TRUE(same_state(*resumed, full));
    fs::remove(path);
}

TEST(Sample, RangeDeterminismAndConditioning) {
    ThreePlayerState s(tiny_config());
    auto a = sample(s, 0, 100, 9);
    EXPECT_EQ(a.shape(), (Shape{100, 8, 8, 8, 1}));
    for (double v : a.data()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(sample(s, 0, 100, 9), a);
    EXPECT_NE(sample(s, 1, 100, 9), a);
    EXPECT_THROW(sample(s, 2, 1, 9), ArgumentError);
}

// ---- checkpoint -------------------------------------------------------------------------

TEST(Checkpoint, ByteExactRoundTrip) {
    ThreePlayerState s(tiny_config());
    auto data = tiny_data();
    auto b = first_batch(data, 4);
    train_step(s, b.x_l, b.y_l, b.x_u, 0.01, 2);
    const auto bytes = encode_checkpoint(state_to_checkpoint(s));
    EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);
    auto back = state_from_checkpoint(decode_checkpoint(bytes));
    EXPECT_TRUE(same_state(*back, s));
    EXPECT_EQ(back->counters.steps, 1u);
    EXPECT_EQ(encode_checkpoint(state_to_checkpoint(*back)), bytes);
}

TEST(Checkpoint, FormatErrors) {
    Checkpoint c{"alpha=0.5\n", {{"a", {DenseTensor({2}, 1.0)}}, {"b", {DenseTensor({1, 3}, 2.0)}}}};
    auto bytes = encode_checkpoint(c);
    EXPECT_EQ(decode_checkpoint(bytes), c);
    for (std::size_t cut : {bytes.size() - 1, std::size_t{10}, std::size_t{3}}) {
        std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(decode_checkpoint(t), FormatError) << cut;
    }
    auto bad = bytes;
    bad[0] = 'X';
    try {
        decode_checkpoint(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(decode_checkpoint(extra), FormatError);
    try {
        std::vector<std::uint8_t> t(bytes.begin(), bytes.end() - 4);
        decode_checkpoint(t);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos) << e.what();
    }
}
