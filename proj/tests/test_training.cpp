#include "support.hpp"

#include "uvseg/error.hpp"
#include "uvseg/training.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>
#include <sstream>

using namespace uvs;
using namespace uvs::training;
using ag::Var;

namespace {

Tensor random_probs(Shape s, Rng& rng)
{
    return support::random_tensor(std::move(s), rng, 0.01, 0.99);
}

Tensor random_gt(Shape s, Rng& rng)
{
    Tensor t(std::move(s));
    for (auto& v : t.values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    return t;
}

std::vector<Sample> synth_samples(std::size_t n, std::uint64_t seed0, std::size_t side = 32)
{
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        geodata::Morphology m;
        m.seed = seed0 + i;
        m.tile_size = side;
        m.uv_region_count = 1;
        auto [t, l] = geodata::gen_synthetic_tile(m);
        t.tile_id = "s" + std::to_string(i);
        out.push_back({t, l.mask});
    }
    return out;
}

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(Losses, FocalReductionsAndHandValue)
{
    Rng rng(1);
    const Tensor p = random_probs({8, 8}, rng), g = random_gt({8, 8}, rng);
    double bce = 0;
    for (std::size_t i = 0; i < 64; ++i) bce -= (g[i] * std::log(p[i]) + (1 - g[i]) * std::log(1 - p[i])) / 64.0;
    EXPECT_NEAR(focal_loss(Var::constant(p), g, 0.0, 0.5).value()[0], 0.5 * bce, 1e-9);

    const double perfect = focal_loss(Var::constant(g), g, 2.0, 0.25).value()[0];
    EXPECT_GE(perfect, 0.0);
    EXPECT_LT(perfect, 1e-5);

    const double one = focal_loss(Var::constant(Tensor({1, 1}, 0.5)), Tensor({1, 1}, 1.0), 2.0, 0.25).value()[0];
    EXPECT_NEAR(one, 0.25 * 0.25 * std::numbers::ln2, 1e-12);
    EXPECT_NEAR(one, 0.043322, 1e-6);

    EXPECT_THROW(focal_loss(Var::constant(p), Tensor({4, 4}), 2.0, 0.25), InvalidInput);
}

TEST(Losses, DiceValues)
{
    Tensor g({40, 40});
    for (std::size_t i = 0; i < 1200; ++i) g[i] = 1.0;
    EXPECT_LT(dice_loss(Var::constant(g), g, 1.0).value()[0], 1e-3);

    Tensor a({4, 4}), b({4, 4});
    for (std::size_t i = 0; i < 8; ++i) a[i] = 1.0;
    for (std::size_t i = 8; i < 16; ++i) b[i] = 1.0;
    EXPECT_NEAR(dice_loss(Var::constant(a), b, 1e-12).value()[0], 1.0, 1e-9);

    // 4x4: gt = top two rows (8 px), prediction = first row only (4 px)
    Tensor gt({4, 4}), half({4, 4});
    for (std::size_t i = 0; i < 8; ++i) gt[i] = 1.0;
    for (std::size_t i = 0; i < 4; ++i) half[i] = 1.0;
    EXPECT_NEAR(dice_loss(Var::constant(half), gt, 1.0).value()[0], 1.0 - 9.0 / 13.0, 1e-12);

    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
        const double d = dice_loss(Var::constant(random_probs({8, 8}, rng)), random_gt({8, 8}, rng), 1.0).value()[0];
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 1.0);
    }
}

TEST(Losses, MseValues)
{
    Rng rng(3);
    const Tensor g = random_gt({8, 8}, rng);
    EXPECT_EQ(mse_loss(Var::constant(g), g).value()[0], 0.0);
    EXPECT_NEAR(mse_loss(Var::constant(Tensor({8, 8}, 0.5)), g).value()[0], 0.25, 1e-15);
    const Tensor p = random_probs({8, 8}, rng);
    double want = 0;
    for (std::size_t i = 0; i < 64; ++i) want += (p[i] - g[i]) * (p[i] - g[i]) / 64.0;
    EXPECT_NEAR(mse_loss(Var::constant(p), g).value()[0], want, 1e-9);
}

TEST(Losses, CrossEntropyOracle)
{
    Rng rng(4);
    const Tensor logits = support::random_tensor({2, 6, 6}, rng, -3, 3);
    const Tensor g = random_gt({6, 6}, rng);
    double want = 0;
    for (std::size_t i = 0; i < 36; ++i) {
        const double z0 = logits[i], z1 = logits[36 + i];
        const double lse = std::log(std::exp(z0) + std::exp(z1));
        want += (lse - (g[i] > 0.5 ? z1 : z0)) / 36.0;
    }
    EXPECT_NEAR(cross_entropy(Var::constant(logits), g).value()[0], want, 1e-12);
}

TEST(Losses, Gradients)
{
    Rng rng(5);
    const Tensor g = random_gt({8, 8}, rng);
    Var p = Var::parameter(random_probs({8, 8}, rng));
    EXPECT_LT(support::gradient_error([&] { return focal_loss(p, g, 2.0, 0.25); }, p), 1e-4);
    EXPECT_LT(support::gradient_error([&] { return dice_loss(p, g, 1.0); }, p), 1e-4);
    EXPECT_LT(support::gradient_error([&] { return mse_loss(p, g); }, p), 1e-4);
    Var z = Var::parameter(support::random_tensor({2, 8, 8}, rng));
    EXPECT_LT(support::gradient_error([&] { return cross_entropy(z, g); }, z), 1e-4);
}

TEST(Losses, TotalRecomposesAndScalesWithLambda)
{
    Rng rng(6);
    const Tensor g = random_gt({8, 8}, rng);
    const Var p = Var::constant(random_probs({8, 8}, rng));
    const Var z = Var::constant(support::random_tensor({2, 8, 8}, rng));
    LossConfig c;
    const auto r = total_loss(p, z, g, c);
    const double f = focal_loss(p, g, 2.0, 0.25).value()[0], d = dice_loss(p, g, 1.0).value()[0],
                 m = mse_loss(p, g).value()[0], ce = cross_entropy(z, g).value()[0];
    EXPECT_NEAR(r.terms.total, f + d + m + ce, 1e-9);
    EXPECT_EQ(r.terms.focal, f);
    EXPECT_EQ(r.terms.ce, ce);

    c.lambda = 0.0;
    EXPECT_EQ(total_loss(p, z, g, c).terms.total, ce);
    c.lambda = 1.5;
    const double t1 = total_loss(p, z, g, c).terms.total;
    c.lambda = 3.0;
    const double t2 = total_loss(p, z, g, c).terms.total;
    EXPECT_NEAR(t2 - ce, 2.0 * (t1 - ce), 1e-12);
    EXPECT_GT(t2, t1);

    EXPECT_EQ(total_loss(Var{}, z, g, c).terms.total, ce);
}

TEST(Losses, QualityTarget)
{
    Tensor g({2, 2});
    g[0] = 1.0;
    const Var p = Var::constant(Tensor({2, 2}, std::vector<double>{0.9, 0.9, 0.1, 0.1})); // IoU 1/2
    LossConfig c;
    c.mse_target = MseTarget::quality;
    const Var q = Var::constant(Tensor({1, 1}, 0.75));
    EXPECT_NEAR(total_loss(p, Var::constant(Tensor({2, 2, 2})), g, c, q).terms.mse, 0.0625, 1e-15);
    EXPECT_THROW(total_loss(p, Var::constant(Tensor({2, 2, 2})), g, c), InvalidInput);
}

TEST(Schedule, CosineEndpoints)
{
    EXPECT_DOUBLE_EQ(cosine_lr(5e-3, 0.0, 0, 200), 5e-3);
    EXPECT_NEAR(cosine_lr(5e-3, 0.0, 100, 200), 2.5e-3, 1e-15);
    EXPECT_LT(cosine_lr(5e-3, 0.0, 199, 200), 0.01 * 5e-3);
    EXPECT_NEAR(cosine_lr(1.0, 0.1, 200, 200), 0.1, 1e-15);
}

TEST(Optimizer, AdamMatchesHandRecurrence)
{
    nn::ParamStore ps;
    Var w = ps.add("w", Tensor({2}, std::vector<double>{1.0, -2.0}));
    Var frozen = ps.add("f", Tensor({1}, 3.0), false);
    Adam adam(ps, 0.1);
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
    for (int t = 1; t <= 5; ++t) {
        ps.zero_grad();
        ag::backward(ag::sum(ag::mul(w, w))); // grad 2w
        adam.step(0.01);
        for (int i = 0; i < 2; ++i) {
            const double g = 2 * x[i] + 0.1 * x[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(w.value()[i], x[i], 1e-14);
        }
    }
    EXPECT_EQ(frozen.value()[0], 3.0);
    EXPECT_EQ(adam.steps(), 5u);
}

TEST(Configs, ValidationAndJson)
{
    TrainConfig t;
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    t.min_lr = 1.0;
    EXPECT_THROW(t.validate(), ConfigError);
    LossConfig l;
    l.focal_alpha = 1.0;
    EXPECT_THROW(l.validate(), ConfigError);

    TrainConfig t2;
    t2.lr = 5e-4;
    t2.seed = 9;
    EXPECT_EQ(to_json(train_config_from_json(to_json(t2))), to_json(t2));
    LossConfig l2;
    l2.lambda = 10;
    l2.seg_scope = SegLossScope::head;
    EXPECT_EQ(to_json(loss_config_from_json(to_json(l2))), to_json(l2));
    EXPECT_THROW(train_config_from_json({{"learning_rate", 1}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"schedule", "step"}}), ConfigError);
    EXPECT_THROW(loss_config_from_json({{"mse_target", "iou"}}), ConfigError);
    EXPECT_THROW(train_config_from_json({{"lr", "fast"}}), ConfigError);

    const auto standard = GridSearchSpace::standard();
    EXPECT_EQ(standard.size(), 18u);
    EXPECT_EQ(standard.lr_grid, (std::vector<double>{0.005, 0.0005, 0.00005}));
    EXPECT_EQ(standard.wd_grid, (std::vector<double>{0.01, 0.001}));
    EXPECT_EQ(standard.lambda_grid, (std::vector<double>{0.1, 1, 10}));
    EXPECT_THROW(grid_space_from_json({{"lr_grid", nlohmann::json::array()}}), ConfigError);
}

TEST(Training, StepKeepsGeneralistFrozen)
{
    model::UvSam m(model::ModelConfig::tiny(32));
    const auto samples = synth_samples(2, 10);
    const std::string before = m.generalist()->params().sha256();
    const std::string spec_before = m.specialist().params().sha256();
    const std::string mix_before = m.mixer_params().sha256();
    Trainer tr(m, TrainConfig{}, LossConfig{}, 10);
    const auto rec = tr.train_step({&samples[0], &samples[1]});
    EXPECT_TRUE(std::isfinite(rec.loss.total));
    EXPECT_DOUBLE_EQ(rec.lr, 5e-3);
    EXPECT_EQ(m.generalist()->params().sha256(), before);
    EXPECT_NE(m.specialist().params().sha256(), spec_before);
    EXPECT_NE(m.mixer_params().sha256(), mix_before);
}

TEST(Training, LossDecreasesOnOneTile)
{
    model::UvSam m(model::ModelConfig::tiny(32));
    const auto s = synth_samples(1, 20);
    Trainer tr(m, TrainConfig{}, LossConfig{}, 1000);
    const double first = tr.train_step({&s[0]}).loss.total;
    double last = first;
    for (int i = 0; i < 20; ++i) last = tr.train_step({&s[0]}).loss.total;
    EXPECT_LT(last, first);
}

TEST(Training, NonFiniteLossIsNumericalError)
{
    model::UvSam m(model::ModelConfig::tiny(32));
    const auto s = synth_samples(1, 30);
    m.trainable().get("specialist.head.classifier.bias").mutable_value()[0] = std::nan("");
    Trainer tr(m, TrainConfig{}, LossConfig{}, 10);
    EXPECT_THROW(tr.train_step({&s[0]}), NumericalError);
}

TEST(Training, FitIsDeterministicAndSelectsBest)
{
    const auto dir = support::scratch_dir("fit");
    const auto train = synth_samples(4, 40), val = synth_samples(2, 60);
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 2;
    tc.seed = 3;
    std::vector<std::string> csv;
    double best_iou = 0;
    for (int run = 0; run < 2; ++run) {
        model::UvSam m(model::ModelConfig::tiny(32));
        FitOptions o;
        o.history_csv = dir / ("h" + std::to_string(run) + ".csv");
        o.checkpoint = dir / ("c" + std::to_string(run) + ".ckpt");
        const auto r = fit(m, train, val, tc, LossConfig{}, o);
        ASSERT_EQ(r.history.size(), 4u);
        EXPECT_EQ(r.steps.size(), 8u);
        EXPECT_DOUBLE_EQ(r.steps.front().lr, tc.lr);
        for (const auto& e : r.history) EXPECT_LE(e.val_iou, r.best_val_iou);
        EXPECT_EQ(r.history[r.best_epoch].val_iou, r.best_val_iou);
        EXPECT_TRUE(std::filesystem::exists(o.checkpoint));
        csv.push_back(read_file(o.history_csv));
        best_iou = r.best_val_iou;
        // best weights are restored in the model
        EXPECT_DOUBLE_EQ(dataset_iou(m, val), best_iou);
    }
    EXPECT_EQ(csv[0], csv[1]);
    EXPECT_EQ(csv[0].substr(0, csv[0].find('\n')), "epoch,step,lr,focal,dice,mse,ce,total,train_iou,val_iou");
    EXPECT_THROW(fit(*std::make_unique<model::UvSam>(model::ModelConfig::tiny(32)), {}, val, tc, LossConfig{}),
                 InvalidInput);
}

TEST(Training, MaxStepsCapsTraining)
{
    model::UvSam m(model::ModelConfig::tiny(32));
    TrainConfig tc;
    tc.batch_size = 1;
    FitOptions o;
    o.max_steps = 3;
    const auto r = fit(m, synth_samples(2, 70), {}, tc, LossConfig{}, o);
    EXPECT_EQ(r.steps.size(), 3u);
    EXPECT_EQ(r.history.size(), 2u);
}

TEST(Checkpoints, RoundTripAndHashCheck)
{
    const auto dir = support::scratch_dir("ckpt");
    auto cfg = model::ModelConfig::tiny(32);
    cfg.prompting.mixer = MixerKind::mlp;
    model::UvSam m(cfg);
    const auto s = synth_samples(1, 80);
    Trainer tr(m, TrainConfig{}, LossConfig{}, 4);
    tr.train_step({&s[0]});
    ckpt::save(dir / "m.ckpt", make_checkpoint(m, TrainConfig{}, LossConfig{}, &tr.optimizer(), 1));

    const auto back = load_model(dir / "m.ckpt");
    EXPECT_EQ(back.trainable().sha256(), m.trainable().sha256());
    EXPECT_EQ(back.forward(s[0].tile).final_logits.value().storage(),
              m.forward(s[0].tile).final_logits.value().storage());

    auto other = generalist::GeneralistConfig::tiny(32);
    other.seed = 99;
    EXPECT_THROW(load_model(dir / "m.ckpt", std::make_shared<generalist::TinyPromptable>(other)), ArtifactMismatch);
    EXPECT_THROW(load_model(dir / "missing.ckpt"), ArtifactMismatch);

    ckpt::Checkpoint partial = ckpt::load(dir / "m.ckpt");
    const auto weight = std::find_if(partial.tensors.begin(), partial.tensors.end(),
                                     [](const auto& t) { return t.name.rfind("trainable.", 0) == 0; });
    ASSERT_NE(weight, partial.tensors.end());
    partial.tensors.erase(weight);
    ckpt::save(dir / "partial.ckpt", partial);
    EXPECT_THROW(load_model(dir / "partial.ckpt"), ArtifactMismatch);
}

TEST(GridSearch, CountsRankingAndDegenerateSweep)
{
    const auto train = synth_samples(2, 90), val = synth_samples(1, 95);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    GridSearchSpace space{{5e-3, 5e-4}, {1e-3}, {0.1, 1.0}};
    const auto mcfg = model::ModelConfig::tiny(32);
    const auto a = grid_search(space, mcfg, train, val, tc, LossConfig{});
    const auto b = grid_search(space, mcfg, train, val, tc, LossConfig{});
    ASSERT_EQ(a.size(), 4u);
    auto by_index = [](std::vector<Trial> v) {
        std::sort(v.begin(), v.end(), [](const Trial& x, const Trial& y) { return x.index < y.index; });
        return v;
    };
    const auto ai = by_index(a), bi = by_index(b);
    EXPECT_EQ(ai[1].lr, 5e-3); // lr-major enumeration
    EXPECT_EQ(ai[1].lambda, 1.0);
    EXPECT_EQ(ai[2].lr, 5e-4);
    for (std::size_t i = 0; i < ai.size(); ++i) {
        EXPECT_EQ(ai[i].rank, bi[i].rank);
        EXPECT_EQ(ai[i].val_iou, bi[i].val_iou);
        EXPECT_TRUE(ai[i].ok);
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].rank, i + 1);
        if (i > 0) EXPECT_GE(a[i - 1].val_iou, a[i].val_iou);
    }

    const auto one = grid_search({{5e-3}, {1e-3}, {1.0}}, mcfg, train, val, tc, LossConfig{});
    ASSERT_EQ(one.size(), 1u);
    model::UvSam direct(mcfg);
    EXPECT_DOUBLE_EQ(one[0].val_iou, fit(direct, train, val, tc, LossConfig{}).best_val_iou);
}

TEST(GridSearch, FailedTrialsRankLast)
{
    const auto train = synth_samples(1, 100);
    TrainConfig tc;
    tc.epochs = 1;
    LossConfig bad;
    bad.dice_smooth = 1.0;
    // a negative lambda fails validation inside the trial, not the sweep
    const auto trials = grid_search({{5e-3}, {1e-3}, {-1.0, 1.0}}, model::ModelConfig::tiny(32), train, {}, tc, bad);
    ASSERT_EQ(trials.size(), 2u);
    EXPECT_TRUE(trials[0].ok);
    EXPECT_EQ(trials[0].index, 1u);
    EXPECT_FALSE(trials[1].ok);
    EXPECT_FALSE(trials[1].error.empty());
    EXPECT_EQ(trials[1].rank, 2u);
}
