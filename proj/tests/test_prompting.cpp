#include "support.hpp"

#include "uvseg/error.hpp"
#include "uvseg/prompting.hpp"

#include <gtest/gtest.h>

using namespace uvs;
using namespace uvs::prompting;
using ag::Var;

namespace {

/// Independent per-row normalisation oracle: zero mean, unit variance, eps 1e-6.
Tensor normalize_oracle(const Tensor& x)
{
    const std::size_t t = x.dim(0), d = x.dim(1);
    Tensor out({t, d});
    for (std::size_t i = 0; i < t; ++i) {
        double mean = 0, var = 0;
        for (std::size_t k = 0; k < d; ++k) mean += x.at(i, k) / static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) var += (x.at(i, k) - mean) * (x.at(i, k) - mean) / static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) out.at(i, k) = (x.at(i, k) - mean) / std::sqrt(var + 1e-6);
    }
    return out;
}

generalist::SparsePromptEmbedding sparse_of(const Tensor& t)
{
    return {Var::constant(t), std::vector<TokenSource>(t.dim(0), TokenSource::box_corner)};
}

} // namespace

TEST(Boxes, EmptyMask)
{
    EXPECT_TRUE(extract_boxes(BinaryMask(16, 16), 1, 8).empty());
}

TEST(Boxes, TightHalfOpenRectangle)
{
    BinaryMask m(10, 10);
    for (std::size_t y = 2; y <= 5; ++y)
        for (std::size_t x = 3; x <= 7; ++x) m.at(y, x) = 1;
    const auto b = extract_boxes(m, 1, 8, "r");
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b.boxes[0], (Box{3, 2, 8, 6}));
    EXPECT_EQ(b.tile_id, "r");
}

TEST(Boxes, MinAreaFiltersSmallBlob)
{
    BinaryMask m(12, 12);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) m.at(y, x) = 1; // 16 px
    m.at(9, 9) = m.at(9, 10) = 1;                          // 2 px
    const auto b = extract_boxes(m, 5, 8);
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b.boxes[0], (Box{0, 0, 4, 4}));
}

TEST(Boxes, ConnectivityMatters)
{
    BinaryMask m(4, 4);
    m.at(0, 0) = m.at(1, 1) = 1;
    EXPECT_EQ(extract_boxes(m, 1, 8).size(), 1u);
    EXPECT_EQ(extract_boxes(m, 1, 4).size(), 2u);
}

TEST(Boxes, MatchFloodFillOracle)
{
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const BinaryMask m = support::random_mask(32, 32, rng.uniform(0.05, 0.6), rng);
        const int conn = trial % 2 ? 4 : 8;
        const std::size_t min_area = static_cast<std::size_t>(rng.uniform_int(1, 6));
        std::vector<Box> want;
        for (const auto& r : support::flood_regions(m, conn))
            if (r.area >= min_area)
                want.push_back({static_cast<long>(r.x_min), static_cast<long>(r.y_min), static_cast<long>(r.x_max),
                                static_cast<long>(r.y_max)});
        std::sort(want.begin(), want.end(), [](const Box& a, const Box& b) {
            return std::tie(a.y_min, a.x_min, a.y_max, a.x_max) < std::tie(b.y_min, b.x_min, b.y_max, b.x_max);
        });
        EXPECT_EQ(extract_boxes(m, min_area, conn).boxes, want);
    }
}

TEST(Pooling, LinearAndMean)
{
    nn::ParamStore ps;
    Rng rng(1);
    auto pool = make_semantic_pool(ps, "pool", 3, 4, rng);
    pool.proj.bias.mutable_value().fill(0.0);
    EXPECT_EQ(pool(Var::constant(Tensor({3, 5, 5}))).value().max_abs(), 0.0);

    // identity-like projection exposes the spatial mean
    auto& w = pool.proj.weight.mutable_value();
    w.fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    const Tensor x = support::random_tensor({3, 6, 7}, rng);
    const Tensor out = pool(Var::constant(x)).value();
    ASSERT_EQ(out.shape(), (Shape{1, 4}));
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0;
        for (std::size_t k = 0; k < 42; ++k) mean += x[c * 42 + k] / 42.0;
        EXPECT_NEAR(out[c], mean, 1e-12);
    }
    EXPECT_NEAR(pool(Var::constant(Tensor({3, 2, 2}, 2.5))).value()[1], 2.5, 1e-12);
    EXPECT_THROW(pool(Var::constant(Tensor({4, 2, 2}))), ConfigError);
}

TEST(Normalize, UnitSecondMomentAndZeroRows)
{
    Rng rng(2);
    const Tensor x = support::random_tensor({5, 16}, rng, -3, 3);
    const Tensor n = normalize_tokens(Var::constant(x)).value();
    for (std::size_t i = 0; i < 5; ++i) {
        double m2 = 0;
        for (std::size_t k = 0; k < 16; ++k) m2 += n.at(i, k) * n.at(i, k) / 16.0;
        EXPECT_NEAR(m2, 1.0, 1e-5);
    }
    EXPECT_EQ(normalize_tokens(Var::constant(Tensor({2, 8}))).value().max_abs(), 0.0);
}

TEST(MixAdd, ZeroCancellationAndOracle)
{
    EXPECT_EQ(mix_add(sparse_of(Tensor({3, 8})), Var::constant(Tensor({1, 8})), Var::constant(Tensor({1, 8})))
                  .tokens.value()
                  .max_abs(),
              0.0);

    Rng rng(3);
    const Tensor p = support::random_tensor({4, 8}, rng);
    const Tensor s = support::random_tensor({1, 8}, rng);
    Tensor neg = s;
    for (auto& v : neg.values()) v = -v;
    const Tensor cancel = mix_add(sparse_of(p), Var::constant(s), Var::constant(neg)).tokens.value();
    const Tensor np = normalize_oracle(p);
    for (std::size_t i = 0; i < cancel.size(); ++i) EXPECT_NEAR(cancel[i], np[i], 1e-9);

    const Tensor seg = support::random_tensor({1, 8}, rng), sam = support::random_tensor({1, 8}, rng);
    const auto mixed = mix_add(sparse_of(p), Var::constant(seg), Var::constant(sam));
    const Tensor ns = normalize_oracle(seg), nm = normalize_oracle(sam);
    ASSERT_EQ(mixed.tokens.shape(), (Shape{4, 8}));
    EXPECT_EQ(mixed.mixer, MixerKind::add);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(mixed.tokens.value().at(i, k), np.at(i, k) + ns[k] + nm[k], 1e-6);
}

TEST(MixAdd, AppendPlacementAndMissingTokens)
{
    Rng rng(4);
    const Tensor p = support::random_tensor({2, 8}, rng);
    const Var seg = Var::constant(support::random_tensor({1, 8}, rng));
    const auto app = mix_add(sparse_of(p), seg, Var{}, SemanticPlacement::append);
    ASSERT_EQ(app.tokens.shape(), (Shape{3, 8}));
    EXPECT_EQ(app.provenance.back(), TokenSource::semantic);

    const auto only = mix_add(sparse_of(p), Var{}, Var{});
    const Tensor np = normalize_oracle(p);
    for (std::size_t i = 0; i < np.size(); ++i) EXPECT_NEAR(only.tokens.value()[i], np[i], 1e-9);

    EXPECT_THROW(mix_add(sparse_of(p), Var::constant(Tensor({1, 7})), Var{}), ConfigError);
}

TEST(MixAdd, TokenCountPreservedForAllLengths)
{
    nn::ParamStore ps;
    Rng rng(5);
    const auto mlp = make_mlp_mixer(ps, "mixer", 8, 3, rng);
    const Var seg = Var::constant(support::random_tensor({1, 8}, rng));
    const Var sam = Var::constant(support::random_tensor({1, 8}, rng));
    for (std::size_t t = 1; t <= 64; t += 7) {
        const auto p = sparse_of(support::random_tensor({t, 8}, rng));
        EXPECT_EQ(mix_add(p, seg, sam).tokens.shape(), (Shape{t, 8}));
        EXPECT_EQ(mlp(p, seg, sam).tokens.shape(), (Shape{t, 8}));
    }
}

TEST(MixMlp, ZeroAndSelectorHead)
{
    nn::ParamStore ps;
    Rng rng(6);
    auto mlp = make_mlp_mixer(ps, "mixer", 8, 3, rng);
    mlp.head.bias.mutable_value().fill(0.0);
    EXPECT_EQ(mlp(sparse_of(Tensor({2, 8})), Var::constant(Tensor({1, 8})), Var::constant(Tensor({1, 8})))
                  .tokens.value()
                  .max_abs(),
              0.0);

    // head weights that copy the sparse block and ignore the semantic blocks
    auto& w = mlp.head.weight.mutable_value();
    w.fill(0.0);
    for (std::size_t k = 0; k < 8; ++k) w.at(k, k) = 1.0;
    const Tensor p = support::random_tensor({3, 8}, rng);
    const auto out = mlp(sparse_of(p), Var::constant(support::random_tensor({1, 8}, rng)),
                         Var::constant(support::random_tensor({1, 8}, rng)));
    EXPECT_EQ(out.mixer, MixerKind::mlp);
    const Tensor np = normalize_oracle(p);
    for (std::size_t i = 0; i < np.size(); ++i) EXPECT_NEAR(out.tokens.value()[i], np[i], 1e-6);
}

TEST(MixMlp, GradientThroughHeadAndInputs)
{
    nn::ParamStore ps;
    Rng rng(7);
    const auto mlp = make_mlp_mixer(ps, "mixer", 8, 3, rng);
    Var p = Var::parameter(support::random_tensor({3, 8}, rng));
    Var seg = Var::parameter(support::random_tensor({1, 8}, rng));
    const Var sam = Var::constant(support::random_tensor({1, 8}, rng));
    const Tensor w = support::random_tensor({3, 8}, rng);
    auto loss = [&] {
        generalist::SparsePromptEmbedding s{p, std::vector<TokenSource>(3, TokenSource::box_corner)};
        return ag::sum(ag::mul(mlp(s, seg, sam).tokens, Var::constant(w)));
    };
    EXPECT_LT(support::gradient_error(loss, mlp.head.weight), 1e-4);
    EXPECT_LT(support::gradient_error(loss, mlp.head.bias), 1e-4);
    EXPECT_LT(support::gradient_error(loss, p), 1e-4);
    EXPECT_LT(support::gradient_error(loss, seg), 1e-4);
}

TEST(MixMlp, InputCountMustMatchHead)
{
    nn::ParamStore ps;
    Rng rng(8);
    const auto two = make_mlp_mixer(ps, "two", 8, 2, rng);
    const auto p = sparse_of(support::random_tensor({2, 8}, rng));
    const Var tok = Var::constant(support::random_tensor({1, 8}, rng));
    EXPECT_EQ(two(p, tok, Var{}).tokens.shape(), (Shape{2, 8}));
    EXPECT_THROW(two(p, tok, tok), ConfigError);
    EXPECT_THROW(make_mlp_mixer(ps, "none", 8, 0, rng), ConfigError);
}

TEST(PromptingConfig, ValidationAndJson)
{
    PromptingConfig c;
    c.mixer = MixerKind::mlp;
    c.placement = SemanticPlacement::append;
    EXPECT_THROW(c.validate(), ConfigError);
    c.placement = SemanticPlacement::broadcast;
    c.connectivity = 6;
    EXPECT_THROW(c.validate(), ConfigError);

    PromptingConfig d;
    d.mixer = MixerKind::mlp;
    d.min_area_px = 4;
    EXPECT_EQ(to_json(prompting_config_from_json(to_json(d))), to_json(d));
    EXPECT_THROW(prompting_config_from_json({{"mixer", "sum"}}), ConfigError);
    EXPECT_THROW(prompting_config_from_json({{"mixers", "add"}}), ConfigError);
    EXPECT_NO_THROW(prompting_config_from_json({{"broadcast_vs_append", "append"}}));
}
