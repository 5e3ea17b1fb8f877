#include "support.hpp"

#include "uvseg/checkpoint.hpp"
#include "uvseg/error.hpp"
#include "uvseg/generalist.hpp"

#include <gtest/gtest.h>

using namespace uvs;
using namespace uvs::generalist;
using ag::Var;

namespace {

geodata::ImageTile noise_tile(std::size_t side, std::uint64_t seed)
{
    Rng rng(seed);
    geodata::ImageTile t;
    t.pixels = RgbImage(side, side);
    for (auto& p : t.pixels.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return t;
}

MixedPrompt as_prompt(const SparsePromptEmbedding& s)
{
    return {s.tokens, MixerKind::add, s.provenance};
}

BoxSet boxes(std::initializer_list<Box> b)
{
    return {std::vector<Box>(b), "t"};
}

} // namespace

TEST(Generalist, EmbeddingShape)
{
    TinyPromptable g(GeneralistConfig::tiny(64));
    const auto emb = g.encode_image(noise_tile(64, 1));
    EXPECT_EQ(emb.features.shape(), (Shape{32, 16, 16}));
    EXPECT_TRUE(emb.features.all_finite());

    GeneralistConfig def;
    EXPECT_EQ(def.grid(), 64u);
    EXPECT_EQ(def.embed_dim, 256u);
}

TEST(Generalist, ZeroTileFiniteAndRepeatable)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    geodata::ImageTile zero{RgbImage(32, 32, 0)};
    const auto a = g.encode_image(zero);
    const auto b = g.encode_image(zero);
    EXPECT_TRUE(a.features.all_finite());
    EXPECT_EQ(a.features.storage(), b.features.storage());
    EXPECT_THROW(g.encode_image(noise_tile(64, 1)), InvalidInput);
}

TEST(Generalist, ParametersAreFrozen)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    ASSERT_GT(g.params().size(), 0u);
    for (const auto& [name, p] : g.params().entries()) EXPECT_FALSE(p.requires_grad()) << name;
}

TEST(Generalist, TokenCountsPerBox)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    auto [one, d1] = g.encode_prompts(boxes({{1, 2, 10, 12}}), std::nullopt);
    EXPECT_EQ(one.count(), 2u);
    EXPECT_EQ(one.tokens.shape(), (Shape{2, 32}));
    EXPECT_FALSE(d1.from_mask);

    auto [three, d3] = g.encode_prompts(boxes({{0, 0, 4, 4}, {5, 5, 9, 9}, {10, 1, 30, 3}}), std::nullopt);
    EXPECT_EQ(three.count(), 6u);
    for (auto s : three.provenance) EXPECT_EQ(s, TokenSource::box_corner);
    // order-stable: the first box's tokens are the same whether or not others follow
    for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(three.tokens.value().at(0, k), g.encode_prompts(boxes({{0, 0, 4, 4}}), std::nullopt).first.tokens.value().at(0, k));

    for (std::size_t n = 0; n <= 16; ++n) {
        BoxSet bs;
        for (std::size_t i = 0; i < n; ++i) bs.boxes.push_back({0, static_cast<long>(i), 4, static_cast<long>(i) + 1});
        EXPECT_EQ(g.encode_prompts(bs, std::nullopt).first.count(), n == 0 ? 1u : 2 * n);
    }
}

TEST(Generalist, EmptyPromptUsesSentinelAndDecodes)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    auto [sparse, dense] = g.encode_prompts(BoxSet{}, std::nullopt);
    ASSERT_EQ(sparse.count(), 1u);
    EXPECT_EQ(sparse.provenance[0], TokenSource::sentinel);
    const auto out = g.decode_mask(g.encode_image(noise_tile(32, 2)), dense, as_prompt(sparse));
    EXPECT_EQ(out.logits.shape(), (Shape{32, 32}));
    EXPECT_TRUE(out.logits.value().all_finite());
}

TEST(Generalist, OutOfBoundsBoxRejected)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    EXPECT_THROW(g.encode_prompts(boxes({{0, 0, 33, 4}}), std::nullopt), InvalidInput);
    EXPECT_THROW(g.encode_prompts(boxes({{-1, 0, 3, 4}}), std::nullopt), InvalidInput);
    EXPECT_THROW(g.encode_prompts(boxes({{3, 0, 3, 4}}), std::nullopt), InvalidInput);
}

TEST(Generalist, MaskPathways)
{
    auto cfg = GeneralistConfig::tiny(32);
    const Var mask = Var::constant(Tensor({1, 32, 32}, 1.0));
    TinyPromptable dense_g(cfg);
    auto [s1, d1] = dense_g.encode_prompts(boxes({{0, 0, 8, 8}}), mask);
    EXPECT_TRUE(d1.from_mask);
    EXPECT_EQ(d1.features.shape(), (Shape{32, 8, 8}));
    EXPECT_EQ(s1.count(), 2u);

    cfg.mask_pathway = MaskPathway::sparse;
    TinyPromptable sparse_g(cfg);
    auto [s2, d2] = sparse_g.encode_prompts(boxes({{0, 0, 8, 8}}), mask);
    EXPECT_FALSE(d2.from_mask);
    ASSERT_EQ(s2.count(), 3u);
    EXPECT_EQ(s2.provenance[2], TokenSource::mask_summary);

    EXPECT_THROW(dense_g.encode_prompts(BoxSet{}, Var::constant(Tensor({1, 16, 16}))), InvalidInput);
}

TEST(Generalist, DecodeIsDeterministicAndTileSized)
{
    for (std::size_t side : {32u, 64u}) {
        TinyPromptable g(GeneralistConfig::tiny(side));
        const auto img = g.encode_image(noise_tile(side, 3));
        auto [s, d] = g.encode_prompts(boxes({{2, 2, 9, 11}}), std::nullopt);
        const auto a = g.decode_mask(img, d, as_prompt(s));
        const auto b = g.decode_mask(img, d, as_prompt(s));
        EXPECT_EQ(a.logits.shape(), (Shape{side, side}));
        EXPECT_EQ(a.logits.value().storage(), b.logits.value().storage());
        EXPECT_EQ(a.quality.shape(), (Shape{1, 1}));
    }
}

TEST(Generalist, BinarizeAtThreshold)
{
    MaskLogits m;
    m.logits = Var::constant(Tensor({1, 3}, std::vector<double>{-1.0, 0.0, 2.0}));
    EXPECT_EQ(m.binarize().data, (std::vector<std::uint8_t>{0, 0, 1}));
    m.threshold = -2.0;
    EXPECT_EQ(m.binarize().count(), 3u);
}

TEST(Generalist, WidthMismatchIsConfigError)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    const auto img = g.encode_image(noise_tile(32, 4));
    auto [s, d] = g.encode_prompts(BoxSet{}, std::nullopt);
    MixedPrompt bad{Var::constant(Tensor({2, 16})), MixerKind::add, {}};
    EXPECT_THROW(g.decode_mask(img, d, bad), ConfigError);
    ImageEmbedding small{Tensor({32, 4, 4})};
    EXPECT_THROW(g.decode_mask(small, d, as_prompt(s)), ConfigError);
}

TEST(Generalist, GradientReachesPromptTokensNotWeights)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    const auto img = g.encode_image(noise_tile(32, 5));
    auto [s, d] = g.encode_prompts(boxes({{4, 4, 20, 20}}), std::nullopt);
    Var tokens = Var::parameter(s.tokens.value());
    Rng rng(6);
    const Tensor w = support::random_tensor({32, 32}, rng);
    auto loss = [&] {
        return ag::sum(ag::mul(g.decode_mask(img, d, {tokens, MixerKind::add, s.provenance}).logits, Var::constant(w)));
    };
    EXPECT_LT(support::gradient_error(loss, tokens), 1e-4);
    for (const auto& [name, p] : g.params().entries()) EXPECT_FALSE(p.has_grad()) << name;
}

TEST(Generalist, GradientReachesMaskPrompt)
{
    TinyPromptable g(GeneralistConfig::tiny(32));
    const auto img = g.encode_image(noise_tile(32, 7));
    Rng rng(8);
    Var mask = Var::parameter(support::random_tensor({1, 32, 32}, rng));
    const Tensor w = support::random_tensor({32, 32}, rng);
    auto loss = [&] {
        auto [s, d] = g.encode_prompts(BoxSet{}, mask);
        return ag::sum(ag::mul(g.decode_mask(img, d, {s.tokens, MixerKind::add, s.provenance}).logits, Var::constant(w)));
    };
    EXPECT_LT(support::gradient_error(loss, mask, 32), 1e-4);
}

TEST(Generalist, ConfigValidationAndJson)
{
    auto c = GeneralistConfig::tiny(64);
    c.patch_size = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = GeneralistConfig::tiny(64);
    c.mask_pathway = MaskPathway::sparse;
    c.seed = 3;
    EXPECT_EQ(to_json(generalist_config_from_json(to_json(c))), to_json(c));
    EXPECT_THROW(generalist_config_from_json({{"depth", 2}}), ConfigError);
    EXPECT_THROW(parse_pathway("both"), ConfigError);
}

TEST(Generalist, SaveLoadPreservesHash)
{
    const auto dir = support::scratch_dir("gen_ckpt");
    TinyPromptable g(GeneralistConfig::tiny(32));
    save_generalist(dir / "g.ckpt", g);
    const auto back = load_generalist(dir / "g.ckpt");
    EXPECT_EQ(back->params().sha256(), g.params().sha256());
    EXPECT_EQ(to_json(back->config()), to_json(g.config()));
    for (const auto& [name, p] : back->params().entries()) EXPECT_FALSE(p.requires_grad()) << name;

    ckpt::Checkpoint bare;
    ckpt::add_store(bare, "", g.params());
    ckpt::save(dir / "bare.ckpt", bare);
    EXPECT_THROW(load_generalist(dir / "bare.ckpt"), ArtifactMismatch);

    // architecture record disagreeing with the stored tensors
    ckpt::Checkpoint wrong = bare;
    auto j = to_json(GeneralistConfig::tiny(64));
    j["embed_dim"] = 48;
    wrong.meta["generalist"] = j;
    ckpt::save(dir / "wrong.ckpt", wrong);
    EXPECT_THROW(load_generalist(dir / "wrong.ckpt"), ArtifactMismatch);
    EXPECT_THROW(load_generalist(dir / "absent.ckpt"), ArtifactMismatch);
}
