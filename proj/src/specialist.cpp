#include "uvseg/specialist.hpp"

#include "uvseg/error.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/preprocess.hpp"

namespace uvs::specialist {

void SpecialistConfig::validate() const
{
    if (channels.empty()) throw ConfigError("specialist needs at least one stage");
    if (strides.size() != channels.size() || sr_ratios.size() != channels.size())
        throw ConfigError("specialist channels, strides and sr_ratios must have one entry per stage");
    for (std::size_t i = 0; i < strides.size(); ++i) {
        if (strides[i] == 0 || channels[i] == 0) throw ConfigError("specialist strides/channels must be positive");
        if (i > 0 && (strides[i] <= strides[i - 1] || strides[i] % strides[i - 1] != 0))
            throw ConfigError("specialist strides must be strictly increasing multiples");
    }
    if (embed_dim == 0 || mlp_ratio == 0) throw ConfigError("specialist embed_dim and mlp_ratio must be positive");
    if (tile_size == 0 || tile_size % strides.back() != 0)
        throw ConfigError("tile size " + std::to_string(tile_size) + " is not divisible by the largest stride " +
                          std::to_string(strides.back()));
    if (agg_stride == 0 || tile_size % agg_stride != 0) throw ConfigError("agg_stride must divide the tile size");
}

SpecialistConfig SpecialistConfig::tiny(std::size_t tile_size)
{
    SpecialistConfig c;
    c.tile_size = tile_size;
    c.channels = {8, 16, 24, 32};
    c.embed_dim = 16;
    return c;
}

nlohmann::json to_json(const SpecialistConfig& c)
{
    return {{"tile_size", c.tile_size}, {"channels", c.channels},   {"strides", c.strides},
            {"sr_ratios", c.sr_ratios}, {"embed_dim", c.embed_dim}, {"agg_stride", c.agg_stride},
            {"mlp_ratio", c.mlp_ratio}, {"seed", c.seed}};
}

SpecialistConfig specialist_config_from_json(const nlohmann::json& j)
{
    const std::string where = "specialist";
    reject_unknown_keys(j,
                        {"preset", "tile_size", "channels", "strides", "sr_ratios", "embed_dim", "agg_stride",
                         "mlp_ratio", "seed"},
                        where);
    std::string preset = "tiny";
    std::size_t tile = 64;
    read_field(j, "preset", preset, where);
    read_field(j, "tile_size", tile, where);
    SpecialistConfig c;
    if (preset == "tiny")
        c = SpecialistConfig::tiny(tile);
    else if (preset == "default")
        c.tile_size = tile;
    else
        throw ConfigError("specialist.preset must be 'tiny' or 'default'");
    read_field(j, "channels", c.channels, where);
    read_field(j, "strides", c.strides, where);
    read_field(j, "sr_ratios", c.sr_ratios, where);
    read_field(j, "embed_dim", c.embed_dim, where);
    read_field(j, "agg_stride", c.agg_stride, where);
    read_field(j, "mlp_ratio", c.mlp_ratio, where);
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

Var CoarseMask::foreground_logit() const
{
    const std::size_t h = logits.dim(1), w = logits.dim(2);
    Var fg = ag::slice_rows(logits, 1, 2);
    Var bg = ag::slice_rows(logits, 0, 1);
    return ag::reshape(ag::sub(fg, bg), {1, h, w});
}

BinaryMask argmax_mask(const Tensor& logits)
{
    if (logits.rank() != 3 || logits.dim(0) != 2) throw InvalidInput("coarse logits must be 2 x H x W");
    const std::size_t h = logits.dim(1), w = logits.dim(2);
    BinaryMask m(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) m.at(y, x) = logits.at(1, y, x) > logits.at(0, y, x) ? 1 : 0;
    return m;
}

CoarseMask coarse_from_logits(Var logits)
{
    CoarseMask c;
    c.binary = argmax_mask(logits.value());
    c.logits = std::move(logits);
    return c;
}

// ---------------------------------------------------------------------------

TinyHier::TinyHier(const SpecialistConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    Rng rng(cfg_.seed);
    std::size_t in_ch = 3, prev_stride = 1;
    for (std::size_t i = 0; i < cfg_.stages(); ++i) {
        const std::string p = "stage" + std::to_string(i);
        const std::size_t c = cfg_.channels[i];
        const std::size_t r = cfg_.strides[i] / prev_stride;
        Stage s;
        // Kernel 2r-1 with padding r-1 gives ceil(H / r) outputs and
        // overlapping patches, e.g. 7/4/3 for the first stage.
        s.patch_embed = nn::make_conv(params_, p + ".patch_embed", in_ch, c, 2 * r - 1, r, r - 1, rng);
        s.embed_norm = nn::make_layer_norm2d(params_, p + ".embed_norm", c);
        s.attn_norm = nn::make_layer_norm(params_, p + ".attn_norm", c);
        s.attn = nn::make_attention(params_, p + ".attn", c, c, rng);
        s.sr_ratio = cfg_.sr_ratios[i];
        s.ffn_norm = nn::make_layer_norm2d(params_, p + ".ffn_norm", c);
        const std::size_t hidden = c * cfg_.mlp_ratio;
        s.ffn_in = nn::make_conv(params_, p + ".ffn_in", c, hidden, 1, 1, 0, rng);
        s.ffn_mid = nn::make_conv(params_, p + ".ffn_mid", hidden, hidden, 3, 1, 1, rng);
        s.ffn_out = nn::make_conv(params_, p + ".ffn_out", hidden, c, 1, 1, 0, rng);
        s.out_norm = nn::make_layer_norm2d(params_, p + ".out_norm", c);
        stages_.push_back(std::move(s));
        in_ch = c;
        prev_stride = cfg_.strides[i];
    }
}

FeaturePyramid TinyHier::encode(const Var& image) const
{
    if (image.value().rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.tile_size ||
        image.dim(2) != cfg_.tile_size)
        throw InvalidInput("specialist expects a 3 x " + std::to_string(cfg_.tile_size) + " x " +
                           std::to_string(cfg_.tile_size) + " image, got " + shape_str(image.shape()));
    FeaturePyramid pyr;
    Var x = image;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const Stage& s = stages_[i];
        x = s.embed_norm(s.patch_embed(x));
        const std::size_t h = x.dim(1), w = x.dim(2);

        Var tokens = s.attn_norm(ag::chw_to_tokens(x));
        std::size_t sr = std::min({s.sr_ratio, h, w});
        if (h % sr != 0 || w % sr != 0) sr = 1;
        Var kv = tokens;
        if (sr > 1) kv = ag::chw_to_tokens(ag::avg_pool(ag::tokens_to_chw(tokens, h, w), sr));
        x = ag::add(x, ag::tokens_to_chw(s.attn(tokens, kv, kv), h, w));

        Var f = s.ffn_out(ag::gelu(s.ffn_mid(s.ffn_in(s.ffn_norm(x)))));
        x = s.out_norm(ag::add(x, f));
        pyr.levels.push_back(x);
        pyr.strides.push_back(cfg_.strides[i]);
    }
    return pyr;
}

// ---------------------------------------------------------------------------

Specialist::Specialist(SpecialistConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    backbone_ = std::make_unique<TinyHier>(cfg_);
    Rng rng(cfg_.seed ^ 0x5eedf00dULL);
    for (std::size_t i = 0; i < cfg_.stages(); ++i)
        level_proj_.push_back(nn::make_conv(own_, "agg.proj" + std::to_string(i), cfg_.channels[i], cfg_.embed_dim, 1,
                                            1, 0, rng));
    fuse_ = nn::make_conv(own_, "agg.fuse", cfg_.embed_dim * cfg_.stages(), cfg_.embed_dim, 1, 1, 0, rng);
    classifier_ = nn::make_conv(own_, "head.classifier", cfg_.embed_dim, 2, 1, 1, 0, rng);
    params_.adopt("backbone.", backbone_->params());
    params_.adopt("", own_);
}

FeaturePyramid Specialist::encode_pyramid(const geodata::ImageTile& tile) const
{
    geodata::validate_tile(tile, cfg_.tile_size);
    return encode_pyramid(Var::constant(image_to_tensor(tile.pixels)));
}

FeaturePyramid Specialist::encode_pyramid(const Var& image) const
{
    return backbone_->encode(image);
}

AggregatedEmbedding Specialist::aggregate_features(const FeaturePyramid& pyr) const
{
    if (pyr.levels.size() != level_proj_.size())
        throw ConfigError("pyramid has " + std::to_string(pyr.levels.size()) + " levels, weights expect " +
                          std::to_string(level_proj_.size()));
    const std::size_t side = cfg_.tile_size / cfg_.agg_stride;
    std::vector<Var> projected;
    for (std::size_t i = 0; i < pyr.levels.size(); ++i) {
        if (pyr.levels[i].dim(0) != cfg_.channels[i])
            throw ConfigError("pyramid level " + std::to_string(i) + " has " + std::to_string(pyr.levels[i].dim(0)) +
                              " channels, weights expect " + std::to_string(cfg_.channels[i]));
        projected.push_back(ag::resize_bilinear(level_proj_[i](pyr.levels[i]), side, side));
    }
    return {ag::relu(fuse_(ag::concat0(projected)))};
}

CoarseMask Specialist::predict_coarse(const AggregatedEmbedding& emb) const
{
    if (emb.features.value().rank() != 3 || emb.features.dim(0) != cfg_.embed_dim)
        throw InvalidInput("aggregated embedding has shape " + shape_str(emb.features.shape()));
    Var logits = ag::resize_bilinear(classifier_(emb.features), cfg_.tile_size, cfg_.tile_size);
    return coarse_from_logits(std::move(logits));
}

} // namespace uvs::specialist
