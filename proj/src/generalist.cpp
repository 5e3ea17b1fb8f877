#include "uvseg/generalist.hpp"

#include "uvseg/checkpoint.hpp"
#include "uvseg/error.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/preprocess.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>

namespace uvs::generalist {

const char* pathway_name(MaskPathway p)
{
    return p == MaskPathway::dense ? "dense" : "sparse";
}

MaskPathway parse_pathway(const std::string& s)
{
    if (s == "dense") return MaskPathway::dense;
    if (s == "sparse") return MaskPathway::sparse;
    throw ConfigError("mask_pathway must be 'dense' or 'sparse', got '" + s + "'");
}

void GeneralistConfig::validate() const
{
    if (patch_size == 0 || tile_size == 0 || tile_size % patch_size != 0)
        throw ConfigError("generalist tile size must be a multiple of the patch size");
    if (embed_dim < 16 || embed_dim % 8 != 0) throw ConfigError("generalist embed_dim must be a multiple of 8 and >= 16");
    if (mask_in_chans < 4 || mask_in_chans % 4 != 0) throw ConfigError("mask_in_chans must be a multiple of 4");
    if (num_mask_tokens == 0) throw ConfigError("num_mask_tokens must be >= 1");
    if (decoder_depth == 0) throw ConfigError("decoder_depth must be >= 1");
}

GeneralistConfig GeneralistConfig::tiny(std::size_t tile_size)
{
    GeneralistConfig c;
    c.tile_size = tile_size;
    c.patch_size = 4;
    c.embed_dim = 32;
    c.decoder_mlp_dim = 64;
    c.mask_in_chans = 16;
    return c;
}

nlohmann::json to_json(const GeneralistConfig& c)
{
    return {{"tile_size", c.tile_size},         {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},         {"encoder_depth", c.encoder_depth},
            {"mask_in_chans", c.mask_in_chans}, {"decoder_depth", c.decoder_depth},
            {"decoder_mlp_dim", c.decoder_mlp_dim}, {"num_mask_tokens", c.num_mask_tokens},
            {"mask_pathway", pathway_name(c.mask_pathway)}, {"seed", c.seed}};
}

GeneralistConfig generalist_config_from_json(const nlohmann::json& j)
{
    const std::string where = "generalist";
    reject_unknown_keys(j,
                        {"tile_size", "patch_size", "embed_dim", "encoder_depth", "mask_in_chans", "decoder_depth",
                         "decoder_mlp_dim", "num_mask_tokens", "mask_pathway", "seed", "preset"},
                        where);
    std::string preset = "tiny";
    read_field(j, "preset", preset, where);
    std::size_t tile = 64;
    read_field(j, "tile_size", tile, where);
    GeneralistConfig c;
    if (preset == "tiny")
        c = GeneralistConfig::tiny(tile);
    else if (preset == "default")
        c.tile_size = tile;
    else
        throw ConfigError("generalist.preset must be 'tiny' or 'default'");
    read_field(j, "patch_size", c.patch_size, where);
    read_field(j, "embed_dim", c.embed_dim, where);
    read_field(j, "encoder_depth", c.encoder_depth, where);
    read_field(j, "mask_in_chans", c.mask_in_chans, where);
    read_field(j, "decoder_depth", c.decoder_depth, where);
    read_field(j, "decoder_mlp_dim", c.decoder_mlp_dim, where);
    read_field(j, "num_mask_tokens", c.num_mask_tokens, where);
    read_field(j, "seed", c.seed, where);
    std::string pathway = pathway_name(c.mask_pathway);
    read_field(j, "mask_pathway", pathway, where);
    c.mask_pathway = parse_pathway(pathway);
    c.validate();
    return c;
}

BinaryMask MaskLogits::binarize() const
{
    const Tensor& v = logits.value();
    BinaryMask m(v.dim(0), v.dim(1));
    for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v[i] > threshold ? 1 : 0;
    return m;
}

// ---------------------------------------------------------------------------

TinyPromptable::TinyPromptable(GeneralistConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    Rng rng(cfg_.seed ^ 0x6e6e7261ULL);
    const std::size_t c = cfg_.embed_dim;
    const std::size_t up_out = c / 8, up_mid = c / 4;

    patch_embed_ = nn::make_conv(params_, "image_encoder.patch_embed", 3, c, cfg_.patch_size, cfg_.patch_size, 0, rng);
    for (std::size_t i = 0; i < cfg_.encoder_depth; ++i) {
        const std::string p = "image_encoder.blocks." + std::to_string(i);
        encoder_.push_back({nn::make_layer_norm2d(params_, p + ".norm", c),
                            nn::make_conv(params_, p + ".expand", c, c, 3, 1, 1, rng),
                            nn::make_conv(params_, p + ".mix", c, c, 1, 1, 0, rng)});
    }
    neck1_ = nn::make_conv(params_, "image_encoder.neck.0", c, c, 1, 1, 0, rng);
    neck_norm1_ = nn::make_layer_norm2d(params_, "image_encoder.neck.1", c);
    neck2_ = nn::make_conv(params_, "image_encoder.neck.2", c, c, 3, 1, 1, rng);
    neck_norm2_ = nn::make_layer_norm2d(params_, "image_encoder.neck.3", c);

    pe_gaussian_ = params_.add("prompt_encoder.pe_gaussian", nn::normal_init({2, c / 2}, 1.0, rng));
    corner_embed_ = params_.add("prompt_encoder.corner_embed", nn::normal_init({2, c}, 1.0, rng));
    not_a_point_ = params_.add("prompt_encoder.not_a_point_embed", nn::normal_init({1, c}, 1.0, rng));
    no_mask_embed_ = params_.add("prompt_encoder.no_mask_embed", nn::normal_init({c}, 1.0, rng));
    mask_down1_ = nn::make_conv(params_, "prompt_encoder.mask_downscaling.0", 1, cfg_.mask_in_chans / 4, 2, 2, 0, rng);
    mask_norm1_ = nn::make_layer_norm2d(params_, "prompt_encoder.mask_downscaling.1", cfg_.mask_in_chans / 4);
    mask_down2_ = nn::make_conv(params_, "prompt_encoder.mask_downscaling.3", cfg_.mask_in_chans / 4,
                                cfg_.mask_in_chans, 2, 2, 0, rng);
    mask_norm2_ = nn::make_layer_norm2d(params_, "prompt_encoder.mask_downscaling.4", cfg_.mask_in_chans);
    mask_proj_ = nn::make_conv(params_, "prompt_encoder.mask_downscaling.6", cfg_.mask_in_chans, c, 1, 1, 0, rng);

    iou_token_ = params_.add("mask_decoder.iou_token", nn::normal_init({1, c}, 1.0, rng));
    mask_tokens_ = params_.add("mask_decoder.mask_tokens", nn::normal_init({cfg_.num_mask_tokens, c}, 1.0, rng));
    for (std::size_t i = 0; i < cfg_.decoder_depth; ++i) {
        const std::string p = "mask_decoder.transformer.layers." + std::to_string(i);
        TwoWayBlock b;
        b.self_attn = nn::make_attention(params_, p + ".self_attn", c, c, rng);
        b.norm1 = nn::make_layer_norm(params_, p + ".norm1", c);
        b.token_to_image = nn::make_attention(params_, p + ".cross_attn_token_to_image", c, c / 2, rng);
        b.norm2 = nn::make_layer_norm(params_, p + ".norm2", c);
        b.mlp = nn::make_mlp(params_, p + ".mlp", c, cfg_.decoder_mlp_dim, c, 2, rng);
        b.norm3 = nn::make_layer_norm(params_, p + ".norm3", c);
        b.image_to_token = nn::make_attention(params_, p + ".cross_attn_image_to_token", c, c / 2, rng);
        b.norm4 = nn::make_layer_norm(params_, p + ".norm4", c);
        blocks_.push_back(std::move(b));
    }
    final_attn_ = nn::make_attention(params_, "mask_decoder.transformer.final_attn_token_to_image", c, c / 2, rng);
    final_norm_ = nn::make_layer_norm(params_, "mask_decoder.transformer.norm_final_attn", c);
    upscale1_ = nn::make_conv_transpose(params_, "mask_decoder.output_upscaling.0", c, up_mid, 2, rng);
    upscale_norm_ = nn::make_layer_norm2d(params_, "mask_decoder.output_upscaling.1", up_mid);
    upscale2_ = nn::make_conv_transpose(params_, "mask_decoder.output_upscaling.3", up_mid, up_out, 2, rng);
    for (std::size_t m = 0; m < cfg_.num_mask_tokens; ++m)
        hyper_.push_back(nn::make_mlp(params_, "mask_decoder.output_hypernetworks_mlps." + std::to_string(m), c, c,
                                      up_out, 3, rng));
    iou_head_ = nn::make_mlp(params_, "mask_decoder.iou_prediction_head", c, c, cfg_.num_mask_tokens, 3, rng);

    params_.set_trainable(false);
    dense_pe_ = dense_positional_encoding();
}

Tensor TinyPromptable::encode_points(const std::vector<std::pair<double, double>>& xy) const
{
    const std::size_t half = cfg_.embed_dim / 2;
    const Tensor& g = pe_gaussian_.value();
    Tensor out({xy.size(), cfg_.embed_dim});
    for (std::size_t i = 0; i < xy.size(); ++i) {
        const double cx = 2.0 * xy[i].first - 1.0, cy = 2.0 * xy[i].second - 1.0;
        for (std::size_t k = 0; k < half; ++k) {
            const double a = 2.0 * std::numbers::pi * (cx * g.at(0, k) + cy * g.at(1, k));
            out.at(i, k) = std::sin(a);
            out.at(i, half + k) = std::cos(a);
        }
    }
    return out;
}

Tensor TinyPromptable::dense_positional_encoding() const
{
    const std::size_t g = cfg_.grid();
    std::vector<std::pair<double, double>> pts;
    pts.reserve(g * g);
    for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x)
            pts.emplace_back((static_cast<double>(x) + 0.5) / static_cast<double>(g),
                             (static_cast<double>(y) + 0.5) / static_cast<double>(g));
    return encode_points(pts);
}

Var TinyPromptable::encode_image_graph(const Var& image) const
{
    Var x = patch_embed_(image);
    for (const auto& b : encoder_) x = ag::add(x, b.mix(ag::gelu(b.expand(b.norm(x)))));
    return neck_norm2_(neck2_(neck_norm1_(neck1_(x))));
}

ImageEmbedding TinyPromptable::encode_image(const geodata::ImageTile& tile) const
{
    geodata::validate_tile(tile, cfg_.tile_size);
    return {encode_image_graph(Var::constant(image_to_tensor(tile.pixels))).value()};
}

std::pair<SparsePromptEmbedding, DensePromptEmbedding>
TinyPromptable::encode_prompts(const BoxSet& boxes, const std::optional<Var>& mask_logits) const
{
    const long side = static_cast<long>(cfg_.tile_size);
    const std::size_t d = cfg_.embed_dim, g = cfg_.grid();
    SparsePromptEmbedding sparse;
    std::vector<Var> parts;

    if (!boxes.empty()) {
        std::vector<std::pair<double, double>> corners;
        for (const Box& b : boxes.boxes) {
            if (b.x_min < 0 || b.y_min < 0 || b.x_max > side || b.y_max > side || b.x_min >= b.x_max ||
                b.y_min >= b.y_max)
                throw InvalidInput("box (" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
                                   std::to_string(b.x_max) + "," + std::to_string(b.y_max) + ") outside the tile");
            const double s = static_cast<double>(side);
            corners.emplace_back(static_cast<double>(b.x_min) / s, static_cast<double>(b.y_min) / s);
            corners.emplace_back(static_cast<double>(b.x_max) / s, static_cast<double>(b.y_max) / s);
        }
        Tensor tok = encode_points(corners);
        for (std::size_t i = 0; i < tok.dim(0); ++i)
            for (std::size_t k = 0; k < d; ++k) tok.at(i, k) += corner_embed_.value().at(i % 2, k);
        parts.push_back(ag::tag(Var::constant(std::move(tok)), "box_tokens"));
        sparse.provenance.assign(corners.size(), TokenSource::box_corner);
    }

    DensePromptEmbedding dense;
    Var mask_embedding;
    if (mask_logits) {
        const Var& m = *mask_logits;
        if (m.value().rank() != 3 || m.dim(0) != 1 || m.dim(1) != cfg_.tile_size || m.dim(2) != cfg_.tile_size)
            throw InvalidInput("mask prompt must be 1 x " + std::to_string(cfg_.tile_size) + " x " +
                               std::to_string(cfg_.tile_size) + ", got " + shape_str(m.shape()));
        Var x = ag::resize_bilinear(m, cfg_.low_res(), cfg_.low_res());
        x = ag::gelu(mask_norm1_(mask_down1_(x)));
        x = ag::gelu(mask_norm2_(mask_down2_(x)));
        mask_embedding = ag::tag(mask_proj_(x), "mask_prompt");
    }
    if (mask_embedding.defined() && cfg_.mask_pathway == MaskPathway::dense) {
        dense.features = mask_embedding;
        dense.from_mask = true;
    } else {
        Tensor nm({d, g, g});
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t i = 0; i < g * g; ++i) nm[k * g * g + i] = no_mask_embed_.value()[k];
        dense.features = ag::tag(Var::constant(std::move(nm)), "no_mask_embed");
        if (mask_embedding.defined()) {
            parts.push_back(ag::mean_spatial(mask_embedding));
            sparse.provenance.push_back(TokenSource::mask_summary);
        }
    }
    if (boxes.empty()) {
        parts.push_back(ag::tag(Var::constant(not_a_point_.value()), "sentinel_token"));
        sparse.provenance.push_back(TokenSource::sentinel);
    }
    sparse.tokens = ag::concat0(parts);
    return {std::move(sparse), std::move(dense)};
}

MaskLogits TinyPromptable::decode_mask(const ImageEmbedding& img, const DensePromptEmbedding& dense,
                                       const MixedPrompt& prompt) const
{
    return decode_mask_graph(Var::constant(img.features), dense, prompt);
}

MaskLogits TinyPromptable::decode_mask_graph(const Var& image_features, const DensePromptEmbedding& dense,
                                             const MixedPrompt& prompt) const
{
    const std::size_t c = cfg_.embed_dim, g = cfg_.grid();
    if (!prompt.tokens.defined() || prompt.tokens.value().rank() != 2 || prompt.tokens.dim(1) != c)
        throw ConfigError("decoder expects prompt tokens of width " + std::to_string(c) + ", got " +
                          (prompt.tokens.defined() ? shape_str(prompt.tokens.shape()) : std::string("none")));
    if (image_features.shape() != Shape{c, g, g})
        throw ConfigError("image embedding " + shape_str(image_features.shape()) + " does not match decoder config");
    if (dense.features.shape() != Shape{c, g, g})
        throw ConfigError("dense prompt " + shape_str(dense.features.shape()) + " does not match decoder config");

    const std::size_t m = cfg_.num_mask_tokens;
    Var tokens = ag::concat0({iou_token_, mask_tokens_, prompt.tokens});
    Var keys = ag::chw_to_tokens(ag::add(image_features, dense.features));
    const Var key_pe = Var::constant(dense_pe_);
    const Var query_pe = tokens;
    Var queries = tokens;

    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const TwoWayBlock& b = blocks_[i];
        if (i == 0) {
            queries = b.self_attn(queries, queries, queries);
        } else {
            Var q = ag::add(queries, query_pe);
            queries = ag::add(queries, b.self_attn(q, q, queries));
        }
        queries = b.norm1(queries);
        Var q = ag::add(queries, query_pe);
        Var k = ag::add(keys, key_pe);
        queries = b.norm2(ag::add(queries, b.token_to_image(q, k, keys)));
        queries = b.norm3(ag::add(queries, b.mlp(queries)));
        q = ag::add(queries, query_pe);
        k = ag::add(keys, key_pe);
        keys = b.norm4(ag::add(keys, b.image_to_token(k, q, queries)));
    }
    {
        Var q = ag::add(queries, query_pe);
        Var k = ag::add(keys, key_pe);
        queries = final_norm_(ag::add(queries, final_attn_(q, k, keys)));
    }

    Var up = ag::tokens_to_chw(keys, g, g);
    up = ag::gelu(upscale_norm_(upscale1_(up)));
    up = ag::gelu(upscale2_(up));
    const std::size_t low = cfg_.low_res(), up_ch = up.dim(0);
    Var flat = ag::reshape(up, {up_ch, low * low});

    MaskLogits out;
    out.quality = iou_head_(ag::slice_rows(queries, 0, 1));
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i)
        if (out.quality.value()[i] > out.quality.value()[best]) best = i;
    out.selected_head = best;
    Var hyper = hyper_[best](ag::slice_rows(queries, 1 + best, 2 + best));
    Var low_mask = ag::reshape(ag::matmul(hyper, flat), {1, low, low});
    out.logits = ag::reshape(ag::resize_bilinear(low_mask, cfg_.tile_size, cfg_.tile_size),
                             {cfg_.tile_size, cfg_.tile_size});
    return out;
}

// ---------------------------------------------------------------------------

std::optional<std::filesystem::path> weight_cache_dir()
{
    const char* v = std::getenv(weights_env_var);
    if (!v || !*v) return std::nullopt;
    return std::filesystem::path(v);
}

std::unique_ptr<PromptableSegmenter> load_generalist(const std::filesystem::path& checkpoint)
{
    const ckpt::Checkpoint ck = ckpt::load(checkpoint);
    if (!ck.meta.contains("generalist"))
        throw ArtifactMismatch(checkpoint.string() + " carries no generalist architecture record");
    GeneralistConfig cfg;
    try {
        cfg = generalist_config_from_json(ck.meta["generalist"]);
    } catch (const ConfigError& e) {
        throw ArtifactMismatch(std::string("generalist architecture record: ") + e.what());
    }
    auto model = std::make_unique<TinyPromptable>(cfg);
    ckpt::load_store(ck, "", model->params());
    return model;
}

void save_generalist(const std::filesystem::path& checkpoint, const PromptableSegmenter& model)
{
    ckpt::Checkpoint ck;
    auto j = to_json(model.config());
    j["preset"] = "default";
    ck.meta["generalist"] = j;
    ckpt::add_store(ck, "", model.params());
    ckpt::save(checkpoint, ck);
}

} // namespace uvs::generalist
