#pragma once

// The trainable small segmenter: a hierarchical multi-scale encoder, an MLP
// fusion of its pyramid levels, and a two-class coarse mask head.

#include "uvseg/geodata.hpp"
#include "uvseg/nn.hpp"

#include "json.hpp"

#include <memory>
#include <string>
#include <vector>

namespace uvs::specialist {

using ag::Var;

struct SpecialistConfig {
    std::size_t tile_size = geodata::default_tile_size;
    std::vector<std::size_t> channels{32, 64, 160, 256};
    std::vector<std::size_t> strides{4, 8, 16, 32};
    std::vector<std::size_t> sr_ratios{8, 4, 2, 1};
    std::size_t embed_dim = 256;
    /// Output stride of the aggregated embedding (and of the coarse logits
    /// before upsampling).
    std::size_t agg_stride = 4;
    std::size_t mlp_ratio = 2;
    std::uint64_t seed = 0;

    std::size_t stages() const noexcept { return channels.size(); }
    /// Throws ConfigError on inconsistent lists or a tile size not divisible by the largest stride.
    void validate() const;

    /// Small configuration for tests and desk-scale runs.
    static SpecialistConfig tiny(std::size_t tile_size = 64);
};

nlohmann::json to_json(const SpecialistConfig& cfg);
/// Accepts {"preset": "tiny"|"default", ...overrides}; unknown keys are a ConfigError.
SpecialistConfig specialist_config_from_json(const nlohmann::json& j);

struct FeaturePyramid {
    std::vector<Var> levels; // C_i x H_i x W_i
    std::vector<std::size_t> strides;
};

struct AggregatedEmbedding {
    Var features; // E x H_a x W_a
};

inline constexpr const char* argmax_tie_background = "argmax, ties to background";

struct CoarseMask {
    Var logits; // 2 x H x W, channel 1 = urban village
    BinaryMask binary;
    std::string threshold_policy = argmax_tie_background;

    /// Foreground-minus-background logit, 1 x H x W (differentiable).
    Var foreground_logit() const;
};

/// Binary mask from 2-channel logits: foreground iff logit[1] > logit[0].
BinaryMask argmax_mask(const Tensor& logits);
CoarseMask coarse_from_logits(Var logits);

/// Interface every multi-scale image encoder must satisfy.
class Backbone {
public:
    virtual ~Backbone() = default;
    virtual FeaturePyramid encode(const Var& image) const = 0;
    virtual const nn::ParamStore& params() const = 0;
};

/// Four-stage hierarchical encoder: overlapping patch embeddings, single-head
/// attention with spatially reduced keys, and a convolutional feed-forward.
class TinyHier final : public Backbone {
public:
    explicit TinyHier(const SpecialistConfig& cfg);
    FeaturePyramid encode(const Var& image) const override;
    const nn::ParamStore& params() const override { return params_; }

private:
    struct Stage {
        nn::Conv2d patch_embed;
        nn::LayerNorm2d embed_norm;
        nn::LayerNorm attn_norm;
        nn::Attention attn;
        std::size_t sr_ratio = 1;
        nn::LayerNorm2d ffn_norm;
        nn::Conv2d ffn_in, ffn_mid, ffn_out;
        nn::LayerNorm2d out_norm;
    };
    SpecialistConfig cfg_;
    nn::ParamStore params_;
    std::vector<Stage> stages_;
};

class Specialist {
public:
    explicit Specialist(SpecialistConfig cfg);

    const SpecialistConfig& config() const noexcept { return cfg_; }

    FeaturePyramid encode_pyramid(const geodata::ImageTile& tile) const;
    FeaturePyramid encode_pyramid(const Var& image) const;
    AggregatedEmbedding aggregate_features(const FeaturePyramid& pyr) const;
    CoarseMask predict_coarse(const AggregatedEmbedding& emb) const;

    /// All trainable parameters (backbone under "backbone.", the rest under "agg."/"head.").
    nn::ParamStore& params() noexcept { return params_; }
    const nn::ParamStore& params() const noexcept { return params_; }

private:
    SpecialistConfig cfg_;
    std::unique_ptr<Backbone> backbone_;
    nn::ParamStore own_;
    nn::ParamStore params_;
    std::vector<nn::Conv2d> level_proj_;
    nn::Conv2d fuse_;
    nn::Conv2d classifier_;
};

} // namespace uvs::specialist
