#pragma once

// The frozen promptable segmenter: image encoder, box/mask prompt encoder and
// a prompt-conditioned two-way-attention mask decoder. None of its parameters
// ever receive a gradient, but gradients do flow through it to prompt inputs.

#include "uvseg/geodata.hpp"
#include "uvseg/nn.hpp"
#include "uvseg/prompt_types.hpp"

#include "json.hpp"

#include <filesystem>
#include <memory>
#include <optional>

namespace uvs::generalist {

using ag::Var;

enum class MaskPathway { dense, sparse };

const char* pathway_name(MaskPathway p);
MaskPathway parse_pathway(const std::string& s);

struct GeneralistConfig {
    std::size_t tile_size = geodata::default_tile_size;
    std::size_t patch_size = 16;
    std::size_t embed_dim = 256; // image-embedding channels, equal to the prompt dimension
    std::size_t encoder_depth = 1;
    std::size_t mask_in_chans = 16;
    std::size_t decoder_depth = 2;
    std::size_t decoder_mlp_dim = 512;
    std::size_t num_mask_tokens = 1;
    MaskPathway mask_pathway = MaskPathway::dense;
    std::uint64_t seed = 0;

    std::size_t grid() const noexcept { return tile_size / patch_size; }
    std::size_t prompt_dim() const noexcept { return embed_dim; }
    /// Resolution of the mask prompt input and of the decoder's low-res output.
    std::size_t low_res() const noexcept { return 4 * grid(); }

    void validate() const;
    static GeneralistConfig tiny(std::size_t tile_size = 64);
};

nlohmann::json to_json(const GeneralistConfig& cfg);
GeneralistConfig generalist_config_from_json(const nlohmann::json& j);

struct ImageEmbedding {
    Tensor features; // C_g x H_g x W_g
};

struct SparsePromptEmbedding {
    Var tokens; // T x D
    std::vector<TokenSource> provenance;
    std::size_t count() const noexcept { return provenance.size(); }
};

struct DensePromptEmbedding {
    Var features; // C_g x H_g x W_g
    bool from_mask = false;
};

struct MaskLogits {
    Var logits; // H x W
    double threshold = 0.0;
    Var quality; // 1 x num_mask_tokens predicted IoU scores
    std::size_t selected_head = 0;

    BinaryMask binarize() const;
};

/// Shape contract shared by every promptable segmenter implementation.
class PromptableSegmenter {
public:
    virtual ~PromptableSegmenter() = default;

    virtual const GeneralistConfig& config() const noexcept = 0;
    virtual ImageEmbedding encode_image(const geodata::ImageTile& tile) const = 0;
    /// `mask_logits` is a 1 x H x W foreground logit map at tile resolution,
    /// or absent when the mask prompt is disabled.
    virtual std::pair<SparsePromptEmbedding, DensePromptEmbedding>
    encode_prompts(const BoxSet& boxes, const std::optional<Var>& mask_logits) const = 0;
    virtual MaskLogits decode_mask(const ImageEmbedding& img, const DensePromptEmbedding& dense,
                                   const MixedPrompt& prompt) const = 0;
    virtual const nn::ParamStore& params() const noexcept = 0;
    virtual nn::ParamStore& params() noexcept = 0;
};

/// Random-initialised frozen stand-in with the same shape contracts as the
/// pretrained model family.
class TinyPromptable final : public PromptableSegmenter {
public:
    explicit TinyPromptable(GeneralistConfig cfg);

    const GeneralistConfig& config() const noexcept override { return cfg_; }
    ImageEmbedding encode_image(const geodata::ImageTile& tile) const override;
    std::pair<SparsePromptEmbedding, DensePromptEmbedding>
    encode_prompts(const BoxSet& boxes, const std::optional<Var>& mask_logits) const override;
    MaskLogits decode_mask(const ImageEmbedding& img, const DensePromptEmbedding& dense,
                           const MixedPrompt& prompt) const override;
    const nn::ParamStore& params() const noexcept override { return params_; }
    nn::ParamStore& params() noexcept override { return params_; }

    /// Differentiable variants used when the segmenter itself is being pretrained.
    Var encode_image_graph(const Var& image) const;
    MaskLogits decode_mask_graph(const Var& image_features, const DensePromptEmbedding& dense,
                                 const MixedPrompt& prompt) const;

    /// Random-Fourier positional encoding of normalised (x, y) points, N x D.
    Tensor encode_points(const std::vector<std::pair<double, double>>& xy) const;

private:
    struct EncoderBlock {
        nn::LayerNorm2d norm;
        nn::Conv2d expand, mix;
    };
    struct TwoWayBlock {
        nn::Attention self_attn;
        nn::LayerNorm norm1;
        nn::Attention token_to_image;
        nn::LayerNorm norm2;
        nn::Mlp mlp;
        nn::LayerNorm norm3;
        nn::Attention image_to_token;
        nn::LayerNorm norm4;
    };

    Tensor dense_positional_encoding() const;

    GeneralistConfig cfg_;
    nn::ParamStore params_;
    // image encoder
    nn::Conv2d patch_embed_;
    std::vector<EncoderBlock> encoder_;
    nn::Conv2d neck1_;
    nn::LayerNorm2d neck_norm1_;
    nn::Conv2d neck2_;
    nn::LayerNorm2d neck_norm2_;
    // prompt encoder
    Var pe_gaussian_;    // 2 x D/2
    Var corner_embed_;   // 2 x D (top-left, bottom-right)
    Var not_a_point_;    // 1 x D
    Var no_mask_embed_;  // D
    nn::Conv2d mask_down1_;
    nn::LayerNorm2d mask_norm1_;
    nn::Conv2d mask_down2_;
    nn::LayerNorm2d mask_norm2_;
    nn::Conv2d mask_proj_;
    // mask decoder
    Var iou_token_;   // 1 x D
    Var mask_tokens_; // M x D
    std::vector<TwoWayBlock> blocks_;
    nn::Attention final_attn_;
    nn::LayerNorm final_norm_;
    nn::ConvTranspose2d upscale1_;
    nn::LayerNorm2d upscale_norm_;
    nn::ConvTranspose2d upscale2_;
    std::vector<nn::Mlp> hyper_;
    nn::Mlp iou_head_;
    Tensor dense_pe_; // (H_g W_g) x D
};

/// Environment variable naming the pretrained-weight cache directory.
inline constexpr const char* weights_env_var = "UVSEG_WEIGHTS_DIR";
inline constexpr const char* generalist_weights_file = "generalist.ckpt";

std::optional<std::filesystem::path> weight_cache_dir();

/// Builds a segmenter whose architecture is described by the checkpoint's
/// "generalist" meta record and loads its weights. ArtifactMismatch when the
/// manifest disagrees with the architecture.
std::unique_ptr<PromptableSegmenter> load_generalist(const std::filesystem::path& checkpoint);
void save_generalist(const std::filesystem::path& checkpoint, const PromptableSegmenter& model);

} // namespace uvs::generalist
