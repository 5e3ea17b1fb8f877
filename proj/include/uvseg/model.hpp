#pragma once

// The full pipeline: specialist coarse mask -> boxes, mask prompt and pooled
// semantic tokens -> mixer -> frozen generalist decoder.

#include "uvseg/generalist.hpp"
#include "uvseg/prompting.hpp"
#include "uvseg/specialist.hpp"

#include "json.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace uvs::model {

using ag::Var;

/// Which prompt sources feed the generalist. All on is the full model.
struct AblationFlags {
    bool use_box = true;
    bool use_mask = true;
    bool use_sam_emb = true;
    bool use_seg_emb = true;
    bool use_generalist = true;

    friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Named variants: "full", "w/o Box", "w/o Mask", "w/o SAM emb", "w/o Seg emb", "w/o SAM".
const std::vector<std::string>& variant_names();
AblationFlags variant(const std::string& name);

struct ModelConfig {
    specialist::SpecialistConfig specialist;
    generalist::GeneralistConfig generalist;
    prompting::PromptingConfig prompting;
    AblationFlags ablation;
    std::uint64_t seed = 0;

    std::size_t tile_size() const noexcept { return specialist.tile_size; }
    void validate() const;

    /// Tiny specialist and generalist sharing one tile size; min_area scaled to the tile.
    static ModelConfig tiny(std::size_t tile_size = 64);
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ForwardResult {
    specialist::CoarseMask coarse;
    BoxSet boxes;
    std::optional<generalist::MaskLogits> refined;
    std::optional<MixedPrompt> prompt;
    Var aggregated;   // specialist aggregated embedding
    Var final_logits; // H x W; the generalist logits, or the coarse fg-minus-bg logit without a generalist

    BinaryMask final_mask() const;
};

class UvSam {
public:
    /// Without an explicit generalist a TinyPromptable is built from cfg.generalist.
    explicit UvSam(ModelConfig cfg, std::shared_ptr<const generalist::PromptableSegmenter> gen = nullptr);

    const ModelConfig& config() const noexcept { return cfg_; }

    /// `cached` skips the generalist image encoder (its output depends only on the tile).
    ForwardResult forward(const geodata::ImageTile& tile, const generalist::ImageEmbedding* cached = nullptr) const;
    generalist::ImageEmbedding embed_image(const geodata::ImageTile& tile) const;

    /// Learnable parameters: "specialist.*", "pool.seg.*", "pool.sam.*", "mixer.*".
    nn::ParamStore& trainable() noexcept { return trainable_; }
    const nn::ParamStore& trainable() const noexcept { return trainable_; }
    /// Mixer and pooling parameters only.
    const nn::ParamStore& mixer_params() const noexcept { return mixer_store_; }

    const specialist::Specialist& specialist() const noexcept { return spec_; }
    /// Null for the "w/o SAM" variant.
    const generalist::PromptableSegmenter* generalist() const noexcept { return gen_.get(); }

    /// Ordered op names of the forward graph that produces the final and coarse logits.
    std::vector<std::string> graph_signature(const geodata::ImageTile& tile) const;

private:
    ModelConfig cfg_;
    specialist::Specialist spec_;
    std::shared_ptr<const generalist::PromptableSegmenter> gen_;
    nn::ParamStore mixer_store_;
    nn::ParamStore trainable_;
    std::optional<prompting::SemanticPool> seg_pool_, sam_pool_;
    std::optional<prompting::MlpMixer> mlp_mixer_;
};

} // namespace uvs::model
