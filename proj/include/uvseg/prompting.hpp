#pragma once

// Prompt construction: boxes from the coarse mask, pooled semantic tokens and
// the two mixers that fuse them with the generalist's sparse prompt tokens.

#include "uvseg/generalist.hpp"
#include "uvseg/nn.hpp"
#include "uvseg/prompt_types.hpp"
#include "uvseg/raster.hpp"
#include "uvseg/specialist.hpp"

#include "json.hpp"

#include <optional>
#include <string>

namespace uvs::prompting {

using ag::Var;

enum class SemanticPlacement { broadcast, append };

const char* placement_name(SemanticPlacement p);
SemanticPlacement parse_placement(const std::string& s);

struct PromptingConfig {
    MixerKind mixer = MixerKind::add;
    std::size_t min_area_px = 100;
    int connectivity = 8;
    SemanticPlacement placement = SemanticPlacement::broadcast;

    void validate() const;
};

nlohmann::json to_json(const PromptingConfig& cfg);
PromptingConfig prompting_config_from_json(const nlohmann::json& j);

/// One tight half-open box per connected component with at least
/// `min_area_px` pixels, sorted by (y_min, x_min, y_max, x_max).
BoxSet extract_boxes(const BinaryMask& mask, std::size_t min_area_px, int connectivity,
                     const std::string& tile_id = {});
BoxSet extract_boxes(const specialist::CoarseMask& mask, std::size_t min_area_px, int connectivity,
                     const std::string& tile_id = {});

/// Global average pool over H x W followed by a learned projection to D.
struct SemanticPool {
    nn::Linear proj;
    Var operator()(const Var& embedding) const; // C x H x W -> 1 x D
};

SemanticPool make_semantic_pool(nn::ParamStore& ps, const std::string& name, std::size_t channels,
                                std::size_t dim, Rng& rng);

/// Per-token layer normalisation without affine parameters; all-zero rows stay zero.
Var normalize_tokens(const Var& tokens);

/// Sum of normalised sparse tokens and normalised semantic tokens. Absent
/// (undefined) semantic tokens are skipped. In append mode the normalised
/// semantic tokens are appended as extra rows instead of broadcast-added.
MixedPrompt mix_add(const generalist::SparsePromptEmbedding& p_sam, const Var& seg_token, const Var& sam_token,
                    SemanticPlacement placement = SemanticPlacement::broadcast);

/// Per-token concatenation [p; seg; sam] projected back to D.
struct MlpMixer {
    nn::Linear head; // (k D) x D, k = number of enabled inputs
    std::size_t inputs = 3;

    MixedPrompt operator()(const generalist::SparsePromptEmbedding& p_sam, const Var& seg_token,
                           const Var& sam_token) const;
};

MlpMixer make_mlp_mixer(nn::ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inputs,
                        Rng& rng);

} // namespace uvs::prompting
