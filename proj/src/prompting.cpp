#include "uvseg/prompting.hpp"

#include "uvseg/components.hpp"
#include "uvseg/error.hpp"
#include "uvseg/json_util.hpp"

#include <algorithm>
#include <tuple>

namespace uvs {

const char* token_source_name(TokenSource s)
{
    switch (s) {
    case TokenSource::box_corner: return "box-corner";
    case TokenSource::mask_summary: return "mask-summary";
    case TokenSource::semantic: return "semantic";
    case TokenSource::sentinel: return "sentinel";
    }
    return "?";
}

const char* mixer_name(MixerKind m)
{
    return m == MixerKind::add ? "add" : "mlp";
}

MixerKind parse_mixer(const std::string& s)
{
    if (s == "add") return MixerKind::add;
    if (s == "mlp") return MixerKind::mlp;
    throw ConfigError("mixer must be 'add' or 'mlp', got '" + s + "'");
}

} // namespace uvs

namespace uvs::prompting {

const char* placement_name(SemanticPlacement p)
{
    return p == SemanticPlacement::broadcast ? "broadcast" : "append";
}

SemanticPlacement parse_placement(const std::string& s)
{
    if (s == "broadcast") return SemanticPlacement::broadcast;
    if (s == "append") return SemanticPlacement::append;
    throw ConfigError("broadcast_vs_append must be 'broadcast' or 'append', got '" + s + "'");
}

void PromptingConfig::validate() const
{
    if (connectivity != 4 && connectivity != 8) throw ConfigError("connectivity must be 4 or 8");
    if (mixer == MixerKind::mlp && placement == SemanticPlacement::append)
        throw ConfigError("append placement is only defined for the add mixer");
}

nlohmann::json to_json(const PromptingConfig& c)
{
    return {{"mixer", mixer_name(c.mixer)},
            {"min_area_px", c.min_area_px},
            {"connectivity", c.connectivity},
            {"broadcast_vs_append", placement_name(c.placement)}};
}

PromptingConfig prompting_config_from_json(const nlohmann::json& j)
{
    const std::string where = "prompting";
    reject_unknown_keys(j, {"mixer", "min_area_px", "connectivity", "broadcast_vs_append"}, where);
    PromptingConfig c;
    std::string mixer = mixer_name(c.mixer), placement = placement_name(c.placement);
    read_field(j, "mixer", mixer, where);
    read_field(j, "min_area_px", c.min_area_px, where);
    read_field(j, "connectivity", c.connectivity, where);
    read_field(j, "broadcast_vs_append", placement, where);
    c.mixer = parse_mixer(mixer);
    c.placement = parse_placement(placement);
    c.validate();
    return c;
}

BoxSet extract_boxes(const BinaryMask& mask, std::size_t min_area_px, int connectivity, const std::string& tile_id)
{
    BoxSet out;
    out.tile_id = tile_id;
    for (const Component& c : label_components(mask, connectivity).components) {
        if (c.area < min_area_px) continue;
        out.boxes.push_back({static_cast<long>(c.x_min), static_cast<long>(c.y_min), static_cast<long>(c.x_max),
                             static_cast<long>(c.y_max)});
    }
    std::sort(out.boxes.begin(), out.boxes.end(), [](const Box& a, const Box& b) {
        return std::tie(a.y_min, a.x_min, a.y_max, a.x_max) < std::tie(b.y_min, b.x_min, b.y_max, b.x_max);
    });
    return out;
}

BoxSet extract_boxes(const specialist::CoarseMask& mask, std::size_t min_area_px, int connectivity,
                     const std::string& tile_id)
{
    return extract_boxes(mask.binary, min_area_px, connectivity, tile_id);
}

Var SemanticPool::operator()(const Var& embedding) const
{
    if (embedding.value().rank() != 3) throw ConfigError("semantic pooling expects a C x H x W embedding");
    if (embedding.dim(0) != proj.weight.dim(0))
        throw ConfigError("semantic pool expects " + std::to_string(proj.weight.dim(0)) + " channels, got " +
                          std::to_string(embedding.dim(0)));
    return proj(ag::mean_spatial(embedding));
}

SemanticPool make_semantic_pool(nn::ParamStore& ps, const std::string& name, std::size_t channels,
                                std::size_t dim, Rng& rng)
{
    return {nn::make_linear(ps, name, channels, dim, rng)};
}

Var normalize_tokens(const Var& tokens)
{
    return ag::layer_norm_rows(tokens);
}

namespace {

void check_width(const Var& v, std::size_t d, const char* what)
{
    if (!v.defined()) return;
    if (v.value().rank() != 2 || v.dim(1) != d || (std::string(what) != "prompt" && v.dim(0) != 1))
        throw ConfigError(std::string("mixer: ") + what + " has shape " + shape_str(v.shape()) +
                          ", expected width " + std::to_string(d));
}

} // namespace

MixedPrompt mix_add(const generalist::SparsePromptEmbedding& p_sam, const Var& seg_token, const Var& sam_token,
                    SemanticPlacement placement)
{
    const Var& p = p_sam.tokens;
    if (!p.defined() || p.value().rank() != 2) throw ConfigError("mixer: sparse prompt tokens missing");
    const std::size_t d = p.dim(1), t = p.dim(0);
    check_width(seg_token, d, "segmentation token");
    check_width(sam_token, d, "generalist token");

    MixedPrompt out;
    out.mixer = MixerKind::add;
    out.provenance = p_sam.provenance;
    Var acc = normalize_tokens(p);
    if (placement == SemanticPlacement::broadcast) {
        for (const Var* s : {&seg_token, &sam_token})
            if (s->defined()) acc = ag::add(acc, ag::broadcast_rows(normalize_tokens(*s), t));
    } else {
        std::vector<Var> rows{acc};
        for (const Var* s : {&seg_token, &sam_token})
            if (s->defined()) {
                rows.push_back(normalize_tokens(*s));
                out.provenance.push_back(TokenSource::semantic);
            }
        acc = ag::concat0(rows);
    }
    out.tokens = acc;
    return out;
}

MixedPrompt MlpMixer::operator()(const generalist::SparsePromptEmbedding& p_sam, const Var& seg_token,
                                 const Var& sam_token) const
{
    const Var& p = p_sam.tokens;
    if (!p.defined() || p.value().rank() != 2) throw ConfigError("mixer: sparse prompt tokens missing");
    const std::size_t d = p.dim(1), t = p.dim(0);
    check_width(seg_token, d, "segmentation token");
    check_width(sam_token, d, "generalist token");

    std::vector<Var> cols{normalize_tokens(p)};
    for (const Var* s : {&seg_token, &sam_token})
        if (s->defined()) cols.push_back(ag::broadcast_rows(normalize_tokens(*s), t));
    if (cols.size() != inputs || head.weight.dim(0) != inputs * d)
        throw ConfigError("mlp mixer head expects " + std::to_string(inputs) + " inputs of width " +
                          std::to_string(head.weight.dim(0) / inputs) + ", got " + std::to_string(cols.size()) +
                          " of width " + std::to_string(d));

    MixedPrompt out;
    out.mixer = MixerKind::mlp;
    out.provenance = p_sam.provenance;
    out.tokens = head(cols.size() == 1 ? cols[0] : ag::concat_cols(cols));
    return out;
}

MlpMixer make_mlp_mixer(nn::ParamStore& ps, const std::string& name, std::size_t dim, std::size_t inputs,
                        Rng& rng)
{
    if (inputs == 0) throw ConfigError("mlp mixer needs at least one input");
    return {nn::make_linear(ps, name, inputs * dim, dim, rng), inputs};
}

} // namespace uvs::prompting
