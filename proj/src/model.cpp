#include "uvseg/model.hpp"

#include "uvseg/error.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/preprocess.hpp"

namespace uvs::model {

const std::vector<std::string>& variant_names()
{
    static const std::vector<std::string> names{"full",        "w/o Box",     "w/o Mask",
                                                "w/o SAM emb", "w/o Seg emb", "w/o SAM"};
    return names;
}

AblationFlags variant(const std::string& name)
{
    AblationFlags f;
    if (name == "full") return f;
    if (name == "w/o Box") f.use_box = false;
    else if (name == "w/o Mask") f.use_mask = false;
    else if (name == "w/o SAM emb") f.use_sam_emb = false;
    else if (name == "w/o Seg emb") f.use_seg_emb = false;
    else if (name == "w/o SAM") f.use_generalist = false;
    else throw ConfigError("unknown model variant '" + name + "'");
    return f;
}

void ModelConfig::validate() const
{
    specialist.validate();
    prompting.validate();
    if (ablation.use_generalist) {
        generalist.validate();
        if (generalist.tile_size != specialist.tile_size)
            throw ConfigError("specialist and generalist tile sizes differ (" + std::to_string(specialist.tile_size) +
                              " vs " + std::to_string(generalist.tile_size) + ")");
    }
}

ModelConfig ModelConfig::tiny(std::size_t tile_size)
{
    ModelConfig c;
    c.specialist = specialist::SpecialistConfig::tiny(tile_size);
    c.generalist = generalist::GeneralistConfig::tiny(tile_size);
    c.prompting.min_area_px = 4;
    return c;
}

nlohmann::json to_json(const ModelConfig& c)
{
    const auto& a = c.ablation;
    return {{"specialist", specialist::to_json(c.specialist)},
            {"generalist", generalist::to_json(c.generalist)},
            {"prompting", prompting::to_json(c.prompting)},
            {"ablation",
             {{"use_box", a.use_box},
              {"use_mask", a.use_mask},
              {"use_sam_emb", a.use_sam_emb},
              {"use_seg_emb", a.use_seg_emb},
              {"use_generalist", a.use_generalist}}},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j)
{
    const std::string where = "model";
    reject_unknown_keys(j, {"specialist", "generalist", "prompting", "ablation", "variant", "tile_size", "seed"},
                        where);
    std::size_t tile = 64;
    read_field(j, "tile_size", tile, where);
    ModelConfig c = ModelConfig::tiny(tile);
    auto with_tile = [&](nlohmann::json sub) {
        if (!sub.contains("tile_size")) sub["tile_size"] = tile;
        return sub;
    };
    if (j.contains("specialist")) c.specialist = specialist::specialist_config_from_json(with_tile(j["specialist"]));
    if (j.contains("generalist")) c.generalist = generalist::generalist_config_from_json(with_tile(j["generalist"]));
    if (j.contains("prompting")) c.prompting = prompting::prompting_config_from_json(j["prompting"]);
    if (j.contains("variant")) {
        std::string name;
        read_field(j, "variant", name, where);
        c.ablation = variant(name);
    }
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        reject_unknown_keys(a, {"use_box", "use_mask", "use_sam_emb", "use_seg_emb", "use_generalist"},
                            "model.ablation");
        read_field(a, "use_box", c.ablation.use_box, "model.ablation");
        read_field(a, "use_mask", c.ablation.use_mask, "model.ablation");
        read_field(a, "use_sam_emb", c.ablation.use_sam_emb, "model.ablation");
        read_field(a, "use_seg_emb", c.ablation.use_seg_emb, "model.ablation");
        read_field(a, "use_generalist", c.ablation.use_generalist, "model.ablation");
    }
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

BinaryMask ForwardResult::final_mask() const
{
    if (refined) return refined->binarize();
    return coarse.binary;
}

UvSam::UvSam(ModelConfig cfg, std::shared_ptr<const generalist::PromptableSegmenter> gen)
    : cfg_(std::move(cfg)), spec_([&] {
          cfg_.validate();
          auto s = cfg_.specialist;
          s.seed ^= cfg_.seed;
          return s;
      }())
{
    trainable_.adopt("specialist.", spec_.params());
    if (!cfg_.ablation.use_generalist) return;

    if (!gen) gen = std::make_shared<generalist::TinyPromptable>(cfg_.generalist);
    if (gen->config().tile_size != cfg_.tile_size())
        throw ConfigError("generalist tile size " + std::to_string(gen->config().tile_size) +
                          " does not match the model tile size " + std::to_string(cfg_.tile_size()));
    gen_ = std::move(gen);
    cfg_.generalist = gen_->config();

    Rng rng(cfg_.seed ^ 0x6d697865ULL);
    const std::size_t d = gen_->config().prompt_dim();
    std::size_t inputs = 1;
    if (cfg_.ablation.use_seg_emb) {
        seg_pool_ = prompting::make_semantic_pool(mixer_store_, "pool.seg", cfg_.specialist.embed_dim, d, rng);
        ++inputs;
    }
    if (cfg_.ablation.use_sam_emb) {
        sam_pool_ = prompting::make_semantic_pool(mixer_store_, "pool.sam", gen_->config().embed_dim, d, rng);
        ++inputs;
    }
    if (cfg_.prompting.mixer == MixerKind::mlp)
        mlp_mixer_ = prompting::make_mlp_mixer(mixer_store_, "mixer.head", d, inputs, rng);
    trainable_.adopt("", mixer_store_);
}

generalist::ImageEmbedding UvSam::embed_image(const geodata::ImageTile& tile) const
{
    if (!gen_) throw ConfigError("model has no generalist");
    return gen_->encode_image(tile);
}

ForwardResult UvSam::forward(const geodata::ImageTile& tile, const generalist::ImageEmbedding* cached) const
{
    geodata::validate_tile(tile, cfg_.tile_size());
    ForwardResult r;
    const Var image = Var::constant(image_to_tensor(tile.pixels));
    const auto agg = spec_.aggregate_features(spec_.encode_pyramid(image));
    r.aggregated = agg.features;
    r.coarse = spec_.predict_coarse(agg);
    const std::size_t side = cfg_.tile_size();
    if (!gen_) {
        r.final_logits = ag::reshape(r.coarse.foreground_logit(), {side, side});
        return r;
    }

    generalist::ImageEmbedding own;
    if (!cached) own = gen_->encode_image(tile);
    const generalist::ImageEmbedding& emb = cached ? *cached : own;

    const auto& a = cfg_.ablation;
    if (a.use_box)
        r.boxes = prompting::extract_boxes(r.coarse, cfg_.prompting.min_area_px, cfg_.prompting.connectivity,
                                           tile.tile_id);
    r.boxes.tile_id = tile.tile_id;
    std::optional<Var> mask_prompt;
    if (a.use_mask) mask_prompt = r.coarse.foreground_logit();
    auto [sparse, dense] = gen_->encode_prompts(r.boxes, mask_prompt);

    Var seg_tok, sam_tok;
    if (seg_pool_) seg_tok = ag::tag((*seg_pool_)(agg.features), "seg_token");
    if (sam_pool_) sam_tok = ag::tag((*sam_pool_)(Var::constant(emb.features)), "sam_token");
    r.prompt = mlp_mixer_ ? (*mlp_mixer_)(sparse, seg_tok, sam_tok)
                          : prompting::mix_add(sparse, seg_tok, sam_tok, cfg_.prompting.placement);
    r.refined = gen_->decode_mask(emb, dense, *r.prompt);
    r.final_logits = r.refined->logits;
    return r;
}

std::vector<std::string> UvSam::graph_signature(const geodata::ImageTile& tile) const
{
    const ForwardResult r = forward(tile);
    auto ops = ag::trace_ops(r.final_logits);
    if (gen_) {
        ops.emplace_back("|coarse|");
        for (auto& op : ag::trace_ops(r.coarse.logits)) ops.push_back(std::move(op));
    }
    return ops;
}

} // namespace uvs::model
