#include "uvseg/cli.hpp"

#include "uvseg/analytics.hpp"
#include "uvseg/error.hpp"
#include "uvseg/evaluation.hpp"
#include "uvseg/generalist.hpp"
#include "uvseg/geodata.hpp"
#include "uvseg/image_io.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

namespace uvs::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(const std::exception& e)
{
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InvalidInput*>(&e)) return exit_config;
    if (dynamic_cast<const NumericalError*>(&e)) return exit_numerical;
    if (dynamic_cast<const ArtifactMismatch*>(&e) || dynamic_cast<const InitializationError*>(&e))
        return exit_artifact;
    return exit_failure;
}

namespace {

json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Config paths are relative to the config file.
fs::path config_path(const json& j, const char* key, const fs::path& base, const std::string& where)
{
    std::string s;
    read_field(j, key, s, where);
    if (s.empty()) throw ConfigError(where + "." + key + " is required");
    const fs::path p(s);
    return p.is_absolute() ? p : base / p;
}

/// Rewrites an entry path so it resolves the same way from `to_dir`.
std::string rebase(const geodata::DatasetManifest& m, const std::string& rel, const fs::path& to_dir)
{
    const fs::path abs = fs::absolute(m.resolve(rel)).lexically_normal();
    return abs.lexically_relative(fs::absolute(to_dir).lexically_normal()).generic_string();
}

std::string safe_name(const std::string& id)
{
    std::string s = id;
    for (char& c : s)
        if (c == '/' || c == '\\' || c == ':') c = '_';
    return s;
}

std::shared_ptr<const generalist::PromptableSegmenter> generalist_from(const fs::path& path)
{
    if (path.empty()) return nullptr;
    return std::shared_ptr<const generalist::PromptableSegmenter>(generalist::load_generalist(path));
}

// ---------------------------------------------------------------------------

struct TileArgs {
    std::string scene, mask, out, id = "scene", geo, city;
    std::size_t tile_size = geodata::default_tile_size;
    int pad = 0, year = 0;
};

int cmd_tile(const TileArgs& a, std::ostream& out)
{
    if (a.pad < 0 || a.pad > 255) throw InvalidInput("--pad must lie in 0..255");
    const RgbImage scene = io::read_png_rgb(a.scene);
    const geodata::SceneGeo geo = a.geo.empty() ? geodata::SceneGeo{} : geodata::read_geo_sidecar(a.geo);
    const auto grid = geodata::tile_grid(scene.height, scene.width, a.tile_size);
    const auto tiles = geodata::tile_scene(scene, a.tile_size, static_cast<std::uint8_t>(a.pad), a.id, geo);
    std::vector<BinaryMask> masks;
    if (!a.mask.empty()) {
        const BinaryMask m = io::read_png_mask(a.mask);
        if (m.height != scene.height || m.width != scene.width)
            throw InvalidInput("mask dimensions differ from the scene");
        masks = geodata::tile_mask(m, a.tile_size);
    }
    const fs::path dir(a.out);
    geodata::DatasetManifest man;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const auto& t = tiles[i];
        geodata::ManifestEntry e;
        e.tile_id = t.tile_id;
        e.tile = "tiles/" + safe_name(t.tile_id) + ".png";
        io::write_png_rgb(dir / e.tile, t.pixels);
        if (!masks.empty()) {
            e.mask = "masks/" + safe_name(t.tile_id) + ".png";
            io::write_png_mask(dir / *e.mask, masks[i]);
        }
        e.city = a.city;
        e.year = a.year;
        e.resolution_m_per_px = t.resolution_m_per_px;
        e.origin = t.origin;
        e.placement = geodata::TilePlacement{i / grid.cols, i % grid.cols, scene.height, scene.width, a.pad};
        man.entries.push_back(std::move(e));
    }
    geodata::write_manifest(dir / "manifest.jsonl", man);
    out << "wrote " << tiles.size() << " tiles (" << grid.rows << "x" << grid.cols << ") to " << dir.string() << '\n';
    return exit_ok;
}

struct SplitArgs {
    std::string manifest, out;
    std::vector<double> ratios{0.6, 0.2, 0.2};
    std::uint64_t seed = 0;
};

int cmd_split(const SplitArgs& a, std::ostream& out)
{
    if (a.ratios.size() != 3) throw InvalidInput("--ratios takes three values");
    const auto man = geodata::read_manifest(a.manifest);
    auto parts = geodata::split_dataset(man, {a.ratios[0], a.ratios[1], a.ratios[2]}, a.seed);
    const fs::path dir(a.out);
    for (auto* part : {&parts.train, &parts.val, &parts.test}) {
        for (auto& e : part->entries) {
            e.tile = rebase(man, e.tile, dir);
            if (e.mask) e.mask = rebase(man, *e.mask, dir);
        }
        part->base_dir = dir;
        geodata::write_manifest(dir / (std::string(geodata::split_name(part->split)) + ".jsonl"), *part);
    }
    out << "train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size() << '\n';
    return exit_ok;
}

struct SynthArgs {
    std::string out, city = "synthetic";
    std::size_t n = 8, tile_size = 64;
    std::uint64_t seed = 0;
    int max_regions = 2, year = 0;
    double density = 0.7;
    double non_urban = 0.0; // share of tiles rendered without urban villages
    std::optional<double> lon, lat; // anchor of a square grid of tiles
};

int cmd_synth(const SynthArgs& a, std::ostream& out)
{
    if (a.n == 0) throw InvalidInput("--n must be >= 1");
    if (a.max_regions < 1) throw InvalidInput("--max-regions must be >= 1");
    if (!(a.non_urban >= 0.0 && a.non_urban <= 1.0)) throw InvalidInput("--non-urban must lie in [0, 1]");
    if (a.lon.has_value() != a.lat.has_value()) throw InvalidInput("--lon and --lat go together");
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(a.n))));
    const fs::path dir(a.out);
    Rng rng(a.seed);
    geodata::DatasetManifest man;
    for (std::size_t i = 0; i < a.n; ++i) {
        geodata::Morphology m;
        m.tile_size = a.tile_size;
        m.building_density = a.density;
        m.seed = a.seed * 1000003ULL + i;
        const bool urban = rng.uniform() >= a.non_urban;
        m.uv_region_count = urban ? static_cast<int>(rng.uniform_int(1, a.max_regions)) : 0;
        auto [tile, mask] = geodata::gen_synthetic_tile(m);
        geodata::ManifestEntry e;
        e.tile_id = "synth_" + std::to_string(i);
        e.tile = "tiles/" + e.tile_id + ".png";
        e.mask = "masks/" + e.tile_id + ".png";
        io::write_png_rgb(dir / e.tile, tile.pixels);
        io::write_png_mask(dir / *e.mask, mask.mask);
        e.city = a.city;
        e.year = a.year;
        e.resolution_m_per_px = tile.resolution_m_per_px;
        e.origin = tile.origin;
        if (a.lon) {
            const double side = static_cast<double>(a.tile_size) * tile.resolution_m_per_px;
            e.origin = geodata::offset_origin({*a.lon, *a.lat}, static_cast<double>(i % cols) * side,
                                              static_cast<double>(i / cols) * side);
        }
        e.label = urban ? 1 : 0;
        man.entries.push_back(std::move(e));
    }
    geodata::write_manifest(dir / "manifest.jsonl", man);
    out << "wrote " << a.n << " synthetic tiles to " << dir.string() << '\n';
    return exit_ok;
}

int cmd_train(const std::string& config, std::ostream& out)
{
    const fs::path cfg_path(config);
    const json j = read_json(cfg_path);
    const std::string where = "train config";
    reject_unknown_keys(j,
                        {"model", "train", "loss", "grid", "train_manifest", "val_manifest", "out_dir",
                         "generalist_checkpoint", "max_steps"},
                        where);
    const fs::path base = cfg_path.parent_path();
    const model::ModelConfig mcfg = j.contains("model") ? model::model_config_from_json(j["model"]) : model::ModelConfig::tiny();
    training::TrainConfig tcfg = j.contains("train") ? training::train_config_from_json(j["train"]) : training::TrainConfig{};
    training::LossConfig lcfg = j.contains("loss") ? training::loss_config_from_json(j["loss"]) : training::LossConfig{};
    const fs::path out_dir = config_path(j, "out_dir", base, where);
    const fs::path train_path = config_path(j, "train_manifest", base, where);
    const fs::path val_path = j.contains("val_manifest") ? config_path(j, "val_manifest", base, where) : fs::path{};
    const fs::path gen_path =
        j.contains("generalist_checkpoint") ? config_path(j, "generalist_checkpoint", base, where) : fs::path{};
    training::FitOptions opts;
    read_field(j, "max_steps", opts.max_steps, where);

    const auto train = training::load_samples(geodata::read_manifest(train_path));
    const auto val = val_path.empty() ? std::vector<training::Sample>{}
                                      : training::load_samples(geodata::read_manifest(val_path));
    const auto gen = generalist_from(gen_path);

    if (j.contains("grid")) {
        const auto space = training::grid_space_from_json(j["grid"]);
        const auto trials = training::grid_search(space, mcfg, train, val, tcfg, lcfg, opts, gen);
        json rows = json::array();
        for (const auto& t : trials)
            rows.push_back({{"index", t.index}, {"lr", t.lr}, {"weight_decay", t.weight_decay}, {"lambda", t.lambda},
                            {"ok", t.ok}, {"error", t.error}, {"val_iou", t.val_iou}, {"best_epoch", t.best_epoch},
                            {"rank", t.rank}});
        write_json(out_dir / "grid.json", rows);
        const auto best = std::find_if(trials.begin(), trials.end(), [](const auto& t) { return t.rank == 1 && t.ok; });
        if (best == trials.end()) throw NumericalError("every grid-search trial failed");
        tcfg.lr = best->lr;
        tcfg.weight_decay = best->weight_decay;
        lcfg.lambda = best->lambda;
        out << "grid search: best lr " << tcfg.lr << ", wd " << tcfg.weight_decay << ", lambda " << lcfg.lambda << '\n';
    }

    model::UvSam net(mcfg, gen);
    opts.checkpoint = out_dir / "best.ckpt";
    opts.history_csv = out_dir / "history.csv";
    const auto res = training::fit(net, train, val, tcfg, lcfg, opts);
    out << "best epoch " << res.best_epoch << ", selection IoU " << res.best_val_iou << ", train IoU "
        << res.final_train_iou << '\n';
    out << opts.checkpoint.string() << '\n';
    return exit_ok;
}

struct PredictArgs {
    std::string checkpoint, manifest, out, generalist, gate;
    double gate_threshold = -1.0;
};

int cmd_predict(const PredictArgs& a, std::ostream& out)
{
    const auto net = training::load_model(a.checkpoint, generalist_from(a.generalist));
    const auto man = geodata::read_manifest(a.manifest);
    std::optional<analytics::GateModel> gate;
    if (!a.gate.empty()) gate = analytics::load_gate(a.gate);
    const double threshold = a.gate_threshold >= 0.0 ? a.gate_threshold : (gate ? gate->threshold : 0.0);

    const fs::path dir(a.out);
    geodata::DatasetManifest pred;
    pred.split = man.split;
    std::size_t gated = 0;
    for (const auto& e : man.entries) {
        const geodata::ImageTile tile = geodata::load_tile(man, e);
        BinaryMask mask(tile.pixels.height, tile.pixels.width, 0);
        const bool pass =
            !gate || analytics::gate_probabilities({e.tile_id}, {gate->probability(tile)}, threshold)[0].pass;
        if (pass)
            mask = net.forward(tile).final_mask();
        else
            ++gated;
        geodata::ManifestEntry p = e;
        p.tile = rebase(man, e.tile, dir);
        p.mask = "masks/" + safe_name(e.tile_id) + ".png";
        io::write_png_mask(dir / *p.mask, mask);
        p.resolution_m_per_px = tile.resolution_m_per_px;
        pred.entries.push_back(std::move(p));
    }
    geodata::write_manifest(dir / "predictions.jsonl", pred);
    out << "predicted " << pred.size() << " tiles";
    if (gate) out << " (" << gated << " gated out)";
    out << '\n';
    return exit_ok;
}

struct EvalArgs {
    std::string predictions, truth, out, ratings;
    int connectivity = 8;
    std::size_t min_overlap = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out)
{
    const auto pred = geodata::read_manifest(a.predictions);
    const auto truth = geodata::read_manifest(a.truth);
    std::map<std::string, const geodata::ManifestEntry*> by_id;
    for (const auto& e : pred.entries) by_id[e.tile_id] = &e;
    std::vector<evaluation::EvalItem> items;
    for (const auto& e : truth.entries) {
        const auto it = by_id.find(e.tile_id);
        if (it == by_id.end()) throw InvalidInput("no prediction for tile " + e.tile_id);
        if (!it->second->mask) throw InvalidInput("prediction for " + e.tile_id + " has no mask");
        if (!e.mask) throw InvalidInput("ground truth for " + e.tile_id + " has no mask");
        evaluation::EvalItem item;
        item.tile_id = e.tile_id;
        item.pred = io::read_png_mask(pred.resolve(*it->second->mask));
        item.gt = io::read_png_mask(truth.resolve(*e.mask));
        if (!item.pred.same_dims(item.gt)) throw ArtifactMismatch("prediction for " + e.tile_id + " has the wrong shape");
        items.push_back(std::move(item));
    }
    const auto rep = evaluation::evaluate(items, a.connectivity, a.min_overlap);
    json j = rep.to_json();
    if (!a.ratings.empty()) {
        json r = json::object();
        for (const auto& [method, s] : evaluation::aggregate_ratings(evaluation::read_ratings_csv(a.ratings)))
            r[method] = {{"mean", s.mean}, {"n", s.n}, {"histogram", s.histogram}};
        j["ratings"] = r;
    }
    const fs::path dir(a.out);
    write_json(dir / "report.json", j);
    rep.write_csv(dir / "tiles.csv");
    out << "IoU " << rep.iou << ", P " << rep.precision << ", R " << rep.recall << ", F1 " << rep.f1 << '\n';
    return exit_ok;
}

int cmd_analyze(const std::string& config, std::ostream& out)
{
    const fs::path cfg_path(config);
    const json j = read_json(cfg_path);
    const std::string where = "analyze config";
    reject_unknown_keys(j, {"predictions", "out_dir", "connectivity", "bands", "rings"}, where);
    const fs::path base = cfg_path.parent_path();
    const fs::path out_dir = config_path(j, "out_dir", base, where);
    int conn = 8;
    read_field(j, "connectivity", conn, where);
    if (conn != 4 && conn != 8) throw ConfigError("connectivity must be 4 or 8");
    if (j.contains("bands") && j.contains("rings")) throw ConfigError("give either bands or rings, not both");

    std::optional<geodata::GeoOrigin> center;
    std::vector<double> edges;
    if (j.contains("bands")) {
        const json& b = j["bands"];
        reject_unknown_keys(b, {"center_lon", "center_lat", "edges_m"}, where + ".bands");
        if (!b.contains("center_lon") || !b.contains("center_lat") || !b.contains("edges_m"))
            throw ConfigError("bands needs center_lon, center_lat and edges_m");
        geodata::GeoOrigin c;
        read_field(b, "center_lon", c.lon, where + ".bands");
        read_field(b, "center_lat", c.lat, where + ".bands");
        read_field(b, "edges_m", edges, where + ".bands");
        center = c;
    }
    std::vector<analytics::Ring> rings;
    if (j.contains("rings")) rings = analytics::read_rings_geojson(config_path(j, "rings", base, where));

    const auto man = geodata::read_manifest(config_path(j, "predictions", base, where));
    std::map<std::pair<std::string, int>, std::vector<analytics::PredictedTile>> groups;
    std::vector<analytics::PredictedTile> all;
    for (const auto& e : man.entries) {
        if (!e.mask) throw InvalidInput("prediction entry " + e.tile_id + " has no mask");
        analytics::PredictedTile t{e.tile_id, io::read_png_mask(man.resolve(*e.mask)), e.resolution_m_per_px, e.origin};
        groups[{e.city, e.year}].push_back(t);
        all.push_back(std::move(t));
    }
    const auto stats = analytics::region_stats(all, conn);

    fs::create_directories(out_dir);
    {
        std::ofstream csv(out_dir / "regions.csv");
        csv.precision(12);
        csv << "tile_id,area_px,area_m2,centroid_x,centroid_y,lon,lat\n";
        for (const auto& r : stats.regions) {
            csv << r.tile_id << ',' << r.area_px << ',' << r.area_m2 << ',' << r.centroid_x << ',' << r.centroid_y << ',';
            if (r.centroid_lonlat) csv << r.centroid_lonlat->lon << ',' << r.centroid_lonlat->lat;
            else csv << ',';
            csv << '\n';
        }
    }
    json summary{{"count", stats.count}, {"area_px", stats.area_px}, {"area_m2", stats.area_m2}};

    if (center || !rings.empty()) {
        const auto curve = center ? analytics::band_distribution(stats, *center, edges)
                                  : analytics::band_distribution(stats, rings);
        curve.write_csv(out_dir / "bands.csv");
        std::vector<double> counts;
        for (const auto& b : curve.bands) counts.push_back(static_cast<double>(b.count));
        analytics::write_bar_chart(out_dir / "bands.png", counts);
        summary["bands"] = curve.bands.size();
    }

    std::vector<analytics::YearStat> years;
    std::map<std::string, std::set<int>> city_years;
    for (const auto& [key, tiles] : groups) {
        const auto s = analytics::region_stats(tiles, conn);
        years.push_back({key.first, key.second, s.count, s.area_m2});
        city_years[key.first].insert(key.second);
    }
    const bool trend = std::all_of(city_years.begin(), city_years.end(), [](const auto& c) { return c.second.size() >= 2; });
    if (trend) {
        const auto rep = analytics::year_trend(years);
        rep.write_csv(out_dir / "trend.csv");
        std::vector<double> counts;
        for (const auto& r : rep.rows) counts.push_back(static_cast<double>(r.count));
        analytics::write_bar_chart(out_dir / "trend.png", counts);
        json cities = json::array();
        for (const auto& c : rep.cities)
            cities.push_back({{"city", c.city}, {"first_year", c.first_year}, {"last_year", c.last_year},
                              {"rel_count", std::isfinite(c.rel_count) ? json(c.rel_count) : json(nullptr)},
                              {"rel_area", std::isfinite(c.rel_area) ? json(c.rel_area) : json(nullptr)}});
        summary["trend"] = cities;
    }
    write_json(out_dir / "summary.json", summary);
    out << stats.count << " regions, " << stats.area_m2 << " m2\n";
    return exit_ok;
}

int cmd_gate_train(const std::string& config, std::ostream& out)
{
    const fs::path cfg_path(config);
    const json j = read_json(cfg_path);
    const std::string where = "gate config";
    reject_unknown_keys(j, {"manifest", "gate", "out_dir"}, where);
    const fs::path base = cfg_path.parent_path();
    const auto gcfg = j.contains("gate") ? analytics::gate_config_from_json(j["gate"]) : analytics::GateConfig{};
    const fs::path out_dir = config_path(j, "out_dir", base, where);
    const auto man = geodata::read_manifest(config_path(j, "manifest", base, where));
    std::vector<analytics::LabeledTile> tiles;
    for (const auto& e : man.entries) {
        analytics::LabeledTile t{geodata::load_tile(man, e), 0};
        if (e.label)
            t.label = *e.label;
        else if (e.mask)
            t.label = geodata::load_mask(man, e, t.tile.pixels.height, t.tile.pixels.width).mask.count() > 0 ? 1 : 0;
        else
            throw InvalidInput("entry " + e.tile_id + " has neither a label nor a mask");
        tiles.push_back(std::move(t));
    }
    const auto [gate, rep] = analytics::train_gate(tiles, gcfg);
    analytics::save_gate(out_dir / "gate.ckpt", gate, gcfg);
    write_json(out_dir / "gate_report.json", rep.to_json());
    out << "AUC " << rep.auc << ", P " << rep.precision << ", R " << rep.recall << ", F1 " << rep.f1 << '\n';
    out << (out_dir / "gate.ckpt").string() << '\n';
    return exit_ok;
}

int cmd_pretrain(const std::string& config, const std::string& output, std::ostream& out)
{
    generalist::GeneralistConfig gcfg = generalist::GeneralistConfig::tiny();
    training::PretrainConfig pcfg;
    if (!config.empty()) {
        const json j = read_json(config);
        reject_unknown_keys(j, {"generalist", "pretrain"}, "pretrain config");
        if (j.contains("generalist")) gcfg = generalist::generalist_config_from_json(j["generalist"]);
        if (j.contains("pretrain")) pcfg = training::pretrain_config_from_json(j["pretrain"]);
    }
    generalist::TinyPromptable gen(gcfg);
    const auto records = training::pretrain_generalist(gen, pcfg);
    generalist::save_generalist(output, gen);
    if (!records.empty()) out << "final batch IoU " << records.back().iou << '\n';
    out << output << '\n';
    return exit_ok;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Urban-village segmentation pipeline", "uvseg"};
    app.require_subcommand(1);
    int code = exit_ok;

    TileArgs tile;
    auto* c_tile = app.add_subcommand("tile", "Cut a scene (and optional mask) into square tiles");
    c_tile->add_option("--scene", tile.scene, "Scene PNG")->required();
    c_tile->add_option("--mask", tile.mask, "Scene mask PNG");
    c_tile->add_option("--out", tile.out, "Output directory")->required();
    c_tile->add_option("--tile-size", tile.tile_size)->check(CLI::PositiveNumber);
    c_tile->add_option("--pad", tile.pad, "Padding value for edge tiles");
    c_tile->add_option("--id", tile.id, "Scene id used in tile ids");
    c_tile->add_option("--geo", tile.geo, "Geo sidecar JSON (resolution, origin)");
    c_tile->add_option("--city", tile.city);
    c_tile->add_option("--year", tile.year);
    c_tile->callback([&] { code = cmd_tile(tile, out); });

    SplitArgs split;
    auto* c_split = app.add_subcommand("split", "Seeded train/val/test split of a manifest");
    c_split->add_option("--manifest", split.manifest)->required();
    c_split->add_option("--out", split.out)->required();
    c_split->add_option("--ratios", split.ratios, "train val test")->expected(3);
    c_split->add_option("--seed", split.seed);
    c_split->callback([&] { code = cmd_split(split, out); });

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Generate synthetic tile/mask pairs");
    c_synth->add_option("--n", synth.n);
    c_synth->add_option("--seed", synth.seed);
    c_synth->add_option("--out", synth.out)->required();
    c_synth->add_option("--tile-size", synth.tile_size)->check(CLI::PositiveNumber);
    c_synth->add_option("--max-regions", synth.max_regions);
    c_synth->add_option("--density", synth.density);
    c_synth->add_option("--non-urban", synth.non_urban, "Share of tiles without urban villages");
    c_synth->add_option("--lon", synth.lon, "Longitude of the tile grid's top-left corner");
    c_synth->add_option("--lat", synth.lat, "Latitude of the tile grid's top-left corner");
    c_synth->add_option("--city", synth.city);
    c_synth->add_option("--year", synth.year);
    c_synth->callback([&] { code = cmd_synth(synth, out); });

    std::string train_cfg;
    auto* c_train = app.add_subcommand("train", "Train a model from a JSON config");
    c_train->add_option("config", train_cfg)->required();
    c_train->callback([&] { code = cmd_train(train_cfg, out); });

    PredictArgs pred;
    auto* c_pred = app.add_subcommand("predict", "Write predicted masks for a manifest");
    c_pred->add_option("--checkpoint", pred.checkpoint)->required();
    c_pred->add_option("--manifest", pred.manifest)->required();
    c_pred->add_option("--out", pred.out)->required();
    c_pred->add_option("--generalist", pred.generalist, "Generalist checkpoint used in training");
    c_pred->add_option("--gate", pred.gate, "Gate checkpoint");
    c_pred->add_option("--gate-threshold", pred.gate_threshold);
    c_pred->callback([&] { code = cmd_predict(pred, out); });

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Score predictions against ground truth");
    c_eval->add_option("--predictions", ev.predictions)->required();
    c_eval->add_option("--truth", ev.truth)->required();
    c_eval->add_option("--out", ev.out)->required();
    c_eval->add_option("--connectivity", ev.connectivity)->check(CLI::IsMember({4, 8}));
    c_eval->add_option("--min-overlap", ev.min_overlap)->check(CLI::PositiveNumber);
    c_eval->add_option("--ratings", ev.ratings, "Rating study CSV");
    c_eval->callback([&] { code = cmd_eval(ev, out); });

    std::string analyze_cfg;
    auto* c_an = app.add_subcommand("analyze", "Region statistics, band curves and trends");
    c_an->add_option("config", analyze_cfg)->required();
    c_an->callback([&] { code = cmd_analyze(analyze_cfg, out); });

    std::string gate_cfg;
    auto* c_gate = app.add_subcommand("gate-train", "Train the urban/non-urban tile gate");
    c_gate->add_option("config", gate_cfg)->required();
    c_gate->callback([&] { code = cmd_gate_train(gate_cfg, out); });

    std::string pt_cfg, pt_out;
    auto* c_pt = app.add_subcommand("pretrain-generalist", "Pretrain the stand-in generalist");
    c_pt->add_option("--config", pt_cfg);
    c_pt->add_option("--out", pt_out)->required();
    c_pt->callback([&] { code = cmd_pretrain(pt_cfg, pt_out, out); });

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return exit_config;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code(e);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_failure;
    }
    return code;
}

} // namespace uvs::cli
