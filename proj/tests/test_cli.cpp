#include "support.hpp"

#include "uvseg/analytics.hpp"
#include "uvseg/cli.hpp"
#include "uvseg/evaluation.hpp"
#include "uvseg/geodata.hpp"
#include "uvseg/image_io.hpp"

#include "json.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace uvs;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args, std::string* out_text = nullptr)
{
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (out_text) *out_text = out.str();
    return code;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

/// Synthetic set for the slower tests; ctest runs each test in its own process,
/// so every caller gets a private directory.
fs::path synth_set(const std::string& name)
{
    const auto d = support::scratch_dir(name);
    EXPECT_EQ(run({"synth", "--n", "12", "--seed", "4", "--out", (d / "data").string(), "--non-urban", "0.4",
                   "--lon", "116.3", "--lat", "39.9", "--year", "2020"}),
              cli::exit_ok);
    return d;
}

} // namespace

TEST(Cli, HelpAndUnknownCommand)
{
    EXPECT_EQ(run({"--help"}), cli::exit_ok);
    EXPECT_EQ(run({"frobnicate"}), cli::exit_config);
    EXPECT_EQ(run({"split", "--manifest"}), cli::exit_config);
}

TEST(Cli, SynthWritesPairs)
{
    const auto d = support::scratch_dir("cli_synth8");
    ASSERT_EQ(run({"synth", "--n", "8", "--seed", "1", "--out", d.string()}), cli::exit_ok);
    const auto man = geodata::read_manifest(d / "manifest.jsonl");
    ASSERT_EQ(man.size(), 8u);
    for (const auto& e : man.entries) {
        EXPECT_TRUE(fs::exists(man.resolve(e.tile)));
        ASSERT_TRUE(e.mask);
        EXPECT_GT(io::read_png_mask(man.resolve(*e.mask)).count(), 0u);
    }
    EXPECT_EQ(run({"synth", "--n", "0", "--out", d.string()}), cli::exit_config);
}

TEST(Cli, SplitRatiosAndPaths)
{
    const auto d = support::scratch_dir("cli_split");
    ASSERT_EQ(run({"synth", "--n", "10", "--out", (d / "raw").string()}), cli::exit_ok);
    const auto m = (d / "raw" / "manifest.jsonl").string();
    EXPECT_EQ(run({"split", "--manifest", m, "--out", (d / "bad").string(), "--ratios", "0.6", "0.3", "0.3"}),
              cli::exit_config);
    ASSERT_EQ(run({"split", "--manifest", m, "--out", (d / "s").string(), "--ratios", "0.6", "0.2", "0.2"}),
              cli::exit_ok);
    const auto train = geodata::read_manifest(d / "s" / "train.jsonl");
    const auto val = geodata::read_manifest(d / "s" / "val.jsonl");
    const auto test = geodata::read_manifest(d / "s" / "test.jsonl");
    EXPECT_EQ(train.size(), 6u);
    EXPECT_EQ(val.size(), 2u);
    EXPECT_EQ(test.size(), 2u);
    for (const auto& e : train.entries) EXPECT_TRUE(fs::exists(train.resolve(e.tile)));
}

TEST(Cli, TileScene)
{
    const auto d = support::scratch_dir("cli_tile");
    RgbImage scene(2048, 2048);
    for (std::size_t i = 0; i < scene.pixels.size(); ++i) scene.pixels[i] = static_cast<std::uint8_t>(i % 251);
    BinaryMask mask(2048, 2048);
    mask.at(1500, 100) = 1;
    io::write_png_rgb(d / "scene.png", scene);
    io::write_png_mask(d / "mask.png", mask);
    ASSERT_EQ(run({"tile", "--scene", (d / "scene.png").string(), "--mask", (d / "mask.png").string(), "--out",
                   (d / "t").string()}),
              cli::exit_ok);
    const auto man = geodata::read_manifest(d / "t" / "manifest.jsonl");
    ASSERT_EQ(man.size(), 4u);
    std::size_t fg = 0;
    for (const auto& e : man.entries) {
        const auto t = geodata::load_tile(man, e);
        EXPECT_EQ(t.pixels.height, 1024u);
        fg += io::read_png_mask(man.resolve(*e.mask)).count();
    }
    EXPECT_EQ(fg, 1u);
    EXPECT_EQ(run({"tile", "--scene", (d / "missing.png").string(), "--out", (d / "x").string()}), cli::exit_config);
}

TEST(Cli, TrainPredictEvalAnalyze)
{
    const auto base = synth_set("cli_synth_pipeline");
    const auto data = base / "data";
    const auto d = support::scratch_dir("cli_pipeline");

    nlohmann::json cfg{{"train_manifest", (data / "manifest.jsonl").string()},
                       {"out_dir", (d / "run").string()},
                       {"train", {{"epochs", 2}, {"batch_size", 4}}}};
    write_json(d / "train.json", cfg);
    ASSERT_EQ(run({"train", (d / "train.json").string()}), cli::exit_ok);
    const auto history = slurp(d / "run" / "history.csv");
    EXPECT_EQ(history.rfind("epoch,step,lr,focal,dice,mse,ce,total,train_iou,val_iou", 0), 0u);
    ASSERT_TRUE(fs::exists(d / "run" / "best.ckpt"));

    cfg["out_dir"] = (d / "run2").string();
    write_json(d / "train2.json", cfg);
    ASSERT_EQ(run({"train", (d / "train2.json").string()}), cli::exit_ok);
    EXPECT_EQ(slurp(d / "run2" / "history.csv"), history);

    auto broken = cfg;
    broken["train_manifest"] = (d / "nope.jsonl").string();
    write_json(d / "broken.json", broken);
    EXPECT_EQ(run({"train", (d / "broken.json").string()}), cli::exit_config);
    broken = cfg;
    broken["bogus"] = 1;
    write_json(d / "broken.json", broken);
    EXPECT_EQ(run({"train", (d / "broken.json").string()}), cli::exit_config);

    ASSERT_EQ(run({"predict", "--checkpoint", (d / "run" / "best.ckpt").string(), "--manifest",
                   (data / "manifest.jsonl").string(), "--out", (d / "pred").string()}),
              cli::exit_ok);
    ASSERT_EQ(run({"eval", "--predictions", (d / "pred" / "predictions.jsonl").string(), "--truth",
                   (data / "manifest.jsonl").string(), "--out", (d / "eval").string(), "--ratings",
                   support::fixture("ratings.csv").string()}),
              cli::exit_ok);

    // recompute the report from the written masks
    const auto pred = geodata::read_manifest(d / "pred" / "predictions.jsonl");
    const auto truth = geodata::read_manifest(data / "manifest.jsonl");
    std::vector<evaluation::EvalItem> items;
    for (std::size_t i = 0; i < truth.size(); ++i)
        items.push_back({truth.entries[i].tile_id, io::read_png_mask(pred.resolve(*pred.entries[i].mask)),
                         io::read_png_mask(truth.resolve(*truth.entries[i].mask))});
    const auto want = evaluation::evaluate(items);
    const auto report = nlohmann::json::parse(slurp(d / "eval" / "report.json"));
    EXPECT_NEAR(report.at("iou").get<double>(), want.iou, 1e-12);
    EXPECT_NEAR(report.at("f1").get<double>(), want.f1, 1e-12);
    EXPECT_NEAR(report.at("ratings").at("UV-SAM").at("mean").get<double>(), 7.59, 1e-9);

    nlohmann::json an{{"predictions", (d / "pred" / "predictions.jsonl").string()},
                      {"out_dir", (d / "an").string()},
                      {"bands", {{"center_lon", 116.3}, {"center_lat", 39.9}, {"edges_m", {0, 1e7}}}}};
    write_json(d / "an.json", an);
    ASSERT_EQ(run({"analyze", (d / "an.json").string()}), cli::exit_ok);
    const auto summary = nlohmann::json::parse(slurp(d / "an" / "summary.json"));
    const auto bands = slurp(d / "an" / "bands.csv");
    EXPECT_NE(bands.find("0-10000000m," + std::to_string(summary.at("count").get<std::size_t>()) + ","),
              std::string::npos)
        << bands;
    EXPECT_TRUE(fs::exists(d / "an" / "bands.png"));
    EXPECT_FALSE(fs::exists(d / "an" / "trend.csv")); // single year

    an["rings"] = "rings.geojson";
    write_json(d / "an_both.json", an);
    EXPECT_EQ(run({"analyze", (d / "an_both.json").string()}), cli::exit_config);

    // a truth mask of the wrong size
    const auto small = d / "small";
    fs::create_directories(small / "masks");
    auto t = truth;
    for (auto& e : t.entries) {
        e.tile = fs::absolute(truth.resolve(e.tile)).string();
        e.mask = "masks/" + e.tile_id + ".png";
        io::write_png_mask(small / *e.mask, BinaryMask(8, 8));
    }
    geodata::write_manifest(small / "truth.jsonl", t);
    EXPECT_EQ(run({"eval", "--predictions", (d / "pred" / "predictions.jsonl").string(), "--truth",
                   (small / "truth.jsonl").string(), "--out", (d / "eval2").string()}),
              cli::exit_artifact);
}

TEST(Cli, GateTrainAndGatedPredict)
{
    const auto data = synth_set("cli_synth_gate") / "data";
    const auto d = support::scratch_dir("cli_gate");
    write_json(d / "gate.json", {{"manifest", (data / "manifest.jsonl").string()},
                                 {"out_dir", (d / "g").string()},
                                 {"gate", {{"lr", 1e-3}, {"batch_size", 4}, {"epochs", 3}}}});
    ASSERT_EQ(run({"gate-train", (d / "gate.json").string()}), cli::exit_ok);
    ASSERT_TRUE(fs::exists(d / "g" / "gate.ckpt"));
    EXPECT_TRUE(nlohmann::json::parse(slurp(d / "g" / "gate_report.json")).contains("auc"));

    write_json(d / "train.json", {{"train_manifest", (data / "manifest.jsonl").string()},
                                  {"out_dir", (d / "m").string()},
                                  {"train", {{"epochs", 1}}}});
    ASSERT_EQ(run({"train", (d / "train.json").string()}), cli::exit_ok);

    const auto gate = analytics::load_gate(d / "g" / "gate.ckpt");
    const double threshold = 0.99;
    ASSERT_EQ(run({"predict", "--checkpoint", (d / "m" / "best.ckpt").string(), "--manifest",
                   (data / "manifest.jsonl").string(), "--out", (d / "p").string(), "--gate",
                   (d / "g" / "gate.ckpt").string(), "--gate-threshold", "0.99"}),
              cli::exit_ok);
    const auto src = geodata::read_manifest(data / "manifest.jsonl");
    const auto pred = geodata::read_manifest(d / "p" / "predictions.jsonl");
    std::size_t gated = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (gate.probability(geodata::load_tile(src, src.entries[i])) >= threshold) continue;
        ++gated;
        EXPECT_EQ(io::read_png_mask(pred.resolve(*pred.entries[i].mask)).count(), 0u);
    }
    EXPECT_GT(gated, 0u);

    // a gate checkpoint is not a model checkpoint
    EXPECT_EQ(run({"predict", "--checkpoint", (d / "g" / "gate.ckpt").string(), "--manifest",
                   (data / "manifest.jsonl").string(), "--out", (d / "q").string()}),
              cli::exit_artifact);
    EXPECT_EQ(run({"predict", "--checkpoint", (d / "m" / "best.ckpt").string(), "--manifest",
                   (data / "manifest.jsonl").string(), "--out", (d / "q").string(), "--gate-threshold", "1.5", "--gate",
                   (d / "g" / "gate.ckpt").string()}),
              cli::exit_config);
}
