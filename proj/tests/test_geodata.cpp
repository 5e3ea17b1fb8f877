#include "support.hpp"

#include "uvseg/error.hpp"
#include "uvseg/geodata.hpp"
#include "uvseg/image_io.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace uvs;
using namespace uvs::geodata;

namespace {

RgbImage random_scene(std::size_t h, std::size_t w, std::uint64_t seed)
{
    Rng rng(seed);
    RgbImage img(h, w);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return img;
}

DatasetManifest numbered_manifest(std::size_t n)
{
    DatasetManifest m;
    for (std::size_t i = 0; i < n; ++i) m.entries.push_back({"t" + std::to_string(i) + ".png", {}, "t" + std::to_string(i)});
    return m;
}

} // namespace

TEST(Tiling, ExactDivisionGivesFourTiles)
{
    const auto tiles = tile_scene(random_scene(2048, 2048, 1), 1024);
    ASSERT_EQ(tiles.size(), 4u);
    EXPECT_EQ(tiles[1].tile_id, "scene_r0_c1");
    EXPECT_EQ(tiles[2].tile_id, "scene_r1_c0");
    for (const auto& t : tiles) EXPECT_NO_THROW(validate_tile(t, 1024));
}

TEST(Tiling, SingleTileIsIdentity)
{
    const auto scene = random_scene(1024, 1024, 2);
    const auto tiles = tile_scene(scene, 1024);
    ASSERT_EQ(tiles.size(), 1u);
    EXPECT_EQ(tiles[0].pixels, scene);
}

TEST(Tiling, PaddedSceneRoundTrips)
{
    const auto scene = random_scene(2560, 2560, 3);
    const auto tiles = tile_scene(scene, 1024, 0);
    ASSERT_EQ(tiles.size(), 9u);
    // bottom-right tile: 512 real pixels, then zero padding
    EXPECT_EQ(tiles[8].pixels.at(600, 600, 0), 0);
    EXPECT_EQ(tiles[8].pixels.at(511, 511, 1), scene.at(2559, 2559, 1));
    EXPECT_EQ(crop(merge_tiles(tiles, 3, 3), 2560, 2560), scene);
}

TEST(Tiling, RandomSizesRoundTrip)
{
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto h = static_cast<std::size_t>(rng.uniform_int(1, 90));
        const auto w = static_cast<std::size_t>(rng.uniform_int(1, 90));
        const auto ts = static_cast<std::size_t>(rng.uniform_int(1, 40));
        const auto scene = random_scene(h, w, 100 + trial);
        const auto grid = tile_grid(h, w, ts);
        const auto tiles = tile_scene(scene, ts, 7);
        ASSERT_EQ(tiles.size(), grid.rows * grid.cols);
        EXPECT_EQ(grid.rows, (h + ts - 1) / ts);
        EXPECT_EQ(crop(merge_tiles(tiles, grid.rows, grid.cols), h, w), scene);
    }
}

TEST(Tiling, Errors)
{
    EXPECT_THROW(tile_scene(RgbImage{}, 16), InvalidInput);
    EXPECT_THROW(tile_scene(random_scene(8, 8, 1), 0), InvalidInput);
    const auto tiles = tile_scene(random_scene(32, 32, 1), 16);
    EXPECT_THROW(merge_tiles(tiles, 1, 3), InvalidInput);
}

TEST(Tiling, OriginShiftsByPixelOffset)
{
    SceneGeo geo{1.05, GeoOrigin{116.4, 39.9}};
    const auto tiles = tile_scene(random_scene(200, 200, 5), 100, 0, "bj", geo);
    ASSERT_EQ(tiles.size(), 4u);
    ASSERT_TRUE(tiles[3].origin);
    // diagonal tile sits 105 m east and 105 m south of the scene corner
    EXPECT_NEAR(haversine_m(*geo.origin, *tiles[3].origin), std::hypot(105.0, 105.0), 1e-3);
    EXPECT_LT(tiles[3].origin->lat, geo.origin->lat);
    EXPECT_GT(tiles[3].origin->lon, geo.origin->lon);
}

TEST(Tiling, MaskTilesPadWithBackground)
{
    BinaryMask m(3, 3, 1);
    const auto parts = tile_mask(m, 2);
    ASSERT_EQ(parts.size(), 4u);
    EXPECT_EQ(parts[3].count(), 1u);
}

TEST(Split, SixTwoTwoProportions)
{
    auto parts = split_dataset(numbered_manifest(10), {0.6, 0.2, 0.2}, 1);
    EXPECT_EQ(parts.train.size(), 6u);
    EXPECT_EQ(parts.val.size(), 2u);
    EXPECT_EQ(parts.test.size(), 2u);

    // 2491 * 0.2 = 498.2 -> 498 each, remainder to train
    parts = split_dataset(numbered_manifest(2491), {0.6, 0.2, 0.2}, 1);
    EXPECT_EQ(parts.train.size(), 1495u);
    EXPECT_EQ(parts.val.size(), 498u);
    EXPECT_EQ(parts.test.size(), 498u);
}

TEST(Split, PartitionAndDeterminism)
{
    Rng rng(9);
    for (int trial = 0; trial < 40; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 1000));
        const auto m = numbered_manifest(n);
        const auto a = split_dataset(m, {0.6, 0.2, 0.2}, trial);
        const auto b = split_dataset(m, {0.6, 0.2, 0.2}, trial);
        std::multiset<std::string> ids;
        for (const auto* part : {&a.train, &a.val, &a.test})
            for (const auto& e : part->entries) ids.insert(e.tile_id);
        ASSERT_EQ(ids.size(), n);
        EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), n);
        for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train.entries[i].tile_id, b.train.entries[i].tile_id);
    }
}

TEST(Split, Errors)
{
    EXPECT_THROW(split_dataset(DatasetManifest{}, {0.6, 0.2, 0.2}, 0), InvalidInput);
    EXPECT_THROW(split_dataset(numbered_manifest(5), {0.6, 0.2, 0.3}, 0), InvalidInput);
    EXPECT_THROW(split_dataset(numbered_manifest(5), {0.8, 0.2, 0.0}, 0), InvalidInput);
}

TEST(Manifest, RoundTripAndDuplicates)
{
    const auto dir = support::scratch_dir("manifest");
    DatasetManifest m;
    m.split = Split::val;
    ManifestEntry e{"tiles/a.png", std::string("masks/a.png"), "a", "beijing", 2018};
    e.resolution_m_per_px = 1.05;
    e.origin = GeoOrigin{116.0, 40.0};
    e.label = 1;
    e.placement = TilePlacement{1, 2, 2048, 2560, 0};
    m.entries.push_back(e);
    write_manifest(dir / "m.jsonl", m);
    const auto r = read_manifest(dir / "m.jsonl");
    ASSERT_EQ(r.size(), 1u);
    EXPECT_EQ(r.split, Split::val);
    EXPECT_EQ(r.entries[0].mask, e.mask);
    EXPECT_EQ(r.entries[0].city, "beijing");
    EXPECT_EQ(r.entries[0].year, 2018);
    EXPECT_EQ(r.entries[0].origin, e.origin);
    EXPECT_EQ(r.entries[0].label, 1);
    EXPECT_EQ(r.entries[0].placement->scene_width, 2560u);
    EXPECT_EQ(r.resolve("tiles/a.png"), dir / "tiles/a.png");

    m.entries.push_back(e);
    EXPECT_THROW(write_manifest(dir / "dup.jsonl", m), InvalidInput);
    EXPECT_THROW(read_manifest(dir / "missing.jsonl"), InvalidInput);
}

TEST(Manifest, MaskSizeMustMatchTile)
{
    const auto dir = support::scratch_dir("masksize");
    io::write_png_rgb(dir / "t.png", RgbImage(8, 8, 10));
    io::write_png_mask(dir / "m.png", BinaryMask(4, 8));
    DatasetManifest m;
    m.base_dir = dir;
    m.entries.push_back({"t.png", std::string("m.png"), "t"});
    const auto tile = load_tile(m, m.entries[0]);
    EXPECT_THROW(load_mask(m, m.entries[0], tile.pixels.height, tile.pixels.width), InvalidInput);
}

TEST(Synthetic, EmptyAndExactRegionCounts)
{
    Morphology none;
    none.uv_region_count = 0;
    EXPECT_EQ(gen_synthetic_tile(none).second.mask.count(), 0u);

    Morphology two;
    two.uv_region_count = 2;
    two.seed = 7;
    const auto [tile, label] = gen_synthetic_tile(two);
    EXPECT_EQ(support::flood_regions(label.mask, 8).size(), 2u);
    EXPECT_EQ(label.mask.height, tile.pixels.height);

    for (std::uint64_t s = 0; s < 30; ++s)
        for (int k = 1; k <= max_synthetic_regions(64); ++k) {
            Morphology m;
            m.uv_region_count = k;
            m.seed = s;
            EXPECT_EQ(support::flood_regions(gen_synthetic_tile(m).second.mask, 8).size(), static_cast<std::size_t>(k))
                << "seed " << s << " regions " << k;
        }
}

TEST(Synthetic, Deterministic)
{
    Morphology m;
    m.seed = 11;
    const auto a = gen_synthetic_tile(m);
    const auto b = gen_synthetic_tile(m);
    EXPECT_EQ(a.first.pixels, b.first.pixels);
    EXPECT_EQ(a.second.mask, b.second.mask);
}

TEST(Synthetic, TextureDiffersInsideRegions)
{
    // urban-village interiors alternate small roofs and dark alleys: higher local contrast
    Morphology m;
    m.seed = 3;
    m.uv_region_count = 1;
    m.tile_size = 128;
    const auto [tile, label] = gen_synthetic_tile(m);
    double in_edges = 0, in_n = 0, out_edges = 0, out_n = 0;
    for (std::size_t y = 0; y < 128; ++y)
        for (std::size_t x = 1; x < 128; ++x) {
            const double edge = std::abs(double(tile.pixels.at(y, x, 0)) - double(tile.pixels.at(y, x - 1, 0)));
            if (label.mask.at(y, x) && label.mask.at(y, x - 1)) {
                in_edges += edge;
                ++in_n;
            } else if (!label.mask.at(y, x) && !label.mask.at(y, x - 1)) {
                out_edges += edge;
                ++out_n;
            }
        }
    ASSERT_GT(in_n, 0);
    EXPECT_GT(in_edges / in_n, 2.0 * (out_edges / out_n));
}

TEST(Geo, SidecarRoundTrip)
{
    const auto dir = support::scratch_dir("sidecar");
    write_geo_sidecar(dir / "g.json", SceneGeo{0.5, GeoOrigin{108.9, 34.3}});
    const auto g = read_geo_sidecar(dir / "g.json");
    EXPECT_DOUBLE_EQ(g.resolution_m_per_px, 0.5);
    EXPECT_EQ(g.origin, (GeoOrigin{108.9, 34.3}));
}
