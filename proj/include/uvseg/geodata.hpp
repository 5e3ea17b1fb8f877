#pragma once

// Scene tiling, dataset manifests and splits, and synthetic desk-scale fixtures.

#include "uvseg/raster.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace uvs::geodata {

inline constexpr std::size_t default_tile_size = 1024;
inline constexpr double default_resolution_m_per_px = 1.05;

/// Longitude/latitude in degrees of a raster's top-left corner.
struct GeoOrigin {
    double lon = 0.0;
    double lat = 0.0;
    friend bool operator==(const GeoOrigin&, const GeoOrigin&) = default;
};

struct ImageTile {
    RgbImage pixels;
    double resolution_m_per_px = default_resolution_m_per_px;
    std::optional<GeoOrigin> origin;
    std::string tile_id;
};

struct MaskLabel {
    BinaryMask mask;
    std::string tile_id;
};

/// Throws InvalidInput unless the tile is square with the given side and a
/// positive resolution.
void validate_tile(const ImageTile& tile, std::size_t tile_size);

// ---------------------------------------------------------------------------
// Geo helpers (spherical earth, local equirectangular offsets)

inline constexpr double earth_radius_m = 6371008.8;

GeoOrigin offset_origin(const GeoOrigin& origin, double east_m, double south_m);
/// Location of pixel-space point (x, y) of a raster anchored at `origin`.
GeoOrigin pixel_to_lonlat(const GeoOrigin& origin, double resolution_m_per_px, double x, double y);
double haversine_m(const GeoOrigin& a, const GeoOrigin& b);

struct SceneGeo {
    double resolution_m_per_px = default_resolution_m_per_px;
    std::optional<GeoOrigin> origin;
};

SceneGeo read_geo_sidecar(const std::filesystem::path& path);
void write_geo_sidecar(const std::filesystem::path& path, const SceneGeo& geo);

// ---------------------------------------------------------------------------
// Tiling

struct TileGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t tile_size = 0;
    std::size_t scene_height = 0;
    std::size_t scene_width = 0;
};

TileGrid tile_grid(std::size_t height, std::size_t width, std::size_t tile_size);

/// Cuts a scene into row-major square tiles; edge tiles are padded with
/// `pad_value`. Tile ids are "<scene_id>_r<row>_c<col>" and each tile's origin
/// is shifted from the scene origin by its pixel offset.
std::vector<ImageTile> tile_scene(const RgbImage& scene, std::size_t tile_size, std::uint8_t pad_value = 0,
                                  const std::string& scene_id = "scene", const SceneGeo& geo = {});

/// Mask counterpart of tile_scene (padding is background).
std::vector<BinaryMask> tile_mask(const BinaryMask& mask, std::size_t tile_size);

/// Reassembles rows x cols tiles; the result covers the padded extent.
RgbImage merge_tiles(const std::vector<ImageTile>& tiles, std::size_t rows, std::size_t cols);
RgbImage crop(const RgbImage& image, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Manifests

enum class Split { train, val, test, unsplit };

const char* split_name(Split s);
Split parse_split(const std::string& s);

/// Where a tile sits inside the scene it was cut from.
struct TilePlacement {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t scene_height = 0;
    std::size_t scene_width = 0;
    int pad_value = 0;
};

struct ManifestEntry {
    std::string tile;
    std::optional<std::string> mask;
    std::string tile_id;
    std::string city;
    int year = 0;
    std::optional<double> resolution_m_per_px;
    std::optional<GeoOrigin> origin;
    std::optional<int> label; // explicit urban/non-urban class for the gate
    std::optional<TilePlacement> placement;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    Split split = Split::unsplit;
    /// Directory that relative tile/mask paths are resolved against.
    std::filesystem::path base_dir;

    std::size_t size() const noexcept { return entries.size(); }
    bool empty() const noexcept { return entries.empty(); }

    /// Throws InvalidInput on duplicate tile ids.
    void validate() const;
    std::filesystem::path resolve(const std::string& rel) const;
};

/// JSON-lines, one object per entry with keys tile, mask, tile_id, city, year,
/// split and optional resolution_m_per_px, origin_lon, origin_lat, label,
/// row, col, scene_height, scene_width, pad_value.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

ImageTile load_tile(const DatasetManifest& manifest, const ManifestEntry& entry);
/// Loads the entry's mask and checks it matches the tile dimensions.
MaskLabel load_mask(const DatasetManifest& manifest, const ManifestEntry& entry, std::size_t height,
                    std::size_t width);

struct SplitResult {
    DatasetManifest train;
    DatasetManifest val;
    DatasetManifest test;
};

/// Seeded shuffle, then val/test take floor(n * r) entries each and train
/// receives the remainder.
SplitResult split_dataset(const DatasetManifest& manifest, const std::array<double, 3>& ratios, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic fixtures

struct Morphology {
    int uv_region_count = 1;
    double building_density = 0.7;
    std::uint64_t seed = 0;
    std::size_t tile_size = 64;
};

/// Largest region count the generator can place on a tile of this size.
int max_synthetic_regions(std::size_t tile_size);

/// Renders a tile whose urban-village regions (exactly uv_region_count
/// 8-connected components after clamping) are filled with dense small roofs
/// and narrow alleys, on a background of sparse large blocks.
std::pair<ImageTile, MaskLabel> gen_synthetic_tile(const Morphology& params);

} // namespace uvs::geodata
