#include "uvseg/geodata.hpp"

#include "uvseg/error.hpp"
#include "uvseg/image_io.hpp"
#include "uvseg/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace uvs::geodata {

using nlohmann::json;

void validate_tile(const ImageTile& tile, std::size_t tile_size)
{
    if (tile.pixels.height != tile_size || tile.pixels.width != tile_size)
        throw InvalidInput("tile " + tile.tile_id + " is " + std::to_string(tile.pixels.height) + "x" +
                           std::to_string(tile.pixels.width) + ", expected " + std::to_string(tile_size) + "x" +
                           std::to_string(tile_size));
    if (!(tile.resolution_m_per_px > 0.0)) throw InvalidInput("tile " + tile.tile_id + " has non-positive resolution");
}

// ---------------------------------------------------------------------------

namespace {

constexpr double meters_per_degree = earth_radius_m * std::numbers::pi / 180.0;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

} // namespace

GeoOrigin offset_origin(const GeoOrigin& origin, double east_m, double south_m)
{
    const double lat = origin.lat - south_m / meters_per_degree;
    const double lon = origin.lon + east_m / (meters_per_degree * std::cos(deg2rad(origin.lat)));
    return {lon, lat};
}

GeoOrigin pixel_to_lonlat(const GeoOrigin& origin, double resolution_m_per_px, double x, double y)
{
    return offset_origin(origin, x * resolution_m_per_px, y * resolution_m_per_px);
}

double haversine_m(const GeoOrigin& a, const GeoOrigin& b)
{
    const double dlat = deg2rad(b.lat - a.lat);
    const double dlon = deg2rad(b.lon - a.lon);
    const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(deg2rad(a.lat)) * std::cos(deg2rad(b.lat)) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * earth_radius_m * std::asin(std::min(1.0, std::sqrt(s)));
}

SceneGeo read_geo_sidecar(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open geo sidecar " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InvalidInput("malformed geo sidecar " + path.string() + ": " + e.what());
    }
    SceneGeo geo;
    geo.resolution_m_per_px = j.value("resolution_m_per_px", default_resolution_m_per_px);
    if (!(geo.resolution_m_per_px > 0.0)) throw InvalidInput("geo sidecar resolution must be positive");
    if (j.contains("origin") && !j["origin"].is_null())
        geo.origin = GeoOrigin{j["origin"].at("lon").get<double>(), j["origin"].at("lat").get<double>()};
    return geo;
}

void write_geo_sidecar(const std::filesystem::path& path, const SceneGeo& geo)
{
    json j;
    j["resolution_m_per_px"] = geo.resolution_m_per_px;
    if (geo.origin)
        j["origin"] = {{"lon", geo.origin->lon}, {"lat", geo.origin->lat}};
    else
        j["origin"] = nullptr;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream(path) << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

TileGrid tile_grid(std::size_t height, std::size_t width, std::size_t tile_size)
{
    if (tile_size == 0) throw InvalidInput("tile_size must be >= 1");
    if (height == 0 || width == 0) throw InvalidInput("scene is empty");
    return {(height + tile_size - 1) / tile_size, (width + tile_size - 1) / tile_size, tile_size, height, width};
}

std::vector<ImageTile> tile_scene(const RgbImage& scene, std::size_t tile_size, std::uint8_t pad_value,
                                  const std::string& scene_id, const SceneGeo& geo)
{
    const TileGrid grid = tile_grid(scene.height, scene.width, tile_size);
    if (scene.pixels.size() != scene.height * scene.width * 3) throw InvalidInput("scene pixel buffer is inconsistent");
    std::vector<ImageTile> tiles;
    tiles.reserve(grid.rows * grid.cols);
    for (std::size_t r = 0; r < grid.rows; ++r)
        for (std::size_t c = 0; c < grid.cols; ++c) {
            ImageTile t;
            t.pixels = RgbImage(tile_size, tile_size, pad_value);
            const std::size_t y0 = r * tile_size, x0 = c * tile_size;
            const std::size_t h = std::min(tile_size, scene.height - y0);
            const std::size_t w = std::min(tile_size, scene.width - x0);
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(&scene.pixels[((y0 + y) * scene.width + x0) * 3], w * 3, &t.pixels.pixels[y * tile_size * 3]);
            t.resolution_m_per_px = geo.resolution_m_per_px;
            if (geo.origin)
                t.origin = offset_origin(*geo.origin, static_cast<double>(x0) * geo.resolution_m_per_px,
                                         static_cast<double>(y0) * geo.resolution_m_per_px);
            t.tile_id = scene_id + "_r" + std::to_string(r) + "_c" + std::to_string(c);
            tiles.push_back(std::move(t));
        }
    return tiles;
}

std::vector<BinaryMask> tile_mask(const BinaryMask& mask, std::size_t tile_size)
{
    const TileGrid grid = tile_grid(mask.height, mask.width, tile_size);
    std::vector<BinaryMask> tiles;
    for (std::size_t r = 0; r < grid.rows; ++r)
        for (std::size_t c = 0; c < grid.cols; ++c) {
            BinaryMask t(tile_size, tile_size);
            const std::size_t y0 = r * tile_size, x0 = c * tile_size;
            const std::size_t h = std::min(tile_size, mask.height - y0);
            const std::size_t w = std::min(tile_size, mask.width - x0);
            for (std::size_t y = 0; y < h; ++y)
                std::copy_n(&mask.data[(y0 + y) * mask.width + x0], w, &t.data[y * tile_size]);
            tiles.push_back(std::move(t));
        }
    return tiles;
}

RgbImage merge_tiles(const std::vector<ImageTile>& tiles, std::size_t rows, std::size_t cols)
{
    if (rows == 0 || cols == 0 || tiles.size() != rows * cols)
        throw InvalidInput("merge_tiles: expected " + std::to_string(rows * cols) + " tiles, got " +
                           std::to_string(tiles.size()));
    const std::size_t t = tiles.front().pixels.height;
    for (const auto& tile : tiles)
        if (tile.pixels.height != t || tile.pixels.width != t)
            throw InvalidInput("merge_tiles: tiles must be square and uniformly sized");
    RgbImage out(rows * t, cols * t);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const RgbImage& src = tiles[r * cols + c].pixels;
            for (std::size_t y = 0; y < t; ++y)
                std::copy_n(&src.pixels[y * t * 3], t * 3, &out.pixels[((r * t + y) * out.width + c * t) * 3]);
        }
    return out;
}

RgbImage crop(const RgbImage& image, std::size_t height, std::size_t width)
{
    if (height > image.height || width > image.width) throw InvalidInput("crop extent exceeds image");
    RgbImage out(height, width);
    for (std::size_t y = 0; y < height; ++y)
        std::copy_n(&image.pixels[y * image.width * 3], width * 3, &out.pixels[y * width * 3]);
    return out;
}

// ---------------------------------------------------------------------------

const char* split_name(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unsplit: return "unsplit";
    }
    return "unsplit";
}

Split parse_split(const std::string& s)
{
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unsplit") return Split::unsplit;
    throw InvalidInput("unknown split '" + s + "'");
}

void DatasetManifest::validate() const
{
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (e.tile_id.empty()) throw InvalidInput("manifest entry with empty tile_id");
        if (!ids.insert(e.tile_id).second) throw InvalidInput("duplicate tile_id in manifest: " + e.tile_id);
    }
}

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const
{
    std::filesystem::path p(rel);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

DatasetManifest read_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open manifest " + path.string());
    DatasetManifest m;
    m.base_dir = path.parent_path();
    std::string line;
    std::optional<Split> common;
    bool mixed = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
            ManifestEntry e;
            e.tile = j.at("tile").get<std::string>();
            if (j.contains("mask") && !j["mask"].is_null()) e.mask = j["mask"].get<std::string>();
            e.tile_id = j.at("tile_id").get<std::string>();
            e.city = j.value("city", std::string{});
            e.year = j.value("year", 0);
            if (j.contains("resolution_m_per_px") && !j["resolution_m_per_px"].is_null())
                e.resolution_m_per_px = j["resolution_m_per_px"].get<double>();
            if (j.contains("origin_lon") && j.contains("origin_lat") && !j["origin_lon"].is_null())
                e.origin = GeoOrigin{j["origin_lon"].get<double>(), j["origin_lat"].get<double>()};
            if (j.contains("label") && !j["label"].is_null()) e.label = j["label"].get<int>();
            if (j.contains("row")) {
                TilePlacement p;
                p.row = j.at("row").get<std::size_t>();
                p.col = j.at("col").get<std::size_t>();
                p.scene_height = j.value("scene_height", std::size_t{0});
                p.scene_width = j.value("scene_width", std::size_t{0});
                p.pad_value = j.value("pad_value", 0);
                e.placement = p;
            }
            const Split s = parse_split(j.value("split", std::string("unsplit")));
            if (common && *common != s) mixed = true;
            common = s;
            m.entries.push_back(std::move(e));
        } catch (const json::exception& ex) {
            throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    m.split = (common && !mixed) ? *common : Split::unsplit;
    m.validate();
    return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest)
{
    manifest.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write manifest " + path.string());
    for (const auto& e : manifest.entries) {
        json j;
        j["tile"] = e.tile;
        j["mask"] = e.mask ? json(*e.mask) : json(nullptr);
        j["tile_id"] = e.tile_id;
        j["city"] = e.city;
        j["year"] = e.year;
        j["split"] = split_name(manifest.split);
        if (e.resolution_m_per_px) j["resolution_m_per_px"] = *e.resolution_m_per_px;
        if (e.origin) {
            j["origin_lon"] = e.origin->lon;
            j["origin_lat"] = e.origin->lat;
        }
        if (e.label) j["label"] = *e.label;
        if (e.placement) {
            j["row"] = e.placement->row;
            j["col"] = e.placement->col;
            j["scene_height"] = e.placement->scene_height;
            j["scene_width"] = e.placement->scene_width;
            j["pad_value"] = e.placement->pad_value;
        }
        out << j.dump() << '\n';
    }
}

ImageTile load_tile(const DatasetManifest& manifest, const ManifestEntry& entry)
{
    ImageTile t;
    t.pixels = io::read_png_rgb(manifest.resolve(entry.tile));
    t.resolution_m_per_px = entry.resolution_m_per_px.value_or(default_resolution_m_per_px);
    t.origin = entry.origin;
    t.tile_id = entry.tile_id;
    return t;
}

MaskLabel load_mask(const DatasetManifest& manifest, const ManifestEntry& entry, std::size_t height,
                    std::size_t width)
{
    if (!entry.mask) throw InvalidInput("entry " + entry.tile_id + " has no mask");
    MaskLabel m{io::read_png_mask(manifest.resolve(*entry.mask)), entry.tile_id};
    if (m.mask.height != height || m.mask.width != width)
        throw InvalidInput("mask of " + entry.tile_id + " does not match its tile dimensions");
    return m;
}

SplitResult split_dataset(const DatasetManifest& manifest, const std::array<double, 3>& ratios, std::uint64_t seed)
{
    if (manifest.empty()) throw InvalidInput("cannot split an empty manifest");
    for (double r : ratios)
        if (!(r > 0.0)) throw InvalidInput("split ratios must be positive");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw InvalidInput("split ratios must sum to 1");
    manifest.validate();

    const std::size_t n = manifest.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    // The epsilon keeps exact products such as 10 * 0.2 from flooring to 1.
    auto take = [n](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
    const std::size_t n_val = take(ratios[1]);
    const std::size_t n_test = take(ratios[2]);
    const std::size_t n_train = n - n_val - n_test;

    SplitResult out;
    for (auto* part : {&out.train, &out.val, &out.test}) part->base_dir = manifest.base_dir;
    out.train.split = Split::train;
    out.val.split = Split::val;
    out.test.split = Split::test;
    for (std::size_t i = 0; i < n; ++i) {
        const ManifestEntry& e = manifest.entries[order[i]];
        if (i < n_train)
            out.train.entries.push_back(e);
        else if (i < n_train + n_val)
            out.val.entries.push_back(e);
        else
            out.test.entries.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t min_cell = 8;

struct Rect {
    long x0, y0, x1, y1; // half-open
};

void fill_rect(BinaryMask& m, const Rect& r)
{
    for (long y = r.y0; y < r.y1; ++y)
        for (long x = r.x0; x < r.x1; ++x) m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
}

std::uint8_t clamp_u8(double v)
{
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

} // namespace

int max_synthetic_regions(std::size_t tile_size)
{
    const std::size_t per_axis = tile_size / min_cell;
    return static_cast<int>(per_axis * per_axis);
}

std::pair<ImageTile, MaskLabel> gen_synthetic_tile(const Morphology& params)
{
    const std::size_t t = std::max<std::size_t>(params.tile_size, min_cell);
    const int count = std::clamp(params.uv_region_count, 0, max_synthetic_regions(t));
    const double density = std::clamp(params.building_density, 0.05, 1.0);
    Rng rng(params.seed);

    // Regions live in distinct cells of a k x k grid with a one-pixel margin,
    // so neighbouring regions are at least two pixels apart and never touch,
    // even diagonally.
    BinaryMask mask(t, t);
    if (count > 0) {
        std::size_t k = 1;
        while (k * k < static_cast<std::size_t>(count)) ++k;
        const long cell = static_cast<long>(t / k);
        std::vector<std::size_t> cells(k * k);
        for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
        rng.shuffle(cells);
        for (int r = 0; r < count; ++r) {
            const long cx0 = static_cast<long>(cells[static_cast<std::size_t>(r)] % k) * cell + 1;
            const long cy0 = static_cast<long>(cells[static_cast<std::size_t>(r)] / k) * cell + 1;
            const long inner = cell - 2;
            const long lo = std::max(2L, inner / 2);
            const long w = rng.uniform_int(lo, inner), h = rng.uniform_int(lo, inner);
            const long x0 = cx0 + rng.uniform_int(0, inner - w), y0 = cy0 + rng.uniform_int(0, inner - h);
            const Rect base{x0, y0, x0 + w, y0 + h};
            fill_rect(mask, base);
            // An optional lobe that overlaps the base keeps shapes irregular
            // but connected.
            if (rng.uniform() < 0.6) {
                const long lw = rng.uniform_int(std::max(1L, inner / 4), std::max(1L, inner / 2));
                const long lh = rng.uniform_int(std::max(1L, inner / 4), std::max(1L, inner / 2));
                const long ax = rng.uniform_int(base.x0, base.x1 - 1), ay = rng.uniform_int(base.y0, base.y1 - 1);
                Rect lobe{ax - lw / 2, ay - lh / 2, ax - lw / 2 + lw, ay - lh / 2 + lh};
                lobe.x0 = std::max(lobe.x0, cx0);
                lobe.y0 = std::max(lobe.y0, cy0);
                lobe.x1 = std::min(lobe.x1, cx0 + inner);
                lobe.y1 = std::min(lobe.y1, cy0 + inner);
                if (lobe.x0 < lobe.x1 && lobe.y0 < lobe.y1) fill_rect(mask, lobe);
            }
        }
    }

    RgbImage img(t, t);
    // Background: vegetation/bare ground.
    for (std::size_t y = 0; y < t; ++y)
        for (std::size_t x = 0; x < t; ++x) {
            img.at(y, x, 0) = clamp_u8(104 + rng.uniform(-10, 10));
            img.at(y, x, 1) = clamp_u8(118 + rng.uniform(-10, 10));
            img.at(y, x, 2) = clamp_u8(92 + rng.uniform(-10, 10));
        }

    // Sparse large modern blocks outside the urban-village regions.
    const std::size_t n_blocks = std::max<std::size_t>(1, t * t / 700);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        const long bw = rng.uniform_int(8, 15), bh = rng.uniform_int(8, 15);
        const long x0 = rng.uniform_int(0, static_cast<long>(t) - 1), y0 = rng.uniform_int(0, static_cast<long>(t) - 1);
        const double shade = rng.uniform(190, 225);
        for (long y = y0; y < std::min<long>(y0 + bh, static_cast<long>(t)); ++y)
            for (long x = x0; x < std::min<long>(x0 + bw, static_cast<long>(t)); ++x) {
                const auto ys = static_cast<std::size_t>(y), xs = static_cast<std::size_t>(x);
                if (mask.at(ys, xs)) continue;
                const bool edge = y == y0 || x == x0 || y == y0 + bh - 1 || x == x0 + bw - 1;
                const double v = edge ? shade - 40 : shade;
                img.at(ys, xs, 0) = clamp_u8(v + rng.uniform(-4, 4));
                img.at(ys, xs, 1) = clamp_u8(v + rng.uniform(-4, 4));
                img.at(ys, xs, 2) = clamp_u8(v - 5 + rng.uniform(-4, 4));
            }
    }

    // Urban-village fabric: dark narrow alleys between dense small roofs.
    static constexpr double palette[3][3] = {{150, 78, 62}, {96, 108, 128}, {128, 118, 104}};
    for (std::size_t y = 0; y < t; ++y)
        for (std::size_t x = 0; x < t; ++x)
            if (mask.at(y, x)) {
                img.at(y, x, 0) = clamp_u8(62 + rng.uniform(-6, 6));
                img.at(y, x, 1) = clamp_u8(58 + rng.uniform(-6, 6));
                img.at(y, x, 2) = clamp_u8(56 + rng.uniform(-6, 6));
            }
    for (std::size_t gy = 0; gy < t; gy += 4)
        for (std::size_t gx = 0; gx < t; gx += 4) {
            if (rng.uniform() >= density) continue;
            const auto& col = palette[rng.uniform_int(0, 2)];
            const std::size_t rw = static_cast<std::size_t>(rng.uniform_int(2, 3));
            const std::size_t rh = static_cast<std::size_t>(rng.uniform_int(2, 3));
            for (std::size_t y = gy; y < std::min(gy + rh, t); ++y)
                for (std::size_t x = gx; x < std::min(gx + rw, t); ++x)
                    if (mask.at(y, x))
                        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = clamp_u8(col[c] + rng.uniform(-8, 8));
        }

    ImageTile tile;
    tile.pixels = std::move(img);
    tile.resolution_m_per_px = default_resolution_m_per_px;
    tile.tile_id = "synth_" + std::to_string(params.seed);
    MaskLabel label{std::move(mask), tile.tile_id};
    return {std::move(tile), std::move(label)};
}

} // namespace uvs::geodata
