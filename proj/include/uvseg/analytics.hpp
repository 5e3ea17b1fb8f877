#pragma once

// City-scale reporting: the urban/non-urban pre-classification gate, region
// counts and areas, distance or ring-band curves and multi-year trends.

#include "uvseg/geodata.hpp"
#include "uvseg/nn.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace uvs::analytics {

using ag::Var;

// ---------------------------------------------------------------------------
// Gate

struct GateConfig {
    double lr = 1e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 20;
    double threshold = 0.5;
    double test_ratio = 0.25;
    std::size_t channels = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const GateConfig& c);
GateConfig gate_config_from_json(const nlohmann::json& j);

/// Pluggable binary tile classifier.
class GateBackbone {
public:
    virtual ~GateBackbone() = default;
    /// 1 x 1 logit for a 3 x H x W standardised image.
    virtual Var logit(const Var& image) const = 0;
    virtual nn::ParamStore& params() noexcept = 0;
    virtual const nn::ParamStore& params() const noexcept = 0;
};

/// Three stride-2 3x3 convolutions with ReLU, global average pool, linear.
class TinyConv final : public GateBackbone {
public:
    TinyConv(std::size_t channels, std::uint64_t seed);
    Var logit(const Var& image) const override;
    nn::ParamStore& params() noexcept override { return params_; }
    const nn::ParamStore& params() const noexcept override { return params_; }

private:
    nn::ParamStore params_;
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear fc_;
};

struct GateModel {
    std::shared_ptr<GateBackbone> backbone;
    double threshold = 0.5;

    double probability(const geodata::ImageTile& tile) const;
};

struct LabeledTile {
    geodata::ImageTile tile;
    int label = 0; // 1 = urban
};

struct GateReport {
    double auc = 0.0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    std::size_t n_train = 0, n_test = 0;
    std::vector<double> loss_history; // mean training loss per epoch

    nlohmann::json to_json() const;
};

/// Area under the ROC curve via the Mann-Whitney statistic (ties count half).
/// InvalidInput unless both classes are present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Stratified seeded hold-out split, Adam on binary cross-entropy.
/// InvalidInput for a single-class set.
std::pair<GateModel, GateReport> train_gate(const std::vector<LabeledTile>& tiles, const GateConfig& cfg);

struct GateDecision {
    std::string tile_id;
    double probability = 0.0;
    bool pass = false;
};

/// A tile passes when its probability is >= threshold; threshold must lie in [0, 1).
std::vector<GateDecision> gate_probabilities(const std::vector<std::string>& tile_ids,
                                             const std::vector<double>& probabilities, double threshold);
std::vector<GateDecision> gate_tiles(const std::vector<geodata::ImageTile>& tiles, const GateModel& model,
                                     double threshold);

void save_gate(const std::filesystem::path& path, const GateModel& model, const GateConfig& cfg);
GateModel load_gate(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Region statistics

struct PredictedTile {
    std::string tile_id;
    BinaryMask mask;
    std::optional<double> resolution_m_per_px;
    std::optional<geodata::GeoOrigin> origin;
};

struct RegionRecord {
    std::string tile_id;
    std::size_t area_px = 0;
    double area_m2 = 0.0;
    double centroid_x = 0.0, centroid_y = 0.0; // pixel-centre coordinates within the tile
    std::optional<geodata::GeoOrigin> centroid_lonlat;
};

/// Counting is per predicted region within each tile; regions that continue
/// across tile borders are not merged.
struct RegionStats {
    std::size_t count = 0;
    std::size_t area_px = 0;
    double area_m2 = 0.0;
    std::vector<RegionRecord> regions;
};

RegionStats region_stats(const std::vector<PredictedTile>& tiles, int connectivity = 8);

// ---------------------------------------------------------------------------
// Bands

struct BandRow {
    std::string name;
    std::size_t count = 0;
    double area_m2 = 0.0;
};

struct BandCurve {
    std::vector<BandRow> bands; // ordered inner to outer
    BandRow beyond{"beyond"};

    std::size_t total_count() const;
    double total_area_m2() const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Bands [e0, e1), [e1, e2), ... in metres of great-circle distance from
/// `center`; regions at or past the last edge (or before the first) go to "beyond".
BandCurve band_distribution(const RegionStats& stats, const geodata::GeoOrigin& center,
                            const std::vector<double>& edges_m);

/// Named ring polygons ordered innermost first; outer rings normally contain
/// inner ones, so each region belongs to the first ring containing it.
struct Ring {
    std::string name;
    std::vector<std::vector<std::vector<std::array<double, 2>>>> polygons; // polygon -> rings -> (lon, lat)
};

/// Polygon / MultiPolygon features of a FeatureCollection, named by
/// properties.name, kept in file order.
std::vector<Ring> parse_rings_geojson(const nlohmann::json& collection);
std::vector<Ring> read_rings_geojson(const std::filesystem::path& path);
bool ring_contains(const Ring& ring, const geodata::GeoOrigin& p);

BandCurve band_distribution(const RegionStats& stats, const std::vector<Ring>& rings);

// ---------------------------------------------------------------------------
// Trends

struct YearStat {
    std::string city;
    int year = 0;
    std::size_t count = 0;
    double area_m2 = 0.0;
};

struct TrendRow {
    std::string city;
    int year = 0;
    std::size_t count = 0;
    double area_m2 = 0.0;
    double delta_count = 0.0; // against the previous year of the same city (0 for the first)
    double delta_area_m2 = 0.0;
    double rel_count = 0.0; // delta / previous value; NaN when the previous value is 0
    double rel_area = 0.0;
};

struct CityTrend {
    std::string city;
    int first_year = 0, last_year = 0;
    double rel_count = 0.0; // last against first
    double rel_area = 0.0;
};

struct TrendReport {
    std::vector<TrendRow> rows; // by city, then year
    std::vector<CityTrend> cities;

    void write_csv(const std::filesystem::path& path) const;
};

/// InvalidInput when a city has fewer than two distinct years.
TrendReport year_trend(const std::vector<YearStat>& stats);

// ---------------------------------------------------------------------------
// Plots

/// Plain bar chart (one bar per value, no text) written as an RGB PNG.
void write_bar_chart(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height = 240);

} // namespace uvs::analytics
