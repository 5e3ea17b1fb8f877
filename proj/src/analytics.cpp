#include "uvseg/analytics.hpp"

#include "uvseg/checkpoint.hpp"
#include "uvseg/components.hpp"
#include "uvseg/error.hpp"
#include "uvseg/image_io.hpp"
#include "uvseg/json_util.hpp"
#include "uvseg/preprocess.hpp"
#include "uvseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace uvs::analytics {

using ag::Node;

// ---------------------------------------------------------------------------
// Gate

void GateConfig::validate() const
{
    if (!(lr > 0.0)) throw ConfigError("gate lr must be positive");
    if (batch_size == 0 || epochs == 0 || channels == 0) throw ConfigError("gate batch_size, epochs, channels must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("gate threshold must lie in (0, 1)");
    if (!(test_ratio > 0.0 && test_ratio < 1.0)) throw ConfigError("gate test_ratio must lie in (0, 1)");
}

nlohmann::json to_json(const GateConfig& c)
{
    return {{"lr", c.lr},           {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"threshold", c.threshold},
            {"test_ratio", c.test_ratio}, {"channels", c.channels}, {"seed", c.seed}};
}

GateConfig gate_config_from_json(const nlohmann::json& j)
{
    const std::string where = "gate";
    reject_unknown_keys(j, {"lr", "batch_size", "epochs", "threshold", "test_ratio", "channels", "seed"}, where);
    GateConfig c;
    read_field(j, "lr", c.lr, where);
    read_field(j, "batch_size", c.batch_size, where);
    read_field(j, "epochs", c.epochs, where);
    read_field(j, "threshold", c.threshold, where);
    read_field(j, "test_ratio", c.test_ratio, where);
    read_field(j, "channels", c.channels, where);
    read_field(j, "seed", c.seed, where);
    c.validate();
    return c;
}

TinyConv::TinyConv(std::size_t channels, std::uint64_t seed)
{
    Rng rng(seed ^ 0x67617465ULL);
    c1_ = nn::make_conv(params_, "conv1", 3, channels, 3, 2, 1, rng);
    c2_ = nn::make_conv(params_, "conv2", channels, 2 * channels, 3, 2, 1, rng);
    c3_ = nn::make_conv(params_, "conv3", 2 * channels, 2 * channels, 3, 2, 1, rng);
    fc_ = nn::make_linear(params_, "fc", 2 * channels, 1, rng);
}

Var TinyConv::logit(const Var& image) const
{
    Var x = ag::relu(c1_(image));
    x = ag::relu(c2_(x));
    x = ag::relu(c3_(x));
    return fc_(ag::mean_spatial(x));
}

double GateModel::probability(const geodata::ImageTile& tile) const
{
    const double z = backbone->logit(Var::constant(image_to_tensor(tile.pixels))).value()[0];
    return 1.0 / (1.0 + std::exp(-z));
}

nlohmann::json GateReport::to_json() const
{
    return {{"auc", auc},         {"precision", precision}, {"recall", recall}, {"f1", f1},
            {"n_train", n_train}, {"n_test", n_test},       {"loss_history", loss_history}};
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels)
{
    if (scores.size() != labels.size()) throw InvalidInput("roc_auc: score and label counts differ");
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over ties
    std::vector<double> rank(scores.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) rank[idx[k]] = r;
        i = j;
    }
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            ++pos;
            rank_sum += rank[i];
        } else {
            ++neg;
        }
    }
    if (pos == 0 || neg == 0) throw InvalidInput("roc_auc needs both classes");
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

namespace {

// Mean-free binary cross-entropy on a 1 x 1 logit: softplus(z) - y z.
Var bce_with_logit(const Var& z, double y)
{
    const double v = z.value()[0];
    const double loss = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))) - y * v;
    return ag::make_op(Tensor::scalar(loss), {z}, "bce", [y](Node& n) {
        const double s = 1.0 / (1.0 + std::exp(-n.inputs[0]->value[0]));
        n.inputs[0]->grad_buffer()[0] += n.grad[0] * (s - y);
    });
}

} // namespace

std::pair<GateModel, GateReport> train_gate(const std::vector<LabeledTile>& tiles, const GateConfig& cfg)
{
    cfg.validate();
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (tiles[i].label != 0 && tiles[i].label != 1) throw InvalidInput("gate labels must be 0 or 1");
        (tiles[i].label == 1 ? pos : neg).push_back(i);
    }
    if (pos.size() < 2 || neg.size() < 2)
        throw InvalidInput("gate training needs at least two tiles of each class");

    Rng rng(cfg.seed);
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::vector<std::size_t> train, test;
    for (const auto* cls : {&pos, &neg}) {
        const std::size_t n_test =
            std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(cfg.test_ratio * cls->size())), 1,
                                    cls->size() - 1);
        test.insert(test.end(), cls->begin(), cls->begin() + static_cast<long>(n_test));
        train.insert(train.end(), cls->begin() + static_cast<long>(n_test), cls->end());
    }

    auto net = std::make_shared<TinyConv>(cfg.channels, cfg.seed);
    training::Adam adam(net->params());
    std::vector<Tensor> images(tiles.size());
    for (std::size_t i : train) images[i] = image_to_tensor(tiles[i].tile.pixels);
    for (std::size_t i : test) images[i] = image_to_tensor(tiles[i].tile.pixels);

    GateReport rep;
    rep.n_train = train.size();
    rep.n_test = test.size();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(train.size(), b + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(e - b);
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t i = train[k];
                Var loss = bce_with_logit(net->logit(Var::constant(images[i])), tiles[i].label);
                if (!std::isfinite(loss.value()[0])) throw NumericalError("non-finite gate loss");
                ag::backward(ag::scale(loss, inv));
                epoch_loss += loss.value()[0];
            }
            adam.step(cfg.lr);
            net->params().zero_grad();
        }
        rep.loss_history.push_back(epoch_loss / static_cast<double>(train.size()));
    }

    GateModel model{net, cfg.threshold};
    std::vector<double> scores;
    std::vector<int> labels;
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i : test) {
        const double z = net->logit(Var::constant(images[i])).value()[0];
        const double p = 1.0 / (1.0 + std::exp(-z));
        scores.push_back(p);
        labels.push_back(tiles[i].label);
        const bool hit = p >= cfg.threshold;
        tp += (hit && tiles[i].label == 1) ? 1 : 0;
        fp += (hit && tiles[i].label == 0) ? 1 : 0;
        fn += (!hit && tiles[i].label == 1) ? 1 : 0;
    }
    rep.auc = roc_auc(scores, labels);
    rep.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    rep.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    rep.f1 = rep.precision + rep.recall > 0 ? 2 * rep.precision * rep.recall / (rep.precision + rep.recall) : 0.0;
    return {model, rep};
}

std::vector<GateDecision> gate_probabilities(const std::vector<std::string>& tile_ids,
                                             const std::vector<double>& probabilities, double threshold)
{
    if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("gate threshold must lie in [0, 1)");
    if (tile_ids.size() != probabilities.size()) throw InvalidInput("gate: id and probability counts differ");
    std::vector<GateDecision> out;
    for (std::size_t i = 0; i < tile_ids.size(); ++i)
        out.push_back({tile_ids[i], probabilities[i], probabilities[i] >= threshold});
    return out;
}

std::vector<GateDecision> gate_tiles(const std::vector<geodata::ImageTile>& tiles, const GateModel& model,
                                     double threshold)
{
    std::vector<std::string> ids;
    std::vector<double> probs;
    for (const auto& t : tiles) {
        ids.push_back(t.tile_id);
        probs.push_back(model.probability(t));
    }
    return gate_probabilities(ids, probs, threshold);
}

void save_gate(const std::filesystem::path& path, const GateModel& model, const GateConfig& cfg)
{
    ckpt::Checkpoint ck;
    ck.meta["kind"] = "gate";
    ck.meta["gate"] = to_json(cfg);
    ck.meta["threshold"] = model.threshold;
    ckpt::add_store(ck, "", model.backbone->params());
    ckpt::save(path, ck);
}

GateModel load_gate(const std::filesystem::path& path)
{
    const ckpt::Checkpoint ck = ckpt::load(path);
    if (ck.meta.value("kind", "") != "gate") throw ArtifactMismatch(path.string() + " is not a gate checkpoint");
    GateConfig cfg;
    try {
        cfg = gate_config_from_json(ck.meta["gate"]);
    } catch (const ConfigError& e) {
        throw ArtifactMismatch(std::string("gate record: ") + e.what());
    }
    auto net = std::make_shared<TinyConv>(cfg.channels, cfg.seed);
    ckpt::load_store(ck, "", net->params());
    return {net, ck.meta.value("threshold", cfg.threshold)};
}

// ---------------------------------------------------------------------------
// Region statistics

RegionStats region_stats(const std::vector<PredictedTile>& tiles, int connectivity)
{
    RegionStats out;
    for (const PredictedTile& t : tiles) {
        if (!t.resolution_m_per_px || !(*t.resolution_m_per_px > 0.0))
            throw InvalidInput("tile " + t.tile_id + " has no ground resolution");
        const double px_area = *t.resolution_m_per_px * *t.resolution_m_per_px;
        for (const Component& c : label_components(t.mask, connectivity).components) {
            RegionRecord r;
            r.tile_id = t.tile_id;
            r.area_px = c.area;
            r.area_m2 = static_cast<double>(c.area) * px_area;
            r.centroid_x = c.centroid_x;
            r.centroid_y = c.centroid_y;
            if (t.origin)
                r.centroid_lonlat =
                    geodata::pixel_to_lonlat(*t.origin, *t.resolution_m_per_px, c.centroid_x, c.centroid_y);
            out.regions.push_back(std::move(r));
            out.area_px += c.area;
        }
        out.area_m2 += static_cast<double>(t.mask.count()) * px_area;
    }
    out.count = out.regions.size();
    return out;
}

// ---------------------------------------------------------------------------
// Bands

std::size_t BandCurve::total_count() const
{
    std::size_t n = beyond.count;
    for (const auto& b : bands) n += b.count;
    return n;
}

double BandCurve::total_area_m2() const
{
    double a = beyond.area_m2;
    for (const auto& b : bands) a += b.area_m2;
    return a;
}

void BandCurve::write_csv(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(12);
    out << "band,count,area_m2\n";
    for (const auto& b : bands) out << b.name << ',' << b.count << ',' << b.area_m2 << '\n';
    out << beyond.name << ',' << beyond.count << ',' << beyond.area_m2 << '\n';
}

namespace {

const geodata::GeoOrigin& region_location(const RegionRecord& r)
{
    if (!r.centroid_lonlat) throw InvalidInput("region in tile " + r.tile_id + " has no geographic location");
    return *r.centroid_lonlat;
}

std::string format_edge(double m)
{
    if (m == std::floor(m) && m < 1e15) return std::to_string(static_cast<long long>(m));
    std::ostringstream s;
    s.precision(12);
    s << m;
    return s.str();
}

} // namespace

BandCurve band_distribution(const RegionStats& stats, const geodata::GeoOrigin& center,
                            const std::vector<double>& edges_m)
{
    if (edges_m.size() < 2) throw InvalidInput("radial bands need at least two edges");
    for (std::size_t i = 0; i < edges_m.size(); ++i) {
        if (!(edges_m[i] >= 0.0) || !std::isfinite(edges_m[i])) throw InvalidInput("band edges must be finite and >= 0");
        if (i > 0 && !(edges_m[i] > edges_m[i - 1])) throw InvalidInput("band edges must be strictly increasing");
    }
    BandCurve curve;
    for (std::size_t i = 0; i + 1 < edges_m.size(); ++i)
        curve.bands.push_back({format_edge(edges_m[i]) + "-" + format_edge(edges_m[i + 1]) + "m"});
    for (const RegionRecord& r : stats.regions) {
        const double d = geodata::haversine_m(center, region_location(r));
        BandRow* row = &curve.beyond;
        if (d >= edges_m.front() && d < edges_m.back()) {
            const auto it = std::upper_bound(edges_m.begin(), edges_m.end(), d);
            row = &curve.bands[static_cast<std::size_t>(it - edges_m.begin()) - 1];
        }
        ++row->count;
        row->area_m2 += r.area_m2;
    }
    return curve;
}

std::vector<Ring> parse_rings_geojson(const nlohmann::json& fc)
{
    using Pt = std::array<double, 2>;
    if (!fc.is_object() || fc.value("type", "") != "FeatureCollection" || !fc.contains("features"))
        throw InvalidInput("ring geometry must be a GeoJSON FeatureCollection");
    auto read_polygon = [](const nlohmann::json& coords) {
        std::vector<std::vector<Pt>> rings;
        for (const auto& ring : coords) {
            std::vector<Pt> pts;
            for (const auto& p : ring) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
            if (pts.size() < 3) throw InvalidInput("polygon ring with fewer than 3 points");
            rings.push_back(std::move(pts));
        }
        if (rings.empty()) throw InvalidInput("empty polygon");
        return rings;
    };
    std::vector<Ring> out;
    try {
        for (const auto& f : fc.at("features")) {
            Ring r;
            r.name = f.contains("properties") && f["properties"].is_object()
                         ? f["properties"].value("name", "ring" + std::to_string(out.size()))
                         : "ring" + std::to_string(out.size());
            const auto& g = f.at("geometry");
            const std::string type = g.at("type").get<std::string>();
            if (type == "Polygon") {
                r.polygons.push_back(read_polygon(g.at("coordinates")));
            } else if (type == "MultiPolygon") {
                for (const auto& poly : g.at("coordinates")) r.polygons.push_back(read_polygon(poly));
            } else {
                throw InvalidInput("ring feature '" + r.name + "' has unsupported geometry " + type);
            }
            out.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed ring GeoJSON: ") + e.what());
    }
    if (out.empty()) throw InvalidInput("ring GeoJSON holds no features");
    return out;
}

std::vector<Ring> read_rings_geojson(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    try {
        return parse_rings_geojson(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidInput(path.string() + ": " + e.what());
    }
}

namespace {

bool in_ring(const std::vector<std::array<double, 2>>& ring, double x, double y)
{
    bool inside = false;
    for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
        const double xi = ring[i][0], yi = ring[i][1], xj = ring[j][0], yj = ring[j][1];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
}

} // namespace

bool ring_contains(const Ring& ring, const geodata::GeoOrigin& p)
{
    for (const auto& poly : ring.polygons) {
        if (!in_ring(poly[0], p.lon, p.lat)) continue;
        bool in_hole = false;
        for (std::size_t h = 1; h < poly.size() && !in_hole; ++h) in_hole = in_ring(poly[h], p.lon, p.lat);
        if (!in_hole) return true;
    }
    return false;
}

BandCurve band_distribution(const RegionStats& stats, const std::vector<Ring>& rings)
{
    if (rings.empty()) throw InvalidInput("no ring geometries given");
    BandCurve curve;
    for (const Ring& r : rings) curve.bands.push_back({r.name});
    for (const RegionRecord& r : stats.regions) {
        const auto& p = region_location(r);
        BandRow* row = &curve.beyond;
        for (std::size_t i = 0; i < rings.size(); ++i)
            if (ring_contains(rings[i], p)) {
                row = &curve.bands[i];
                break;
            }
        ++row->count;
        row->area_m2 += r.area_m2;
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Trends

void TrendReport::write_csv(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(12);
    out << "city,year,count,area_m2,delta_count,delta_area_m2,rel_count,rel_area\n";
    for (const auto& r : rows)
        out << r.city << ',' << r.year << ',' << r.count << ',' << r.area_m2 << ',' << r.delta_count << ','
            << r.delta_area_m2 << ',' << r.rel_count << ',' << r.rel_area << '\n';
}

TrendReport year_trend(const std::vector<YearStat>& stats)
{
    std::map<std::string, std::map<int, YearStat>> by_city;
    for (const YearStat& s : stats) {
        auto& years = by_city[s.city];
        if (years.count(s.year)) throw InvalidInput("duplicate year " + std::to_string(s.year) + " for " + s.city);
        years[s.year] = s;
    }
    if (by_city.empty()) throw InvalidInput("year_trend needs at least one city");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto rel = [nan](double delta, double base) { return base == 0.0 ? nan : delta / base; };
    TrendReport rep;
    for (const auto& [city, years] : by_city) {
        if (years.size() < 2) throw InvalidInput("city " + city + " has a single year; a trend needs two or more");
        const YearStat* prev = nullptr;
        for (const auto& [year, s] : years) {
            TrendRow row{city, year, s.count, s.area_m2};
            if (prev) {
                row.delta_count = static_cast<double>(s.count) - static_cast<double>(prev->count);
                row.delta_area_m2 = s.area_m2 - prev->area_m2;
                row.rel_count = rel(row.delta_count, static_cast<double>(prev->count));
                row.rel_area = rel(row.delta_area_m2, prev->area_m2);
            }
            rep.rows.push_back(row);
            prev = &s;
        }
        const YearStat& first = years.begin()->second;
        const YearStat& last = years.rbegin()->second;
        rep.cities.push_back({city, first.year, last.year,
                              rel(static_cast<double>(last.count) - static_cast<double>(first.count),
                                  static_cast<double>(first.count)),
                              rel(last.area_m2 - first.area_m2, first.area_m2)});
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Plots

void write_bar_chart(const std::filesystem::path& path, const std::vector<double>& values, std::size_t height)
{
    constexpr std::size_t bar = 24, gap = 8, margin = 16;
    const std::size_t width = 2 * margin + std::max<std::size_t>(values.size(), 1) * (bar + gap);
    height = std::max<std::size_t>(height, 2 * margin + 1);
    RgbImage img(height, width, 255);
    double vmax = 0.0;
    for (double v : values)
        if (std::isfinite(v)) vmax = std::max(vmax, v);
    const std::size_t plot_h = height - 2 * margin;
    for (std::size_t x = margin / 2; x < width - margin / 2; ++x)
        for (int c = 0; c < 3; ++c) img.at(height - margin, x, c) = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::isfinite(values[i]) ? std::max(values[i], 0.0) : 0.0;
        const auto h = vmax > 0 ? static_cast<std::size_t>(std::lround(v / vmax * static_cast<double>(plot_h))) : 0;
        const std::size_t x0 = margin + i * (bar + gap);
        for (std::size_t y = height - margin - h; y < height - margin; ++y)
            for (std::size_t x = x0; x < x0 + bar; ++x) {
                img.at(y, x, 0) = 60;
                img.at(y, x, 1) = 110;
                img.at(y, x, 2) = 180;
            }
    }
    io::write_png_rgb(path, img);
}

} // namespace uvs::analytics
