#include "uvseg/evaluation.hpp"

#include "uvseg/components.hpp"
#include "uvseg/error.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace uvs::evaluation {

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* what)
{
    if (!a.same_dims(b))
        throw InvalidInput(std::string(what) + ": mask dimensions differ (" + std::to_string(a.height) + "x" +
                           std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                           std::to_string(b.width) + ")");
}

DetectionOutcome outcome_from_matches(std::size_t n_pred, std::size_t n_gt, std::vector<Match> matches)
{
    std::sort(matches.begin(), matches.end(),
              [](const Match& a, const Match& b) { return std::tie(a.pred_id, a.gt_id) < std::tie(b.pred_id, b.gt_id); });
    std::vector<char> pred_hit(n_pred, 0), gt_hit(n_gt, 0);
    for (const Match& m : matches) pred_hit[m.pred_id] = gt_hit[m.gt_id] = 1;
    DetectionOutcome o;
    o.tp_pred = static_cast<std::size_t>(std::count(pred_hit.begin(), pred_hit.end(), 1));
    o.tp = static_cast<std::size_t>(std::count(gt_hit.begin(), gt_hit.end(), 1));
    o.fp = n_pred - o.tp_pred;
    o.fn = n_gt - o.tp;
    o.matches = std::move(matches);
    return o;
}

} // namespace

DetectionOutcome& DetectionOutcome::operator+=(const DetectionOutcome& other)
{
    tp += other.tp;
    tp_pred += other.tp_pred;
    fp += other.fp;
    fn += other.fn;
    matches.insert(matches.end(), other.matches.begin(), other.matches.end());
    return *this;
}

DetectionOutcome match_detections(const std::vector<BinaryMask>& pred_regions,
                                  const std::vector<BinaryMask>& gt_regions, std::size_t min_overlap_px)
{
    const BinaryMask* ref = !pred_regions.empty() ? &pred_regions[0] : (!gt_regions.empty() ? &gt_regions[0] : nullptr);
    for (const auto& m : pred_regions) require_same_dims(*ref, m, "match_detections");
    for (const auto& m : gt_regions) require_same_dims(*ref, m, "match_detections");
    min_overlap_px = std::max<std::size_t>(min_overlap_px, 1);

    std::vector<Match> matches;
    for (std::size_t p = 0; p < pred_regions.size(); ++p)
        for (std::size_t g = 0; g < gt_regions.size(); ++g) {
            std::size_t overlap = 0;
            const auto& a = pred_regions[p].data;
            const auto& b = gt_regions[g].data;
            for (std::size_t i = 0; i < a.size(); ++i) overlap += (a[i] && b[i]) ? 1 : 0;
            if (overlap >= min_overlap_px) matches.push_back({p, g, overlap});
        }
    return outcome_from_matches(pred_regions.size(), gt_regions.size(), std::move(matches));
}

DetectionOutcome match_masks(const BinaryMask& pred, const BinaryMask& gt, int connectivity, std::size_t min_overlap_px)
{
    require_same_dims(pred, gt, "match_masks");
    min_overlap_px = std::max<std::size_t>(min_overlap_px, 1);
    const Labeling lp = label_components(pred, connectivity);
    const Labeling lg = label_components(gt, connectivity);
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> overlap;
    for (std::size_t i = 0; i < lp.labels.size(); ++i)
        if (lp.labels[i] > 0 && lg.labels[i] > 0)
            ++overlap[{static_cast<std::size_t>(lp.labels[i] - 1), static_cast<std::size_t>(lg.labels[i] - 1)}];
    std::vector<Match> matches;
    for (const auto& [key, n] : overlap)
        if (n >= min_overlap_px) matches.push_back({key.first, key.second, n});
    return outcome_from_matches(lp.components.size(), lg.components.size(), std::move(matches));
}

PRF detection_prf(const DetectionOutcome& o)
{
    PRF r;
    const std::size_t n_pred = o.tp_pred + o.fp, n_gt = o.tp + o.fn;
    if (n_pred == 0)
        r.precision_undefined = true;
    else
        r.precision = static_cast<double>(o.tp_pred) / static_cast<double>(n_pred);
    if (n_gt == 0)
        r.recall_undefined = true;
    else
        r.recall = static_cast<double>(o.tp) / static_cast<double>(n_gt);
    r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

IouResult mask_iou(const BinaryMask& pred, const BinaryMask& gt)
{
    require_same_dims(pred, gt, "mask_iou");
    IouResult r;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        r.intersection += (a && b) ? 1 : 0;
        r.union_px += (a || b) ? 1 : 0;
    }
    if (r.union_px == 0) {
        r.both_empty = true;
        r.iou = 1.0;
    } else {
        r.iou = static_cast<double>(r.intersection) / static_cast<double>(r.union_px);
    }
    return r;
}

double micro_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts)
{
    if (preds.size() != gts.size()) throw InvalidInput("micro_iou: prediction and ground-truth counts differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const IouResult r = mask_iou(preds[i], gts[i]);
        inter += r.intersection;
        uni += r.union_px;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MetricReport evaluate(const std::vector<EvalItem>& items, int connectivity, std::size_t min_overlap_px)
{
    MetricReport rep;
    std::size_t inter = 0, uni = 0;
    double macro = 0.0;
    for (const EvalItem& it : items) {
        const IouResult iou = mask_iou(it.pred, it.gt);
        const DetectionOutcome det = match_masks(it.pred, it.gt, connectivity, min_overlap_px);
        rep.tiles.push_back({it.tile_id, iou.intersection, iou.union_px, iou.iou, det.tp, det.tp_pred, det.fp, det.fn});
        inter += iou.intersection;
        uni += iou.union_px;
        macro += iou.iou;
        DetectionOutcome counts = det;
        counts.matches.clear();
        rep.detections += counts;
    }
    rep.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    rep.iou_macro = items.empty() ? 0.0 : macro / static_cast<double>(items.size());
    const PRF prf = detection_prf(rep.detections);
    rep.precision = prf.precision;
    rep.recall = prf.recall;
    rep.f1 = prf.f1;
    rep.precision_undefined = prf.precision_undefined;
    rep.recall_undefined = prf.recall_undefined;
    return rep;
}

nlohmann::json MetricReport::to_json() const
{
    nlohmann::json tiles_json = nlohmann::json::array();
    for (const auto& t : tiles)
        tiles_json.push_back({{"tile_id", t.tile_id}, {"intersection", t.intersection}, {"union", t.union_px},
                              {"iou", t.iou}, {"tp", t.tp}, {"tp_pred", t.tp_pred}, {"fp", t.fp}, {"fn", t.fn}});
    return {{"iou", iou},
            {"iou_macro", iou_macro},
            {"precision", precision},
            {"recall", recall},
            {"f1", f1},
            {"precision_undefined", precision_undefined},
            {"recall_undefined", recall_undefined},
            {"tp", detections.tp},
            {"tp_pred", detections.tp_pred},
            {"fp", detections.fp},
            {"fn", detections.fn},
            {"tiles", tiles_json}};
}

void MetricReport::write_csv(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.precision(10);
    out << "tile_id,intersection,union,iou,tp,tp_pred,fp,fn\n";
    for (const auto& t : tiles)
        out << t.tile_id << ',' << t.intersection << ',' << t.union_px << ',' << t.iou << ',' << t.tp << ','
            << t.tp_pred << ',' << t.fp << ',' << t.fn << '\n';
}

RatingStudy read_ratings_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open rating file " + path.string());
    RatingStudy study;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("method,", 0) == 0) continue;
        std::stringstream ss(line);
        std::string method, tile, rating;
        if (!std::getline(ss, method, ',') || !std::getline(ss, tile, ',') || !std::getline(ss, rating))
            throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": expected method,tile_id,rating");
        int value = 0;
        try {
            std::size_t used = 0;
            value = std::stoi(rating, &used);
            if (used != rating.size()) throw std::invalid_argument(rating);
        } catch (const std::exception&) {
            throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": rating '" + rating +
                               "' is not an integer");
        }
        study.ratings[method].push_back(value);
    }
    return study;
}

std::map<std::string, RatingSummary> aggregate_ratings(const RatingStudy& study)
{
    std::map<std::string, RatingSummary> out;
    for (const auto& [method, values] : study.ratings) {
        if (values.empty()) throw InvalidInput("method '" + method + "' has no ratings");
        RatingSummary s;
        long total = 0;
        for (int v : values) {
            if (v < 1 || v > 10)
                throw InvalidInput("rating " + std::to_string(v) + " for '" + method + "' is outside 1..10");
            ++s.histogram[static_cast<std::size_t>(v - 1)];
            total += v;
        }
        s.n = values.size();
        s.mean = static_cast<double>(total) / static_cast<double>(s.n);
        out.emplace(method, s);
    }
    return out;
}

} // namespace uvs::evaluation
