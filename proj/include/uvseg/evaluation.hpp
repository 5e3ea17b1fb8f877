#pragma once

// Region-level detection scores, pixel IoU and human rating aggregation.

#include "uvseg/raster.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace uvs::evaluation {

struct Match {
    std::size_t pred_id = 0;
    std::size_t gt_id = 0;
    std::size_t overlap_px = 0;
    friend bool operator==(const Match&, const Match&) = default;
};

/// `tp` counts matched ground-truth regions, `tp_pred` counts predictions
/// overlapping some ground truth, so tp_pred + fp = #pred and tp + fn = #gt.
struct DetectionOutcome {
    std::size_t tp = 0;
    std::size_t tp_pred = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::vector<Match> matches; // sorted by (pred_id, gt_id)

    DetectionOutcome& operator+=(const DetectionOutcome& other);
};

/// A prediction is a true positive iff it shares at least `min_overlap_px`
/// pixels with some ground-truth region (default: any overlap).
DetectionOutcome match_detections(const std::vector<BinaryMask>& pred_regions,
                                  const std::vector<BinaryMask>& gt_regions, std::size_t min_overlap_px = 1);

/// Splits both masks into connected regions and matches them.
DetectionOutcome match_masks(const BinaryMask& pred, const BinaryMask& gt, int connectivity = 8,
                             std::size_t min_overlap_px = 1);

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_undefined = false; // no predictions
    bool recall_undefined = false;    // no ground truth
};

PRF detection_prf(const DetectionOutcome& outcome);

struct IouResult {
    double iou = 0.0;
    std::size_t intersection = 0;
    std::size_t union_px = 0;
    bool both_empty = false; // iou reported as 1
};

IouResult mask_iou(const BinaryMask& pred, const BinaryMask& gt);

struct TileMetric {
    std::string tile_id;
    std::size_t intersection = 0;
    std::size_t union_px = 0;
    double iou = 0.0;
    std::size_t tp = 0, tp_pred = 0, fp = 0, fn = 0;
};

struct MetricReport {
    double iou = 0.0; // micro: summed intersections over summed unions
    double iou_macro = 0.0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    bool precision_undefined = false, recall_undefined = false;
    DetectionOutcome detections;
    std::vector<TileMetric> tiles;

    nlohmann::json to_json() const;
    void write_csv(const std::filesystem::path& path) const;
};

struct EvalItem {
    std::string tile_id;
    BinaryMask pred;
    BinaryMask gt;
};

MetricReport evaluate(const std::vector<EvalItem>& items, int connectivity = 8, std::size_t min_overlap_px = 1);

/// Micro IoU over paired masks.
double micro_iou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts);

struct RatingStudy {
    std::map<std::string, std::vector<int>> ratings;
};

struct RatingSummary {
    std::array<std::size_t, 10> histogram{}; // bin k holds rating k + 1
    double mean = 0.0;
    std::size_t n = 0;
};

/// CSV with header "method,tile_id,rating".
RatingStudy read_ratings_csv(const std::filesystem::path& path);

std::map<std::string, RatingSummary> aggregate_ratings(const RatingStudy& study);

} // namespace uvs::evaluation
