#pragma once

#include <map>
#include <string>
#include <vector>

#include "ctreason/box.hpp"
#include "ctreason/image.hpp"

namespace ctreason::metrics {

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
double dice_score(const Mask& pred, const Mask& gt);

/// Physical size of one pixel along rows and columns.
struct Spacing {
    double row = 1.0;
    double col = 1.0;
};

/// Foreground pixels with a 4-neighbour outside the foreground (image border counts as outside).
std::vector<std::pair<int, int>> surface_pixels(const Mask& m);

/// 95th percentile (linear interpolation) of the pooled directed surface
/// distances A->B and B->A. Both empty -> 0; exactly one empty -> image
/// diagonal in spacing units (see hd95_sentinel).
double hd95(const Mask& pred, const Mask& gt, Spacing spacing = {});
double hd95_sentinel(int height, int width, Spacing spacing = {});

/// Linear-interpolated percentile of unsorted values, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Average precision of pooled scored boxes against per-image ground truth.
/// Predictions are ranked by score (ties keep image-then-input order) and
/// greedily matched to the highest-IoU unmatched GT with IoU >= iou_thr;
/// AP is the area under the all-point interpolated precision envelope.
/// No GT: 1 when there are also no predictions, otherwise 0.
double map_at(const std::vector<std::vector<BoxHypothesis>>& preds, const std::vector<std::vector<Box>>& gts,
              double iou_thr = 0.1);

enum class Connectivity { four = 4, eight = 8 };

/// Component labels (0 background, 1..n in raster order of first pixel).
Grid<int> label_components(const Mask& m, Connectivity conn, int* count = nullptr);

enum class BoxConfidence { area, maxprob };

/// Connected components of (prob >= theta), one normalised tight box each,
/// confidence = component area / foreground area or max probability inside it.
std::vector<BoxHypothesis> mask_to_boxes(const ProbGrid& prob, double theta, BoxConfidence mode,
                                         Connectivity conn = Connectivity::four);

/// Tight inclusive bounding rectangle of the foreground. Throws EmptyMaskError.
PixelRegion tight_region(const Mask& m);

struct EvalReport {
    std::map<std::string, double> per_class_dice;
    double mean_dice = 0;
    std::map<std::string, double> per_class_hd95;
    double mean_hd95 = 0;
    std::map<std::string, double> per_class_map;
    double mean_map = 0;
    std::map<std::string, std::string> conventions;
    std::map<std::string, double> extras;  ///< e.g. sentinel counts, paired round statistics

    std::string to_json() const;
    /// Fixed-width table: one column per organ plus Mean, rows Dice / HD95 / mAP@0.1 (percent for Dice/mAP).
    std::string to_table() const;
};

/// Accumulates per-class samples and fills the report means.
class ReportBuilder {
public:
    void add_dice(const std::string& organ, double v) { dice_[organ].push_back(v); }
    void add_hd95(const std::string& organ, double v) { hd_[organ].push_back(v); }
    void add_detection(const std::string& organ, std::vector<BoxHypothesis> preds, std::vector<Box> gts);
    EvalReport build(double iou_thr = 0.1) const;

private:
    std::map<std::string, std::vector<double>> dice_, hd_;
    std::map<std::string, std::vector<std::vector<BoxHypothesis>>> det_preds_;
    std::map<std::string, std::vector<std::vector<Box>>> det_gts_;
};

}  // namespace ctreason::metrics
