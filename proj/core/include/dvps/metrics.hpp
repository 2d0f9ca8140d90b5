#pragma once

#include <map>
#include <string>
#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/tensor.hpp"

namespace dvps {

struct MetricReport {
  std::map<int, double> vpq_per_k;  // window length -> value in [0,100]
  double vpq_mean = 0.0;
  double stq = 0.0;                     // [0,1]
  double association_accuracy = 0.0;    // [0,1]

  struct VideoRow {
    std::string name;
    std::map<int, double> vpq_per_k;
    double vpq_mean = 0.0;
    double stq = 0.0;
    double association_accuracy = 0.0;
  };
  std::vector<VideoRow> per_video;
};

/// Panoptic quality over k-frame tubes: windows slide with stride 1, windows
/// shorter than k at the video end are skipped; per window the PQ formula is
/// averaged over classes present, then the result is averaged over windows,
/// times 100. Tube pairs of equal class with IoU > 0.5 count as TP. Pixels
/// void in the ground truth are excluded from all IoU terms.
double vpq_k(const PanopticVideo& pred, const PanopticVideo& gt, int k);

/// Arithmetic mean over exactly k in {1, 2, 4, 6}.
double vpq_mean(const std::map<int, double>& per_k);

/// Geometric mean of association quality (ground-truth thing tracks,
/// overlap-weighted tube IoU against predicted thing tubes, class-agnostic)
/// and segmentation quality (per-class semantic IoU over the whole video).
double stq(const PanopticVideo& pred, const PanopticVideo& gt);

/// Fraction of (ground-truth track, frame) pairs whose plurality-overlap
/// prediction id at that frame equals the track's most frequent prediction
/// id over the video. Ties resolve to the smaller id.
double association_accuracy(const PanopticVideo& pred, const PanopticVideo& gt);

/// One stage's decoded prediction at a given resolution.
struct ScalePrediction {
  int height = 0, width = 0;
  std::vector<Tensor> mask_logits;   // per frame [N, H*W]
  std::vector<Tensor> class_logits;  // per frame [N, K+1]
};

/// Averages predictions over scales: mask logits are bilinearly resampled to
/// the first entry's resolution and averaged, class logits averaged.
ScalePrediction multi_scale_merge(const std::vector<ScalePrediction>& predictions);

/// Bilinear resample of per-row H*W grids to a new resolution.
Tensor bilinear_resize_rows(const Tensor& rows, int src_h, int src_w, int dst_h, int dst_w);

/// Full evaluation over matched (name, pred, gt) video pairs.
MetricReport evaluate_videos(const std::vector<std::string>& names,
                             const std::vector<PanopticVideo>& preds,
                             const std::vector<PanopticVideo>& gts);

/// Tables print VPQ values truncated to one decimal (the reporting
/// convention the per-k means are checked against).
double round_table_value(double v);

/// Plain-text table in column order VPQ, VPQ1, VPQ2, VPQ4, VPQ6, STQ.
std::string format_report_table(const MetricReport& report);
std::string report_to_json(const MetricReport& report);

}  // namespace dvps
