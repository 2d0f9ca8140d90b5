#include "dvps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "dvps/common.hpp"

namespace dvps {

namespace {

using json = nlohmann::json;

void check_extents(const PanopticVideo& pred, const PanopticVideo& gt) {
  if (pred.frames() != gt.frames() || pred.height != gt.height || pred.width != gt.width) {
    throw DataError("metrics: prediction and ground truth extents differ");
  }
}

struct TubeKey {
  std::uint16_t gt_id, pred_id;
  bool operator<(const TubeKey& o) const {
    return gt_id != o.gt_id ? gt_id < o.gt_id : pred_id < o.pred_id;
  }
};

/// Per-window PQ averaged over the classes present in that window.
double window_pq(const PanopticVideo& pred, const PanopticVideo& gt, int begin, int k) {
  const std::size_t hw = static_cast<std::size_t>(gt.height) * static_cast<std::size_t>(gt.width);

  // Tube sizes and pairwise intersections over the window; ground-truth void
  // pixels do not contribute anywhere.
  std::map<std::uint16_t, std::size_t> gt_size, pred_size;
  std::map<TubeKey, std::size_t> inter;
  for (int t = begin; t < begin + k; ++t) {
    const auto& gm = gt.id_maps[static_cast<std::size_t>(t)];
    const auto& pm = pred.id_maps[static_cast<std::size_t>(t)];
    for (std::size_t px = 0; px < hw; ++px) {
      const std::uint16_t g = gm[px];
      if (g == 0) continue;
      ++gt_size[g];
      const std::uint16_t p = pm[px];
      if (p == 0) continue;
      ++pred_size[p];
      ++inter[TubeKey{g, p}];
    }
  }

  // Matching: same class, IoU > 0.5 (at most one pred per gt follows).
  std::map<int, double> iou_sum;
  std::map<int, int> tp, fp, fn;
  std::set<std::uint16_t> matched_pred;
  for (const auto& [g, gsize] : gt_size) {
    const int g_class = gt.tracks.at(g).class_id;
    bool found = false;
    for (const auto& [key, overlap] : inter) {
      if (key.gt_id != g) continue;
      const auto pit = pred.tracks.find(key.pred_id);
      if (pit == pred.tracks.end() || pit->second.class_id != g_class) continue;
      const std::size_t psize = pred_size[key.pred_id];
      const double iou = static_cast<double>(overlap) /
                         static_cast<double>(gsize + psize - overlap);
      if (iou > 0.5) {
        iou_sum[g_class] += iou;
        ++tp[g_class];
        matched_pred.insert(key.pred_id);
        found = true;
        break;
      }
    }
    if (!found) ++fn[g_class];
  }
  for (const auto& [p, psize] : pred_size) {
    if (matched_pred.count(p)) continue;
    ++fp[pred.tracks.at(p).class_id];
  }

  std::set<int> classes;
  for (const auto& [c, v] : tp) classes.insert(c);
  for (const auto& [c, v] : fp) classes.insert(c);
  for (const auto& [c, v] : fn) classes.insert(c);
  if (classes.empty()) return 1.0;  // window with no content on either side

  double total = 0.0;
  for (int c : classes) {
    const double denom = tp[c] + 0.5 * fp[c] + 0.5 * fn[c];
    total += denom > 0.0 ? iou_sum[c] / denom : 0.0;
  }
  return total / static_cast<double>(classes.size());
}

}  // namespace

double vpq_k(const PanopticVideo& pred, const PanopticVideo& gt, int k) {
  check_extents(pred, gt);
  if (k < 1) throw std::invalid_argument("vpq_k: k must be >= 1");
  const int windows = gt.frames() - k + 1;
  if (windows <= 0) return 0.0;  // video shorter than the window
  double total = 0.0;
  for (int begin = 0; begin < windows; ++begin) total += window_pq(pred, gt, begin, k);
  return 100.0 * total / static_cast<double>(windows);
}

double vpq_mean(const std::map<int, double>& per_k) {
  static const int required[] = {1, 2, 4, 6};
  double total = 0.0;
  for (int k : required) {
    const auto it = per_k.find(k);
    if (it == per_k.end()) {
      throw std::invalid_argument("vpq_mean: missing k=" + std::to_string(k));
    }
    total += it->second;
  }
  if (per_k.size() != 4) throw std::invalid_argument("vpq_mean: unexpected extra k values");
  return total / 4.0;
}

double stq(const PanopticVideo& pred, const PanopticVideo& gt) {
  check_extents(pred, gt);
  const std::size_t hw = static_cast<std::size_t>(gt.height) * static_cast<std::size_t>(gt.width);

  // Segmentation quality: semantic IoU per class over the whole video,
  // ground-truth void excluded.
  std::map<int, std::size_t> sem_inter, sem_gt, sem_pred;
  // Association quality: intersections of ground-truth thing tubes with
  // predicted thing tubes.
  std::map<std::uint16_t, std::size_t> gt_tube, pred_tube;
  std::map<TubeKey, std::size_t> tube_inter;

  for (int t = 0; t < gt.frames(); ++t) {
    const auto& gm = gt.id_maps[static_cast<std::size_t>(t)];
    const auto& pm = pred.id_maps[static_cast<std::size_t>(t)];
    for (std::size_t px = 0; px < hw; ++px) {
      const std::uint16_t g = gm[px];
      if (g == 0) continue;
      const TrackInfo& gi = gt.tracks.at(g);
      ++sem_gt[gi.class_id];
      if (gi.is_thing) ++gt_tube[g];

      const std::uint16_t p = pm[px];
      if (p == 0) continue;
      const TrackInfo& pi = pred.tracks.at(p);
      ++sem_pred[pi.class_id];
      if (pi.class_id == gi.class_id) ++sem_inter[gi.class_id];
      if (pi.is_thing) {
        ++pred_tube[p];
        if (gi.is_thing) ++tube_inter[TubeKey{g, p}];
      }
    }
  }

  std::set<int> classes;
  for (const auto& [c, v] : sem_gt) classes.insert(c);
  for (const auto& [c, v] : sem_pred) classes.insert(c);
  double sq = 0.0;
  if (!classes.empty()) {
    for (int c : classes) {
      const double uni = static_cast<double>(sem_gt[c] + sem_pred[c] - sem_inter[c]);
      sq += uni > 0.0 ? static_cast<double>(sem_inter[c]) / uni : 0.0;
    }
    sq /= static_cast<double>(classes.size());
  }

  double aq = 1.0;  // vacuously perfect when the ground truth has no things
  if (!gt_tube.empty()) {
    aq = 0.0;
    for (const auto& [g, gsize] : gt_tube) {
      double track_score = 0.0;
      for (const auto& [key, overlap] : tube_inter) {
        if (key.gt_id != g) continue;
        const double iou = static_cast<double>(overlap) /
                           static_cast<double>(gsize + pred_tube[key.pred_id] - overlap);
        track_score += static_cast<double>(overlap) * iou;
      }
      aq += track_score / static_cast<double>(gsize);
    }
    aq /= static_cast<double>(gt_tube.size());
  }

  return std::sqrt(aq * sq);
}

namespace {

struct AssocCounts {
  std::size_t pairs = 0, correct = 0;
};

AssocCounts association_counts(const PanopticVideo& pred, const PanopticVideo& gt) {
  check_extents(pred, gt);
  const std::size_t hw = static_cast<std::size_t>(gt.height) * static_cast<std::size_t>(gt.width);

  // assigned[g] = per visible frame, the prediction id covering the
  // plurality of g's pixels (0 when the plurality is void).
  std::map<std::uint16_t, std::vector<std::uint16_t>> assigned;
  for (int t = 0; t < gt.frames(); ++t) {
    const auto& gm = gt.id_maps[static_cast<std::size_t>(t)];
    const auto& pm = pred.id_maps[static_cast<std::size_t>(t)];
    std::map<std::uint16_t, std::map<std::uint16_t, std::size_t>> overlap;
    for (std::size_t px = 0; px < hw; ++px) {
      if (gm[px] == 0) continue;
      ++overlap[gm[px]][pm[px]];
    }
    for (const auto& [g, counts] : overlap) {
      std::uint16_t best_id = 0;
      std::size_t best_count = 0;
      for (const auto& [p, count] : counts) {  // ascending ids: ties keep the smaller
        if (count > best_count) {
          best_count = count;
          best_id = p;
        }
      }
      assigned[g].push_back(best_id);
    }
  }

  AssocCounts out;
  for (const auto& [g, frames] : assigned) {
    std::map<std::uint16_t, std::size_t> votes;
    for (std::uint16_t p : frames) {
      if (p != 0) ++votes[p];
    }
    std::uint16_t global_id = 0;
    std::size_t best = 0;
    for (const auto& [p, count] : votes) {
      if (count > best) {
        best = count;
        global_id = p;
      }
    }
    for (std::uint16_t p : frames) {
      ++out.pairs;
      if (p != 0 && p == global_id) ++out.correct;
    }
  }
  return out;
}

}  // namespace

double association_accuracy(const PanopticVideo& pred, const PanopticVideo& gt) {
  const AssocCounts c = association_counts(pred, gt);
  return c.pairs > 0 ? static_cast<double>(c.correct) / static_cast<double>(c.pairs) : 0.0;
}

Tensor bilinear_resize_rows(const Tensor& rows, int src_h, int src_w, int dst_h, int dst_w) {
  if (rows.rank() != 2 || rows.extent(1) != src_h * src_w) {
    throw std::invalid_argument("bilinear_resize_rows: extent mismatch");
  }
  const int n = rows.extent(0);
  if (src_h == dst_h && src_w == dst_w) return rows;
  Tensor out = Tensor::zeros({n, dst_h * dst_w});
  auto vo = out.mutable_values();
  const auto vi = rows.values();
  const double sy = static_cast<double>(src_h) / dst_h;
  const double sx = static_cast<double>(src_w) / dst_w;
  for (int y = 0; y < dst_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(src_h - 1, static_cast<int>(fy));
    const int y1 = std::min(src_h - 1, y0 + 1);
    const double wy = fy - y0;
    for (int x = 0; x < dst_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(src_w - 1, static_cast<int>(fx));
      const int x1 = std::min(src_w - 1, x0 + 1);
      const double wx = fx - x0;
      for (int r = 0; r < n; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * src_h * src_w;
        const double v00 = vi[base + static_cast<std::size_t>(y0) * src_w + x0];
        const double v01 = vi[base + static_cast<std::size_t>(y0) * src_w + x1];
        const double v10 = vi[base + static_cast<std::size_t>(y1) * src_w + x0];
        const double v11 = vi[base + static_cast<std::size_t>(y1) * src_w + x1];
        vo[static_cast<std::size_t>(r) * dst_h * dst_w + static_cast<std::size_t>(y) * dst_w + x] =
            (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

ScalePrediction multi_scale_merge(const std::vector<ScalePrediction>& predictions) {
  if (predictions.empty()) throw std::invalid_argument("multi_scale_merge: no scales");
  const ScalePrediction& ref = predictions.front();
  const int frames = static_cast<int>(ref.mask_logits.size());
  const int n = frames > 0 ? ref.mask_logits.front().extent(0) : 0;
  for (const ScalePrediction& p : predictions) {
    if (static_cast<int>(p.mask_logits.size()) != frames ||
        p.class_logits.size() != p.mask_logits.size()) {
      throw std::invalid_argument("multi_scale_merge: frame counts differ across scales");
    }
    for (int t = 0; t < frames; ++t) {
      if (p.mask_logits[static_cast<std::size_t>(t)].extent(0) != n ||
          p.class_logits[static_cast<std::size_t>(t)].shape() !=
              ref.class_logits[static_cast<std::size_t>(t)].shape()) {
        throw std::invalid_argument("multi_scale_merge: query counts differ across scales");
      }
    }
  }

  ScalePrediction out;
  out.height = ref.height;
  out.width = ref.width;
  const double inv = 1.0 / static_cast<double>(predictions.size());
  for (int t = 0; t < frames; ++t) {
    Tensor mask_sum = Tensor::zeros({n, ref.height * ref.width});
    Tensor class_sum = Tensor::zeros(ref.class_logits[static_cast<std::size_t>(t)].shape());
    for (const ScalePrediction& p : predictions) {
      const Tensor resized = bilinear_resize_rows(p.mask_logits[static_cast<std::size_t>(t)],
                                                  p.height, p.width, ref.height, ref.width);
      mask_sum = add(mask_sum, resized);
      class_sum = add(class_sum, p.class_logits[static_cast<std::size_t>(t)]);
    }
    out.mask_logits.push_back(scale(mask_sum, inv));
    out.class_logits.push_back(scale(class_sum, inv));
  }
  return out;
}

MetricReport evaluate_videos(const std::vector<std::string>& names,
                             const std::vector<PanopticVideo>& preds,
                             const std::vector<PanopticVideo>& gts) {
  if (names.size() != preds.size() || names.size() != gts.size() || names.empty()) {
    throw std::invalid_argument("evaluate_videos: mismatched video lists");
  }
  static const int ks[] = {1, 2, 4, 6};

  MetricReport report;
  // Corpus VPQ averages over all windows of all videos, so accumulate
  // window sums and counts per k.
  std::map<int, double> window_sum;
  std::map<int, long> window_count;
  double stq_sum = 0.0;
  std::size_t gt_pairs_total = 0, gt_pairs_correct = 0;

  for (std::size_t v = 0; v < names.size(); ++v) {
    const PanopticVideo& pred = preds[v];
    const PanopticVideo& gt = gts[v];
    MetricReport::VideoRow row;
    row.name = names[v];
    for (int k : ks) {
      row.vpq_per_k[k] = vpq_k(pred, gt, k);
      const int windows = std::max(0, gt.frames() - k + 1);
      window_sum[k] += row.vpq_per_k[k] * windows / 100.0;
      window_count[k] += windows;
    }
    row.vpq_mean = vpq_mean(row.vpq_per_k);
    row.stq = stq(pred, gt);
    const AssocCounts counts = association_counts(pred, gt);
    row.association_accuracy =
        counts.pairs > 0 ? static_cast<double>(counts.correct) / static_cast<double>(counts.pairs)
                         : 0.0;
    stq_sum += row.stq;
    gt_pairs_total += counts.pairs;
    gt_pairs_correct += counts.correct;
    report.per_video.push_back(std::move(row));
  }

  for (int k : ks) {
    report.vpq_per_k[k] = window_count[k] > 0
                              ? 100.0 * window_sum[k] / static_cast<double>(window_count[k])
                              : 0.0;
  }
  report.vpq_mean = vpq_mean(report.vpq_per_k);
  report.stq = stq_sum / static_cast<double>(names.size());
  report.association_accuracy =
      gt_pairs_total > 0 ? static_cast<double>(gt_pairs_correct) / static_cast<double>(gt_pairs_total)
                         : 0.0;
  return report;
}

double round_table_value(double v) { return std::floor(v * 10.0) / 10.0; }

namespace {

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", round_table_value(v));
  return buf;
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void append_row(std::string& out, const std::string& name,
                const std::map<int, double>& per_k, double mean, double stq_value) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %6s %6s %6s %6s %6s %6s\n", name.c_str(),
                fmt1(mean).c_str(), fmt1(per_k.at(1)).c_str(), fmt1(per_k.at(2)).c_str(),
                fmt1(per_k.at(4)).c_str(), fmt1(per_k.at(6)).c_str(), fmt2(stq_value).c_str());
  out += buf;
}

}  // namespace

std::string format_report_table(const MetricReport& report) {
  std::string out;
  char header[160];
  std::snprintf(header, sizeof header, "%-16s %6s %6s %6s %6s %6s %6s\n", "video", "VPQ",
                "VPQ1", "VPQ2", "VPQ4", "VPQ6", "STQ");
  out += header;
  for (const auto& row : report.per_video) {
    append_row(out, row.name, row.vpq_per_k, row.vpq_mean, row.stq);
  }
  append_row(out, "all", report.vpq_per_k, report.vpq_mean, report.stq);
  return out;
}

std::string report_to_json(const MetricReport& report) {
  json j;
  j["vpq"] = report.vpq_mean;
  for (const auto& [k, v] : report.vpq_per_k) j["vpq" + std::to_string(k)] = v;
  j["stq"] = report.stq;
  j["association_accuracy"] = report.association_accuracy;
  json rows = json::array();
  for (const auto& row : report.per_video) {
    json r;
    r["name"] = row.name;
    r["vpq"] = row.vpq_mean;
    for (const auto& [k, v] : row.vpq_per_k) r["vpq" + std::to_string(k)] = v;
    r["stq"] = row.stq;
    r["association_accuracy"] = row.association_accuracy;
    rows.push_back(std::move(r));
  }
  j["videos"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace dvps
