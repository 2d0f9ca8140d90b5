#pragma once

#include <cstdint>
#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/tensor.hpp"

namespace dvps {

/// Result of an assignment problem: permutation[row] is the column (query)
/// assigned to each row (reference slot or ground-truth track), and
/// total_cost is the row-ordered sum of the chosen cost entries.
struct Assignment {
  std::vector<int> permutation;
  double total_cost = 0.0;
};

/// Exact minimum-cost assignment of a square, finite cost matrix. Among
/// assignments of minimal (row-ordered floating point) total, the
/// lexicographically smallest permutation is returned.
Assignment hungarian(const Tensor& cost);

/// 1 - cosine similarity; zero vectors are treated as orthogonal to
/// everything. Range [0, 2], and 0 for a nonzero vector against itself.
double cosine_cost(std::span<const double> a, std::span<const double> b);

/// Aligns a per-frame query sequence into consistent slots: frame 1 passes
/// through unchanged, every later frame is reordered by Hungarian matching
/// on 1 - cosine of the previous aligned embeddings against the current
/// ones. Class logits and mask embeddings are carried along with their rows.
TrackedQuerySequence prematch_chain(const std::vector<FrameQueries>& frames);

struct MatchWeights {
  double lambda_class = 2.0;
  double lambda_mask = 5.0;
  double lambda_dice = 5.0;
  double no_object_weight = 0.1;  // class weight for unmatched queries
};

/// Ground-truth track restricted to a clip window. first_appearance_frame is
/// the smallest clip-local frame with a nonempty mask.
struct GroundTruthTrack {
  std::uint16_t track_id = 0;
  int class_id = 0;
  bool is_thing = true;
  int first_appearance_frame = 0;
  std::vector<std::vector<double>> masks;  // per clip frame, H*W, 0/1
};

/// Tracks of `video` visible anywhere in [begin, begin+length).
std::vector<GroundTruthTrack> clip_ground_truth(const PanopticVideo& video,
                                                int begin, int length);

/// Pairwise matching cost of one prediction row against one ground truth:
/// lambda_class * (-p(class)) + lambda_mask * mean BCE + lambda_dice * Dice.
double match_cost(const Tensor& class_logits, const Tensor& mask_logits, int row,
                  int gt_class, const std::vector<double>& gt_mask,
                  const MatchWeights& weights);

/// Per-frame decoded predictions of one stage over a clip.
struct ClipPredictions {
  std::vector<Tensor> class_logits;  // per frame [N, K+1]
  std::vector<Tensor> mask_logits;   // per frame [N, H*W]
};

/// Tracker-stage matching: each ground-truth track is matched on the frame
/// where it first appears, and the resulting assignment is reused for every
/// frame of the clip. Until half of training has elapsed the (frozen)
/// segmenter predictions drive the matching; afterwards the tracker's own.
Assignment match_tracker(const ClipPredictions& segmenter_preds,
                         const ClipPredictions& tracker_preds,
                         const std::vector<GroundTruthTrack>& tracks,
                         const MatchWeights& weights, int iter, int max_iter);

/// Refiner-stage matching: costs are summed over all frames of the video.
/// The source switches from tracker predictions to the refiner's own at half
/// of training.
Assignment match_refiner(const ClipPredictions& tracker_preds,
                         const ClipPredictions& refiner_preds,
                         const std::vector<GroundTruthTrack>& tracks,
                         const MatchWeights& weights, int iter, int max_iter);

}  // namespace dvps
