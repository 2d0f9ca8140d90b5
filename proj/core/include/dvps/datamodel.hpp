#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dvps/tensor.hpp"

namespace dvps {

/// Unordered per-frame object queries produced by the segmenter stage.
/// class_logits has K+1 columns; the last column is the "no object" bucket.
struct FrameQueries {
  Tensor embeddings;       // [N, D]
  Tensor class_logits;     // [N, K+1]
  Tensor mask_embeddings;  // [N, Dm]

  int query_count() const { return embeddings.extent(0); }
  void validate() const;
};

/// A clip of per-frame pixel feature maps; masks decode against these.
struct VideoClip {
  int frames = 0, height = 0, width = 0;
  std::vector<Tensor> pixel_features;  // per frame [Dm, H, W]

  void validate() const;
};

struct TrackInfo {
  int class_id = 0;
  bool is_thing = true;
};

/// Ground-truth or predicted panoptic labeling of one video: per frame an
/// integer id map (0 = void) plus the video's track table. Segment ids are
/// positive and stable across frames.
struct PanopticVideo {
  int height = 0, width = 0;
  std::vector<std::vector<std::uint16_t>> id_maps;  // per frame, H*W row-major
  std::map<std::uint16_t, TrackInfo> tracks;

  int frames() const { return static_cast<int>(id_maps.size()); }
  /// Throws DataError on ids missing from the track table, empty videos,
  /// or stuff classes split over several ids.
  void validate() const;
  /// Pixels of `id` in frame t as a 0/1 mask of length H*W.
  std::vector<double> mask_of(int frame, std::uint16_t id) const;
};

/// Which stage produced an aligned query sequence.
enum class QuerySource { kPrematched, kTracker, kRefiner };

/// Temporally aligned query sequences: slot n refers to the same object in
/// every frame. Carries the per-frame head inputs alongside the embeddings
/// so any stage's output can be decoded and matched uniformly.
struct TrackedQuerySequence {
  QuerySource source = QuerySource::kPrematched;
  std::vector<FrameQueries> frames;  // equal N across frames

  int frame_count() const { return static_cast<int>(frames.size()); }
  int query_count() const { return frames.empty() ? 0 : frames.front().query_count(); }
  /// Embeddings stacked into one [T, N, D] tensor.
  Tensor stacked_embeddings() const;
};

/// Mask decoding: logits[n,h,w] = <mask_embeddings[n], pixel_features[:,h,w]>.
/// Differentiable w.r.t. mask_embeddings; pixel features are constants.
/// Returns [N, H*W] (callers know H and W from the clip).
Tensor rasterize_masks(const Tensor& mask_embeddings, const Tensor& pixel_features);

struct FuseConfig {
  double object_threshold = 0.5;   // min object score to keep a query
  double mask_threshold = 0.5;     // mask probability cut
  double min_mask_fraction = 0.8;  // kept/original area required per query
};

/// Per-query identity used when fusing a frame: the stable segment id the
/// query receives if it wins pixels, and its class/thing flag.
struct QueryIdentity {
  std::uint16_t segment_id = 0;
  int class_id = 0;
  bool is_thing = true;
};

struct FusedFrame {
  std::vector<std::uint16_t> id_map;               // H*W
  std::map<std::uint16_t, TrackInfo> segments;     // segments present
};

/// Query-competition fusion of one frame. Each retained query (object score
/// >= object_threshold and argmax class != "no object") claims pixels where
/// score * mask probability is maximal and its own probability clears
/// mask_threshold; queries keeping less than min_mask_fraction of their
/// thresholded mask are dropped. Segments of one stuff class share one id.
FusedFrame panoptic_fuse(const Tensor& mask_logits, const Tensor& class_logits,
                         int height, int width, const FuseConfig& config,
                         const std::vector<QueryIdentity>& identities);

/// Object score and class argmax used by fusion and matching: the maximum
/// class probability excluding the "no object" bucket.
struct ObjectScore {
  int class_id = 0;
  double score = 0.0;
};
ObjectScore object_score(const Tensor& class_logits, int row);

/// Slot-indexed identities for fused stages: thing slots get id slot+1,
/// stuff segments get one id per class above the slot range.
std::vector<QueryIdentity> slot_identities(const Tensor& class_logits, int num_thing_classes);

/// Builds a PanopticVideo by fusing every frame of an aligned sequence
/// against clip features; slot and stuff ids are stable across frames.
PanopticVideo fuse_video(const std::vector<Tensor>& per_frame_mask_logits,
                         const std::vector<Tensor>& per_frame_class_logits,
                         int height, int width, const FuseConfig& config,
                         int num_thing_classes);

}  // namespace dvps
