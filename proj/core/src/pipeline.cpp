#include "dvps/pipeline.hpp"

#include <algorithm>

#include "dvps/common.hpp"
#include "dvps/matcher.hpp"

namespace dvps {

namespace {

Tensor resize_features_nearest(const Tensor& feat, int side) {
  const int dm = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
  if (side == h && side == w) return feat;
  Tensor out = Tensor::zeros({dm, side, side});
  auto vo = out.mutable_values();
  const auto vf = feat.values();
  const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t side2 = static_cast<std::size_t>(side) * static_cast<std::size_t>(side);
  for (int y = 0; y < side; ++y) {
    const int sy = std::min(h - 1, (y * h) / side);
    for (int x = 0; x < side; ++x) {
      const int sx = std::min(w - 1, (x * w) / side);
      const std::size_t src = static_cast<std::size_t>(sy) * w + sx;
      const std::size_t dst = static_cast<std::size_t>(y) * side + x;
      for (int c = 0; c < dm; ++c) {
        vo[static_cast<std::size_t>(c) * side2 + dst] = vf[static_cast<std::size_t>(c) * hw + src];
      }
    }
  }
  return out;
}

}  // namespace

TrackedQuerySequence run_stage(const VideoRecord& video, Stage stage,
                               const TrackerParams* tracker, const RefinerParams* refiner) {
  TrackedQuerySequence sequence = prematch_chain(video.queries);
  if (stage == Stage::kPrematch) return sequence;
  if (tracker == nullptr) throw DataError("run_stage: tracker parameters required");
  sequence = tracker_forward(sequence, *tracker);
  if (stage == Stage::kTracker) return sequence;
  if (refiner == nullptr) throw DataError("run_stage: refiner parameters required");
  return refiner_forward(sequence, *refiner);
}

PanopticVideo run_pipeline(const VideoRecord& video, Stage stage,
                           const TrackerParams* tracker, const RefinerParams* refiner,
                           const FuseConfig& fuse, int num_thing_classes,
                           const std::vector<int>& scales) {
  const TrackedQuerySequence sequence = run_stage(video, stage, tracker, refiner);
  const int t_len = sequence.frame_count();

  std::vector<int> sides = scales;
  if (sides.empty()) sides.push_back(video.clip.height);
  for (int s : sides) {
    if (s < 4) throw DataError("run_pipeline: scale side too small");
  }

  std::vector<ScalePrediction> per_scale;
  for (int side : sides) {
    ScalePrediction sp;
    sp.height = sp.width = side;
    for (int t = 0; t < t_len; ++t) {
      const Tensor features =
          resize_features_nearest(video.clip.pixel_features[static_cast<std::size_t>(t)], side);
      sp.mask_logits.push_back(
          rasterize_masks(sequence.frames[static_cast<std::size_t>(t)].mask_embeddings, features));
      sp.class_logits.push_back(sequence.frames[static_cast<std::size_t>(t)].class_logits);
    }
    per_scale.push_back(std::move(sp));
  }
  const ScalePrediction merged =
      per_scale.size() == 1 ? std::move(per_scale.front()) : multi_scale_merge(per_scale);

  return fuse_video(merged.mask_logits, merged.class_logits, merged.height, merged.width,
                    fuse, num_thing_classes);
}

}  // namespace dvps
