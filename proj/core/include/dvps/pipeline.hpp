#pragma once

#include <vector>

#include "dvps/corpus.hpp"
#include "dvps/datamodel.hpp"
#include "dvps/metrics.hpp"
#include "dvps/refiner.hpp"
#include "dvps/tracker.hpp"

namespace dvps {

enum class Stage { kPrematch, kTracker, kRefiner };

/// Runs the pipeline on one video up to `stage` and fuses the result into a
/// panoptic prediction. tracker/refiner params may be null for earlier
/// stages. `scales` lists square grid sides for multi-scale inference; the
/// first entry is the output resolution, and an empty list means the native
/// resolution only.
PanopticVideo run_pipeline(const VideoRecord& video, Stage stage,
                           const TrackerParams* tracker, const RefinerParams* refiner,
                           const FuseConfig& fuse, int num_thing_classes,
                           const std::vector<int>& scales = {});

/// The aligned sequence the requested stage produces (no fusion).
TrackedQuerySequence run_stage(const VideoRecord& video, Stage stage,
                               const TrackerParams* tracker, const RefinerParams* refiner);

}  // namespace dvps
