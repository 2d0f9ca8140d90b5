#pragma once

#include <string>
#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/synthclip.hpp"

namespace dvps {

/// One video of a dataset on disk: ground truth, pixel features, and the
/// frozen segmenter queries.
struct VideoRecord {
  std::string name;
  VideoClip clip;
  PanopticVideo gt;
  std::vector<FrameQueries> queries;
};

using Corpus = std::vector<VideoRecord>;

/// Writes <dir>/<name>.dvpsq, <dir>/<name>.dvpsf and the panoptic
/// annotation files for one video.
void save_video_record(const std::string& dir, const VideoRecord& record);
VideoRecord load_video_record(const std::string& dir, const std::string& name);

/// Generates `count` videos from per-video seeds derived from config.seed
/// and writes them plus a manifest.json listing the videos. Videos are
/// independent, so the result is byte-identical for any thread count.
void generate_dataset(const std::string& dir, const SceneConfig& config, int count,
                      int threads = 1);

/// Loads every video listed in <dir>/manifest.json.
Corpus load_dataset(const std::string& dir);
std::vector<std::string> dataset_video_names(const std::string& dir);

}  // namespace dvps
