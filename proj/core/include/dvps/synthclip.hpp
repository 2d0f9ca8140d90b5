#pragma once

#include <cstdint>
#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/rng.hpp"

namespace dvps {

/// Configuration of one synthetic video: moving geometric things over
/// striped stuff backgrounds, with exact panoptic ground truth.
struct SceneConfig {
  int frames = 16;
  int height = 64;
  int width = 64;
  int things_min = 2;
  int things_max = 4;
  int stuff_regions = 2;
  double speed_min = 0.5;  // pixels per frame
  double speed_max = 2.0;
  double appear_prob = 0.0;     // chance a thing enters after frame 0
  double disappear_prob = 0.0;  // chance a thing leaves before the end
  double noise_sigma = 0.0;     // embedding-space noise of the stub
  int distractors = 2;          // extra "no object" queries per frame
  int thing_classes = 4;
  int stuff_classes = 3;
  int embed_dim = 64;      // D of stub query embeddings
  int mask_embed_dim = 32; // Dm of mask embeddings / pixel features
  std::uint64_t seed = 0;

  int num_classes() const { return thing_classes + stuff_classes; }
  void validate() const;
};

struct GeneratedVideo {
  VideoClip clip;
  PanopticVideo gt;
};

/// Deterministic in config.seed: things follow linear trajectories bouncing
/// off the borders, occlusion resolves by creation order (later on top),
/// stuff stripes fill the rest. Pixel features are built from a per-video
/// orthonormal segment basis so every ground-truth mask is exactly
/// representable by a mask embedding.
GeneratedVideo generate_clip(const SceneConfig& config);

/// Frozen-segmenter stand-in: every segment visible in a frame yields one
/// query (canonical embedding + Gaussian noise, exact class logits, exact
/// mask embedding), shuffled per frame, padded with distractor queries that
/// carry "no object" logits so the per-frame query count is constant.
///
/// The embedding layout is globally fixed (shared projection of mask basis
/// and class), so heads trained on one corpus transfer to any other.
std::vector<FrameQueries> segmenter_stub(const VideoClip& clip, const PanopticVideo& gt,
                                         const SceneConfig& config);

/// The stub's canonical embedding of one segment: used by tests to verify
/// recovery of the generator correspondence.
Tensor stub_canonical_embeddings(const PanopticVideo& gt, const SceneConfig& config);

}  // namespace dvps
