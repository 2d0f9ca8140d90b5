#pragma once

#include <cstdint>
#include <vector>

#include "dvps/corpus.hpp"
#include "dvps/io.hpp"
#include "dvps/matcher.hpp"
#include "dvps/refiner.hpp"
#include "dvps/tensor.hpp"
#include "dvps/tracker.hpp"

namespace dvps {

struct TrainConfig {
  int max_iter = 2000;
  int batch_size = 4;
  int clip_length = 5;  // 21 for the refiner stage
  double learning_rate = 1e-3;
  double decay_factor = 0.1;
  double decay_point = 0.7;  // fraction of max_iter at which lr decays
  MatchWeights weights;
  double weight_decay = 0.05;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 0;
  // Multi-resolution augmentation: per clip the grid is resampled to a
  // random square side in [scale_min, scale_max], then optionally square
  // cropped to crop x crop. Zero disables.
  int scale_min = 0;
  int scale_max = 0;
  int crop = 0;

  void validate() const;
  double lr_at(int iter) const;
};

/// Adam with decoupled weight decay. Step order follows ParamSet
/// registration order, so updates are deterministic.
class AdamW {
 public:
  explicit AdamW(ParamSet params, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8, double weight_decay = 0.05);
  /// Applies accumulated gradients. lr = 0 leaves parameters bit-identical.
  void step(double lr);
  /// Scales all gradients so their global norm is at most max_norm.
  double clip_gradients(double max_norm);
  ParamSet& params() { return params_; }

  long step_count() const { return step_count_; }
  void set_step_count(long n) { step_count_ = n; }
  std::vector<std::vector<double>>& moments1() { return m_; }
  std::vector<std::vector<double>>& moments2() { return v_; }
  const std::vector<std::vector<double>>& moments1() const { return m_; }
  const std::vector<std::vector<double>>& moments2() const { return v_; }

 private:
  ParamSet params_;
  double beta1_, beta2_, eps_, weight_decay_;
  long step_count_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Mutable loop state: the optimizer, the sampling/augmentation streams and
/// the next iteration index. Persisting it lets an interrupted run resume
/// and land on bit-identical parameters (the schedule still follows the
/// original config's max_iter).
class TrainLoop {
 public:
  TrainLoop(ParamSet params, const TrainConfig& config);
  AdamW& optimizer() { return optimizer_; }
  Rng& sample_rng() { return sample_rng_; }
  Rng& aug_rng() { return aug_rng_; }

  int next_iter = 0;

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  AdamW optimizer_;
  Rng sample_rng_;
  Rng aug_rng_;
};

/// Per-frame supervision under a fixed assignment: lambda_class * CE plus
/// mask BCE and Dice for matched pairs; unmatched queries get the
/// down-weighted "no object" CE. Differentiable w.r.t. the prediction path.
Tensor frame_loss(const Tensor& class_logits, const Tensor& mask_logits,
                  const std::vector<GroundTruthTrack>& tracks,
                  const Assignment& assignment, int frame, const MatchWeights& weights);

/// Tracker objective: frame_loss summed over every frame of the clip with
/// one assignment shared across frames.
Tensor loss_tracker(const std::vector<Tensor>& class_logits,
                    const std::vector<Tensor>& mask_logits,
                    const std::vector<GroundTruthTrack>& tracks,
                    const Assignment& assignment, const MatchWeights& weights);

/// Refiner objective: the class term counts once per track against the
/// video-level logits; mask terms sum over all frames.
Tensor loss_refiner(const Tensor& video_class_logits,
                    const std::vector<Tensor>& mask_logits,
                    const std::vector<GroundTruthTrack>& tracks,
                    const Assignment& assignment, const MatchWeights& weights);

struct TrainResult {
  std::vector<LossCurvePoint> curve;
};

/// Trains the tracker on clips of config.clip_length frames. The segmenter
/// queries are constants; matching follows the half-training source switch.
/// Fully deterministic in config.seed. A non-null `loop` resumes from its
/// state; stop_iter < 0 runs to config.max_iter.
TrainResult train_tracker(TrackerParams& params, const Corpus& corpus,
                          const TrainConfig& config, TrainLoop* loop = nullptr,
                          int stop_iter = -1);

/// Trains the refiner against a frozen tracker. Tracker outputs are
/// detached; its parameters receive no gradient and are never touched.
TrainResult train_refiner(RefinerParams& params, const TrackerParams& frozen_tracker,
                          const Corpus& corpus, const TrainConfig& config,
                          TrainLoop* loop = nullptr, int stop_iter = -1);

/// Decodes a stage's aligned sequence into per-frame class logits and mask
/// logits against the clip's pixel features (differentiable when the
/// sequence tensors are on the tape).
ClipPredictions decode_predictions(const TrackedQuerySequence& sequence,
                                   const std::vector<Tensor>& pixel_features);

}  // namespace dvps
