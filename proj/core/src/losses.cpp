#include "dvps/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>

#include "dvps/common.hpp"

namespace dvps {

void TrainConfig::validate() const {
  if (max_iter < 0) throw DataError("TrainConfig: max_iter must be >= 0");
  if (batch_size < 1) throw DataError("TrainConfig: batch_size must be >= 1");
  if (clip_length < 1) throw DataError("TrainConfig: clip_length must be >= 1");
  if (learning_rate < 0.0) throw DataError("TrainConfig: learning_rate must be >= 0");
  if (decay_point <= 0.0 || decay_point >= 1.0) {
    throw DataError("TrainConfig: decay_point must lie in (0,1)");
  }
  if (scale_min < 0 || scale_max < scale_min) throw DataError("TrainConfig: bad scale range");
  if (crop < 0) throw DataError("TrainConfig: crop must be >= 0");
}

double TrainConfig::lr_at(int iter) const {
  const int decay_iter = static_cast<int>(std::llround(decay_point * max_iter));
  return iter >= decay_iter ? learning_rate * decay_factor : learning_rate;
}

// ---- optimizer ------------------------------------------------------------

AdamW::AdamW(ParamSet params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps),
      weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_.entries()) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  }
  params_.zero_grad();
}

double AdamW::clip_gradients(double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params_.entries()) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& [name, t] : params_.entries()) {
      Tensor tensor = t;  // handles share the grad buffer
      const auto g = tensor.grad();
      for (std::size_t i = 0; i < g.size(); ++i) tensor.accumulate_grad(i, g[i] * (factor - 1.0));
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  std::size_t index = 0;
  for (const auto& [name, t] : params_.entries()) {
    Tensor tensor = t;
    auto data = tensor.mutable_values();
    const auto grad = tensor.grad();
    auto& m = m_[index];
    auto& v = v_[index];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient in " + name);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_) +
                            weight_decay_ * data[i];
      data[i] -= lr * update;
    }
    ++index;
  }
}

// ---- losses ------------------------------------------------------------------

namespace {

/// Class selection weights: lambda at (query, gt class) for matched rows,
/// down-weighted lambda at the "no object" column for the rest.
Tensor class_weight_matrix(int num_queries, int k1,
                           const std::vector<GroundTruthTrack>& tracks,
                           const Assignment& assignment, const MatchWeights& weights) {
  Tensor sel = Tensor::zeros({num_queries, k1});
  auto vs = sel.mutable_values();
  std::vector<char> matched(static_cast<std::size_t>(num_queries), 0);
  for (std::size_t i = 0; i < assignment.permutation.size(); ++i) {
    const int q = assignment.permutation[i];
    matched[static_cast<std::size_t>(q)] = 1;
    vs[static_cast<std::size_t>(q) * k1 + tracks[i].class_id] = weights.lambda_class;
  }
  for (int q = 0; q < num_queries; ++q) {
    if (!matched[static_cast<std::size_t>(q)]) {
      vs[static_cast<std::size_t>(q) * k1 + (k1 - 1)] =
          weights.lambda_class * weights.no_object_weight;
    }
  }
  return sel;
}

/// lambda_mask * mean BCE + lambda_dice * Dice of one prediction row against
/// one constant 0/1 mask.
Tensor mask_pair_loss(const Tensor& mask_logits, int row, const std::vector<double>& gt_mask,
                      const MatchWeights& weights) {
  const Tensor logits_row = slice_rows(mask_logits, row, 1);
  const Tensor target = Tensor::from({1, static_cast<int>(gt_mask.size())},
                                     std::vector<double>(gt_mask));
  const Tensor bce = mean_all(bce_with_logits(logits_row, target));

  const Tensor probs = sigmoid(logits_row);
  const Tensor overlap = sum_all(mul(probs, target));
  double gt_area = 0.0;
  for (double y : gt_mask) gt_area += y;
  const Tensor denom = add_scalar(sum_all(probs), gt_area);
  const Tensor dice = sub(Tensor::scalar(1.0), div(scale(overlap, 2.0), denom));

  return add(scale(bce, weights.lambda_mask), scale(dice, weights.lambda_dice));
}

}  // namespace

Tensor frame_loss(const Tensor& class_logits, const Tensor& mask_logits,
                  const std::vector<GroundTruthTrack>& tracks,
                  const Assignment& assignment, int frame, const MatchWeights& weights) {
  if (assignment.permutation.size() != tracks.size()) {
    throw std::invalid_argument("frame_loss: assignment does not cover the tracks");
  }
  const int n = class_logits.extent(0);
  const int k1 = class_logits.extent(1);
  const Tensor sel = class_weight_matrix(n, k1, tracks, assignment, weights);
  Tensor total = neg(sum_all(mul(log_softmax(class_logits, 1), sel)));
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    total = add(total, mask_pair_loss(mask_logits, assignment.permutation[i],
                                      tracks[i].masks[static_cast<std::size_t>(frame)], weights));
  }
  return total;
}

Tensor loss_tracker(const std::vector<Tensor>& class_logits,
                    const std::vector<Tensor>& mask_logits,
                    const std::vector<GroundTruthTrack>& tracks,
                    const Assignment& assignment, const MatchWeights& weights) {
  if (class_logits.empty() || class_logits.size() != mask_logits.size()) {
    throw std::invalid_argument("loss_tracker: per-frame prediction lists must align");
  }
  Tensor total = frame_loss(class_logits[0], mask_logits[0], tracks, assignment, 0, weights);
  for (std::size_t t = 1; t < class_logits.size(); ++t) {
    total = add(total, frame_loss(class_logits[t], mask_logits[t], tracks, assignment,
                                  static_cast<int>(t), weights));
  }
  return total;
}

Tensor loss_refiner(const Tensor& video_class_logits,
                    const std::vector<Tensor>& mask_logits,
                    const std::vector<GroundTruthTrack>& tracks,
                    const Assignment& assignment, const MatchWeights& weights) {
  if (mask_logits.empty()) throw std::invalid_argument("loss_refiner: no frames");
  if (assignment.permutation.size() != tracks.size()) {
    throw std::invalid_argument("loss_refiner: assignment does not cover the tracks");
  }
  const int n = video_class_logits.extent(0);
  const int k1 = video_class_logits.extent(1);
  // One class term per track for the whole video.
  const Tensor sel = class_weight_matrix(n, k1, tracks, assignment, weights);
  Tensor total = neg(sum_all(mul(log_softmax(video_class_logits, 1), sel)));
  for (std::size_t t = 0; t < mask_logits.size(); ++t) {
    for (std::size_t i = 0; i < tracks.size(); ++i) {
      total = add(total, mask_pair_loss(mask_logits[t], assignment.permutation[i],
                                        tracks[i].masks[t], weights));
    }
  }
  return total;
}

ClipPredictions decode_predictions(const TrackedQuerySequence& sequence,
                                   const std::vector<Tensor>& pixel_features) {
  if (sequence.frames.size() != pixel_features.size()) {
    throw std::invalid_argument("decode_predictions: frame count mismatch");
  }
  ClipPredictions out;
  for (std::size_t t = 0; t < sequence.frames.size(); ++t) {
    out.class_logits.push_back(sequence.frames[t].class_logits);
    out.mask_logits.push_back(
        rasterize_masks(sequence.frames[t].mask_embeddings, pixel_features[t]));
  }
  return out;
}

// ---- training loops --------------------------------------------------------------

namespace {

struct ClipWindow {
  std::vector<FrameQueries> queries;
  std::vector<Tensor> features;
  std::vector<GroundTruthTrack> tracks;
};

std::vector<std::uint16_t> resize_nearest(const std::vector<std::uint16_t>& src,
                                          int h, int w, int side) {
  std::vector<std::uint16_t> dst(static_cast<std::size_t>(side) * static_cast<std::size_t>(side));
  for (int y = 0; y < side; ++y) {
    const int sy = std::min(h - 1, (y * h) / side);
    for (int x = 0; x < side; ++x) {
      const int sx = std::min(w - 1, (x * w) / side);
      dst[static_cast<std::size_t>(y) * side + x] = src[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return dst;
}

Tensor resize_features_nearest(const Tensor& feat, int side) {
  const int dm = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
  Tensor out = Tensor::zeros({dm, side, side});
  auto vo = out.mutable_values();
  const auto vf = feat.values();
  const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t side2 = static_cast<std::size_t>(side) * static_cast<std::size_t>(side);
  for (int y = 0; y < side; ++y) {
    const int sy = std::min(h - 1, (y * h) / side);
    for (int x = 0; x < side; ++x) {
      const int sx = std::min(w - 1, (x * w) / side);
      const std::size_t s = static_cast<std::size_t>(sy) * w + sx;
      const std::size_t dpx = static_cast<std::size_t>(y) * side + x;
      for (int c = 0; c < dm; ++c) vo[static_cast<std::size_t>(c) * side2 + dpx] = vf[static_cast<std::size_t>(c) * hw + s];
    }
  }
  return out;
}

Tensor crop_features(const Tensor& feat, int y0, int x0, int side) {
  const int dm = feat.extent(0), h = feat.extent(1), w = feat.extent(2);
  (void)h;
  Tensor out = Tensor::zeros({dm, side, side});
  auto vo = out.mutable_values();
  const auto vf = feat.values();
  for (int c = 0; c < dm; ++c) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        vo[(static_cast<std::size_t>(c) * side + y) * side + x] =
            vf[(static_cast<std::size_t>(c) * feat.extent(1) + (y0 + y)) * w + (x0 + x)];
      }
    }
  }
  return out;
}

/// Samples a clip window and applies the scale/crop augmentation so features
/// and ground truth stay pixel-consistent.
ClipWindow sample_clip(const VideoRecord& video, int start, int length,
                       const TrainConfig& config, Rng& aug_rng) {
  ClipWindow clip;
  for (int t = 0; t < length; ++t) {
    clip.queries.push_back(video.queries[static_cast<std::size_t>(start + t)]);
  }

  int h = video.clip.height, w = video.clip.width;
  std::vector<std::vector<std::uint16_t>> maps;
  for (int t = 0; t < length; ++t) {
    maps.push_back(video.gt.id_maps[static_cast<std::size_t>(start + t)]);
    clip.features.push_back(video.clip.pixel_features[static_cast<std::size_t>(start + t)]);
  }

  if (config.scale_min > 0) {
    const int side = config.scale_min +
                     static_cast<int>(aug_rng.uniform_index(
                         static_cast<std::uint64_t>(config.scale_max - config.scale_min) + 1));
    for (int t = 0; t < length; ++t) {
      maps[static_cast<std::size_t>(t)] = resize_nearest(maps[static_cast<std::size_t>(t)], h, w, side);
      clip.features[static_cast<std::size_t>(t)] =
          resize_features_nearest(clip.features[static_cast<std::size_t>(t)], side);
    }
    h = w = side;
  }
  if (config.crop > 0 && config.crop < std::min(h, w)) {
    const int side = config.crop;
    const int y0 = static_cast<int>(aug_rng.uniform_index(static_cast<std::uint64_t>(h - side) + 1));
    const int x0 = static_cast<int>(aug_rng.uniform_index(static_cast<std::uint64_t>(w - side) + 1));
    for (int t = 0; t < length; ++t) {
      std::vector<std::uint16_t> cropped(static_cast<std::size_t>(side) * static_cast<std::size_t>(side));
      const auto& src = maps[static_cast<std::size_t>(t)];
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          cropped[static_cast<std::size_t>(y) * side + x] =
              src[static_cast<std::size_t>(y0 + y) * w + (x0 + x)];
        }
      }
      maps[static_cast<std::size_t>(t)] = std::move(cropped);
      clip.features[static_cast<std::size_t>(t)] =
          crop_features(clip.features[static_cast<std::size_t>(t)], y0, x0, side);
    }
    h = w = side;
  }

  PanopticVideo window;
  window.height = h;
  window.width = w;
  window.id_maps = std::move(maps);
  window.tracks = video.gt.tracks;
  clip.tracks = clip_ground_truth(window, 0, length);
  return clip;
}

void check_corpus(const Corpus& corpus) {
  if (corpus.empty()) throw DataError("training: empty corpus");
  for (const VideoRecord& v : corpus) {
    if (v.clip.frames < 1) throw DataError("training: empty video " + v.name);
  }
}

}  // namespace

TrainLoop::TrainLoop(ParamSet params, const TrainConfig& config)
    : optimizer_(std::move(params), 0.9, 0.999, 1e-8, config.weight_decay),
      sample_rng_(Rng(config.seed).stream("sample")),
      aug_rng_(Rng(config.seed).stream("augment")) {}

namespace {

constexpr char kStateMagic[8] = {'D', 'V', 'P', 'S', 'T', '1', '\0', '\0'};

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError(path + ": truncated training state");
  return v;
}

}  // namespace

void TrainLoop::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(kStateMagic, sizeof kStateMagic);
  const AdamW& opt = optimizer_;
  write_u64(out, static_cast<std::uint64_t>(opt.moments1().size()));
  for (std::size_t p = 0; p < opt.moments1().size(); ++p) {
    const auto& m = opt.moments1()[p];
    const auto& v = opt.moments2()[p];
    write_u64(out, static_cast<std::uint64_t>(m.size()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  write_u64(out, static_cast<std::uint64_t>(opt.step_count()));
  write_u64(out, static_cast<std::uint64_t>(next_iter));
  for (std::uint64_t w : sample_rng_.serialize()) write_u64(out, w);
  for (std::uint64_t w : aug_rng_.serialize()) write_u64(out, w);
  out.close();
  if (!out) throw IoError(path + ": write failed");
}

void TrainLoop::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kStateMagic, sizeof kStateMagic) != 0) {
    throw IoError(path + ": unrecognized format (bad magic)");
  }
  const std::uint64_t count = read_u64(in, path);
  if (count != optimizer_.moments1().size()) {
    throw DataError(path + ": training state holds " + std::to_string(count) +
                    " parameter moments, expected " +
                    std::to_string(optimizer_.moments1().size()));
  }
  for (std::size_t p = 0; p < count; ++p) {
    auto& m = optimizer_.moments1()[p];
    auto& v = optimizer_.moments2()[p];
    const std::uint64_t size = read_u64(in, path);
    if (size != m.size()) throw DataError(path + ": moment size mismatch");
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw IoError(path + ": truncated training state");
  }
  optimizer_.set_step_count(static_cast<long>(read_u64(in, path)));
  next_iter = static_cast<int>(read_u64(in, path));
  std::array<std::uint64_t, 7> words{};
  for (auto& w : words) w = read_u64(in, path);
  sample_rng_.deserialize(words);
  for (auto& w : words) w = read_u64(in, path);
  aug_rng_.deserialize(words);
}

namespace {

/// Shared engine of both stage loops: batch sampling, gradient step, decay
/// schedule, divergence diagnostics, resumable state. The clip callback
/// activates the tape itself, so frozen upstream stages can run off-tape.
TrainResult run_training(const char* stage, const Corpus& corpus, const TrainConfig& config,
                         TrainLoop* loop, int stop_iter, ParamSet&& params,
                         const std::function<Tensor(const ClipWindow&, int, GradTape&)>& clip_loss) {
  config.validate();
  check_corpus(corpus);

  TrainLoop local(std::move(params), config);
  TrainLoop& state = loop != nullptr ? *loop : local;
  const int end_iter = stop_iter < 0 ? config.max_iter : std::min(stop_iter, config.max_iter);

  TrainResult result;
  for (int iter = state.next_iter; iter < end_iter; ++iter) {
    state.optimizer().params().zero_grad();
    double loss_mean = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const VideoRecord& video =
          corpus[state.sample_rng().uniform_index(static_cast<std::uint64_t>(corpus.size()))];
      const int length = std::min(config.clip_length, video.clip.frames);
      const int start = static_cast<int>(state.sample_rng().uniform_index(
          static_cast<std::uint64_t>(video.clip.frames - length) + 1));
      const ClipWindow clip = sample_clip(video, start, length, config, state.aug_rng());

      GradTape tape;
      try {
        Tensor loss = clip_loss(clip, iter, tape);
        {
          GradTape::Scope scope(tape);
          loss = scale(loss, 1.0 / config.batch_size);
        }
        loss_mean += loss.values()[0];
        backward(loss, tape);
      } catch (const NumericError& e) {
        throw NumericError(std::string(stage) + ": iteration " + std::to_string(iter) +
                           " diverged: " + e.what());
      }
    }
    if (!std::isfinite(loss_mean)) {
      throw NumericError(std::string(stage) + ": iteration " + std::to_string(iter) +
                         ": loss is not finite");
    }
    if (config.grad_clip > 0.0) state.optimizer().clip_gradients(config.grad_clip);
    const double lr = config.lr_at(iter);
    state.optimizer().step(lr);
    result.curve.push_back({iter, loss_mean, lr});
    state.next_iter = iter + 1;
  }
  return result;
}

}  // namespace

TrainResult train_tracker(TrackerParams& params, const Corpus& corpus,
                          const TrainConfig& config, TrainLoop* loop, int stop_iter) {
  return run_training(
      "train_tracker", corpus, config, loop, stop_iter, params.param_set(),
      [&](const ClipWindow& clip, int iter, GradTape& tape) {
        // The pre-matched segmenter queries are constants.
        const TrackedQuerySequence prematched = prematch_chain(clip.queries);
        const ClipPredictions segmenter_preds = decode_predictions(prematched, clip.features);

        GradTape::Scope scope(tape);
        const TrackedQuerySequence denoised = tracker_forward(prematched, params);
        const ClipPredictions preds = decode_predictions(denoised, clip.features);
        const Assignment sigma = match_tracker(segmenter_preds, preds, clip.tracks,
                                               config.weights, iter, config.max_iter);
        return loss_tracker(preds.class_logits, preds.mask_logits, clip.tracks, sigma,
                            config.weights);
      });
}

TrainResult train_refiner(RefinerParams& params, const TrackerParams& frozen_tracker,
                          const Corpus& corpus, const TrainConfig& config, TrainLoop* loop,
                          int stop_iter) {
  return run_training(
      "train_refiner", corpus, config, loop, stop_iter, params.param_set(),
      [&](const ClipWindow& clip, int iter, GradTape& tape) {
        // Frozen stages run off-tape: their outputs are constants and no
        // gradient can reach the tracker.
        const TrackedQuerySequence prematched = prematch_chain(clip.queries);
        const TrackedQuerySequence tracker_out = tracker_forward(prematched, frozen_tracker);
        const ClipPredictions tracker_preds = decode_predictions(tracker_out, clip.features);

        GradTape::Scope scope(tape);
        const TrackedQuerySequence refined = refiner_forward(tracker_out, params);
        const ClipPredictions preds = decode_predictions(refined, clip.features);
        const Assignment sigma = match_refiner(tracker_preds, preds, clip.tracks,
                                               config.weights, iter, config.max_iter);
        return loss_refiner(preds.class_logits.front(), preds.mask_logits, clip.tracks, sigma,
                            config.weights);
      });
}

}  // namespace dvps
