#include "dvps/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dvps/common.hpp"

namespace dvps {

void FrameQueries::validate() const {
  if (!embeddings.defined() || !class_logits.defined() || !mask_embeddings.defined()) {
    throw DataError("FrameQueries: undefined tensor");
  }
  if (embeddings.rank() != 2 || class_logits.rank() != 2 || mask_embeddings.rank() != 2) {
    throw DataError("FrameQueries: rank-2 tensors required");
  }
  const int n = embeddings.extent(0);
  if (n < 1) throw DataError("FrameQueries: at least one query required");
  if (class_logits.extent(0) != n || mask_embeddings.extent(0) != n) {
    throw DataError("FrameQueries: inconsistent query counts");
  }
}

void VideoClip::validate() const {
  if (frames < 1) throw DataError("VideoClip: at least one frame required");
  if (static_cast<int>(pixel_features.size()) != frames) {
    throw DataError("VideoClip: feature count does not match frame count");
  }
  for (const Tensor& f : pixel_features) {
    if (f.rank() != 3 || f.extent(1) != height || f.extent(2) != width) {
      throw DataError("VideoClip: per-frame feature extents differ");
    }
  }
}

void PanopticVideo::validate() const {
  if (id_maps.empty()) throw DataError("PanopticVideo: empty video");
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  std::map<int, std::set<std::uint16_t>> stuff_ids_per_class;
  for (const auto& m : id_maps) {
    if (m.size() != n) throw DataError("PanopticVideo: id map extent mismatch");
    for (std::uint16_t id : m) {
      if (id == 0) continue;
      const auto it = tracks.find(id);
      if (it == tracks.end()) {
        throw DataError("PanopticVideo: id " + std::to_string(id) +
                        " missing from track table");
      }
      if (!it->second.is_thing) stuff_ids_per_class[it->second.class_id].insert(id);
    }
  }
  for (const auto& [cls, ids] : stuff_ids_per_class) {
    if (ids.size() > 1) {
      throw DataError("PanopticVideo: stuff class " + std::to_string(cls) +
                      " split over " + std::to_string(ids.size()) + " ids");
    }
  }
}

std::vector<double> PanopticVideo::mask_of(int frame, std::uint16_t id) const {
  const auto& m = id_maps[static_cast<std::size_t>(frame)];
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = (m[i] == id) ? 1.0 : 0.0;
  return out;
}

Tensor TrackedQuerySequence::stacked_embeddings() const {
  if (frames.empty()) throw DataError("TrackedQuerySequence: empty");
  const int t_len = frame_count();
  const int n = query_count();
  const int d = frames.front().embeddings.extent(1);
  Tensor out = Tensor::zeros({t_len, n, d});
  auto vo = out.mutable_values();
  for (int t = 0; t < t_len; ++t) {
    const auto v = frames[static_cast<std::size_t>(t)].embeddings.values();
    std::copy(v.begin(), v.end(), vo.begin() + static_cast<std::size_t>(t) * n * d);
  }
  return out;
}

Tensor rasterize_masks(const Tensor& mask_embeddings, const Tensor& pixel_features) {
  if (mask_embeddings.rank() != 2 || pixel_features.rank() != 3) {
    throw std::invalid_argument("rasterize_masks: need [N,Dm] embeddings and [Dm,H,W] features");
  }
  const int dm = mask_embeddings.extent(1);
  if (pixel_features.extent(0) != dm) {
    throw std::invalid_argument("rasterize_masks: feature channel count mismatch");
  }
  const int hw = pixel_features.extent(1) * pixel_features.extent(2);
  return matmul(mask_embeddings, pixel_features.detach().view({dm, hw}));
}

ObjectScore object_score(const Tensor& class_logits, int row) {
  const int k1 = class_logits.extent(1);
  // Softmax over the full row, score read off the real classes only.
  double mx = class_logits(row, 0);
  for (int j = 1; j < k1; ++j) mx = std::max(mx, class_logits(row, j));
  double denom = 0.0;
  std::vector<double> probs(static_cast<std::size_t>(k1));
  for (int j = 0; j < k1; ++j) {
    probs[static_cast<std::size_t>(j)] = std::exp(class_logits(row, j) - mx);
    denom += probs[static_cast<std::size_t>(j)];
  }
  ObjectScore best;
  for (int j = 0; j < k1 - 1; ++j) {
    const double p = probs[static_cast<std::size_t>(j)] / denom;
    if (p > best.score) {
      best.score = p;
      best.class_id = j;
    }
  }
  return best;
}

std::vector<QueryIdentity> slot_identities(const Tensor& class_logits, int num_thing_classes) {
  const int n = class_logits.extent(0);
  std::vector<QueryIdentity> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const ObjectScore s = object_score(class_logits, i);
    QueryIdentity& q = out[static_cast<std::size_t>(i)];
    q.class_id = s.class_id;
    q.is_thing = s.class_id < num_thing_classes;
    if (q.is_thing) {
      q.segment_id = static_cast<std::uint16_t>(i + 1);
    } else {
      // One id per stuff class, offset past the slot id range.
      q.segment_id = static_cast<std::uint16_t>(n + 1 + s.class_id);
    }
  }
  return out;
}

FusedFrame panoptic_fuse(const Tensor& mask_logits, const Tensor& class_logits,
                         int height, int width, const FuseConfig& config,
                         const std::vector<QueryIdentity>& identities) {
  const int n = mask_logits.extent(0);
  const std::size_t hw = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (mask_logits.rank() != 2 || mask_logits.size() != static_cast<std::size_t>(n) * hw) {
    throw std::invalid_argument("panoptic_fuse: mask logits extent mismatch");
  }
  if (class_logits.extent(0) != n || static_cast<int>(identities.size()) != n) {
    throw std::invalid_argument("panoptic_fuse: query count mismatch");
  }

  struct Candidate {
    int query = 0;
    double score = 0.0;
  };
  std::vector<Candidate> retained;
  for (int i = 0; i < n; ++i) {
    const ObjectScore s = object_score(class_logits, i);
    // argmax over the full row decides whether "no object" wins.
    int argmax = 0;
    double best = class_logits(i, 0);
    for (int j = 1; j < class_logits.extent(1); ++j) {
      if (class_logits(i, j) > best) {
        best = class_logits(i, j);
        argmax = j;
      }
    }
    const bool is_object = argmax != class_logits.extent(1) - 1;
    if (is_object && s.score >= config.object_threshold) retained.push_back({i, s.score});
  }

  FusedFrame out;
  out.id_map.assign(hw, 0);
  if (retained.empty()) return out;

  const auto logits = mask_logits.values();
  auto prob_of = [&](int query, std::size_t px) {
    const double z = logits[static_cast<std::size_t>(query) * hw + px];
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  };

  // Per pixel, the winning retained query by score * mask probability; the
  // winner's own probability must clear the mask threshold or the pixel
  // stays void. Ties go to the lower query index.
  std::vector<int> winner(hw, -1);
  for (std::size_t px = 0; px < hw; ++px) {
    double best = 0.0;
    int who = -1;
    for (const Candidate& c : retained) {
      const double p = prob_of(c.query, px);
      const double conf = c.score * p;
      if (conf > best && p >= config.mask_threshold) {
        best = conf;
        who = c.query;
      }
    }
    winner[px] = who;
  }

  // Drop queries that kept too little of their thresholded mask.
  std::vector<bool> dropped(static_cast<std::size_t>(n), false);
  for (const Candidate& c : retained) {
    std::size_t original = 0, kept = 0;
    for (std::size_t px = 0; px < hw; ++px) {
      if (prob_of(c.query, px) >= config.mask_threshold) ++original;
      if (winner[px] == c.query) ++kept;
    }
    if (original == 0 ||
        static_cast<double>(kept) < config.min_mask_fraction * static_cast<double>(original)) {
      dropped[static_cast<std::size_t>(c.query)] = true;
    }
  }

  for (std::size_t px = 0; px < hw; ++px) {
    const int who = winner[px];
    if (who < 0 || dropped[static_cast<std::size_t>(who)]) continue;
    const QueryIdentity& q = identities[static_cast<std::size_t>(who)];
    out.id_map[px] = q.segment_id;
    out.segments[q.segment_id] = TrackInfo{q.class_id, q.is_thing};
  }
  return out;
}

PanopticVideo fuse_video(const std::vector<Tensor>& per_frame_mask_logits,
                         const std::vector<Tensor>& per_frame_class_logits,
                         int height, int width, const FuseConfig& config,
                         int num_thing_classes) {
  if (per_frame_mask_logits.empty() ||
      per_frame_mask_logits.size() != per_frame_class_logits.size()) {
    throw std::invalid_argument("fuse_video: frame count mismatch");
  }
  PanopticVideo out;
  out.height = height;
  out.width = width;
  for (std::size_t t = 0; t < per_frame_mask_logits.size(); ++t) {
    const auto ids = slot_identities(per_frame_class_logits[t], num_thing_classes);
    FusedFrame f = panoptic_fuse(per_frame_mask_logits[t], per_frame_class_logits[t],
                                 height, width, config, ids);
    out.id_maps.push_back(std::move(f.id_map));
    for (const auto& [id, info] : f.segments) out.tracks[id] = info;
  }
  return out;
}

}  // namespace dvps
