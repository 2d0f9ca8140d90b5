#include "dvps/synthclip.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dvps/common.hpp"

namespace dvps {

namespace {

// Every corpus shares one embedding layout: a fixed semi-orthogonal
// projection of (mask basis, class one-hot) into embedding space. Models
// trained on one corpus therefore transfer to any other.
constexpr std::uint64_t kStubLayoutSeed = 0x5b8f22a1d3c4e6f7ULL;

constexpr double kFeatureGain = 16.0;  // on-segment mask logit = gain - offset
constexpr double kMaskOffset = 8.0;    // off-segment mask logit = -offset
constexpr double kClassMargin = 4.0;
// Canonical embeddings share a fixed norm well above 1 so that the noise
// levels the configs sweep keep per-frame identity recoverable.
constexpr double kEmbedNorm = 1.5;

struct Thing {
  std::uint16_t id = 0;
  int class_id = 0;
  bool is_disk = true;
  double half_h = 0.0, half_w = 0.0;  // radius for disks
  std::vector<double> ys, xs;         // center per frame
  int first_frame = 0, last_frame = 0;

  bool visible(int t) const { return t >= first_frame && t <= last_frame; }
};

void gram_schmidt_append(std::vector<std::vector<double>>& basis, Rng& rng, int dim) {
  while (true) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = rng.normal();
    for (const auto& u : basis) {
      double dot = 0.0;
      for (int i = 0; i < dim; ++i) dot += v[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
      for (int i = 0; i < dim; ++i) v[static_cast<std::size_t>(i)] -= dot * u[static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 0.5) continue;  // nearly dependent draw, take another
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
    return;
  }
}

/// Orthonormal direction shared by all videos; mask embeddings subtract a
/// multiple of it so off-segment logits sit well below zero.
std::vector<double> global_bias_direction(int mask_dim) {
  Rng rng = Rng(kStubLayoutSeed).stream("mask-bias");
  std::vector<std::vector<double>> basis;
  gram_schmidt_append(basis, rng, mask_dim);
  return basis.front();
}

/// Fixed projection columns: mask_dim columns for the mask basis, then
/// num_classes+1 columns for the class one-hot, all orthonormal in R^D.
std::vector<std::vector<double>> global_projection(int embed_dim, int mask_dim,
                                                   int num_classes) {
  Rng rng = Rng(kStubLayoutSeed).stream("embedding-projection");
  std::vector<std::vector<double>> cols;
  const int needed = mask_dim + num_classes + 1;
  for (int i = 0; i < needed; ++i) gram_schmidt_append(cols, rng, embed_dim);
  return cols;
}

/// Per-video orthonormal vectors for segments (ids ascending) and then
/// distractor slots, all orthogonal to the global bias direction.
std::vector<std::vector<double>> video_basis(const SceneConfig& config, int count) {
  std::vector<std::vector<double>> basis;
  basis.push_back(global_bias_direction(config.mask_embed_dim));
  Rng rng = Rng(config.seed).stream("basis");
  for (int i = 0; i < count; ++i) gram_schmidt_append(basis, rng, config.mask_embed_dim);
  basis.erase(basis.begin());  // bias direction is kept separately
  return basis;
}

std::vector<double> canonical_embedding(const std::vector<std::vector<double>>& proj,
                                        const std::vector<double>& mask_vec,
                                        int class_id, const SceneConfig& config) {
  const int d = config.embed_dim;
  const int dm = config.mask_embed_dim;
  std::vector<double> e(static_cast<std::size_t>(d), 0.0);
  for (int c = 0; c < dm; ++c) {
    const double w = mask_vec[static_cast<std::size_t>(c)];
    for (int i = 0; i < d; ++i) e[static_cast<std::size_t>(i)] += w * proj[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
  }
  const auto& class_col = proj[static_cast<std::size_t>(dm + class_id)];
  const double scale = kEmbedNorm / std::sqrt(2.0);
  for (int i = 0; i < d; ++i) {
    e[static_cast<std::size_t>(i)] = (e[static_cast<std::size_t>(i)] + class_col[static_cast<std::size_t>(i)]) * scale;
  }
  return e;
}

std::vector<double> mask_embedding_for(const std::vector<double>& seg_vec,
                                       const std::vector<double>& bias, int dm) {
  std::vector<double> m(static_cast<std::size_t>(dm));
  for (int c = 0; c < dm; ++c) {
    m[static_cast<std::size_t>(c)] = seg_vec[static_cast<std::size_t>(c)] - kMaskOffset * bias[static_cast<std::size_t>(c)];
  }
  return m;
}

}  // namespace

void SceneConfig::validate() const {
  if (frames < 1) throw DataError("SceneConfig: frames must be >= 1");
  if (height < 8 || width < 8) throw DataError("SceneConfig: grid must be at least 8x8");
  if (things_min < 0 || things_max < things_min) {
    throw DataError("SceneConfig: bad thing count range");
  }
  if (stuff_regions < 1 || stuff_regions > stuff_classes) {
    throw DataError("SceneConfig: stuff_regions must be in [1, stuff_classes]");
  }
  if (speed_min < 0.0 || speed_max < speed_min) throw DataError("SceneConfig: bad speed range");
  if (appear_prob < 0.0 || appear_prob > 1.0 || disappear_prob < 0.0 || disappear_prob > 1.0) {
    throw DataError("SceneConfig: probabilities must lie in [0,1]");
  }
  if (noise_sigma < 0.0) throw DataError("SceneConfig: noise_sigma must be >= 0");
  if (distractors < 0) throw DataError("SceneConfig: distractors must be >= 0");
  if (thing_classes < 1 || stuff_classes < 1) throw DataError("SceneConfig: class counts must be >= 1");
  // Worst case basis usage: all segments, plus distractor slots, plus padding
  // when every thing is absent from some frame, plus the bias direction.
  const int worst = things_max + stuff_regions + distractors + things_max + 1;
  if (worst > mask_embed_dim) {
    throw DataError("SceneConfig: mask_embed_dim too small for the scene (needs " +
                    std::to_string(worst) + ")");
  }
  if (embed_dim < mask_embed_dim + num_classes() + 1) {
    throw DataError("SceneConfig: embed_dim too small for the embedding layout");
  }
}

GeneratedVideo generate_clip(const SceneConfig& config) {
  config.validate();
  Rng root(config.seed);
  Rng scene = root.stream("scene");

  const int t_len = config.frames, h = config.height, w = config.width;

  // Things: geometry, class, visibility window, bouncing trajectory.
  const int nt = config.things_min +
                 static_cast<int>(scene.uniform_index(
                     static_cast<std::uint64_t>(config.things_max - config.things_min) + 1));
  std::vector<Thing> things;
  const double min_side = static_cast<double>(std::min(h, w));
  for (int i = 0; i < nt; ++i) {
    Thing th;
    th.id = static_cast<std::uint16_t>(i + 1);
    th.class_id = static_cast<int>(scene.uniform_index(static_cast<std::uint64_t>(config.thing_classes)));
    th.is_disk = scene.uniform() < 0.5;
    th.half_h = scene.uniform(min_side / 10.0, min_side / 5.0);
    th.half_w = th.is_disk ? th.half_h : scene.uniform(min_side / 10.0, min_side / 5.0);

    th.first_frame = 0;
    th.last_frame = t_len - 1;
    if (t_len > 1 && scene.uniform() < config.appear_prob) {
      th.first_frame = 1 + static_cast<int>(scene.uniform_index(static_cast<std::uint64_t>(t_len - 1)));
    }
    if (scene.uniform() < config.disappear_prob) {
      th.last_frame = th.first_frame +
                      static_cast<int>(scene.uniform_index(static_cast<std::uint64_t>(t_len - th.first_frame)));
    }

    const double y_lo = th.half_h, y_hi = static_cast<double>(h - 1) - th.half_h;
    const double x_lo = th.half_w, x_hi = static_cast<double>(w - 1) - th.half_w;
    double y = scene.uniform(y_lo, std::max(y_lo, y_hi));
    double x = scene.uniform(x_lo, std::max(x_lo, x_hi));
    const double speed = scene.uniform(config.speed_min, config.speed_max);
    const double angle = scene.uniform(0.0, 2.0 * 3.141592653589793238462643383279502884);
    double vy = speed * std::sin(angle);
    double vx = speed * std::cos(angle);
    for (int t = 0; t < t_len; ++t) {
      th.ys.push_back(y);
      th.xs.push_back(x);
      y += vy;
      x += vx;
      if (y > y_hi) { y = 2.0 * y_hi - y; vy = -vy; }
      if (y < y_lo) { y = 2.0 * y_lo - y; vy = -vy; }
      if (x > x_hi) { x = 2.0 * x_hi - x; vx = -vx; }
      if (x < x_lo) { x = 2.0 * x_lo - x; vx = -vx; }
    }
    things.push_back(std::move(th));
  }

  // Stuff stripes: jittered horizontal bands, one distinct class each.
  const int ns = config.stuff_regions;
  std::vector<int> band_end(static_cast<std::size_t>(ns), h);  // exclusive row bound
  for (int i = 0; i + 1 < ns; ++i) {
    const int nominal = ((i + 1) * h) / ns;
    const int jitter_range = std::max(1, h / (4 * ns));
    const int jitter = static_cast<int>(scene.uniform_index(static_cast<std::uint64_t>(2 * jitter_range + 1))) - jitter_range;
    band_end[static_cast<std::size_t>(i)] = std::clamp(nominal + jitter, i + 1, h - (ns - 1 - i));
  }
  const std::vector<int> stuff_class_perm = scene.permutation(config.stuff_classes);

  PanopticVideo gt;
  gt.height = h;
  gt.width = w;
  for (const Thing& th : things) gt.tracks[th.id] = TrackInfo{th.class_id, true};
  for (int i = 0; i < ns; ++i) {
    gt.tracks[static_cast<std::uint16_t>(nt + 1 + i)] =
        TrackInfo{config.thing_classes + stuff_class_perm[static_cast<std::size_t>(i)], false};
  }

  for (int t = 0; t < t_len; ++t) {
    std::vector<std::uint16_t> map(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    for (int row = 0; row < h; ++row) {
      int band = 0;
      while (row >= band_end[static_cast<std::size_t>(band)]) ++band;
      const std::uint16_t id = static_cast<std::uint16_t>(nt + 1 + band);
      for (int col = 0; col < w; ++col) map[static_cast<std::size_t>(row) * w + col] = id;
    }
    // Creation order is depth order: later things draw on top.
    for (const Thing& th : things) {
      if (!th.visible(t)) continue;
      const double cy = th.ys[static_cast<std::size_t>(t)], cx = th.xs[static_cast<std::size_t>(t)];
      const int r0 = std::max(0, static_cast<int>(std::floor(cy - th.half_h)));
      const int r1 = std::min(h - 1, static_cast<int>(std::ceil(cy + th.half_h)));
      const int c0 = std::max(0, static_cast<int>(std::floor(cx - th.half_w)));
      const int c1 = std::min(w - 1, static_cast<int>(std::ceil(cx + th.half_w)));
      for (int row = r0; row <= r1; ++row) {
        for (int col = c0; col <= c1; ++col) {
          const double dy = (static_cast<double>(row) - cy) / th.half_h;
          const double dx = (static_cast<double>(col) - cx) / th.half_w;
          const bool inside = th.is_disk ? (dy * dy + dx * dx <= 1.0)
                                         : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
          if (inside) map[static_cast<std::size_t>(row) * w + col] = th.id;
        }
      }
    }
    gt.id_maps.push_back(std::move(map));
  }
  gt.validate();

  // Pixel features from the per-video segment basis.
  const int num_segments = nt + ns;
  const auto basis = video_basis(config, num_segments);
  const auto bias = global_bias_direction(config.mask_embed_dim);
  const int dm = config.mask_embed_dim;

  VideoClip clip;
  clip.frames = t_len;
  clip.height = h;
  clip.width = w;
  const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (int t = 0; t < t_len; ++t) {
    Tensor feat = Tensor::zeros({dm, h, w});
    auto vf = feat.mutable_values();
    const auto& map = gt.id_maps[static_cast<std::size_t>(t)];
    for (std::size_t px = 0; px < hw; ++px) {
      const auto& seg_vec = basis[static_cast<std::size_t>(map[px] - 1)];
      for (int c = 0; c < dm; ++c) {
        vf[static_cast<std::size_t>(c) * hw + px] =
            kFeatureGain * seg_vec[static_cast<std::size_t>(c)] + bias[static_cast<std::size_t>(c)];
      }
    }
    clip.pixel_features.push_back(std::move(feat));
  }
  return GeneratedVideo{std::move(clip), std::move(gt)};
}

Tensor stub_canonical_embeddings(const PanopticVideo& gt, const SceneConfig& config) {
  const int num_segments = static_cast<int>(gt.tracks.size());
  const auto basis = video_basis(config, num_segments);
  const auto proj = global_projection(config.embed_dim, config.mask_embed_dim, config.num_classes());
  Tensor out = Tensor::zeros({num_segments, config.embed_dim});
  auto vo = out.mutable_values();
  int row = 0;
  for (const auto& [id, info] : gt.tracks) {  // std::map iterates ids ascending
    const auto e = canonical_embedding(proj, basis[static_cast<std::size_t>(row)], info.class_id, config);
    std::copy(e.begin(), e.end(), vo.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(row) * config.embed_dim));
    ++row;
  }
  return out;
}

std::vector<FrameQueries> segmenter_stub(const VideoClip& clip, const PanopticVideo& gt,
                                         const SceneConfig& config) {
  config.validate();
  clip.validate();
  gt.validate();
  const int t_len = gt.frames();

  // Segment ids ascending, the same order the generator drew basis vectors.
  std::vector<std::uint16_t> ids;
  for (const auto& [id, info] : gt.tracks) ids.push_back(id);
  const int num_segments = static_cast<int>(ids.size());

  // Visible segments per frame and the constant query count.
  std::vector<std::vector<int>> visible(static_cast<std::size_t>(t_len));
  int max_visible = 0;
  for (int t = 0; t < t_len; ++t) {
    std::set<std::uint16_t> present;
    for (std::uint16_t v : gt.id_maps[static_cast<std::size_t>(t)]) {
      if (v != 0) present.insert(v);
    }
    for (int s = 0; s < num_segments; ++s) {
      if (present.count(ids[static_cast<std::size_t>(s)])) {
        visible[static_cast<std::size_t>(t)].push_back(s);
      }
    }
    max_visible = std::max(max_visible, static_cast<int>(visible[static_cast<std::size_t>(t)].size()));
  }
  const int n = max_visible + config.distractors;
  int max_fill = 0;
  for (int t = 0; t < t_len; ++t) {
    max_fill = std::max(max_fill, n - static_cast<int>(visible[static_cast<std::size_t>(t)].size()));
  }
  if (num_segments + max_fill + 1 > config.mask_embed_dim) {
    throw DataError("segmenter_stub: mask_embed_dim too small for segments plus distractors");
  }

  const auto basis = video_basis(config, num_segments + max_fill);
  const auto bias = global_bias_direction(config.mask_embed_dim);
  const auto proj = global_projection(config.embed_dim, config.mask_embed_dim, config.num_classes());
  const int d = config.embed_dim;
  const int dm = config.mask_embed_dim;
  const int k1 = config.num_classes() + 1;

  // Canonical rows for segments and distractor slots.
  std::vector<std::vector<double>> emb(static_cast<std::size_t>(num_segments + max_fill));
  std::vector<std::vector<double>> memb(static_cast<std::size_t>(num_segments + max_fill));
  std::vector<int> cls(static_cast<std::size_t>(num_segments + max_fill));
  for (int s = 0; s < num_segments + max_fill; ++s) {
    const bool is_segment = s < num_segments;
    cls[static_cast<std::size_t>(s)] =
        is_segment ? gt.tracks.at(ids[static_cast<std::size_t>(s)]).class_id : config.num_classes();
    emb[static_cast<std::size_t>(s)] =
        canonical_embedding(proj, basis[static_cast<std::size_t>(s)], cls[static_cast<std::size_t>(s)], config);
    memb[static_cast<std::size_t>(s)] = mask_embedding_for(basis[static_cast<std::size_t>(s)], bias, dm);
  }

  Rng root(config.seed);
  Rng noise = root.stream("stub-noise");

  std::vector<FrameQueries> out;
  out.reserve(static_cast<std::size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    // Assembled order: visible segments ascending, then distractor slots.
    std::vector<int> slots = visible[static_cast<std::size_t>(t)];
    for (int f = 0; static_cast<int>(slots.size()) < n; ++f) slots.push_back(num_segments + f);

    Tensor embeddings = Tensor::zeros({n, d});
    Tensor class_logits = Tensor::zeros({n, k1});
    Tensor mask_embeddings = Tensor::zeros({n, dm});
    auto ve = embeddings.mutable_values();
    auto vc = class_logits.mutable_values();
    auto vm = mask_embeddings.mutable_values();
    for (int q = 0; q < n; ++q) {
      const int s = slots[static_cast<std::size_t>(q)];
      for (int i = 0; i < d; ++i) {
        ve[static_cast<std::size_t>(q) * d + i] =
            emb[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] +
            config.noise_sigma * noise.normal();
      }
      vc[static_cast<std::size_t>(q) * k1 + cls[static_cast<std::size_t>(s)]] = kClassMargin;
      for (int i = 0; i < dm; ++i) {
        vm[static_cast<std::size_t>(q) * dm + i] = memb[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
      }
    }

    // Seed-derived uniform shuffle of the query order.
    Rng perm_rng = root.stream("stub-permutation", static_cast<std::uint64_t>(t));
    const std::vector<int> perm = perm_rng.permutation(n);
    FrameQueries f;
    auto apply_perm = [&](const Tensor& m) {
      const int cols = m.extent(1);
      Tensor g = Tensor::zeros({n, cols});
      auto vg = g.mutable_values();
      const auto vsrc = m.values();
      for (int r = 0; r < n; ++r) {
        std::copy(vsrc.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(perm[static_cast<std::size_t>(r)]) * cols),
                  vsrc.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(perm[static_cast<std::size_t>(r)] + 1) * cols),
                  vg.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * cols));
      }
      return g;
    };
    f.embeddings = apply_perm(embeddings);
    f.class_logits = apply_perm(class_logits);
    f.mask_embeddings = apply_perm(mask_embeddings);
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace dvps
