#include "dvps/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "dvps/common.hpp"

namespace dvps {

namespace {

constexpr double kPadCost = 1.0e6;  // padding entry for rectangular problems

/// Shortest-augmenting-path assignment (Jonker-Volgenant flavor), O(n^3).
/// Returns perm[row] = column of a minimum-cost perfect matching.
std::vector<int> solve_assignment(const std::vector<double>& cost, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);    // row matched to column j
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);  // augmenting path back-pointers
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> perm(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) perm[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return perm;
}

double row_ordered_total(const std::vector<double>& cost, int n, const std::vector<int>& perm) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i) * n + perm[static_cast<std::size_t>(i)]];
  return total;
}

/// Re-solves the remainder with rows [0, fixed) pinned to `perm` and row
/// `fixed` pinned to column `forced`; returns the completed permutation.
std::vector<int> complete_with(const std::vector<double>& cost, int n,
                               const std::vector<int>& perm, int fixed, int forced) {
  std::vector<char> col_used(static_cast<std::size_t>(n), 0);
  std::vector<int> out(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < fixed; ++i) {
    out[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(i)];
    col_used[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = 1;
  }
  out[static_cast<std::size_t>(fixed)] = forced;
  col_used[static_cast<std::size_t>(forced)] = 1;

  const int m = n - fixed - 1;
  if (m > 0) {
    std::vector<int> cols;
    cols.reserve(static_cast<std::size_t>(m));
    for (int j = 0; j < n; ++j) {
      if (!col_used[static_cast<std::size_t>(j)]) cols.push_back(j);
    }
    std::vector<double> sub(static_cast<std::size_t>(m) * m);
    for (int r = 0; r < m; ++r) {
      for (int c = 0; c < m; ++c) {
        sub[static_cast<std::size_t>(r) * m + c] =
            cost[static_cast<std::size_t>(fixed + 1 + r) * n + cols[static_cast<std::size_t>(c)]];
      }
    }
    const std::vector<int> sub_perm = solve_assignment(sub, m);
    for (int r = 0; r < m; ++r) {
      out[static_cast<std::size_t>(fixed + 1 + r)] = cols[static_cast<std::size_t>(sub_perm[static_cast<std::size_t>(r)])];
    }
  }
  return out;
}

}  // namespace

Assignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2 || cost.extent(0) != cost.extent(1)) {
    throw std::invalid_argument("hungarian: square cost matrix required");
  }
  const int n = cost.extent(0);
  std::vector<double> c(cost.values().begin(), cost.values().end());
  for (double x : c) {
    if (!std::isfinite(x)) throw NumericError("hungarian: non-finite cost entry");
  }

  std::vector<int> best = solve_assignment(c, n);
  double best_total = row_ordered_total(c, n, best);

  // Lexicographic refinement: fix rows top-down to the smallest column that
  // still completes to the optimal total. The current best permutation is
  // always one of the candidates, so every row terminates.
  for (int i = 0; i < n; ++i) {
    std::vector<char> col_used(static_cast<std::size_t>(n), 0);
    for (int r = 0; r < i; ++r) col_used[static_cast<std::size_t>(best[static_cast<std::size_t>(r)])] = 1;
    for (int j = 0; j < n; ++j) {
      if (col_used[static_cast<std::size_t>(j)]) continue;
      if (j == best[static_cast<std::size_t>(i)]) break;  // current choice is already smallest
      const std::vector<int> candidate = complete_with(c, n, best, i, j);
      const double total = row_ordered_total(c, n, candidate);
      if (total <= best_total) {
        best = candidate;
        best_total = total;
        break;
      }
    }
  }

  return Assignment{std::move(best), best_total};
}

double cosine_cost(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 1.0;
  double cosine = dot / (std::sqrt(na) * std::sqrt(nb));
  cosine = std::clamp(cosine, -1.0, 1.0);
  return 1.0 - cosine;
}

TrackedQuerySequence prematch_chain(const std::vector<FrameQueries>& frames) {
  if (frames.empty()) throw DataError("prematch_chain: no frames");
  const int n = frames.front().query_count();
  for (const FrameQueries& f : frames) {
    f.validate();
    if (f.query_count() != n) throw DataError("prematch_chain: mismatched query counts");
  }

  TrackedQuerySequence out;
  out.source = QuerySource::kPrematched;
  out.frames.push_back(frames.front());

  const int d = frames.front().embeddings.extent(1);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const Tensor& prev = out.frames.back().embeddings;
    const Tensor& cur = frames[t].embeddings;
    Tensor cost = Tensor::zeros({n, n});
    auto vc = cost.mutable_values();
    const auto vp = prev.values();
    const auto vu = cur.values();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        vc[static_cast<std::size_t>(r) * n + c] =
            cosine_cost(vp.subspan(static_cast<std::size_t>(r) * d, static_cast<std::size_t>(d)),
                        vu.subspan(static_cast<std::size_t>(c) * d, static_cast<std::size_t>(d)));
      }
    }
    const Assignment a = hungarian(cost);

    // Reorder all three arrays so slot r keeps following the same object.
    const FrameQueries& src = frames[t];
    FrameQueries aligned;
    auto gather_rows = [&](const Tensor& m) {
      const int cols = m.extent(1);
      Tensor g = Tensor::zeros({n, cols});
      auto vg = g.mutable_values();
      const auto vm = m.values();
      for (int r = 0; r < n; ++r) {
        const std::size_t srow = static_cast<std::size_t>(a.permutation[static_cast<std::size_t>(r)]) *
                                 static_cast<std::size_t>(cols);
        std::copy(vm.begin() + static_cast<std::ptrdiff_t>(srow),
                  vm.begin() + static_cast<std::ptrdiff_t>(srow + static_cast<std::size_t>(cols)),
                  vg.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * cols));
      }
      return g;
    };
    aligned.embeddings = gather_rows(src.embeddings);
    aligned.class_logits = gather_rows(src.class_logits);
    aligned.mask_embeddings = gather_rows(src.mask_embeddings);
    out.frames.push_back(std::move(aligned));
  }
  return out;
}

std::vector<GroundTruthTrack> clip_ground_truth(const PanopticVideo& video,
                                                int begin, int length) {
  if (begin < 0 || length < 1 || begin + length > video.frames()) {
    throw std::invalid_argument("clip_ground_truth: window out of range");
  }
  const std::size_t hw = static_cast<std::size_t>(video.height) * static_cast<std::size_t>(video.width);
  std::vector<GroundTruthTrack> tracks;
  for (const auto& [id, info] : video.tracks) {
    GroundTruthTrack g;
    g.track_id = id;
    g.class_id = info.class_id;
    g.is_thing = info.is_thing;
    g.first_appearance_frame = -1;
    g.masks.resize(static_cast<std::size_t>(length));
    for (int t = 0; t < length; ++t) {
      const auto& map = video.id_maps[static_cast<std::size_t>(begin + t)];
      auto& mask = g.masks[static_cast<std::size_t>(t)];
      mask.assign(hw, 0.0);
      bool any = false;
      for (std::size_t px = 0; px < hw; ++px) {
        if (map[px] == id) {
          mask[px] = 1.0;
          any = true;
        }
      }
      if (any && g.first_appearance_frame < 0) g.first_appearance_frame = t;
    }
    if (g.first_appearance_frame >= 0) tracks.push_back(std::move(g));
  }
  return tracks;
}

double match_cost(const Tensor& class_logits, const Tensor& mask_logits, int row,
                  int gt_class, const std::vector<double>& gt_mask,
                  const MatchWeights& weights) {
  const std::size_t hw = gt_mask.size();
  if (mask_logits.rank() != 2 || static_cast<std::size_t>(mask_logits.extent(1)) != hw) {
    throw std::invalid_argument("match_cost: mask extent mismatch");
  }
  const int k1 = class_logits.extent(1);
  if (gt_class < 0 || gt_class >= k1 - 1) {
    throw std::invalid_argument("match_cost: class out of range");
  }

  // -p(gt class) under the row softmax.
  double mx = class_logits(row, 0);
  for (int j = 1; j < k1; ++j) mx = std::max(mx, class_logits(row, j));
  double denom = 0.0;
  for (int j = 0; j < k1; ++j) denom += std::exp(class_logits(row, j) - mx);
  const double p_class = std::exp(class_logits(row, gt_class) - mx) / denom;

  const auto logits = mask_logits.values().subspan(static_cast<std::size_t>(row) * hw, hw);
  double bce = 0.0, sum_p = 0.0, sum_py = 0.0, sum_y = 0.0;
  for (std::size_t px = 0; px < hw; ++px) {
    const double z = logits[px];
    const double y = gt_mask[px];
    bce += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    sum_p += p;
    sum_py += p * y;
    sum_y += y;
  }
  bce /= static_cast<double>(hw);
  const double denom_dice = sum_p + sum_y;
  const double dice = denom_dice > 0.0 ? 1.0 - 2.0 * sum_py / denom_dice : 0.0;

  return weights.lambda_class * (-p_class) + weights.lambda_mask * bce +
         weights.lambda_dice * dice;
}

namespace {

Assignment match_padded(const std::vector<GroundTruthTrack>& tracks, int num_queries,
                        const std::function<double(int /*track*/, int /*query*/)>& cost_fn) {
  const int num_tracks = static_cast<int>(tracks.size());
  if (num_tracks == 0) return Assignment{};
  if (num_tracks > num_queries) {
    throw DataError("matching: more ground-truth tracks (" + std::to_string(num_tracks) +
                    ") than queries (" + std::to_string(num_queries) + ")");
  }
  Tensor cost = Tensor::full({num_queries, num_queries}, kPadCost);
  auto vc = cost.mutable_values();
  for (int i = 0; i < num_tracks; ++i) {
    for (int q = 0; q < num_queries; ++q) {
      vc[static_cast<std::size_t>(i) * num_queries + q] = cost_fn(i, q);
    }
  }
  Assignment full = hungarian(cost);
  Assignment out;
  out.permutation.assign(full.permutation.begin(), full.permutation.begin() + num_tracks);
  for (int i = 0; i < num_tracks; ++i) {
    out.total_cost += vc[static_cast<std::size_t>(i) * num_queries + out.permutation[static_cast<std::size_t>(i)]];
  }
  return out;
}

}  // namespace

Assignment match_tracker(const ClipPredictions& segmenter_preds,
                         const ClipPredictions& tracker_preds,
                         const std::vector<GroundTruthTrack>& tracks,
                         const MatchWeights& weights, int iter, int max_iter) {
  // Source switch at half of training, inclusive.
  const ClipPredictions& preds = (2 * iter >= max_iter) ? tracker_preds : segmenter_preds;
  if (preds.class_logits.empty()) throw DataError("match_tracker: no predictions");
  const int num_queries = preds.class_logits.front().extent(0);
  return match_padded(tracks, num_queries, [&](int i, int q) {
    const GroundTruthTrack& g = tracks[static_cast<std::size_t>(i)];
    const int f = g.first_appearance_frame;
    return match_cost(preds.class_logits[static_cast<std::size_t>(f)],
                      preds.mask_logits[static_cast<std::size_t>(f)], q, g.class_id,
                      g.masks[static_cast<std::size_t>(f)], weights);
  });
}

Assignment match_refiner(const ClipPredictions& tracker_preds,
                         const ClipPredictions& refiner_preds,
                         const std::vector<GroundTruthTrack>& tracks,
                         const MatchWeights& weights, int iter, int max_iter) {
  const ClipPredictions& preds = (2 * iter >= max_iter) ? refiner_preds : tracker_preds;
  if (preds.class_logits.empty()) throw DataError("match_refiner: no predictions");
  const int num_queries = preds.class_logits.front().extent(0);
  const int frames = static_cast<int>(preds.class_logits.size());
  return match_padded(tracks, num_queries, [&](int i, int q) {
    const GroundTruthTrack& g = tracks[static_cast<std::size_t>(i)];
    double total = 0.0;
    for (int t = 0; t < frames; ++t) {
      total += match_cost(preds.class_logits[static_cast<std::size_t>(t)],
                          preds.mask_logits[static_cast<std::size_t>(t)], q, g.class_id,
                          g.masks[static_cast<std::size_t>(t)], weights);
    }
    return total;
  });
}

}  // namespace dvps
