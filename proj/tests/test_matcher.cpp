#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "dvps/common.hpp"
#include "dvps/matcher.hpp"
#include "dvps/rng.hpp"

using namespace dvps;

namespace {

/// Oracle: lexicographic enumeration keeps the lexicographically smallest
/// permutation among equal-cost optima, matching the hungarian contract.
Assignment brute_force(const Tensor& cost) {
  const int n = cost.extent(0);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    if (total < best.total_cost) {
      best.total_cost = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

bool has_unique_optimum(const Tensor& cost, double best_total) {
  const int n = cost.extent(0);
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  int hits = 0;
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    if (total == best_total) ++hits;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return hits == 1;
}

FrameQueries make_frame(const Tensor& embeddings, const Tensor& class_logits,
                        const Tensor& mask_embeddings) {
  FrameQueries f;
  f.embeddings = embeddings;
  f.class_logits = class_logits;
  f.mask_embeddings = mask_embeddings;
  return f;
}

}  // namespace

TEST_CASE("hungarian trivial cases") {
  const Tensor diag = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 0.0});
  const Assignment a = hungarian(diag);
  CHECK(a.permutation == std::vector<int>{0, 1});
  CHECK(a.total_cost == 0.0);

  const Assignment one = hungarian(Tensor::from({1, 1}, {3.5}));
  CHECK(one.permutation == std::vector<int>{0});
  CHECK(one.total_cost == 3.5);
}

TEST_CASE("hungarian matches the hand-solved 3x3 case") {
  const Tensor cost = Tensor::from({3, 3}, {4, 1, 3, 2, 0, 5, 3, 2, 2});
  const Assignment a = hungarian(cost);
  CHECK(a.permutation == std::vector<int>{1, 0, 2});
  CHECK(a.total_cost == 5.0);
}

TEST_CASE("hungarian rejects bad input") {
  CHECK_THROWS_AS((void)hungarian(Tensor::zeros({2, 3})), std::invalid_argument);
  Tensor nan_cost = Tensor::zeros({2, 2});
  nan_cost.mutable_values()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)hungarian(nan_cost), NumericError);
}

TEST_CASE("hungarian ties break to the lexicographically smallest permutation") {
  const Assignment all_zero = hungarian(Tensor::zeros({4, 4}));
  CHECK(all_zero.permutation == std::vector<int>{0, 1, 2, 3});

  // Four permutations share the optimal cost 1; (0,2,1) is the smallest.
  const Tensor cost = Tensor::from({3, 3}, {1, 0, 1, 0, 1, 0, 1, 0, 1});
  const Assignment a = hungarian(cost);
  const Assignment oracle = brute_force(cost);
  CHECK(a.total_cost == oracle.total_cost);
  CHECK(a.permutation == oracle.permutation);
}

TEST_CASE("hungarian equals exhaustive search on random matrices") {
  Rng rng(101);
  for (int n = 2; n <= 7; ++n) {
    for (int trial = 0; trial < 60; ++trial) {
      Tensor cost = Tensor::zeros({n, n});
      auto vc = cost.mutable_values();
      for (double& c : vc) c = rng.uniform();
      const Assignment got = hungarian(cost);
      const Assignment oracle = brute_force(cost);
      CHECK(got.total_cost == oracle.total_cost);
      if (has_unique_optimum(cost, oracle.total_cost)) {
        CHECK(got.permutation == oracle.permutation);
      }
    }
  }
}

TEST_CASE("cosine_cost range and self cost") {
  Rng rng(103);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(8), b(8);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    const double c = cosine_cost(a, b);
    CHECK(c >= 0.0);
    CHECK(c <= 2.0);
    CHECK(cosine_cost(a, a) <= 1e-12);
  }
  const std::vector<double> zero(8, 0.0);
  const std::vector<double> unit = {1, 0, 0, 0, 0, 0, 0, 0};
  CHECK(cosine_cost(zero, unit) == 1.0);
}

TEST_CASE("prematch_chain base case and permutation recovery") {
  Rng rng(107);
  const int n = 4, d = 8;
  const Tensor emb = Tensor::randn({n, d}, rng);
  const Tensor logits = Tensor::randn({n, 3}, rng);
  const Tensor memb = Tensor::randn({n, 5}, rng);
  const FrameQueries frame = make_frame(emb, logits, memb);

  const TrackedQuerySequence single = prematch_chain({frame});
  CHECK(single.frame_count() == 1);
  CHECK(bitwise_equal(single.frames[0].embeddings, emb));

  // Frame 2 is a row permutation of frame 1; the chain must undo it.
  const std::vector<int> perm = {2, 0, 3, 1};
  auto permute = [&](const Tensor& m) {
    const int cols = m.extent(1);
    Tensor out = Tensor::zeros({n, cols});
    auto vo = out.mutable_values();
    const auto vm = m.values();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < cols; ++c) {
        vo[static_cast<std::size_t>(r) * cols + c] =
            vm[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)]) * cols + c];
      }
    }
    return out;
  };
  const FrameQueries frame2 = make_frame(permute(emb), permute(logits), permute(memb));
  const TrackedQuerySequence out = prematch_chain({frame, frame2});
  CHECK(bitwise_equal(out.frames[1].embeddings, emb));
  CHECK(bitwise_equal(out.frames[1].class_logits, logits));
  CHECK(bitwise_equal(out.frames[1].mask_embeddings, memb));
}

TEST_CASE("prematch_chain aligns identical orthonormal embeddings to identity") {
  const int n = 3;
  Tensor emb = Tensor::zeros({n, n});
  auto ve = emb.mutable_values();
  for (int i = 0; i < n; ++i) ve[static_cast<std::size_t>(i) * n + i] = 1.0;
  const FrameQueries frame = make_frame(emb, Tensor::zeros({n, 2}), Tensor::zeros({n, 2}));
  const TrackedQuerySequence out = prematch_chain({frame, frame, frame});
  for (int t = 0; t < 3; ++t) {
    CHECK(bitwise_equal(out.frames[static_cast<std::size_t>(t)].embeddings, emb));
  }
}

TEST_CASE("prematch_chain is equivariant to shuffles of later frames") {
  Rng rng(109);
  const int n = 5, d = 8;
  const FrameQueries f0 = make_frame(Tensor::randn({n, d}, rng), Tensor::randn({n, 3}, rng),
                                     Tensor::randn({n, 4}, rng));
  const FrameQueries f1 = make_frame(Tensor::randn({n, d}, rng), Tensor::randn({n, 3}, rng),
                                     Tensor::randn({n, 4}, rng));
  const TrackedQuerySequence base = prematch_chain({f0, f1});

  const std::vector<int> perm = {4, 2, 0, 1, 3};
  auto permute = [&](const Tensor& m) {
    const int cols = m.extent(1);
    Tensor out = Tensor::zeros({n, cols});
    auto vo = out.mutable_values();
    const auto vm = m.values();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < cols; ++c) {
        vo[static_cast<std::size_t>(r) * cols + c] =
            vm[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)]) * cols + c];
      }
    }
    return out;
  };
  const FrameQueries f1s =
      make_frame(permute(f1.embeddings), permute(f1.class_logits), permute(f1.mask_embeddings));
  const TrackedQuerySequence shuffled = prematch_chain({f0, f1s});
  CHECK(bitwise_equal(base.frames[1].embeddings, shuffled.frames[1].embeddings));
  CHECK(bitwise_equal(base.frames[1].class_logits, shuffled.frames[1].class_logits));
}

TEST_CASE("prematch_chain rejects mismatched query counts") {
  Rng rng(113);
  const FrameQueries a = make_frame(Tensor::randn({3, 4}, rng), Tensor::randn({3, 2}, rng),
                                    Tensor::randn({3, 2}, rng));
  const FrameQueries b = make_frame(Tensor::randn({4, 4}, rng), Tensor::randn({4, 2}, rng),
                                    Tensor::randn({4, 2}, rng));
  CHECK_THROWS_AS((void)prematch_chain({a, b}), DataError);
}

TEST_CASE("match_cost limit cases") {
  MatchWeights w;
  // Clamped-logit perfect prediction sits at the analytic minimum.
  const Tensor class_logits = Tensor::from({1, 3}, {80.0, 0.0, 0.0});
  const Tensor mask_logits = Tensor::from({1, 4}, {50.0, 50.0, -50.0, -50.0});
  const std::vector<double> gt_mask = {1.0, 1.0, 0.0, 0.0};
  const double cost = match_cost(class_logits, mask_logits, 0, 0, gt_mask, w);
  CHECK(std::abs(cost - (-w.lambda_class)) <= 1e-9);

  MatchWeights zero;
  zero.lambda_class = zero.lambda_mask = zero.lambda_dice = 0.0;
  CHECK(match_cost(class_logits, mask_logits, 0, 1, gt_mask, zero) == 0.0);
}

TEST_CASE("match_cost matches a hand computation on a 2x2 grid") {
  MatchWeights w;
  const Tensor class_logits = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
  const double z = 3.0;
  const Tensor mask_logits = Tensor::from({1, 4}, {z, z, -z, -z});
  const std::vector<double> gt_mask = {1.0, 0.0, 1.0, 0.0};  // half overlap

  auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  auto bce = [](double logit, double y) {
    return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  };
  const double bce_mean = (bce(z, 1) + bce(z, 0) + bce(-z, 1) + bce(-z, 0)) / 4.0;
  const double sum_p = 2.0 * sigma(z) + 2.0 * sigma(-z);
  const double sum_py = sigma(z) + sigma(-z);
  const double dice = 1.0 - 2.0 * sum_py / (sum_p + 2.0);
  const double expected = w.lambda_class * (-1.0 / 3.0) + w.lambda_mask * bce_mean +
                          w.lambda_dice * dice;
  CHECK(std::abs(match_cost(class_logits, mask_logits, 0, 0, gt_mask, w) - expected) <= 1e-12);
}

namespace {

/// Two tracks on a 1x2 grid; `flip` swaps which query covers which track.
ClipPredictions two_query_preds(bool flip) {
  ClipPredictions preds;
  const double a = flip ? -9.0 : 9.0;
  preds.class_logits.push_back(Tensor::from({2, 3}, {9, 0, 0, 0, 9, 0}));
  preds.mask_logits.push_back(Tensor::from({2, 2}, {a, -a, -a, a}));
  return preds;
}

std::vector<GroundTruthTrack> two_tracks() {
  std::vector<GroundTruthTrack> tracks(2);
  tracks[0].track_id = 1;
  tracks[0].class_id = 0;
  tracks[0].first_appearance_frame = 0;
  tracks[0].masks = {{1.0, 0.0}};
  tracks[1].track_id = 2;
  tracks[1].class_id = 1;
  tracks[1].first_appearance_frame = 0;
  tracks[1].masks = {{0.0, 1.0}};
  return tracks;
}

}  // namespace

TEST_CASE("match_tracker switches prediction sources at half of training") {
  const ClipPredictions seg = two_query_preds(false);      // favors identity
  const ClipPredictions tracker = two_query_preds(true);   // favors the swap
  const auto tracks = two_tracks();
  MatchWeights w;

  const Assignment early = match_tracker(seg, tracker, tracks, w, 0, 100);
  CHECK(early.permutation == std::vector<int>{0, 1});

  const Assignment half = match_tracker(seg, tracker, tracks, w, 50, 100);
  CHECK(half.permutation == std::vector<int>{1, 0});

  const Assignment late = match_tracker(seg, tracker, tracks, w, 99, 100);
  CHECK(late.permutation == std::vector<int>{1, 0});
}

TEST_CASE("match_tracker matches at the first appearance frame") {
  // Track appears only at frame 1; predictions at frame 0 would give the
  // opposite assignment.
  ClipPredictions preds;
  preds.class_logits.push_back(Tensor::from({2, 3}, {9, 0, 0, 0, 9, 0}));
  preds.class_logits.push_back(Tensor::from({2, 3}, {9, 0, 0, 0, 9, 0}));
  preds.mask_logits.push_back(Tensor::from({2, 2}, {-9, 9, 9, -9}));
  preds.mask_logits.push_back(Tensor::from({2, 2}, {9, -9, -9, 9}));

  std::vector<GroundTruthTrack> tracks(1);
  tracks[0].track_id = 1;
  tracks[0].class_id = 0;
  tracks[0].first_appearance_frame = 1;
  tracks[0].masks = {{0.0, 0.0}, {1.0, 0.0}};

  MatchWeights w;
  const Assignment a = match_tracker(preds, preds, tracks, w, 0, 10);
  CHECK(a.permutation == std::vector<int>{0});
}

TEST_CASE("match_tracker rejects more tracks than queries") {
  ClipPredictions preds;
  preds.class_logits.push_back(Tensor::from({1, 3}, {9, 0, 0}));
  preds.mask_logits.push_back(Tensor::from({1, 2}, {9, -9}));
  auto tracks = two_tracks();
  MatchWeights w;
  CHECK_THROWS_AS((void)match_tracker(preds, preds, tracks, w, 0, 10), DataError);
}

TEST_CASE("match_refiner video-level matching equals brute force") {
  Rng rng(127);
  const int n = 3, frames = 2, hw = 6;
  ClipPredictions preds;
  std::vector<GroundTruthTrack> tracks(static_cast<std::size_t>(n));
  for (int t = 0; t < frames; ++t) {
    preds.class_logits.push_back(Tensor::randn({n, 4}, rng));
    preds.mask_logits.push_back(Tensor::randn({n, hw}, rng, 2.0));
  }
  Rng mask_rng(131);
  for (int i = 0; i < n; ++i) {
    tracks[static_cast<std::size_t>(i)].track_id = static_cast<std::uint16_t>(i + 1);
    tracks[static_cast<std::size_t>(i)].class_id = i % 3;
    tracks[static_cast<std::size_t>(i)].first_appearance_frame = 0;
    for (int t = 0; t < frames; ++t) {
      std::vector<double> mask(hw);
      for (double& m : mask) m = mask_rng.uniform() < 0.5 ? 1.0 : 0.0;
      tracks[static_cast<std::size_t>(i)].masks.push_back(std::move(mask));
    }
  }
  MatchWeights w;

  const Assignment got = match_refiner(preds, preds, tracks, w, 0, 10);

  // Oracle: enumerate all 3! assignments of summed per-frame costs.
  Tensor cost = Tensor::zeros({n, n});
  auto vc = cost.mutable_values();
  for (int i = 0; i < n; ++i) {
    for (int q = 0; q < n; ++q) {
      double total = 0.0;
      for (int t = 0; t < frames; ++t) {
        total += match_cost(preds.class_logits[static_cast<std::size_t>(t)],
                            preds.mask_logits[static_cast<std::size_t>(t)], q,
                            tracks[static_cast<std::size_t>(i)].class_id,
                            tracks[static_cast<std::size_t>(i)].masks[static_cast<std::size_t>(t)], w);
      }
      vc[static_cast<std::size_t>(i) * n + q] = total;
    }
  }
  const Assignment oracle = brute_force(cost);
  CHECK(got.permutation == oracle.permutation);
}

TEST_CASE("match_refiner forced single assignment and source switch") {
  ClipPredictions tracker = two_query_preds(false);
  ClipPredictions refiner = two_query_preds(true);
  const auto tracks = two_tracks();
  MatchWeights w;
  CHECK(match_refiner(tracker, refiner, tracks, w, 0, 100).permutation ==
        std::vector<int>{0, 1});
  CHECK(match_refiner(tracker, refiner, tracks, w, 50, 100).permutation ==
        std::vector<int>{1, 0});

  std::vector<GroundTruthTrack> one_track = {tracks[0]};
  ClipPredictions single;
  single.class_logits.push_back(Tensor::from({1, 3}, {0.0, 0.0, 0.0}));
  single.mask_logits.push_back(Tensor::from({1, 2}, {0.0, 0.0}));
  CHECK(match_refiner(single, single, one_track, w, 0, 10).permutation ==
        std::vector<int>{0});
}

TEST_CASE("clip_ground_truth computes first appearance frames") {
  PanopticVideo video;
  video.height = 1;
  video.width = 4;
  video.tracks[1] = TrackInfo{0, true};
  video.tracks[2] = TrackInfo{1, true};
  video.id_maps = {
      {1, 1, 0, 0},
      {1, 1, 0, 0},
      {1, 0, 2, 2},
  };
  const auto tracks = clip_ground_truth(video, 0, 3);
  REQUIRE(tracks.size() == 2);
  CHECK(tracks[0].track_id == 1);
  CHECK(tracks[0].first_appearance_frame == 0);
  CHECK(tracks[1].track_id == 2);
  CHECK(tracks[1].first_appearance_frame == 2);

  // Restricting the window drops tracks that never appear inside it.
  const auto window = clip_ground_truth(video, 0, 2);
  REQUIRE(window.size() == 1);
  CHECK(window[0].track_id == 1);
}
