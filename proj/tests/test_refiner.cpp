#include <doctest.h>

#include <cmath>
#include <vector>

#include "dvps/refiner.hpp"
#include "dvps/rng.hpp"
#include "dvps/tracker.hpp"

using namespace dvps;

namespace {

RefinerConfig tiny_config() {
  RefinerConfig c;
  c.dim = 8;
  c.heads = 2;
  c.mask_dim = 4;
  c.blocks = 2;
  c.conv_kernel = 3;
  c.ffn_hidden = 16;
  c.num_classes = 3;
  return c;
}

void zero_tensor(Tensor t) {
  for (double& v : t.mutable_values()) v = 0.0;
}

void zero_residual_branches(TemporalBlockParams& block) {
  zero_tensor(block.conv_kernel);
  zero_tensor(block.conv_bias);
  zero_tensor(block.temporal_attention.wo);
  zero_tensor(block.temporal_attention.bo);
  zero_tensor(block.ffn_w2);
  zero_tensor(block.ffn_b2);
}

TrackedQuerySequence random_sequence(int t_len, int n, int d, Rng& rng) {
  TrackedQuerySequence seq;
  seq.source = QuerySource::kTracker;
  for (int t = 0; t < t_len; ++t) {
    FrameQueries f;
    f.embeddings = Tensor::randn({n, d}, rng);
    f.class_logits = Tensor::randn({n, 4}, rng);
    f.mask_embeddings = Tensor::randn({n, 4}, rng);
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  const auto va = a.values();
  const auto vb = b.values();
  REQUIRE(va.size() == vb.size());
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

}  // namespace

TEST_CASE("temporal_decoder_block identity under zeroed non-residual weights") {
  Rng rng(401);
  TemporalBlockParams block = TemporalBlockParams::init(tiny_config(), rng);
  zero_residual_branches(block);
  const Tensor q = Tensor::randn({5, 3, 8}, rng);
  CHECK(bitwise_equal(temporal_decoder_block(q, block), q));
}

TEST_CASE("temporal_decoder_block keeps slots independent") {
  Rng rng(409);
  const TemporalBlockParams block = TemporalBlockParams::init(tiny_config(), rng);
  Tensor q = Tensor::randn({4, 3, 8}, rng);
  const Tensor base = temporal_decoder_block(q, block);

  Tensor modified = q.clone();
  auto v = modified.mutable_values();
  // Slot 1 of every frame changes; slots 0 and 2 must not react.
  for (int t = 0; t < 4; ++t) {
    for (int c = 0; c < 8; ++c) v[(static_cast<std::size_t>(t) * 3 + 1) * 8 + c] += 0.37;
  }
  const Tensor out = temporal_decoder_block(modified, block);
  for (int t = 0; t < 4; ++t) {
    for (int s = 0; s < 3; ++s) {
      for (int c = 0; c < 8; ++c) {
        if (s == 1) continue;
        CHECK(out(t, s, c) == base(t, s, c));
      }
    }
  }
}

TEST_CASE("temporal_decoder_block gradient check at T=1 and T=4") {
  Rng rng(419);
  const TemporalBlockParams block = TemporalBlockParams::init(tiny_config(), rng);
  std::vector<Tensor> leaves;
  block.temporal_attention.collect(leaves);
  leaves.insert(leaves.end(),
                {block.conv_kernel, block.conv_bias, block.ffn_w1, block.ffn_b1, block.ffn_w2,
                 block.ffn_b2, block.norm_conv_gamma, block.norm_conv_beta, block.norm_attn_gamma,
                 block.norm_attn_beta, block.norm_ffn_gamma, block.norm_ffn_beta});
  for (int t_len : {1, 4}) {
    const Tensor q = Tensor::randn({t_len, 2, 8}, rng);
    const double err = check_gradients(
        [&]() {
          const Tensor out = temporal_decoder_block(q, block);
          return sum_all(mul(out, out));
        },
        leaves, 1e-5);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("temporal_weighting single frame is bit-exact identity") {
  Rng rng(421);
  const Tensor q = Tensor::randn({1, 4, 8}, rng);
  const Tensor w = Tensor::randn({8, 1}, rng);
  const Tensor b = Tensor::randn({1}, rng);
  const Tensor out = temporal_weighting(q, w, b);
  CHECK(out.shape() == std::vector<int>{4, 8});
  const auto vq = q.values();
  const auto vo = out.values();
  for (std::size_t i = 0; i < vo.size(); ++i) CHECK(vo[i] == vq[i]);
}

TEST_CASE("temporal_weighting with zero weights is the temporal mean") {
  Rng rng(431);
  const int t_len = 5, n = 3, d = 8;
  const Tensor q = Tensor::randn({t_len, n, d}, rng);
  const Tensor out = temporal_weighting(q, Tensor::zeros({d, 1}), Tensor::zeros({1}));
  for (int s = 0; s < n; ++s) {
    for (int c = 0; c < d; ++c) {
      double mean = 0.0;
      for (int t = 0; t < t_len; ++t) mean += q(t, s, c);
      mean /= t_len;
      CHECK(std::abs(out(s, c) - mean) <= 1e-12);
    }
  }
}

TEST_CASE("temporal_weighting matches the direct formula") {
  Rng rng(433);
  const int t_len = 3, n = 2, d = 8;
  const Tensor q = Tensor::randn({t_len, n, d}, rng);
  const Tensor w = Tensor::randn({d, 1}, rng);
  const Tensor b = Tensor::randn({1}, rng);
  const Tensor out = temporal_weighting(q, w, b);
  for (int s = 0; s < n; ++s) {
    double logits[3];
    for (int t = 0; t < t_len; ++t) {
      double z = b(0);
      for (int c = 0; c < d; ++c) z += q(t, s, c) * w(c, 0);
      logits[t] = z;
    }
    const double mx = std::max({logits[0], logits[1], logits[2]});
    double denom = 0.0;
    double weights[3];
    for (int t = 0; t < t_len; ++t) {
      weights[t] = std::exp(logits[t] - mx);
      denom += weights[t];
    }
    double weight_sum = 0.0;
    for (int t = 0; t < t_len; ++t) {
      weights[t] /= denom;
      weight_sum += weights[t];
    }
    CHECK(std::abs(weight_sum - 1.0) <= 1e-12);
    for (int c = 0; c < d; ++c) {
      double expected = 0.0;
      for (int t = 0; t < t_len; ++t) expected += weights[t] * q(t, s, c);
      CHECK(std::abs(out(s, c) - expected) <= 1e-12);
    }
  }
}

TEST_CASE("temporal_weighting gradient check") {
  Rng rng(439);
  const Tensor q0 = Tensor::randn({4, 3, 8}, rng);
  const Tensor w = Tensor::randn({8, 1}, rng).clone(true);
  const Tensor b = Tensor::randn({1}, rng).clone(true);
  const double err = check_gradients(
      [&]() {
        const Tensor out = temporal_weighting(q0, w, b);
        return sum_all(mul(out, out));
      },
      {w, b}, 1e-5);
  CHECK(err <= 1e-4);
}

TEST_CASE("refiner_forward identity blocks reuse tracker masks under shared heads") {
  Rng rng(443);
  const RefinerConfig config = tiny_config();
  RefinerParams params = RefinerParams::init(config, rng);
  for (TemporalBlockParams& block : params.blocks) zero_residual_branches(block);

  TrackerConfig tracker_config;
  tracker_config.dim = config.dim;
  tracker_config.heads = config.heads;
  tracker_config.mask_dim = config.mask_dim;
  tracker_config.blocks = 1;
  tracker_config.ffn_hidden = config.ffn_hidden;
  tracker_config.num_classes = config.num_classes;
  TrackerParams tracker_params = TrackerParams::init(tracker_config, rng);

  // Share the mask head so identical queries produce identical embeddings.
  auto copy_into = [](const Tensor& src, Tensor dst) {
    auto d = dst.mutable_values();
    const auto s = src.values();
    std::copy(s.begin(), s.end(), d.begin());
  };
  copy_into(tracker_params.mask_w1, params.mask_w1);
  copy_into(tracker_params.mask_b1, params.mask_b1);
  copy_into(tracker_params.mask_w2, params.mask_w2);
  copy_into(tracker_params.mask_b2, params.mask_b2);
  copy_into(tracker_params.mask_w3, params.mask_w3);
  copy_into(tracker_params.mask_b3, params.mask_b3);

  const TrackedQuerySequence seq = random_sequence(4, 3, config.dim, rng);
  const TrackedQuerySequence refined = refiner_forward(seq, params);
  for (int t = 0; t < 4; ++t) {
    const Tensor expected =
        tracker_mask_head(seq.frames[static_cast<std::size_t>(t)].embeddings, tracker_params);
    CHECK(bitwise_equal(refined.frames[static_cast<std::size_t>(t)].mask_embeddings, expected));
  }
}

TEST_CASE("refiner class logits are frame-invariant exactly") {
  Rng rng(449);
  const RefinerConfig config = tiny_config();
  const RefinerParams params = RefinerParams::init(config, rng);
  const TrackedQuerySequence seq = random_sequence(5, 3, config.dim, rng);
  const TrackedQuerySequence refined = refiner_forward(seq, params);
  for (int t = 1; t < 5; ++t) {
    CHECK(refined.frames[static_cast<std::size_t>(t)].class_logits.shares_storage_with(
        refined.frames[0].class_logits));
    CHECK(bitwise_equal(refined.frames[static_cast<std::size_t>(t)].class_logits,
                        refined.frames[0].class_logits));
  }
  CHECK(refined.source == QuerySource::kRefiner);
}

TEST_CASE("refiner is intentionally non-causal") {
  Rng rng(457);
  const RefinerConfig config = tiny_config();
  const RefinerParams params = RefinerParams::init(config, rng);
  TrackedQuerySequence seq = random_sequence(5, 3, config.dim, rng);
  const TrackedQuerySequence base = refiner_forward(seq, params);
  seq.frames[4].embeddings = Tensor::randn({3, config.dim}, rng);  // last frame
  const TrackedQuerySequence perturbed = refiner_forward(seq, params);
  // Long-term attention mixes the whole video, so earlier frames change.
  CHECK_FALSE(bitwise_equal(base.frames[0].embeddings, perturbed.frames[0].embeddings));
}

TEST_CASE("full refiner gradient check on T=4 N=3") {
  Rng rng(461);
  const RefinerConfig config = tiny_config();
  const RefinerParams params = RefinerParams::init(config, rng);
  const TrackedQuerySequence seq = random_sequence(4, 3, config.dim, rng);
  const double err = check_gradients(
      [&]() {
        const TrackedQuerySequence out = refiner_forward(seq, params);
        Tensor loss = sum_all(mul(out.frames[0].class_logits, out.frames[0].class_logits));
        for (const FrameQueries& f : out.frames) {
          loss = add(loss, sum_all(mul(f.mask_embeddings, f.mask_embeddings)));
        }
        return loss;
      },
      params.tensors(), 1e-5);
  CHECK(err <= 1e-4);
}
