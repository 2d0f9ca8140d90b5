#pragma once

#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/rng.hpp"
#include "dvps/tensor.hpp"

namespace dvps {

struct RefinerConfig {
  int dim = 64;
  int heads = 4;
  int mask_dim = 32;
  int blocks = 3;
  int conv_kernel = 5;  // odd; +-2 frames of short-term context
  int ffn_hidden = 256;
  int num_classes = 7;
};

/// One temporal decoder block: short-term temporal convolution, long-term
/// temporal self-attention, feed-forward; each pre-normalized with residual.
/// Slots never mix inside a block.
struct TemporalBlockParams {
  Tensor conv_kernel;  // [k, dim, dim]
  Tensor conv_bias;    // [dim]
  MhaParams temporal_attention;
  Tensor norm_conv_gamma, norm_conv_beta;
  Tensor norm_attn_gamma, norm_attn_beta;
  Tensor norm_ffn_gamma, norm_ffn_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static TemporalBlockParams init(const RefinerConfig& config, Rng& rng);
};

struct RefinerParams {
  RefinerConfig config;
  std::vector<TemporalBlockParams> blocks;
  Tensor weighting_w, weighting_b;  // dim -> 1, temporal weighting logits
  Tensor class_w, class_b;
  Tensor mask_w1, mask_b1, mask_w2, mask_b2, mask_w3, mask_b3;

  static RefinerParams init(const RefinerConfig& config, Rng& rng);
  /// Names carry the "refiner." prefix.
  ParamSet param_set() const;
  std::vector<Tensor> tensors() const;
};

/// q is [T, N, dim]; each slot's [T, dim] track is processed independently.
Tensor temporal_decoder_block(const Tensor& q, const TemporalBlockParams& params);

/// Per slot: a scalar logit per frame (Linear dim -> 1), softmax over the T
/// frames, and the weighted sum of the slot's queries. Returns [N, dim].
Tensor temporal_weighting(const Tensor& q_rf, const Tensor& weighting_w,
                          const Tensor& weighting_b);

Tensor refiner_class_head(const Tensor& queries, const RefinerParams& params);
Tensor refiner_mask_head(const Tensor& queries, const RefinerParams& params);

/// Refines the whole video at once (intentionally non-causal). Mask
/// embeddings are re-predicted per frame from the refined queries; class
/// logits are predicted once from the temporal weighting and broadcast to
/// every frame of the returned sequence.
TrackedQuerySequence refiner_forward(const TrackedQuerySequence& tracker_output,
                                     const RefinerParams& params);

}  // namespace dvps
