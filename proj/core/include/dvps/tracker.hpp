#pragma once

#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/rng.hpp"
#include "dvps/tensor.hpp"

namespace dvps {

struct TrackerConfig {
  int dim = 64;
  int heads = 4;
  int mask_dim = 32;
  int blocks = 3;
  int ffn_hidden = 256;  // 4 * dim
  int num_classes = 7;   // class head emits num_classes + 1 logits
};

/// One denoising block: reference cross-attention, self-attention over the
/// query slots, and a feed-forward net, each pre-normalized with a residual
/// path around it.
struct TdBlockParams {
  MhaParams reference_attention;
  MhaParams self_attention;
  Tensor norm_ref_gamma, norm_ref_beta;
  Tensor norm_self_gamma, norm_self_beta;
  Tensor norm_ffn_gamma, norm_ffn_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static TdBlockParams init(const TrackerConfig& config, Rng& rng);
  void collect(std::vector<Tensor>& out) const;
};

struct TrackerParams {
  TrackerConfig config;
  std::vector<TdBlockParams> blocks;
  Tensor class_w, class_b;  // dim -> num_classes + 1
  Tensor mask_w1, mask_b1, mask_w2, mask_b2, mask_w3, mask_b3;  // dim ->..-> mask_dim

  static TrackerParams init(const TrackerConfig& config, Rng& rng);
  /// Names carry the "tracker." prefix; registration order is canonical.
  ParamSet param_set() const;
  std::vector<Tensor> tensors() const;
};

/// Residual attention: exactly id + MHA(q, k, v).
Tensor rca(const Tensor& id, const Tensor& q, const Tensor& k, const Tensor& v,
           const MhaParams& attention);

/// One denoising block. The identity path carries the noisy current-frame
/// queries; the attention query comes from the previous frame's reference
/// while keys and values are the noisy queries themselves.
Tensor td_block(const Tensor& noisy, const Tensor& reference, const TdBlockParams& params);

Tensor tracker_class_head(const Tensor& queries, const TrackerParams& params);
Tensor tracker_mask_head(const Tensor& queries, const TrackerParams& params);

/// Runs the denoising blocks frame by frame. Frame 1 uses its own
/// pre-matched queries as the reference; frame i uses the denoised output of
/// frame i-1, so outputs at frame i depend only on frames <= i. Head outputs
/// ride along in the returned sequence.
TrackedQuerySequence tracker_forward(const TrackedQuerySequence& prematched,
                                     const TrackerParams& params);

}  // namespace dvps
