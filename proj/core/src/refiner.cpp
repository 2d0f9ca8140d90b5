#include "dvps/refiner.hpp"

#include <cmath>
#include <string>

#include "dvps/common.hpp"

namespace dvps {

TemporalBlockParams TemporalBlockParams::init(const RefinerConfig& config, Rng& rng) {
  const int d = config.dim;
  const int k = config.conv_kernel;
  TemporalBlockParams p;
  const double std_conv = 1.0 / std::sqrt(static_cast<double>(k * d));
  p.conv_kernel = Tensor::randn({k, d, d}, rng, std_conv, true);
  p.conv_bias = Tensor::zeros({d}, true);
  p.temporal_attention = MhaParams::init(d, config.heads, rng);
  p.norm_conv_gamma = Tensor::full({d}, 1.0, true);
  p.norm_conv_beta = Tensor::zeros({d}, true);
  p.norm_attn_gamma = Tensor::full({d}, 1.0, true);
  p.norm_attn_beta = Tensor::zeros({d}, true);
  p.norm_ffn_gamma = Tensor::full({d}, 1.0, true);
  p.norm_ffn_beta = Tensor::zeros({d}, true);
  const double std1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double std2 = 1.0 / std::sqrt(static_cast<double>(config.ffn_hidden));
  p.ffn_w1 = Tensor::randn({d, config.ffn_hidden}, rng, std1, true);
  p.ffn_b1 = Tensor::zeros({config.ffn_hidden}, true);
  p.ffn_w2 = Tensor::randn({config.ffn_hidden, d}, rng, std2, true);
  p.ffn_b2 = Tensor::zeros({d}, true);
  return p;
}

RefinerParams RefinerParams::init(const RefinerConfig& config, Rng& rng) {
  if (config.conv_kernel % 2 == 0) {
    throw std::invalid_argument("RefinerParams: conv_kernel must be odd");
  }
  RefinerParams p;
  p.config = config;
  for (int i = 0; i < config.blocks; ++i) {
    p.blocks.push_back(TemporalBlockParams::init(config, rng));
  }
  const int d = config.dim;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  p.weighting_w = Tensor::randn({d, 1}, rng, std_d, true);
  p.weighting_b = Tensor::zeros({1}, true);
  // Zero-started output layers, as in the tracker heads.
  p.class_w = Tensor::zeros({d, config.num_classes + 1}, true);
  p.class_b = Tensor::zeros({config.num_classes + 1}, true);
  p.mask_w1 = Tensor::randn({d, d}, rng, std_d, true);
  p.mask_b1 = Tensor::zeros({d}, true);
  p.mask_w2 = Tensor::randn({d, d}, rng, std_d, true);
  p.mask_b2 = Tensor::zeros({d}, true);
  p.mask_w3 = Tensor::zeros({d, config.mask_dim}, true);
  p.mask_b3 = Tensor::zeros({config.mask_dim}, true);
  return p;
}

namespace {

void register_mha(ParamSet& set, const std::string& prefix, const MhaParams& p) {
  set.add(prefix + ".wq", p.wq);
  set.add(prefix + ".bq", p.bq);
  set.add(prefix + ".wk", p.wk);
  set.add(prefix + ".bk", p.bk);
  set.add(prefix + ".wv", p.wv);
  set.add(prefix + ".bv", p.bv);
  set.add(prefix + ".wo", p.wo);
  set.add(prefix + ".bo", p.bo);
}

Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
           const Tensor& b2) {
  return linear(relu(linear(x, w1, b1)), w2, b2);
}

}  // namespace

ParamSet RefinerParams::param_set() const {
  ParamSet set;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "refiner.block" + std::to_string(i);
    const TemporalBlockParams& b = blocks[i];
    set.add(prefix + ".conv.kernel", b.conv_kernel);
    set.add(prefix + ".conv.bias", b.conv_bias);
    register_mha(set, prefix + ".temporal_attn", b.temporal_attention);
    set.add(prefix + ".norm_conv.gamma", b.norm_conv_gamma);
    set.add(prefix + ".norm_conv.beta", b.norm_conv_beta);
    set.add(prefix + ".norm_attn.gamma", b.norm_attn_gamma);
    set.add(prefix + ".norm_attn.beta", b.norm_attn_beta);
    set.add(prefix + ".norm_ffn.gamma", b.norm_ffn_gamma);
    set.add(prefix + ".norm_ffn.beta", b.norm_ffn_beta);
    set.add(prefix + ".ffn.w1", b.ffn_w1);
    set.add(prefix + ".ffn.b1", b.ffn_b1);
    set.add(prefix + ".ffn.w2", b.ffn_w2);
    set.add(prefix + ".ffn.b2", b.ffn_b2);
  }
  set.add("refiner.weighting.w", weighting_w);
  set.add("refiner.weighting.b", weighting_b);
  set.add("refiner.class.w", class_w);
  set.add("refiner.class.b", class_b);
  set.add("refiner.mask.w1", mask_w1);
  set.add("refiner.mask.b1", mask_b1);
  set.add("refiner.mask.w2", mask_w2);
  set.add("refiner.mask.b2", mask_b2);
  set.add("refiner.mask.w3", mask_w3);
  set.add("refiner.mask.b3", mask_b3);
  return set;
}

std::vector<Tensor> RefinerParams::tensors() const { return param_set().tensors(); }

Tensor temporal_decoder_block(const Tensor& q, const TemporalBlockParams& params) {
  if (q.rank() != 3) throw std::invalid_argument("temporal_decoder_block: [T,N,D] required");
  const int t_len = q.extent(0), n = q.extent(1), d = q.extent(2);

  // [T,N,D] -> [N,T,D] so each slot's track is one contiguous [T,D] block.
  const Tensor by_slot = swap_axes01(q).view({n * t_len, d});
  std::vector<Tensor> slots;
  slots.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    Tensor track = slice_rows(by_slot, s * t_len, t_len);  // [T,D]

    const Tensor conv_in = layer_norm(track, params.norm_conv_gamma, params.norm_conv_beta);
    track = add(track, conv1d_temporal(conv_in, params.conv_kernel, params.conv_bias));

    const Tensor attn_in = layer_norm(track, params.norm_attn_gamma, params.norm_attn_beta);
    track = add(track, multi_head_attention(attn_in, attn_in, attn_in, params.temporal_attention));

    const Tensor ffn_in = layer_norm(track, params.norm_ffn_gamma, params.norm_ffn_beta);
    track = add(track, ffn(ffn_in, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2));

    slots.push_back(std::move(track));
  }
  return swap_axes01(concat_rows(slots).view({n, t_len, d}));
}

Tensor temporal_weighting(const Tensor& q_rf, const Tensor& weighting_w,
                          const Tensor& weighting_b) {
  if (q_rf.rank() != 3) throw std::invalid_argument("temporal_weighting: [T,N,D] required");
  const int t_len = q_rf.extent(0), n = q_rf.extent(1), d = q_rf.extent(2);
  const Tensor by_slot = swap_axes01(q_rf).view({n * t_len, d});
  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    const Tensor track = slice_rows(by_slot, s * t_len, t_len);      // [T,D]
    const Tensor logits = linear(track, weighting_w, weighting_b);   // [T,1]
    const Tensor weights = softmax(logits, 0);                       // sums to 1 over T
    rows.push_back(matmul(transpose(weights), track));               // [1,D]
  }
  return concat_rows(rows);  // [N,D]
}

Tensor refiner_class_head(const Tensor& queries, const RefinerParams& params) {
  return linear(queries, params.class_w, params.class_b);
}

Tensor refiner_mask_head(const Tensor& queries, const RefinerParams& params) {
  Tensor h = relu(linear(queries, params.mask_w1, params.mask_b1));
  h = relu(linear(h, params.mask_w2, params.mask_b2));
  return linear(h, params.mask_w3, params.mask_b3);
}

TrackedQuerySequence refiner_forward(const TrackedQuerySequence& tracker_output,
                                     const RefinerParams& params) {
  if (tracker_output.frames.empty()) throw DataError("refiner_forward: empty sequence");
  const int t_len = tracker_output.frame_count();
  const int n = tracker_output.query_count();
  const int d = tracker_output.frames.front().embeddings.extent(1);

  // Stack the (frozen) tracker queries into [T,N,D].
  std::vector<Tensor> frame_rows;
  frame_rows.reserve(static_cast<std::size_t>(t_len));
  for (const FrameQueries& f : tracker_output.frames) {
    frame_rows.push_back(f.embeddings.detach());
  }
  Tensor q = concat_rows(frame_rows).view({t_len, n, d});

  for (const TemporalBlockParams& block : params.blocks) {
    q = temporal_decoder_block(q, block);
  }

  const Tensor weighted = temporal_weighting(q, params.weighting_w, params.weighting_b);
  const Tensor video_class_logits = refiner_class_head(weighted, params);

  TrackedQuerySequence out;
  out.source = QuerySource::kRefiner;
  const Tensor flat = q.view({t_len * n, d});
  for (int t = 0; t < t_len; ++t) {
    FrameQueries f;
    f.embeddings = slice_rows(flat, t * n, n);
    f.class_logits = video_class_logits;  // identical tensor at every frame
    f.mask_embeddings = refiner_mask_head(f.embeddings, params);
    out.frames.push_back(std::move(f));
  }
  return out;
}

}  // namespace dvps
