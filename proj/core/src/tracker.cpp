#include "dvps/tracker.hpp"

#include <cmath>
#include <string>

#include "dvps/common.hpp"

namespace dvps {

namespace {

Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
           const Tensor& b2) {
  return linear(relu(linear(x, w1, b1)), w2, b2);
}

void collect_mha(const MhaParams& p, std::vector<Tensor>& out) { p.collect(out); }

}  // namespace

TdBlockParams TdBlockParams::init(const TrackerConfig& config, Rng& rng) {
  const int d = config.dim;
  TdBlockParams p;
  p.reference_attention = MhaParams::init(d, config.heads, rng);
  p.self_attention = MhaParams::init(d, config.heads, rng);
  p.norm_ref_gamma = Tensor::full({d}, 1.0, true);
  p.norm_ref_beta = Tensor::zeros({d}, true);
  p.norm_self_gamma = Tensor::full({d}, 1.0, true);
  p.norm_self_beta = Tensor::zeros({d}, true);
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

void TdBlockParams::collect(std::vector<Tensor>& out) const {
  collect_mha(reference_attention, out);
  collect_mha(self_attention, out);
  out.insert(out.end(), {norm_ref_gamma, norm_ref_beta, norm_self_gamma, norm_self_beta,
                         norm_ffn_gamma, norm_ffn_beta, ffn_w1, ffn_b1, ffn_w2, ffn_b2});
}

TrackerParams TrackerParams::init(const TrackerConfig& config, Rng& rng) {
  TrackerParams p;
  p.config = config;
  for (int i = 0; i < config.blocks; ++i) p.blocks.push_back(TdBlockParams::init(config, rng));
  const int d = config.dim;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  // Output layers start at zero: class probabilities begin uniform and mask
  // logits begin at 0 instead of saturating against the pixel features.
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

}  // namespace

ParamSet TrackerParams::param_set() const {
  ParamSet set;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "tracker.block" + std::to_string(i);
    const TdBlockParams& b = blocks[i];
    register_mha(set, prefix + ".ref_attn", b.reference_attention);
    register_mha(set, prefix + ".self_attn", b.self_attention);
    set.add(prefix + ".norm_ref.gamma", b.norm_ref_gamma);
    set.add(prefix + ".norm_ref.beta", b.norm_ref_beta);
    set.add(prefix + ".norm_self.gamma", b.norm_self_gamma);
    set.add(prefix + ".norm_self.beta", b.norm_self_beta);
    set.add(prefix + ".norm_ffn.gamma", b.norm_ffn_gamma);
    set.add(prefix + ".norm_ffn.beta", b.norm_ffn_beta);
    set.add(prefix + ".ffn.w1", b.ffn_w1);
    set.add(prefix + ".ffn.b1", b.ffn_b1);
    set.add(prefix + ".ffn.w2", b.ffn_w2);
    set.add(prefix + ".ffn.b2", b.ffn_b2);
  }
  set.add("tracker.class.w", class_w);
  set.add("tracker.class.b", class_b);
  set.add("tracker.mask.w1", mask_w1);
  set.add("tracker.mask.b1", mask_b1);
  set.add("tracker.mask.w2", mask_w2);
  set.add("tracker.mask.b2", mask_b2);
  set.add("tracker.mask.w3", mask_w3);
  set.add("tracker.mask.b3", mask_b3);
  return set;
}

std::vector<Tensor> TrackerParams::tensors() const { return param_set().tensors(); }

Tensor rca(const Tensor& id, const Tensor& q, const Tensor& k, const Tensor& v,
           const MhaParams& attention) {
  if (id.shape() != q.shape()) {
    throw std::invalid_argument("rca: id and q extents must agree");
  }
  return add(id, multi_head_attention(q, k, v, attention));
}

Tensor td_block(const Tensor& noisy, const Tensor& reference, const TdBlockParams& params) {
  if (noisy.shape() != reference.shape()) {
    throw std::invalid_argument("td_block: noisy and reference extents must agree");
  }
  // Pre-norm feeds the attention; the identity path stays raw.
  const Tensor ref_n = layer_norm(reference, params.norm_ref_gamma, params.norm_ref_beta);
  const Tensor cur_n = layer_norm(noisy, params.norm_ref_gamma, params.norm_ref_beta);
  const Tensor denoised = rca(noisy, ref_n, cur_n, cur_n, params.reference_attention);

  const Tensor self_n = layer_norm(denoised, params.norm_self_gamma, params.norm_self_beta);
  const Tensor after_self =
      add(denoised, multi_head_attention(self_n, self_n, self_n, params.self_attention));

  const Tensor ffn_n = layer_norm(after_self, params.norm_ffn_gamma, params.norm_ffn_beta);
  return add(after_self, ffn(ffn_n, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2));
}

Tensor tracker_class_head(const Tensor& queries, const TrackerParams& params) {
  return linear(queries, params.class_w, params.class_b);
}

Tensor tracker_mask_head(const Tensor& queries, const TrackerParams& params) {
  Tensor h = relu(linear(queries, params.mask_w1, params.mask_b1));
  h = relu(linear(h, params.mask_w2, params.mask_b2));
  return linear(h, params.mask_w3, params.mask_b3);
}

TrackedQuerySequence tracker_forward(const TrackedQuerySequence& prematched,
                                     const TrackerParams& params) {
  if (prematched.frames.empty()) throw DataError("tracker_forward: empty sequence");
  TrackedQuerySequence out;
  out.source = QuerySource::kTracker;
  Tensor previous;  // denoised queries of frame i-1
  for (int t = 0; t < prematched.frame_count(); ++t) {
    const Tensor noisy = prematched.frames[static_cast<std::size_t>(t)].embeddings.detach();
    const Tensor reference = (t == 0) ? noisy : previous;
    Tensor x = noisy;
    for (const TdBlockParams& block : params.blocks) x = td_block(x, reference, block);
    previous = x;

    FrameQueries f;
    f.embeddings = x;
    f.class_logits = tracker_class_head(x, params);
    f.mask_embeddings = tracker_mask_head(x, params);
    out.frames.push_back(std::move(f));
  }
  return out;
}

}  // namespace dvps
