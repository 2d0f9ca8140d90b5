#include "selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <vector>

#include "dvps/losses.hpp"
#include "dvps/matcher.hpp"
#include "dvps/metrics.hpp"
#include "dvps/refiner.hpp"
#include "dvps/rng.hpp"
#include "dvps/tensor.hpp"
#include "dvps/tracker.hpp"

namespace dvps::cli {

namespace {

struct Suite {
  const char* name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return max_error <= tolerance; }
};

Tensor pool(const Tensor& t) { return sum_all(mul(t, t)); }

double primitive_gradients() {
  Rng rng(0xc0ffee);
  Rng aux(0xf00d);
  const Tensor other = Tensor::randn({3, 4}, aux);
  const Tensor w = Tensor::randn({4, 3}, aux);
  const Tensor b = Tensor::randn({3}, aux);
  const Tensor gamma = Tensor::randn({4}, aux);
  const Tensor beta = Tensor::randn({4}, aux);
  const Tensor kernel = Tensor::randn({3, 4, 4}, aux, 0.5);
  const Tensor cbias = Tensor::randn({4}, aux);
  const Tensor targets = Tensor::from({3, 4}, {1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0});
  MhaParams mha = MhaParams::init(4, 2, aux);

  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> cases = {
      {"add", [&](const Tensor& x) { return pool(add(x, other)); }},
      {"mul", [&](const Tensor& x) { return pool(mul(x, other)); }},
      {"sigmoid", [&](const Tensor& x) { return pool(sigmoid(x)); }},
      {"matmul", [&](const Tensor& x) { return pool(matmul(x, w)); }},
      {"softmax", [&](const Tensor& x) { return pool(softmax(x, 1)); }},
      {"log_softmax", [&](const Tensor& x) { return pool(log_softmax(x, 1)); }},
      {"layer_norm", [&](const Tensor& x) { return pool(layer_norm(x, gamma, beta)); }},
      {"linear", [&](const Tensor& x) { return pool(linear(x, w, b)); }},
      {"bce", [&](const Tensor& x) { return pool(bce_with_logits(x, targets)); }},
      {"mha", [&](const Tensor& x) { return pool(multi_head_attention(x, x, x, mha)); }},
  };
  double worst = 0.0;
  for (const auto& [name, fn] : cases) {
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x0 = Tensor::randn({3, 4}, rng, 0.8);
      worst = std::max(worst, check_gradients(fn, x0, 1e-5));
    }
  }
  // Temporal convolution has its own input shape.
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = Tensor::randn({5, 4}, rng, 0.8);
    worst = std::max(worst, check_gradients(
                                [&](const Tensor& x) {
                                  return pool(conv1d_temporal(x, kernel, cbias));
                                },
                                x0, 1e-5));
  }
  return worst;
}

double block_gradients() {
  Rng rng(0xbead);
  TrackerConfig tracker_config;
  tracker_config.dim = 8;
  tracker_config.heads = 2;
  tracker_config.mask_dim = 4;
  tracker_config.blocks = 1;
  tracker_config.ffn_hidden = 16;
  tracker_config.num_classes = 3;
  const TdBlockParams block = TdBlockParams::init(tracker_config, rng);
  const Tensor noisy = Tensor::randn({3, 8}, rng);
  const Tensor reference = Tensor::randn({3, 8}, rng);
  std::vector<Tensor> leaves;
  block.collect(leaves);
  double worst = check_gradients(
      [&]() {
        const Tensor out = td_block(noisy, reference, block);
        return pool(out);
      },
      leaves, 1e-5);

  RefinerConfig refiner_config;
  refiner_config.dim = 8;
  refiner_config.heads = 2;
  refiner_config.mask_dim = 4;
  refiner_config.blocks = 1;
  refiner_config.conv_kernel = 3;
  refiner_config.ffn_hidden = 16;
  refiner_config.num_classes = 3;
  const TemporalBlockParams tblock = TemporalBlockParams::init(refiner_config, rng);
  std::vector<Tensor> tleaves;
  tblock.temporal_attention.collect(tleaves);
  tleaves.insert(tleaves.end(), {tblock.conv_kernel, tblock.conv_bias, tblock.ffn_w1,
                                 tblock.ffn_b1, tblock.ffn_w2, tblock.ffn_b2});
  const Tensor q = Tensor::randn({4, 2, 8}, rng);
  worst = std::max(worst, check_gradients(
                              [&]() { return pool(temporal_decoder_block(q, tblock)); },
                              tleaves, 1e-5));

  const Tensor ww = Tensor::randn({8, 1}, rng).clone(true);
  const Tensor wb = Tensor::randn({1}, rng).clone(true);
  worst = std::max(worst, check_gradients(
                              [&]() { return pool(temporal_weighting(q, ww, wb)); },
                              {ww, wb}, 1e-5));
  return worst;
}

double assignment_oracle() {
  Rng rng(0xdead);
  double worst = 0.0;
  for (int n = 2; n <= 6; ++n) {
    for (int trial = 0; trial < 40; ++trial) {
      Tensor cost = Tensor::zeros({n, n});
      for (double& c : cost.mutable_values()) c = rng.uniform();
      const Assignment got = hungarian(cost);
      // Brute force over permutations.
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      double best = std::numeric_limits<double>::infinity();
      do {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, total);
      } while (std::next_permutation(perm.begin(), perm.end()));
      worst = std::max(worst, std::abs(got.total_cost - best));
    }
  }
  return worst;
}

double metric_identities() {
  double worst = 0.0;
  worst = std::max(worst, std::abs(round_table_value(vpq_mean(
                              {{1, 52.1}, {2, 51.5}, {4, 51.2}, {6, 51.1}})) -
                          51.4));
  worst = std::max(worst, std::abs(round_table_value(vpq_mean(
                              {{1, 54.7}, {2, 54.1}, {4, 53.3}, {6, 52.8}})) -
                          53.7));

  PanopticVideo v;
  v.height = 2;
  v.width = 4;
  v.tracks[1] = TrackInfo{0, true};
  v.tracks[9] = TrackInfo{2, false};
  v.id_maps = {{1, 1, 9, 9, 1, 1, 9, 9}, {9, 1, 1, 9, 9, 1, 1, 9}};
  for (int k : {1, 2}) worst = std::max(worst, std::abs(vpq_k(v, v, k) - 100.0));
  worst = std::max(worst, std::abs(stq(v, v) - 1.0));
  worst = std::max(worst, std::abs(association_accuracy(v, v) - 1.0));
  return worst;
}

double softmax_rows() {
  Rng rng(0xfade);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor y = softmax(Tensor::randn({4, 6}, rng, 5.0), 1);
    for (int i = 0; i < 4; ++i) {
      double s = 0.0;
      for (int j = 0; j < 6; ++j) s += y(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return worst;
}

}  // namespace

bool run_selfcheck(std::ostream& out) {
  std::vector<Suite> suites = {
      {"primitive_gradients", primitive_gradients(), 1e-4},
      {"block_gradients", block_gradients(), 1e-4},
      {"assignment_oracle", assignment_oracle(), 0.0},
      {"metric_identities", metric_identities(), 1e-9},
      {"softmax_row_sums", softmax_rows(), 1e-12},
  };
  if (std::getenv("DVPS_SELFCHECK_FAULT") != nullptr) {
    // Documented test hook: injects a failing suite so callers can verify
    // the nonzero exit path.
    suites.push_back({"injected_fault", 1.0, 0.0});
  }
  bool all_pass = true;
  for (const Suite& s : suites) {
    all_pass = all_pass && s.pass();
    out << (s.pass() ? "[PASS] " : "[FAIL] ") << std::left << std::setw(24) << s.name
        << " max_error=" << std::scientific << std::setprecision(3) << s.max_error
        << " tolerance=" << s.tolerance << std::defaultfloat << "\n";
  }
  return all_pass;
}

}  // namespace dvps::cli
