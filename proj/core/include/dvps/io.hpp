#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dvps/datamodel.hpp"
#include "dvps/tensor.hpp"

namespace dvps {

// Binary query dump, one file per video.
//   magic "DVPSQ1\0", then little-endian u32 T, N, D, Dm, K, then per frame
//   f32 arrays embeddings [N*D], class_logits [N*(K+1)], mask_embeddings [N*Dm].
void save_query_dump(const std::string& path, const std::vector<FrameQueries>& frames);
std::vector<FrameQueries> load_query_dump(const std::string& path);

// Pixel feature dump, same framing discipline as the query dump.
//   magic "DVPSF1\0", little-endian u32 T, Dm, H, W, then per frame f32
//   features [Dm*H*W].
void save_feature_dump(const std::string& path, const VideoClip& clip);
VideoClip load_feature_dump(const std::string& path);

// Panoptic annotation: <dir>/<name>.json manifest (track table, extents,
// frame file names) plus one 16-bit binary PGM id map per frame.
void save_panoptic(const std::string& dir, const std::string& name,
                   const PanopticVideo& video);
PanopticVideo load_panoptic(const std::string& dir, const std::string& name);

// 16-bit PGM (P5, maxval 65535, MSB first) and 24-bit PPM (P6).
void save_pgm16(const std::string& path, const std::vector<std::uint16_t>& pixels,
                int width, int height);
std::vector<std::uint16_t> load_pgm16(const std::string& path, int& width, int& height);
void save_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb,
              int width, int height);

/// Deterministic segment id -> RGB. Void (0) renders black.
void id_to_color(std::uint16_t id, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b);

// Parameter checkpoints.
//   magic "DVPSW1\0", little-endian u32 tensor count, then per tensor
//   u32 name length, name bytes, u32 rank, u32 extents, f64 data.
void save_checkpoint(const std::string& path, const ParamSet& params);
/// Strict load: the file must contain exactly the tensors of `params`,
/// matching shapes, in any order.
void load_checkpoint_into(const std::string& path, ParamSet& params);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

// Loss curve CSV: header "iter,loss,lr" then one row per iteration.
struct LossCurvePoint {
  int iter = 0;
  double loss = 0.0;
  double lr = 0.0;
};
void save_loss_csv(const std::string& path, const std::vector<LossCurvePoint>& points);

}  // namespace dvps
