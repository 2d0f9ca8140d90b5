#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dvps/datamodel.hpp"
#include "dvps/losses.hpp"
#include "dvps/synthclip.hpp"

namespace dvps::cli {

/// Command line misuse: unknown config keys, missing flags, inconsistent
/// flag combinations. Exits with status 1.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

/// Typed view of the resolved configuration JSON.
struct RunConfig {
  std::uint64_t seed = 7;
  int gen_videos = 10;
  SceneConfig scene;
  int heads = 4;
  int tracker_blocks = 3;
  int refiner_blocks = 3;
  int ffn_hidden = 256;
  int conv_kernel = 5;
  TrainConfig train_tracker;
  TrainConfig train_refiner;
  FuseConfig fuse;
};

/// The schema: every recognized key with its default value.
nlohmann::json default_config_json();

/// defaults <- file (optional) <- "--set dotted.key=value" overrides.
/// Unknown keys and type mismatches are rejected with the offending path.
nlohmann::json resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides);

RunConfig config_from_json(const nlohmann::json& resolved);

/// Child seed for a named random stream ("data", "init-tracker", ...).
std::uint64_t derive_seed(std::uint64_t root, const std::string& stream);

}  // namespace dvps::cli
