#include "run_config.hpp"

#include <fstream>

#include "dvps/common.hpp"
#include "dvps/rng.hpp"

namespace dvps::cli {

using json = nlohmann::json;

json default_config_json() {
  const SceneConfig scene;
  const TrainConfig tracker_defaults;
  TrainConfig refiner_defaults;
  refiner_defaults.clip_length = 21;
  refiner_defaults.batch_size = 2;
  const FuseConfig fuse;

  auto train_json = [](const TrainConfig& t) {
    return json{{"max_iter", t.max_iter},
                {"batch_size", t.batch_size},
                {"clip_length", t.clip_length},
                {"learning_rate", t.learning_rate},
                {"decay_factor", t.decay_factor},
                {"decay_point", t.decay_point},
                {"lambda_class", t.weights.lambda_class},
                {"lambda_mask", t.weights.lambda_mask},
                {"lambda_dice", t.weights.lambda_dice},
                {"no_object_weight", t.weights.no_object_weight},
                {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},
                {"scale_min", t.scale_min},
                {"scale_max", t.scale_max},
                {"crop", t.crop}};
  };

  return json{
      {"seed", 7},
      {"gen", {{"videos", 10}}},
      {"scene",
       {{"frames", scene.frames},
        {"height", scene.height},
        {"width", scene.width},
        {"things_min", scene.things_min},
        {"things_max", scene.things_max},
        {"stuff_regions", scene.stuff_regions},
        {"speed_min", scene.speed_min},
        {"speed_max", scene.speed_max},
        {"appear_prob", scene.appear_prob},
        {"disappear_prob", scene.disappear_prob},
        {"noise_sigma", scene.noise_sigma},
        {"distractors", scene.distractors},
        {"thing_classes", scene.thing_classes},
        {"stuff_classes", scene.stuff_classes},
        {"embed_dim", scene.embed_dim},
        {"mask_embed_dim", scene.mask_embed_dim}}},
      {"model",
       {{"heads", 4},
        {"tracker_blocks", 3},
        {"refiner_blocks", 3},
        {"ffn_hidden", 256},
        {"conv_kernel", 5}}},
      {"train_tracker", train_json(tracker_defaults)},
      {"train_refiner", train_json(refiner_defaults)},
      {"fuse",
       {{"object_threshold", fuse.object_threshold},
        {"mask_threshold", fuse.mask_threshold},
        {"min_mask_fraction", fuse.min_mask_fraction}}},
  };
}

namespace {

void merge_validated(json& base, const json& overlay, const std::string& path) {
  if (!overlay.is_object()) {
    throw UsageError("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
  }
  for (const auto& [key, value] : overlay.items()) {
    const std::string child = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw UsageError("config: unknown key '" + child + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_validated(slot, value, child);
    } else {
      if (slot.is_number() && !value.is_number()) {
        throw UsageError("config: key '" + child + "' expects a number");
      }
      if (slot.is_boolean() != value.is_boolean()) {
        throw UsageError("config: key '" + child + "' has the wrong type");
      }
      slot = value;
    }
  }
}

}  // namespace

json resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  json resolved = default_config_json();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError(config_path + ": cannot open for reading");
    json file;
    try {
      in >> file;
    } catch (const json::exception& e) {
      throw DataError(config_path + ": malformed JSON (" + e.what() + ")");
    }
    merge_validated(resolved, file, "");
  }
  for (const std::string& entry : overrides) {
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw UsageError("--set expects dotted.key=value, got '" + entry + "'");
    }
    const std::string key = entry.substr(0, eq);
    const std::string text = entry.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;  // unquoted strings are allowed
    }
    // Build a nested single-key object and merge it through the validator.
    json nested = value;
    std::size_t end = key.size();
    while (true) {
      const std::size_t dot = key.rfind('.', end - 1);
      const std::string part =
          dot == std::string::npos ? key.substr(0, end) : key.substr(dot + 1, end - dot - 1);
      if (part.empty()) throw UsageError("--set: empty key segment in '" + key + "'");
      nested = json{{part, nested}};
      if (dot == std::string::npos) break;
      end = dot;
    }
    merge_validated(resolved, nested, "");
  }
  return resolved;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.gen_videos = j.at("gen").at("videos").get<int>();

  const json& s = j.at("scene");
  c.scene.frames = s.at("frames").get<int>();
  c.scene.height = s.at("height").get<int>();
  c.scene.width = s.at("width").get<int>();
  c.scene.things_min = s.at("things_min").get<int>();
  c.scene.things_max = s.at("things_max").get<int>();
  c.scene.stuff_regions = s.at("stuff_regions").get<int>();
  c.scene.speed_min = s.at("speed_min").get<double>();
  c.scene.speed_max = s.at("speed_max").get<double>();
  c.scene.appear_prob = s.at("appear_prob").get<double>();
  c.scene.disappear_prob = s.at("disappear_prob").get<double>();
  c.scene.noise_sigma = s.at("noise_sigma").get<double>();
  c.scene.distractors = s.at("distractors").get<int>();
  c.scene.thing_classes = s.at("thing_classes").get<int>();
  c.scene.stuff_classes = s.at("stuff_classes").get<int>();
  c.scene.embed_dim = s.at("embed_dim").get<int>();
  c.scene.mask_embed_dim = s.at("mask_embed_dim").get<int>();

  const json& m = j.at("model");
  c.heads = m.at("heads").get<int>();
  c.tracker_blocks = m.at("tracker_blocks").get<int>();
  c.refiner_blocks = m.at("refiner_blocks").get<int>();
  c.ffn_hidden = m.at("ffn_hidden").get<int>();
  c.conv_kernel = m.at("conv_kernel").get<int>();

  auto train_from = [](const json& t) {
    TrainConfig out;
    out.max_iter = t.at("max_iter").get<int>();
    out.batch_size = t.at("batch_size").get<int>();
    out.clip_length = t.at("clip_length").get<int>();
    out.learning_rate = t.at("learning_rate").get<double>();
    out.decay_factor = t.at("decay_factor").get<double>();
    out.decay_point = t.at("decay_point").get<double>();
    out.weights.lambda_class = t.at("lambda_class").get<double>();
    out.weights.lambda_mask = t.at("lambda_mask").get<double>();
    out.weights.lambda_dice = t.at("lambda_dice").get<double>();
    out.weights.no_object_weight = t.at("no_object_weight").get<double>();
    out.weight_decay = t.at("weight_decay").get<double>();
    out.grad_clip = t.at("grad_clip").get<double>();
    out.scale_min = t.at("scale_min").get<int>();
    out.scale_max = t.at("scale_max").get<int>();
    out.crop = t.at("crop").get<int>();
    return out;
  };
  c.train_tracker = train_from(j.at("train_tracker"));
  c.train_refiner = train_from(j.at("train_refiner"));

  const json& f = j.at("fuse");
  c.fuse.object_threshold = f.at("object_threshold").get<double>();
  c.fuse.mask_threshold = f.at("mask_threshold").get<double>();
  c.fuse.min_mask_fraction = f.at("min_mask_fraction").get<double>();
  return c;
}

std::uint64_t derive_seed(std::uint64_t root, const std::string& stream) {
  return Rng(root).stream(stream).next_u64();
}

}  // namespace dvps::cli
