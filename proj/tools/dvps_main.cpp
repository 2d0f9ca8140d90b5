#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dvps/common.hpp"
#include "dvps/corpus.hpp"
#include "dvps/io.hpp"
#include "dvps/losses.hpp"
#include "dvps/metrics.hpp"
#include "dvps/parallel.hpp"
#include "dvps/pipeline.hpp"
#include "dvps/refiner.hpp"
#include "dvps/tracker.hpp"
#include "run_config.hpp"
#include "selfcheck.hpp"

namespace {

using json = nlohmann::json;
using namespace dvps;
using namespace dvps::cli;

bool quiet_mode() {
  const char* level = std::getenv("DVPS_LOG_LEVEL");
  return level != nullptr && std::string(level) == "quiet";
}

/// Echoes the resolved configuration: to stdout (unless quiet) plus a
/// timestamped sidecar log in the output directory. Primary artifacts stay
/// timestamp-free so reruns are byte-identical.
void echo_config(const std::string& out_dir, const std::string& command, const json& resolved) {
  const std::string text = resolved.dump(2);
  if (!quiet_mode()) {
    std::cout << "command: " << command << "\nseed: " << resolved.at("seed").get<std::uint64_t>()
              << "\nresolved config:\n"
              << text << "\n";
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream config_out(out_dir + "/config.json");
    config_out << text << "\n";

    const std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    std::ofstream log(out_dir + "/run.log", std::ios::app);
    log << stamp << " " << command << " seed=" << resolved.at("seed").get<std::uint64_t>()
        << "\n";
  }
}

struct DatasetInfo {
  int thing_classes = 0;
  int stuff_classes = 0;
  int embed_dim = 0;
  int mask_embed_dim = 0;
  int num_classes() const { return thing_classes + stuff_classes; }
};

DatasetInfo dataset_info(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IoError(dir + "/manifest.json: cannot open for reading");
  json manifest;
  try {
    in >> manifest;
    DatasetInfo info;
    info.thing_classes = manifest.at("num_thing_classes").get<int>();
    info.stuff_classes = manifest.at("num_stuff_classes").get<int>();
    info.embed_dim = manifest.at("embed_dim").get<int>();
    info.mask_embed_dim = manifest.at("mask_embed_dim").get<int>();
    return info;
  } catch (const json::exception& e) {
    throw DataError(dir + "/manifest.json: malformed JSON (" + e.what() + ")");
  }
}

TrackerConfig tracker_config_for(const RunConfig& config, const DatasetInfo& info) {
  TrackerConfig t;
  t.dim = info.embed_dim;
  t.heads = config.heads;
  t.mask_dim = info.mask_embed_dim;
  t.blocks = config.tracker_blocks;
  t.ffn_hidden = config.ffn_hidden;
  t.num_classes = info.num_classes();
  return t;
}

RefinerConfig refiner_config_for(const RunConfig& config, const DatasetInfo& info) {
  RefinerConfig r;
  r.dim = info.embed_dim;
  r.heads = config.heads;
  r.mask_dim = info.mask_embed_dim;
  r.blocks = config.refiner_blocks;
  r.conv_kernel = config.conv_kernel;
  r.ffn_hidden = config.ffn_hidden;
  r.num_classes = info.num_classes();
  return r;
}

void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) {
    throw DataError(what + " not found: " + path);
  }
}

int cmd_gen_data(const std::string& config_path, const std::vector<std::string>& sets,
                 const std::string& out_dir) {
  const json resolved = resolve_config(config_path, sets);
  echo_config(out_dir, "gen-data", resolved);
  RunConfig config = config_from_json(resolved);
  SceneConfig scene = config.scene;
  scene.seed = derive_seed(config.seed, "data");
  generate_dataset(out_dir, scene, config.gen_videos, env_thread_count());
  if (!quiet_mode()) {
    std::cout << "wrote " << config.gen_videos << " videos to " << out_dir << "\n";
  }
  return 0;
}

int cmd_train_tracker(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::string& data_dir, const std::string& out_dir,
                      const std::string& resume_dir, int stop_at) {
  const json resolved = resolve_config(config_path, sets);
  echo_config(out_dir, "train-tracker", resolved);
  const RunConfig config = config_from_json(resolved);

  const Corpus corpus = load_dataset(data_dir);
  const DatasetInfo info = dataset_info(data_dir);
  TrainConfig train = config.train_tracker;
  train.seed = derive_seed(config.seed, "train-tracker");

  Rng init_rng(derive_seed(config.seed, "init-tracker"));
  TrackerParams params = TrackerParams::init(tracker_config_for(config, info), init_rng);

  TrainLoop loop(params.param_set(), train);
  if (!resume_dir.empty()) {
    require_file(resume_dir + "/tracker.dvpsw", "tracker checkpoint");
    ParamSet set = params.param_set();
    load_checkpoint_into(resume_dir + "/tracker.dvpsw", set);
    loop.load(resume_dir + "/train_state.dvpst");
  }
  const TrainResult result = train_tracker(params, corpus, train, &loop, stop_at);

  save_checkpoint(out_dir + "/tracker.dvpsw", params.param_set());
  loop.save(out_dir + "/train_state.dvpst");
  save_loss_csv(out_dir + "/loss.csv", result.curve);
  if (!quiet_mode()) {
    std::cout << "trained tracker to iteration " << loop.next_iter << ", checkpoint at "
              << out_dir << "/tracker.dvpsw\n";
  }
  return 0;
}

int cmd_train_refiner(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::string& data_dir, const std::string& tracker_path,
                      const std::string& out_dir, const std::string& resume_dir, int stop_at) {
  const json resolved = resolve_config(config_path, sets);
  echo_config(out_dir, "train-refiner", resolved);
  const RunConfig config = config_from_json(resolved);

  const Corpus corpus = load_dataset(data_dir);
  const DatasetInfo info = dataset_info(data_dir);

  require_file(tracker_path, "tracker checkpoint");
  Rng tracker_rng(0);  // overwritten by the checkpoint
  TrackerParams tracker = TrackerParams::init(tracker_config_for(config, info), tracker_rng);
  {
    ParamSet set = tracker.param_set();
    load_checkpoint_into(tracker_path, set);
  }

  TrainConfig train = config.train_refiner;
  train.seed = derive_seed(config.seed, "train-refiner");
  Rng init_rng(derive_seed(config.seed, "init-refiner"));
  RefinerParams params = RefinerParams::init(refiner_config_for(config, info), init_rng);

  TrainLoop loop(params.param_set(), train);
  if (!resume_dir.empty()) {
    require_file(resume_dir + "/refiner.dvpsw", "refiner checkpoint");
    ParamSet set = params.param_set();
    load_checkpoint_into(resume_dir + "/refiner.dvpsw", set);
    loop.load(resume_dir + "/train_state.dvpst");
  }
  const TrainResult result = train_refiner(params, tracker, corpus, train, &loop, stop_at);

  save_checkpoint(out_dir + "/refiner.dvpsw", params.param_set());
  loop.save(out_dir + "/train_state.dvpst");
  save_loss_csv(out_dir + "/loss.csv", result.curve);
  if (!quiet_mode()) {
    std::cout << "trained refiner to iteration " << loop.next_iter << ", checkpoint at "
              << out_dir << "/refiner.dvpsw\n";
  }
  return 0;
}

int cmd_infer(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data_dir, const std::string& out_dir, const std::string& stage,
              const std::string& tracker_path, const std::string& refiner_path,
              const std::string& scales_text) {
  const json resolved = resolve_config(config_path, sets);
  echo_config(out_dir, "infer", resolved);
  const RunConfig config = config_from_json(resolved);

  Stage which;
  if (stage == "prematch") {
    which = Stage::kPrematch;
  } else if (stage == "tracker") {
    which = Stage::kTracker;
  } else if (stage == "refiner") {
    which = Stage::kRefiner;
  } else {
    throw UsageError("--stage must be prematch, tracker or refiner");
  }

  const DatasetInfo info = dataset_info(data_dir);
  TrackerParams tracker;
  RefinerParams refiner;
  const TrackerParams* tracker_ptr = nullptr;
  const RefinerParams* refiner_ptr = nullptr;
  Rng zero_rng(0);
  if (which != Stage::kPrematch) {
    if (tracker_path.empty()) {
      throw UsageError("--stage " + stage + " requires --tracker CHECKPOINT");
    }
    require_file(tracker_path, "tracker checkpoint");
    tracker = TrackerParams::init(tracker_config_for(config, info), zero_rng);
    ParamSet set = tracker.param_set();
    load_checkpoint_into(tracker_path, set);
    tracker_ptr = &tracker;
  }
  if (which == Stage::kRefiner) {
    if (refiner_path.empty()) throw UsageError("--stage refiner requires --refiner CHECKPOINT");
    require_file(refiner_path, "refiner checkpoint");
    refiner = RefinerParams::init(refiner_config_for(config, info), zero_rng);
    ParamSet set = refiner.param_set();
    load_checkpoint_into(refiner_path, set);
    refiner_ptr = &refiner;
  }

  std::vector<int> scales;
  if (!scales_text.empty()) {
    std::size_t pos = 0;
    while (pos < scales_text.size()) {
      const std::size_t comma = scales_text.find(',', pos);
      const std::string part = scales_text.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos);
      try {
        scales.push_back(std::stoi(part));
      } catch (const std::exception&) {
        throw UsageError("--scales expects a comma-separated list of sides");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }

  const std::vector<std::string> names = dataset_video_names(data_dir);
  std::filesystem::create_directories(out_dir);
  parallel_for(static_cast<int>(names.size()), env_thread_count(), [&](int i) {
    const VideoRecord video = load_video_record(data_dir, names[static_cast<std::size_t>(i)]);
    const PanopticVideo pred = run_pipeline(video, which, tracker_ptr, refiner_ptr, config.fuse,
                                            info.thing_classes, scales);
    save_panoptic(out_dir, video.name, pred);
  });

  json manifest;
  json videos = json::array();
  for (const std::string& name : names) videos.push_back({{"name", name}});
  manifest["videos"] = videos;
  manifest["stage"] = stage;
  std::ofstream manifest_out(out_dir + "/manifest.json");
  manifest_out << manifest.dump(2) << "\n";
  if (!quiet_mode()) {
    std::cout << "wrote " << names.size() << " predictions to " << out_dir << "\n";
  }
  return 0;
}

std::vector<std::string> prediction_names(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IoError(dir + "/manifest.json: cannot open for reading");
  json manifest;
  try {
    in >> manifest;
    std::vector<std::string> names;
    for (const auto& v : manifest.at("videos")) names.push_back(v.at("name").get<std::string>());
    return names;
  } catch (const json::exception& e) {
    throw DataError(dir + "/manifest.json: malformed JSON (" + e.what() + ")");
  }
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out_dir) {
  const std::vector<std::string> gt_names = prediction_names(gt_dir);
  const std::vector<std::string> pred_names = prediction_names(pred_dir);
  const std::set<std::string> pred_set(pred_names.begin(), pred_names.end());
  const std::set<std::string> gt_set(gt_names.begin(), gt_names.end());
  std::string missing;
  for (const std::string& name : gt_names) {
    if (!pred_set.count(name)) missing += " " + name;
  }
  for (const std::string& name : pred_names) {
    if (!gt_set.count(name)) missing += " " + name;
  }
  if (!missing.empty()) {
    throw DataError("eval: video sets differ between directories; unmatched:" + missing);
  }

  std::vector<PanopticVideo> preds(gt_names.size());
  std::vector<PanopticVideo> gts(gt_names.size());
  parallel_for(static_cast<int>(gt_names.size()), env_thread_count(), [&](int i) {
    preds[static_cast<std::size_t>(i)] =
        load_panoptic(pred_dir, gt_names[static_cast<std::size_t>(i)]);
    gts[static_cast<std::size_t>(i)] =
        load_panoptic(gt_dir, gt_names[static_cast<std::size_t>(i)]);
  });
  const MetricReport report = evaluate_videos(gt_names, preds, gts);

  const std::string table = format_report_table(report);
  std::cout << table;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream json_out(out_dir + "/report.json");
    json_out << report_to_json(report);
    std::ofstream table_out(out_dir + "/report.txt");
    table_out << table;
  }
  return 0;
}

int cmd_viz(const std::string& dir, const std::string& name, const std::string& out_dir,
            const std::string& compare_dir) {
  const PanopticVideo video = load_panoptic(dir, name);
  PanopticVideo other;
  const bool side_by_side = !compare_dir.empty();
  if (side_by_side) {
    other = load_panoptic(compare_dir, name);
    if (other.frames() != video.frames() || other.height != video.height ||
        other.width != video.width) {
      throw DataError("viz: --compare video extents differ");
    }
  }
  std::filesystem::create_directories(out_dir);
  const int w = video.width, h = video.height;
  const int out_w = side_by_side ? 2 * w : w;
  for (int t = 0; t < video.frames(); ++t) {
    std::vector<std::uint8_t> rgb(3u * static_cast<std::size_t>(out_w) * h);
    auto paint = [&](const PanopticVideo& v, int x_offset) {
      const auto& map = v.id_maps[static_cast<std::size_t>(t)];
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          std::uint8_t r, g, b;
          id_to_color(map[static_cast<std::size_t>(y) * w + x], r, g, b);
          const std::size_t px = 3u * (static_cast<std::size_t>(y) * out_w + x + x_offset);
          rgb[px] = r;
          rgb[px + 1] = g;
          rgb[px + 2] = b;
        }
      }
    };
    paint(video, 0);
    if (side_by_side) paint(other, w);
    char frame_name[64];
    std::snprintf(frame_name, sizeof frame_name, "/%s_%06d.ppm", name.c_str(), t);
    save_ppm(out_dir + frame_name, rgb, out_w, h);
  }
  if (!quiet_mode()) {
    std::cout << "wrote " << video.frames() << " frames to " << out_dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled video panoptic segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, pred_dir, gt_dir;
  std::string tracker_path, refiner_path, stage = "refiner", scales, resume_dir;
  std::string viz_dir, viz_name, compare_dir;
  std::vector<std::string> sets;
  int stop_at = -1;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--set", sets, "Override a dotted config key, e.g. scene.noise_sigma=0.5");
  gen->add_option("--out", out_dir, "Output dataset directory")->required();

  CLI::App* tt = app.add_subcommand("train-tracker", "Train the tracking stage");
  tt->add_option("--config", config_path, "JSON config file");
  tt->add_option("--set", sets, "Override a dotted config key");
  tt->add_option("--data", data_dir, "Dataset directory")->required();
  tt->add_option("--out", out_dir, "Output directory")->required();
  tt->add_option("--resume", resume_dir, "Previous output directory to resume from");
  tt->add_option("--stop-at", stop_at, "Stop after this iteration (for later resume)");

  CLI::App* tr = app.add_subcommand("train-refiner", "Train the refinement stage");
  tr->add_option("--config", config_path, "JSON config file");
  tr->add_option("--set", sets, "Override a dotted config key");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--tracker", tracker_path, "Frozen tracker checkpoint")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--resume", resume_dir, "Previous output directory to resume from");
  tr->add_option("--stop-at", stop_at, "Stop after this iteration (for later resume)");

  CLI::App* inf = app.add_subcommand("infer", "Run the pipeline and fuse predictions");
  inf->add_option("--config", config_path, "JSON config file");
  inf->add_option("--set", sets, "Override a dotted config key");
  inf->add_option("--data", data_dir, "Dataset directory")->required();
  inf->add_option("--out", out_dir, "Prediction output directory")->required();
  inf->add_option("--stage", stage, "prematch | tracker | refiner")->required();
  inf->add_option("--tracker", tracker_path, "Tracker checkpoint");
  inf->add_option("--refiner", refiner_path, "Refiner checkpoint");
  inf->add_option("--scales", scales, "Comma-separated grid sides for multi-scale inference");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate predictions against ground truth");
  ev->add_option("--pred", pred_dir, "Prediction directory")->required();
  ev->add_option("--gt", gt_dir, "Ground-truth dataset directory")->required();
  ev->add_option("--out", out_dir, "Report output directory");

  CLI::App* vz = app.add_subcommand("viz", "Render id maps as PPM frames");
  vz->add_option("--dir", viz_dir, "Directory holding the annotation")->required();
  vz->add_option("--video", viz_name, "Video name")->required();
  vz->add_option("--out", out_dir, "Output directory")->required();
  vz->add_option("--compare", compare_dir, "Second directory to render side by side");

  CLI::App* sc = app.add_subcommand("selfcheck", "Run built-in verification suites");
  (void)sc;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, sets, out_dir);
    if (tt->parsed()) {
      return cmd_train_tracker(config_path, sets, data_dir, out_dir, resume_dir, stop_at);
    }
    if (tr->parsed()) {
      return cmd_train_refiner(config_path, sets, data_dir, tracker_path, out_dir, resume_dir,
                               stop_at);
    }
    if (inf->parsed()) {
      return cmd_infer(config_path, sets, data_dir, out_dir, stage, tracker_path, refiner_path,
                       scales);
    }
    if (ev->parsed()) return cmd_eval(pred_dir, gt_dir, out_dir);
    if (vz->parsed()) return cmd_viz(viz_dir, viz_name, out_dir, compare_dir);
    if (sc->parsed()) return run_selfcheck(std::cout) ? 0 : 3;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
