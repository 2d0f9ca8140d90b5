#include "dvps/corpus.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dvps/common.hpp"
#include "dvps/io.hpp"
#include "dvps/parallel.hpp"
#include "dvps/rng.hpp"

namespace dvps {

namespace {
using json = nlohmann::json;
}

void save_video_record(const std::string& dir, const VideoRecord& record) {
  std::filesystem::create_directories(dir);
  save_query_dump(dir + "/" + record.name + ".dvpsq", record.queries);
  save_feature_dump(dir + "/" + record.name + ".dvpsf", record.clip);
  save_panoptic(dir, record.name, record.gt);
}

VideoRecord load_video_record(const std::string& dir, const std::string& name) {
  VideoRecord record;
  record.name = name;
  record.queries = load_query_dump(dir + "/" + name + ".dvpsq");
  record.clip = load_feature_dump(dir + "/" + name + ".dvpsf");
  record.gt = load_panoptic(dir, name);
  if (record.gt.frames() != record.clip.frames ||
      static_cast<int>(record.queries.size()) != record.clip.frames) {
    throw DataError(name + ": frame counts disagree between queries, features and annotation");
  }
  return record;
}

void generate_dataset(const std::string& dir, const SceneConfig& config, int count,
                      int threads) {
  if (count < 1) throw DataError("generate_dataset: count must be >= 1");
  config.validate();
  std::filesystem::create_directories(dir);

  Rng root(config.seed);
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> names;
  char name_buf[32];
  for (int i = 0; i < count; ++i) {
    seeds.push_back(root.stream("video", static_cast<std::uint64_t>(i)).next_u64());
    std::snprintf(name_buf, sizeof name_buf, "video_%04d", i);
    names.emplace_back(name_buf);
  }

  parallel_for(count, threads, [&](int i) {
    SceneConfig video_config = config;
    video_config.seed = seeds[static_cast<std::size_t>(i)];
    VideoRecord record;
    record.name = names[static_cast<std::size_t>(i)];
    GeneratedVideo generated = generate_clip(video_config);
    record.clip = std::move(generated.clip);
    record.gt = std::move(generated.gt);
    record.queries = segmenter_stub(record.clip, record.gt, video_config);
    save_video_record(dir, record);
  });

  json manifest;
  json videos = json::array();
  for (int i = 0; i < count; ++i) {
    videos.push_back({{"name", names[static_cast<std::size_t>(i)]},
                      {"seed", seeds[static_cast<std::size_t>(i)]}});
  }
  manifest["videos"] = videos;
  manifest["frames"] = config.frames;
  manifest["height"] = config.height;
  manifest["width"] = config.width;
  manifest["num_thing_classes"] = config.thing_classes;
  manifest["num_stuff_classes"] = config.stuff_classes;
  manifest["embed_dim"] = config.embed_dim;
  manifest["mask_embed_dim"] = config.mask_embed_dim;
  manifest["noise_sigma"] = config.noise_sigma;

  std::ofstream out(dir + "/manifest.json");
  if (!out) throw IoError(dir + "/manifest.json: cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(dir + "/manifest.json: write failed");
}

std::vector<std::string> dataset_video_names(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw IoError(dir + "/manifest.json: cannot open for reading");
  json manifest;
  try {
    in >> manifest;
    std::vector<std::string> names;
    for (const auto& v : manifest.at("videos")) names.push_back(v.at("name").get<std::string>());
    return names;
  } catch (const json::exception& e) {
    throw DataError(dir + "/manifest.json: malformed JSON (" + std::string(e.what()) + ")");
  }
}

Corpus load_dataset(const std::string& dir) {
  Corpus corpus;
  for (const std::string& name : dataset_video_names(dir)) {
    corpus.push_back(load_video_record(dir, name));
  }
  if (corpus.empty()) throw DataError(dir + ": dataset lists no videos");
  return corpus;
}

}  // namespace dvps
