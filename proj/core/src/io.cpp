#include "dvps/io.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dvps/common.hpp"

namespace dvps {

namespace {

using json = nlohmann::json;

constexpr std::array<char, 7> kQueryMagic = {'D', 'V', 'P', 'S', 'Q', '1', '\0'};
constexpr std::array<char, 7> kFeatureMagic = {'D', 'V', 'P', 'S', 'F', '1', '\0'};
constexpr std::array<char, 7> kWeightMagic = {'D', 'V', 'P', 'S', 'W', '1', '\0'};

// Extents are validated against this before any allocation so that a
// corrupted header cannot trigger a huge allocation.
constexpr std::uint64_t kMaxElements = 1ULL << 31;

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError(path + ": cannot open for reading");
  }

  void expect_magic(const std::array<char, 7>& magic) {
    std::array<char, 7> got{};
    in_.read(got.data(), got.size());
    if (!in_ || got != magic) {
      throw IoError(path_ + ": unrecognized format (bad magic)");
    }
    offset_ += got.size();
  }

  std::uint32_t read_u32() {
    std::uint32_t v = 0;
    read_bytes(&v, sizeof v);
    return v;
  }

  void read_f32(std::vector<double>& out, std::size_t count) {
    std::vector<float> buf(count);
    read_bytes(buf.data(), count * sizeof(float));
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(buf[i]);
  }

  void read_f64(std::vector<double>& out, std::size_t count) {
    out.resize(count);
    read_bytes(out.data(), count * sizeof(double));
  }

  void read_bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw IoError(path_ + ": truncated payload at byte " +
                    std::to_string(offset_ + static_cast<std::size_t>(std::max<std::streamsize>(in_.gcount(), 0))));
    }
    offset_ += n;
  }

  void expect_eof() {
    char c;
    in_.read(&c, 1);
    if (!in_.eof()) throw IoError(path_ + ": trailing bytes after payload");
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError(path + ": cannot open for writing");
  }

  void write_magic(const std::array<char, 7>& magic) { out_.write(magic.data(), magic.size()); }

  void write_u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

  void write_f32(std::span<const double> values) {
    std::vector<float> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
    out_.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }

  void write_f64(std::span<const double> values) {
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
  }

  void write_bytes(const void* src, std::size_t n) {
    out_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
  }

  void close() {
    out_.close();
    if (!out_) throw IoError(path_ + ": write failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

void check_extents(const std::string& path, std::initializer_list<std::uint64_t> extents) {
  std::uint64_t product = 1;
  for (std::uint64_t e : extents) {
    if (e == 0) throw IoError(path + ": zero extent in header");
    if (e > kMaxElements || product > kMaxElements / e) {
      throw IoError(path + ": extent overflow in header");
    }
    product *= e;
  }
}

}  // namespace

// ---- query dump -------------------------------------------------------------

void save_query_dump(const std::string& path, const std::vector<FrameQueries>& frames) {
  if (frames.empty()) throw DataError("save_query_dump: no frames");
  for (const FrameQueries& f : frames) f.validate();
  const int n = frames.front().query_count();
  const int d = frames.front().embeddings.extent(1);
  const int k1 = frames.front().class_logits.extent(1);
  const int dm = frames.front().mask_embeddings.extent(1);
  for (const FrameQueries& f : frames) {
    if (f.query_count() != n || f.embeddings.extent(1) != d ||
        f.class_logits.extent(1) != k1 || f.mask_embeddings.extent(1) != dm) {
      throw DataError("save_query_dump: inconsistent extents across frames");
    }
  }
  Writer w(path);
  w.write_magic(kQueryMagic);
  w.write_u32(static_cast<std::uint32_t>(frames.size()));
  w.write_u32(static_cast<std::uint32_t>(n));
  w.write_u32(static_cast<std::uint32_t>(d));
  w.write_u32(static_cast<std::uint32_t>(dm));
  w.write_u32(static_cast<std::uint32_t>(k1 - 1));
  for (const FrameQueries& f : frames) {
    w.write_f32(f.embeddings.values());
    w.write_f32(f.class_logits.values());
    w.write_f32(f.mask_embeddings.values());
  }
  w.close();
}

std::vector<FrameQueries> load_query_dump(const std::string& path) {
  Reader r(path);
  r.expect_magic(kQueryMagic);
  const std::uint32_t t = r.read_u32();
  const std::uint32_t n = r.read_u32();
  const std::uint32_t d = r.read_u32();
  const std::uint32_t dm = r.read_u32();
  const std::uint32_t k = r.read_u32();
  check_extents(path, {t, n, d});
  check_extents(path, {t, n, dm});
  check_extents(path, {t, n, k + 1});
  std::vector<FrameQueries> frames;
  frames.reserve(t);
  std::vector<double> buf;
  for (std::uint32_t i = 0; i < t; ++i) {
    FrameQueries f;
    r.read_f32(buf, static_cast<std::size_t>(n) * d);
    f.embeddings = Tensor::from({static_cast<int>(n), static_cast<int>(d)}, buf);
    r.read_f32(buf, static_cast<std::size_t>(n) * (k + 1));
    f.class_logits = Tensor::from({static_cast<int>(n), static_cast<int>(k + 1)}, buf);
    r.read_f32(buf, static_cast<std::size_t>(n) * dm);
    f.mask_embeddings = Tensor::from({static_cast<int>(n), static_cast<int>(dm)}, buf);
    frames.push_back(std::move(f));
  }
  r.expect_eof();
  return frames;
}

// ---- feature dump -------------------------------------------------------------

void save_feature_dump(const std::string& path, const VideoClip& clip) {
  clip.validate();
  const int dm = clip.pixel_features.front().extent(0);
  Writer w(path);
  w.write_magic(kFeatureMagic);
  w.write_u32(static_cast<std::uint32_t>(clip.frames));
  w.write_u32(static_cast<std::uint32_t>(dm));
  w.write_u32(static_cast<std::uint32_t>(clip.height));
  w.write_u32(static_cast<std::uint32_t>(clip.width));
  for (const Tensor& f : clip.pixel_features) w.write_f32(f.values());
  w.close();
}

VideoClip load_feature_dump(const std::string& path) {
  Reader r(path);
  r.expect_magic(kFeatureMagic);
  const std::uint32_t t = r.read_u32();
  const std::uint32_t dm = r.read_u32();
  const std::uint32_t h = r.read_u32();
  const std::uint32_t w = r.read_u32();
  check_extents(path, {t, dm, h, w});
  VideoClip clip;
  clip.frames = static_cast<int>(t);
  clip.height = static_cast<int>(h);
  clip.width = static_cast<int>(w);
  std::vector<double> buf;
  for (std::uint32_t i = 0; i < t; ++i) {
    r.read_f32(buf, static_cast<std::size_t>(dm) * h * w);
    clip.pixel_features.push_back(
        Tensor::from({static_cast<int>(dm), static_cast<int>(h), static_cast<int>(w)}, buf));
  }
  r.expect_eof();
  return clip;
}

// ---- PGM / PPM ------------------------------------------------------------------

void save_pgm16(const std::string& path, const std::vector<std::uint16_t>& pixels,
                int width, int height) {
  if (pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DataError("save_pgm16: pixel count mismatch");
  }
  Writer w(path);
  std::ostringstream header;
  header << "P5\n" << width << " " << height << "\n65535\n";
  const std::string h = header.str();
  w.write_bytes(h.data(), h.size());
  std::vector<std::uint8_t> bytes(pixels.size() * 2);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(pixels[i] >> 8);  // MSB first
    bytes[2 * i + 1] = static_cast<std::uint8_t>(pixels[i] & 0xff);
  }
  w.write_bytes(bytes.data(), bytes.size());
  w.close();
}

std::vector<std::uint16_t> load_pgm16(const std::string& path, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P5" || maxval != 65535 || width <= 0 || height <= 0) {
    throw IoError(path + ": unrecognized format (not a 16-bit P5 PGM)");
  }
  in.get();  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::vector<std::uint8_t> bytes(n * 2);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw IoError(path + ": truncated payload at byte " +
                  std::to_string(static_cast<std::size_t>(std::max<std::streamsize>(in.gcount(), 0))));
  }
  std::vector<std::uint16_t> pixels(n);
  for (std::size_t i = 0; i < n; ++i) {
    pixels[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  }
  return pixels;
}

void save_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb,
              int width, int height) {
  if (rgb.size() != 3u * static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DataError("save_ppm: pixel count mismatch");
  }
  Writer w(path);
  std::ostringstream header;
  header << "P6\n" << width << " " << height << "\n255\n";
  const std::string h = header.str();
  w.write_bytes(h.data(), h.size());
  w.write_bytes(rgb.data(), rgb.size());
  w.close();
}

void id_to_color(std::uint16_t id, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b) {
  if (id == 0) {
    r = g = b = 0;
    return;
  }
  std::uint64_t x = static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  x ^= x >> 31;
  // Keep channels away from pure black so segments stay distinguishable
  // from void.
  r = static_cast<std::uint8_t>(64 + (x & 0xbf));
  g = static_cast<std::uint8_t>(64 + ((x >> 8) & 0xbf));
  b = static_cast<std::uint8_t>(64 + ((x >> 16) & 0xbf));
}

// ---- panoptic annotation ----------------------------------------------------------

namespace {

std::string frame_file_name(const std::string& name, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%06d.pgm", index);
  return name + buf;
}

}  // namespace

void save_panoptic(const std::string& dir, const std::string& name,
                   const PanopticVideo& video) {
  video.validate();
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["video"] = name;
  manifest["height"] = video.height;
  manifest["width"] = video.width;
  json frames = json::array();
  for (int t = 0; t < video.frames(); ++t) {
    const std::string fname = frame_file_name(name, t);
    frames.push_back(fname);
    save_pgm16(dir + "/" + fname, video.id_maps[static_cast<std::size_t>(t)],
               video.width, video.height);
  }
  manifest["frames"] = frames;
  json tracks = json::object();
  for (const auto& [id, info] : video.tracks) {
    tracks[std::to_string(id)] = {{"class_id", info.class_id}, {"is_thing", info.is_thing}};
  }
  manifest["tracks"] = tracks;

  std::ofstream out(dir + "/" + name + ".json");
  if (!out) throw IoError(dir + "/" + name + ".json: cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(dir + "/" + name + ".json: write failed");
}

PanopticVideo load_panoptic(const std::string& dir, const std::string& name) {
  const std::string manifest_path = dir + "/" + name + ".json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError(manifest_path + ": cannot open for reading");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError(manifest_path + ": malformed JSON (" + e.what() + ")");
  }
  PanopticVideo video;
  try {
    video.height = manifest.at("height").get<int>();
    video.width = manifest.at("width").get<int>();
    for (const auto& [key, value] : manifest.at("tracks").items()) {
      const int id = std::stoi(key);
      if (id <= 0 || id > std::numeric_limits<std::uint16_t>::max()) {
        throw DataError(manifest_path + ": track id out of range: " + key);
      }
      video.tracks[static_cast<std::uint16_t>(id)] =
          TrackInfo{value.at("class_id").get<int>(), value.at("is_thing").get<bool>()};
    }
    for (const auto& fname : manifest.at("frames")) {
      int w = 0, h = 0;
      auto pixels = load_pgm16(dir + "/" + fname.get<std::string>(), w, h);
      if (w != video.width || h != video.height) {
        throw DataError(manifest_path + ": frame extent mismatch in " + fname.get<std::string>());
      }
      video.id_maps.push_back(std::move(pixels));
    }
  } catch (const json::exception& e) {
    throw DataError(manifest_path + ": malformed JSON (" + e.what() + ")");
  }
  video.validate();
  return video;
}

// ---- checkpoints -------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamSet& params) {
  Writer w(path);
  w.write_magic(kWeightMagic);
  w.write_u32(static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, tensor] : params.entries()) {
    w.write_u32(static_cast<std::uint32_t>(name.size()));
    w.write_bytes(name.data(), name.size());
    w.write_u32(static_cast<std::uint32_t>(tensor.rank()));
    for (int i = 0; i < tensor.rank(); ++i) {
      w.write_u32(static_cast<std::uint32_t>(tensor.extent(i)));
    }
    w.write_f64(tensor.values());
  }
  w.close();
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  Reader r(path);
  r.expect_magic(kWeightMagic);
  const std::uint32_t count = r.read_u32();
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.read_u32();
    if (name_len > 4096) throw IoError(path + ": tensor name too long");
    std::string name(name_len, '\0');
    r.read_bytes(name.data(), name_len);
    const std::uint32_t rank = r.read_u32();
    if (rank > 8) throw IoError(path + ": tensor rank too large");
    std::vector<int> shape;
    std::uint64_t total = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const std::uint32_t e = r.read_u32();
      check_extents(path, {total, e});
      total *= e;
      shape.push_back(static_cast<int>(e));
    }
    std::vector<double> data;
    r.read_f64(data, total);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  r.expect_eof();
  return out;
}

void load_checkpoint_into(const std::string& path, ParamSet& params) {
  auto loaded = load_checkpoint(path);
  if (loaded.size() != params.entries().size()) {
    throw DataError(path + ": checkpoint holds " + std::to_string(loaded.size()) +
                    " tensors, expected " + std::to_string(params.entries().size()));
  }
  for (auto& [name, tensor] : loaded) {
    Tensor* dst = params.find(name);
    if (dst == nullptr) throw DataError(path + ": unexpected tensor " + name);
    if (dst->shape() != tensor.shape()) {
      throw DataError(path + ": shape mismatch for tensor " + name);
    }
    auto dv = dst->mutable_values();
    const auto sv = tensor.values();
    std::copy(sv.begin(), sv.end(), dv.begin());
  }
}

// ---- loss curve ---------------------------------------------------------------------

void save_loss_csv(const std::string& path, const std::vector<LossCurvePoint>& points) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "iter,loss,lr\n";
  char buf[96];
  for (const LossCurvePoint& p : points) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", p.iter, p.loss, p.lr);
    out << buf;
  }
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace dvps
