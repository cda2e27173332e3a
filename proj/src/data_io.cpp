#include "schanger/data_io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "schanger/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace fs = std::filesystem;

namespace schanger {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Image read_png(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DataError("cannot open " + path);

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png init failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
  }
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
      png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  int channels = static_cast<int>(png_get_channels(png, info));
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path + ": unsupported channel count " +
                    std::to_string(channels));
  }
  img.channels = channels;
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * channels);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y] = img.pixels.data() +
              static_cast<size_t>(y) * img.width * channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw DataError("write_png: unsupported channel count " +
                    std::to_string(img.channels));
  }
  if (img.pixels.size() !=
      static_cast<size_t>(img.width) * img.height * img.channels) {
    throw DataError("write_png: pixel buffer size mismatch");
  }
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write " + path);

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("png init failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png init failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode " + path);
  }

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(
        img.pixels.data() + static_cast<size_t>(y) * img.width * img.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace {

std::vector<std::string> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    // A dataset path that does not exist is a configuration problem,
    // unlike malformed content inside an existing dataset.
    throw ConfigError("missing dataset directory " + dir.string());
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

Dataset load_dataset(const std::string& root, const std::string& split) {
  Dataset ds;
  ds.root = root;
  ds.split = split;
  fs::path base = fs::path(root) / split;
  auto a_names = list_pngs(base / "A");
  auto b_names = list_pngs(base / "B");
  auto label_names = list_pngs(base / "label");
  if (a_names != b_names || a_names != label_names) {
    throw DataError("dataset " + base.string() +
                    ": A/, B/ and label/ file sets differ");
  }
  bool has_footprints =
      fs::is_directory(base / "labelA") && fs::is_directory(base / "labelB");
  if (has_footprints) {
    if (list_pngs(base / "labelA") != a_names ||
        list_pngs(base / "labelB") != a_names) {
      throw DataError("dataset " + base.string() +
                      ": footprint file sets differ from A/");
    }
  }
  for (const auto& name : a_names) {
    SamplePair p;
    p.id = fs::path(name).stem().string();
    p.a_path = (base / "A" / name).string();
    p.b_path = (base / "B" / name).string();
    p.label_path = (base / "label" / name).string();
    if (has_footprints) {
      p.label_a_path = (base / "labelA" / name).string();
      p.label_b_path = (base / "labelB" / name).string();
    }
    ds.samples.push_back(p);
  }
  return ds;
}

std::vector<SamplePair> subsample(const std::vector<SamplePair>& samples,
                                  double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw ConfigError("subsample: fraction outside (0,1]");
  }
  if (fraction == 1.0) return samples;
  size_t keep = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(samples.size())));
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  order.resize(keep);
  std::sort(order.begin(), order.end());
  std::vector<SamplePair> out;
  out.reserve(keep);
  for (size_t i : order) out.push_back(samples[i]);
  return out;
}

Tensor image_to_tensor(const Image& img) {
  Shape s{1, 3, img.height, img.width};
  std::vector<float> values(static_cast<size_t>(s.numel()));
  const int64_t plane = static_cast<int64_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      int64_t pos = static_cast<int64_t>(y) * img.width + x;
      for (int c = 0; c < 3; ++c) {
        uint8_t v = img.channels == 3
                        ? img.pixels[(pos * 3) + c]
                        : img.pixels[pos];
        values[c * plane + pos] = static_cast<float>(v) / 255.0f;
      }
    }
  }
  return Tensor::from_data(s, std::move(values));
}

Tensor mask_to_tensor(const Image& img) {
  Shape s{1, 1, img.height, img.width};
  std::vector<float> values(static_cast<size_t>(s.numel()));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      int64_t pos = static_cast<int64_t>(y) * img.width + x;
      uint8_t v = img.pixels[pos * img.channels];
      values[pos] = v >= 128 ? 1.0f : 0.0f;
    }
  }
  return Tensor::from_data(s, std::move(values));
}

Tensor normalize_input(const Tensor& x) {
  std::vector<float> values(x.data().size());
  const float* src = x.data().data();
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = (src[i] - 0.5f) / 0.5f;
  }
  return Tensor::from_data(x.shape(), std::move(values));
}

std::vector<TrainSample> load_pairs(const Dataset& ds) {
  std::vector<TrainSample> out;
  out.reserve(ds.samples.size());
  for (const auto& p : ds.samples) {
    TrainSample s;
    s.id = p.id;
    s.a = image_to_tensor(read_png(p.a_path));
    s.b = image_to_tensor(read_png(p.b_path));
    s.label = mask_to_tensor(read_png(p.label_path));
    if (!(s.a.shape() == s.b.shape()) ||
        s.label.shape().h != s.a.shape().h ||
        s.label.shape().w != s.a.shape().w) {
      throw DataError("sample " + p.id + ": image/label sizes disagree");
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TrainSample> load_single_temporal(const Dataset& ds) {
  std::vector<TrainSample> out;
  out.reserve(2 * ds.samples.size());
  for (const auto& p : ds.samples) {
    if (p.label_a_path.empty() || p.label_b_path.empty()) {
      throw DataError("sample " + p.id +
                      ": no per-temporal footprints (labelA/labelB)");
    }
    TrainSample s1;
    s1.id = p.id + "_a";
    s1.a = image_to_tensor(read_png(p.a_path));
    s1.label = mask_to_tensor(read_png(p.label_a_path));
    out.push_back(std::move(s1));
    TrainSample s2;
    s2.id = p.id + "_b";
    s2.a = image_to_tensor(read_png(p.b_path));
    s2.label = mask_to_tensor(read_png(p.label_b_path));
    out.push_back(std::move(s2));
  }
  return out;
}

namespace {

struct RectSet {
  // Half-open pixel rectangles [x0,x1) x [y0,y1) with a fill color.
  struct Rect {
    int x0, y0, x1, y1;
    float r, g, b;
  };
  std::vector<Rect> rects;

  bool overlaps(int x0, int y0, int x1, int y1) const {
    for (const auto& rc : rects) {
      if (x0 < rc.x1 && rc.x0 < x1 && y0 < rc.y1 && rc.y0 < y1) return true;
    }
    return false;
  }
};

void rasterize(const std::vector<RectSet::Rect>& rects, int size,
               std::vector<uint8_t>& mask) {
  mask.assign(static_cast<size_t>(size) * size, 0);
  for (const auto& rc : rects) {
    for (int y = rc.y0; y < rc.y1; ++y) {
      for (int x = rc.x0; x < rc.x1; ++x) {
        mask[static_cast<size_t>(y) * size + x] = 255;
      }
    }
  }
}

Image gray_image(const std::vector<uint8_t>& mask, int size) {
  Image img;
  img.width = img.height = size;
  img.channels = 1;
  img.pixels = mask;
  return img;
}

// Renders background plus rectangles into an rgb raster.
Image render_scene(const std::vector<RectSet::Rect>& rects, int size,
                   float base, float gx, float gy, float tint_r, float tint_b,
                   float brightness, float contrast, Rng& rng) {
  Image img;
  img.width = img.height = size;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float v = base + gx * (static_cast<float>(x) / size - 0.5f) +
                gy * (static_cast<float>(y) / size - 0.5f);
      float r = v + tint_r, g = v, b = v + tint_b;
      for (const auto& rc : rects) {
        if (x >= rc.x0 && x < rc.x1 && y >= rc.y0 && y < rc.y1) {
          r = rc.r;
          g = rc.g;
          b = rc.b;
        }
      }
      float noise = static_cast<float>(rng.uniform(-0.03, 0.03));
      float vals[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        float out = (vals[c] + noise - 0.5f) * contrast + 0.5f + brightness;
        out = std::clamp(out, 0.0f, 1.0f);
        img.pixels[(static_cast<size_t>(y) * size + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(out * 255.0f));
      }
    }
  }
  return img;
}

RectSet::Rect random_rect(Rng& rng, int size, double area, float base,
                          const RectSet& occupied) {
  int min_side = 4;
  for (int attempt = 0; attempt < 60; ++attempt) {
    double aspect = rng.uniform(0.6, 1.7);
    int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))),
                       min_side, size - 2);
    int h = std::clamp(static_cast<int>(std::lround(area / w)), min_side,
                       size - 2);
    int x0 = rng.randint(1, size - 1 - w);
    int y0 = rng.randint(1, size - 1 - h);
    if (attempt < 50 && occupied.overlaps(x0, y0, x0 + w, y0 + h)) continue;
    RectSet::Rect rc;
    rc.x0 = x0;
    rc.y0 = y0;
    rc.x1 = x0 + w;
    rc.y1 = y0 + h;
    // Contrasting fill so the task is learnable.
    do {
      rc.r = static_cast<float>(rng.uniform(0.08, 0.92));
    } while (std::abs(rc.r - base) < 0.18f);
    rc.g = std::clamp(rc.r + static_cast<float>(rng.uniform(-0.08, 0.08)),
                      0.0f, 1.0f);
    rc.b = std::clamp(rc.r + static_cast<float>(rng.uniform(-0.08, 0.08)),
                      0.0f, 1.0f);
    return rc;
  }
  throw DataError("synth: rectangle placement failed");
}

}  // namespace

void synth_generate(const std::string& root, const std::string& split,
                    const SynthConfig& cfg) {
  if (cfg.count < 0) throw ConfigError("synth: negative count");
  if (cfg.size < 16 || cfg.size % 16 != 0) {
    throw ConfigError("synth: size must be a positive multiple of 16");
  }
  if (cfg.change_density < 0.0 || cfg.change_density > 0.5) {
    throw ConfigError("synth: change_density outside [0, 0.5]");
  }
  fs::path base = fs::path(root) / split;
  for (const char* sub : {"A", "B", "label", "labelA", "labelB"}) {
    fs::create_directories(base / sub);
  }

  Rng master(cfg.seed);
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(master.next_seed());
    float bg = static_cast<float>(rng.uniform(0.35, 0.65));
    float gx = static_cast<float>(rng.uniform(-0.1, 0.1));
    float gy = static_cast<float>(rng.uniform(-0.1, 0.1));
    float tint_r = static_cast<float>(rng.uniform(-0.04, 0.04));
    float tint_b = static_cast<float>(rng.uniform(-0.04, 0.04));

    RectSet occupied;
    std::vector<RectSet::Rect> kept, removed, added;
    int n_keep = rng.randint(1, 3);
    double keep_area = 0.06 * cfg.size * cfg.size;
    for (int k = 0; k < n_keep; ++k) {
      auto rc = random_rect(rng, cfg.size, keep_area * rng.uniform(0.5, 1.5),
                            bg, occupied);
      occupied.rects.push_back(rc);
      kept.push_back(rc);
    }
    if (cfg.change_density > 0.0) {
      double target = cfg.change_density * cfg.size * cfg.size;
      int n_change = rng.randint(1, 3);
      std::vector<double> shares(n_change);
      double total = 0.0;
      for (auto& s : shares) {
        s = rng.uniform(0.5, 1.5);
        total += s;
      }
      for (int k = 0; k < n_change; ++k) {
        auto rc =
            random_rect(rng, cfg.size, target * shares[k] / total, bg,
                        occupied);
        occupied.rects.push_back(rc);
        if (rng.bernoulli(0.5)) {
          removed.push_back(rc);
        } else {
          added.push_back(rc);
        }
      }
    }

    std::vector<RectSet::Rect> t1_rects = kept;
    t1_rects.insert(t1_rects.end(), removed.begin(), removed.end());
    std::vector<RectSet::Rect> t2_rects = kept;
    t2_rects.insert(t2_rects.end(), added.begin(), added.end());

    Image a = render_scene(t1_rects, cfg.size, bg, gx, gy, tint_r, tint_b,
                           0.0f, 1.0f, rng);
    float b_bright = static_cast<float>(rng.uniform(-0.05, 0.05));
    float b_contrast = static_cast<float>(rng.uniform(0.9, 1.1));
    Image b = render_scene(t2_rects, cfg.size, bg, gx, gy, tint_r, tint_b,
                           b_bright, b_contrast, rng);

    std::vector<uint8_t> fp_a, fp_b, change;
    rasterize(t1_rects, cfg.size, fp_a);
    rasterize(t2_rects, cfg.size, fp_b);
    change.resize(fp_a.size());
    for (size_t j = 0; j < change.size(); ++j) {
      change[j] = fp_a[j] != fp_b[j] ? 255 : 0;
    }

    char name[32];
    std::snprintf(name, sizeof(name), "%04d.png", i);
    write_png((base / "A" / name).string(), a);
    write_png((base / "B" / name).string(), b);
    write_png((base / "label" / name).string(), gray_image(change, cfg.size));
    write_png((base / "labelA" / name).string(), gray_image(fp_a, cfg.size));
    write_png((base / "labelB" / name).string(), gray_image(fp_b, cfg.size));
  }
}

namespace {

uint32_t tensor_crc(std::span<const float> data) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()),
            static_cast<uInt>(data.size() * sizeof(float))));
}

constexpr const char* kCheckpointMagic = "SCHKPT";
constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::ostringstream header;
  header << kCheckpointMagic << " " << kCheckpointVersion << "\n";
  header << "arch " << store.meta.arch << "\n";
  header << "variant " << store.meta.variant << "\n";
  header << "seed " << store.meta.seed << "\n";
  header << "tensors " << store.size() << "\n";
  for (const auto& p : store.paths()) {
    const ParamEntry& e = store.entry(p);
    const Shape& s = e.tensor.shape();
    char crc_hex[16];
    std::snprintf(crc_hex, sizeof(crc_hex), "%08x", tensor_crc(e.tensor.data()));
    header << "tensor " << p << " " << (e.is_buffer ? "buffer" : "param")
           << " " << s.n << " " << s.c << " " << s.h << " " << s.w << " "
           << crc_hex << "\n";
  }
  header << "end\n";

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& p : store.paths()) {
      const auto& data = store.entry(p).tensor.data();
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    if (!out) throw DataError("write failed for " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place: " + ec.message());
}

namespace {

struct CheckpointEntry {
  std::string path;
  bool is_buffer = false;
  Shape shape;
  uint32_t crc = 0;
};

struct CheckpointFile {
  StoreMeta meta;
  std::vector<CheckpointEntry> entries;
  std::streampos payload_start;
};

CheckpointFile parse_header(std::ifstream& in, const std::string& path) {
  CheckpointFile file;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty checkpoint");
  {
    std::istringstream first(line);
    std::string magic;
    int version = 0;
    first >> magic >> version;
    if (magic != kCheckpointMagic) {
      throw DataError(path + ": not a checkpoint file");
    }
    if (version != kCheckpointVersion) {
      throw DataError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
    }
  }
  size_t expected = 0;
  while (std::getline(in, line)) {
    if (line == "end") {
      file.payload_start = in.tellg();
      if (file.entries.size() != expected) {
        throw DataError(path + ": tensor count mismatch in manifest");
      }
      return file;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "arch") {
      ls >> file.meta.arch;
    } else if (key == "variant") {
      ls >> file.meta.variant;
    } else if (key == "seed") {
      ls >> file.meta.seed;
    } else if (key == "tensors") {
      ls >> expected;
    } else if (key == "tensor") {
      CheckpointEntry e;
      std::string flags, crc_hex;
      ls >> e.path >> flags >> e.shape.n >> e.shape.c >> e.shape.h >>
          e.shape.w >> crc_hex;
      if (!ls) throw DataError(path + ": malformed manifest line: " + line);
      e.is_buffer = flags == "buffer";
      e.crc = static_cast<uint32_t>(std::stoul(crc_hex, nullptr, 16));
      file.entries.push_back(e);
    } else {
      throw DataError(path + ": unknown manifest key " + key);
    }
  }
  throw DataError(path + ": truncated manifest (no end marker)");
}

std::string join_paths(const std::vector<std::string>& paths) {
  std::string out;
  size_t shown = std::min<size_t>(paths.size(), 10);
  for (size_t i = 0; i < shown; ++i) {
    if (i) out += ", ";
    out += paths[i];
  }
  if (paths.size() > shown) {
    out += ", and " + std::to_string(paths.size() - shown) + " more";
  }
  return out;
}

}  // namespace

StoreMeta peek_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return parse_header(in, path).meta;
}

void load_checkpoint(ParamStore& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  CheckpointFile file = parse_header(in, path);

  std::vector<std::string> missing;
  {
    std::vector<std::string> present;
    present.reserve(file.entries.size());
    for (const auto& e : file.entries) present.push_back(e.path);
    std::sort(present.begin(), present.end());
    for (const auto& p : store.paths()) {
      if (!std::binary_search(present.begin(), present.end(), p)) {
        missing.push_back(p);
      }
    }
  }
  if (!missing.empty()) {
    throw DataError(path + ": checkpoint is missing " +
                    std::to_string(missing.size()) + " model paths: " +
                    join_paths(missing));
  }

  in.seekg(file.payload_start);
  for (const auto& e : file.entries) {
    if (!store.has(e.path)) {
      throw DataError(path + ": checkpoint has unknown path " + e.path);
    }
    ParamEntry& target = store.entry(e.path);
    if (!(target.tensor.shape() == e.shape)) {
      throw DataError(path + ": shape mismatch at " + e.path + ": " +
                      e.shape.str() + " vs model " +
                      target.tensor.shape().str());
    }
    FloatVec values(static_cast<size_t>(e.shape.numel()));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) throw DataError(path + ": truncated payload at " + e.path);
    if (tensor_crc(values) != e.crc) {
      throw DataError(path + ": checksum mismatch at " + e.path);
    }
    target.tensor.data() = std::move(values);
  }
  store.meta = file.meta;
}

void write_prediction_mask(const std::string& path, const Tensor& binary) {
  const Shape s = binary.shape();
  if (s.n != 1 || s.c != 1) {
    throw ShapeError("write_prediction_mask: want (1,1,H,W), got " + s.str());
  }
  Image img;
  img.width = s.w;
  img.height = s.h;
  img.channels = 1;
  img.pixels.resize(static_cast<size_t>(s.h) * s.w);
  const float* d = binary.data().data();
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = d[i] >= 0.5f ? 255 : 0;
  }
  write_png(path, img);
}

void write_composite(const std::string& path, const Tensor& pred_binary,
                     const Tensor& gt_binary) {
  const Shape s = pred_binary.shape();
  if (!(s == gt_binary.shape()) || s.n != 1 || s.c != 1) {
    throw ShapeError("write_composite: want matching (1,1,H,W) tensors");
  }
  Image img;
  img.width = s.w;
  img.height = s.h;
  img.channels = 3;
  img.pixels.resize(static_cast<size_t>(s.h) * s.w * 3);
  const float* p = pred_binary.data().data();
  const float* g = gt_binary.data().data();
  for (int64_t i = 0; i < static_cast<int64_t>(s.h) * s.w; ++i) {
    bool pv = p[i] >= 0.5f;
    bool gv = g[i] >= 0.5f;
    uint8_t r = 0, gr = 0, b = 0;
    if (pv && gv) {
      gr = 255;  // true positive: green
    } else if (pv && !gv) {
      r = 255;   // false positive: yellow
      gr = 255;
    } else if (!pv && gv) {
      r = 255;   // false negative: red
    }
    img.pixels[i * 3] = r;
    img.pixels[i * 3 + 1] = gr;
    img.pixels[i * 3 + 2] = b;
  }
  write_png(path, img);
}

}  // namespace schanger
