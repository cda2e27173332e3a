#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "schanger/params.hpp"
#include "schanger/rng.hpp"
#include "schanger/tensor.hpp"

namespace schanger {

// 8-bit raster, interleaved rows; 1 (gray) or 3 (rgb) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;
};

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// One dataset entry: bitemporal images, change label, and optional
// per-temporal footprint masks for single-temporal pretraining.
struct SamplePair {
  std::string id;
  std::string a_path;
  std::string b_path;
  std::string label_path;
  std::string label_a_path;
  std::string label_b_path;
};

struct Dataset {
  std::string root;
  std::string split;
  std::vector<SamplePair> samples;
};

// Layout: root/{split}/{A,B,label[,labelA,labelB]}/*.png with matching
// file names. Iteration order is sorted by file name.
Dataset load_dataset(const std::string& root, const std::string& split);

// Deterministic few-shot subsetting: keeps ceil(fraction * n) samples.
std::vector<SamplePair> subsample(const std::vector<SamplePair>& samples,
                                  double fraction, uint64_t seed);

Tensor image_to_tensor(const Image& img);  // (1,3,H,W) scaled to [0,1]
Tensor mask_to_tensor(const Image& img);   // (1,1,H,W), binarized at 128
// Maps [0,1] image values to the model input range via (v - 0.5) / 0.5.
Tensor normalize_input(const Tensor& x);

// Decoded training samples. b is undefined for single-temporal data.
struct TrainSample {
  std::string id;
  Tensor a;
  Tensor b;
  Tensor label;
};
std::vector<TrainSample> load_pairs(const Dataset& ds);
// Builds (image, footprint) samples from both temporal sides; requires
// labelA/labelB to be present.
std::vector<TrainSample> load_single_temporal(const Dataset& ds);

struct SynthConfig {
  int count = 200;
  int size = 64;
  double change_density = 0.10;
  uint64_t seed = 0;
};
// Writes A/, B/, label/, labelA/, labelB/ under root/split. The change
// label is the exact symmetric difference of the two rectangle sets.
void synth_generate(const std::string& root, const std::string& split,
                    const SynthConfig& cfg);

// Checkpoint container: text manifest with per-tensor crc32 plus a raw
// little-endian float32 payload. Writes are atomic (tmp + rename).
void save_checkpoint(const ParamStore& store, const std::string& path);
void load_checkpoint(ParamStore& store, const std::string& path);
StoreMeta peek_checkpoint_meta(const std::string& path);

void write_prediction_mask(const std::string& path, const Tensor& binary);
// TP green, TN black, FP yellow, FN red.
void write_composite(const std::string& path, const Tensor& pred_binary,
                     const Tensor& gt_binary);

}  // namespace schanger
