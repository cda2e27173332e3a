#pragma once

#include <string>
#include <vector>

#include "schanger/data_io.hpp"
#include "schanger/networks.hpp"

namespace schanger {

struct Confusion {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  Confusion& operator+=(const Confusion& o);
};

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  double accuracy = 0.0;
  // True when the image pair contains no change and none was predicted;
  // such pairs score 1 by convention instead of 0/0.
  bool degenerate = false;
};

Metrics metrics_from(const Confusion& c);

// Probability 0.5 corresponds to logit 0.
Tensor binarize_logits(const Tensor& logits, float threshold = 0.0f);

Confusion confusion_from(const Tensor& pred_binary, const Tensor& target);

// Fused-head logits at input resolution, eval mode, no graph. A
// positive tile size runs the trunk on tile x tile windows and
// stitches the logits (the last window shifts inward when the size
// does not divide the raster).
Tensor predict_logits(const BuiltModel& model, const TrainSample& sample,
                      int tile);

struct EvalConfig {
  int tile = 0;  // 0 evaluates each raster in one pass
  std::string dump_dir;
  bool composites = false;
};

struct EvalResult {
  Confusion confusion;
  Metrics metrics;
  int64_t samples = 0;
  std::vector<Metrics> per_sample;
};

EvalResult evaluate(const BuiltModel& model,
                    const std::vector<TrainSample>& samples,
                    const EvalConfig& cfg);

}  // namespace schanger
