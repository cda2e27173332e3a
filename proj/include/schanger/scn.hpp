#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "schanger/networks.hpp"

namespace schanger {

struct InflationRow {
  std::string path;
  Shape shape;
  int64_t count = 0;
  bool is_buffer = false;
  std::string origin;  // "copied" or "new"
};

struct InflationReport {
  std::vector<InflationRow> rows;
  int64_t copied_param_count = 0;  // trainable scalars taken verbatim
  int64_t new_param_count = 0;     // trainable scalars freshly drawn
  double new_fraction() const {
    return static_cast<double>(new_param_count) /
           static_cast<double>(copied_param_count + new_param_count);
  }
  std::string table() const;
};

struct InflationResult {
  BuiltModel model;
  InflationReport report;
};

// Inflates a single-temporal pretrained model into the Siamese change
// model: every shared tensor (including running statistics) is copied
// bit-exactly; only temporal-fusion tensors are drawn fresh under seed.
InflationResult inflate(const BuiltModel& source, uint64_t seed);

// "full" trains everything; "new_only" freezes the copied subset.
void finetune_mode(ParamStore& store, const std::string& mode);

}  // namespace schanger
