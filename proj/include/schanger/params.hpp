#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "schanger/tensor.hpp"

namespace schanger {

struct ParamEntry {
  Tensor tensor;
  bool is_buffer = false;  // running statistics; serialized but not counted
  bool no_decay = false;   // biases and norm affine skip weight decay
  bool is_tfm = false;     // created by a TFM builder; the SCN-new subset
  bool frozen = false;     // excluded from optimizer updates
};

struct StoreMeta {
  std::string arch;     // "spnet" or "schanger"
  std::string variant;  // "small" or "base"
  uint64_t seed = 0;
  int format_version = 1;
};

// Named parameter set with deterministic (insertion) ordering.
class ParamStore {
 public:
  Tensor& create(const std::string& path, Tensor tensor, bool is_buffer,
                 bool no_decay, bool is_tfm);

  bool has(const std::string& path) const { return entries_.count(path) > 0; }
  ParamEntry& entry(const std::string& path);
  const ParamEntry& entry(const std::string& path) const;
  Tensor& get(const std::string& path) { return entry(path).tensor; }
  const Tensor& get(const std::string& path) const {
    return entry(path).tensor;
  }

  const std::vector<std::string>& paths() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t trainable_elements() const;
  std::vector<std::string> tfm_paths() const;

  StoreMeta meta;

 private:
  std::map<std::string, ParamEntry> entries_;
  std::vector<std::string> order_;
};

}  // namespace schanger
