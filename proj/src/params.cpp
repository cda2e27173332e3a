#include "schanger/params.hpp"

#include "schanger/errors.hpp"

namespace schanger {

Tensor& ParamStore::create(const std::string& path, Tensor tensor,
                           bool is_buffer, bool no_decay, bool is_tfm) {
  if (entries_.count(path)) {
    throw ConfigError("duplicate parameter path: " + path);
  }
  ParamEntry e;
  e.tensor = std::move(tensor);
  // Trainable tensors are autograd leaves; running statistics are not.
  e.tensor.set_requires_grad(!is_buffer);
  e.is_buffer = is_buffer;
  e.no_decay = no_decay;
  e.is_tfm = is_tfm;
  auto [it, _] = entries_.emplace(path, std::move(e));
  order_.push_back(path);
  return it->second.tensor;
}

ParamEntry& ParamStore::entry(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) {
    throw ConfigError("missing parameter path: " + path);
  }
  return it->second;
}

const ParamEntry& ParamStore::entry(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) {
    throw ConfigError("missing parameter path: " + path);
  }
  return it->second;
}

int64_t ParamStore::trainable_elements() const {
  int64_t total = 0;
  for (const auto& path : order_) {
    const ParamEntry& e = entries_.at(path);
    if (!e.is_buffer) total += e.tensor.numel();
  }
  return total;
}

std::vector<std::string> ParamStore::tfm_paths() const {
  std::vector<std::string> out;
  for (const auto& path : order_) {
    if (entries_.at(path).is_tfm) out.push_back(path);
  }
  return out;
}

}  // namespace schanger
