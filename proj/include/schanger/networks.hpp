#pragma once

#include <vector>

#include "schanger/blocks.hpp"

namespace schanger {

struct BuiltModel {
  ModelGraph graph;
  ParamStore store;
};

// Deterministic under seed: two builds with the same seed are
// bit-identical, including initialization draws.
BuiltModel build_spnet(const VariantConfig& variant, uint64_t seed);
BuiltModel build_schanger(const VariantConfig& variant, uint64_t seed);

// Both return six logit maps at input resolution: the fused head first,
// then the five per-stage supervision heads.
std::vector<Tensor> spnet_forward(const ModelGraph& graph, ParamStore& store,
                                  const Tensor& image, bool training,
                                  Rng* rng);
std::vector<Tensor> schanger_forward(const ModelGraph& graph,
                                     ParamStore& store, const Tensor& t1,
                                     const Tensor& t2, bool training,
                                     Rng* rng);

}  // namespace schanger
