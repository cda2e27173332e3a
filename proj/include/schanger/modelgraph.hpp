#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace schanger {

// Channel plan and block hyperparameters for one model size.
struct VariantConfig {
  std::string name;
  std::array<int, 6> channels{};  // stem C0 plus stages C1..C5
  int expand = 6;                 // LFEM expansion factor
  int ffn_ratio = 2;              // attention FFN expansion
  float se_ratio = 0.25f;         // SE bottleneck vs block input channels
  float droppath = 0.0f;
  int k1 = 5;                     // large-kernel decomposition: dense dw
  int k2 = 7;                     // dilated dw
  int dilation = 3;
};

VariantConfig small_variant();
VariantConfig base_variant();
VariantConfig variant_by_name(const std::string& name);

enum class LayerKind { Conv, Norm, Act, Elementwise, Resize, Pool };

// One static accounting row. Spatial extent is input_size / ratio per
// side; streams is the Siamese multiplicity of the computation.
struct LayerSpec {
  std::string path;
  LayerKind kind = LayerKind::Conv;
  int in_ch = 0;
  int out_ch = 0;
  int kh = 1;
  int kw = 1;
  int groups = 1;
  bool bias = false;
  int ratio = 1;
  int streams = 1;
  bool unit_spatial = false;  // runs at 1x1 regardless of ratio (SE fc)
  int64_t params = 0;
};

struct ModelGraph {
  std::string arch;  // "spnet" or "schanger"
  VariantConfig variant;
  std::vector<LayerSpec> layers;
};

}  // namespace schanger
