#pragma once

#include <utility>

#include "schanger/modelgraph.hpp"
#include "schanger/ops.hpp"
#include "schanger/params.hpp"
#include "schanger/rng.hpp"

namespace schanger {

constexpr float kNormEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;

// Registers parameters and accounting rows while a model is assembled.
// ratio/streams describe where in the network the block sits; tfm_scope
// marks every created tensor as SCN-new.
struct BlockBuilder {
  ParamStore& store;
  ModelGraph& graph;
  Rng& rng;
  int ratio = 1;
  int streams = 1;
  bool tfm_scope = false;

  void conv(const std::string& prefix, int cin, int cout, int k, int groups,
            bool bias);
  void bn(const std::string& prefix, int c);
  void ln(const std::string& prefix, int c);
  void op(LayerKind kind, const std::string& label, int c,
          int streams_override = -1);
};

// Everything a forward pass needs besides inputs. tie_groups couples
// droppath decisions across stacked Siamese streams.
struct BlockRuntime {
  ParamStore& store;
  bool training = false;
  Rng* rng = nullptr;
  int tie_groups = 1;
};

Tensor conv_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x,
                const ConvSpec& spec, bool has_bias);
Tensor bn_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x);
Tensor ln_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x);

// Squeeze-and-excitation gate.
void build_se(BlockBuilder& b, const std::string& prefix, int channels,
              int reduced);
Tensor se_forward(BlockRuntime& rt, const std::string& prefix,
                  const Tensor& x);

// Inverted-residual local feature extraction: expand, depthwise, SE,
// project, residual when channels match.
struct LfemSpec {
  int in_ch = 0;
  int out_ch = 0;
  int expand = 6;
  float se_ratio = 0.25f;
  float droppath = 0.0f;
  int se_reduced() const;
};
void build_lfem(BlockBuilder& b, const std::string& prefix,
                const LfemSpec& spec);
Tensor lfem_forward(BlockRuntime& rt, const std::string& prefix,
                    const LfemSpec& spec, const Tensor& x);

// Temporal fusion: concat, pointwise 2C->C, layer norm, GELU.
void build_tfm(BlockBuilder& b, const std::string& prefix, int channels);
Tensor tfm_forward(BlockRuntime& rt, const std::string& prefix,
                   const Tensor& x1, const Tensor& x2);

// Decomposed large-kernel chain: dense dw k1, dilated dw k2, pointwise.
struct LkaSpec {
  int channels = 0;
  int k1 = 5;
  int k2 = 7;
  int dilation = 3;
};
void build_lka(BlockBuilder& b, const std::string& prefix, const LkaSpec& spec);
Tensor lka_forward(BlockRuntime& rt, const std::string& prefix,
                   const LkaSpec& spec, const Tensor& t);

// Shared change-aware attention: one attention map from fused temporal
// features gates both streams.
void build_sclka(BlockBuilder& b, const std::string& prefix,
                 const LkaSpec& spec);
std::pair<Tensor, Tensor> sclka_forward(BlockRuntime& rt,
                                        const std::string& prefix,
                                        const LkaSpec& spec, const Tensor& x1,
                                        const Tensor& x2);

// Attention block shared by both models: pre-norm attention branch plus
// pre-norm FFN branch, each residual. shared_attn switches the plain
// single-stream gate (VANM) to the Siamese shared gate (SCAM); input is
// then the two streams stacked along the batch axis.
struct AttnSpec {
  int channels = 0;
  int ffn_ratio = 2;
  bool shared_attn = false;
  float droppath = 0.0f;
  LkaSpec lka;
};
void build_attn_block(BlockBuilder& b, const std::string& prefix,
                      const AttnSpec& spec);
Tensor attn_block_forward(BlockRuntime& rt, const std::string& prefix,
                          const AttnSpec& spec, const Tensor& x);

void build_stem(BlockBuilder& b, const std::string& prefix, int out_ch);
Tensor stem_forward(BlockRuntime& rt, const std::string& prefix,
                    const Tensor& x);

// Multi-scale supervision head: per-stage 3x3 to one channel, upsample
// to full resolution, then a 1x1 fuse over the five maps. Returns the
// fused logits first, then the five stage logits.
void build_msfsh(BlockBuilder& b, const std::string& prefix,
                 const std::array<int, 5>& stage_channels);
std::vector<Tensor> msfsh_forward(BlockRuntime& rt, const std::string& prefix,
                                  const std::array<Tensor, 5>& feats,
                                  int out_h, int out_w);

}  // namespace schanger
