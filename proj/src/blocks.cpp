#include "schanger/blocks.hpp"

#include <cmath>

#include "schanger/errors.hpp"

namespace schanger {

namespace {

Tensor init_conv_weight(Rng& rng, int cout, int cin_per_group, int k,
                        bool tfm_scope) {
  Shape s{cout, cin_per_group, k, k};
  std::vector<float> values(static_cast<size_t>(s.numel()));
  if (tfm_scope) {
    for (auto& v : values) v = static_cast<float>(rng.trunc_normal(0.02));
  } else {
    double fan_in = static_cast<double>(cin_per_group) * k * k;
    double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : values) v = static_cast<float>(rng.normal(0.0, stddev));
  }
  return Tensor::from_data(s, std::move(values));
}

ConvSpec pointwise_spec() { return ConvSpec{1, 0, 1, 1}; }

Tensor droppath_branch(BlockRuntime& rt, const Tensor& x, float rate) {
  if (rate == 0.0f || !rt.training) return x;
  if (!rt.rng) throw ConfigError("droppath in training mode needs an rng");
  return droppath(x, rate, rt.training, *rt.rng, rt.tie_groups);
}

}  // namespace

void BlockBuilder::conv(const std::string& prefix, int cin, int cout, int k,
                        int groups, bool bias) {
  if (cin < 1 || cout < 1 || k < 1 || groups < 1 || cin % groups != 0) {
    throw ConfigError("conv builder: bad geometry at " + prefix);
  }
  store.create(prefix + ".weight",
               init_conv_weight(rng, cout, cin / groups, k, tfm_scope), false,
               false, tfm_scope);
  if (bias) {
    store.create(prefix + ".bias", Tensor::zeros(Shape{1, cout, 1, 1}), false,
                 true, tfm_scope);
  }
  LayerSpec row;
  row.path = prefix;
  row.kind = LayerKind::Conv;
  row.in_ch = cin;
  row.out_ch = cout;
  row.kh = row.kw = k;
  row.groups = groups;
  row.bias = bias;
  row.ratio = ratio;
  row.streams = streams;
  row.params = static_cast<int64_t>(cout) * (cin / groups) * k * k +
               (bias ? cout : 0);
  graph.layers.push_back(row);
}

void BlockBuilder::bn(const std::string& prefix, int c) {
  store.create(prefix + ".gamma", Tensor::full(Shape{1, c, 1, 1}, 1.0f), false,
               true, tfm_scope);
  store.create(prefix + ".beta", Tensor::zeros(Shape{1, c, 1, 1}), false, true,
               tfm_scope);
  store.create(prefix + ".running_mean", Tensor::zeros(Shape{1, c, 1, 1}),
               true, true, tfm_scope);
  store.create(prefix + ".running_var", Tensor::full(Shape{1, c, 1, 1}, 1.0f),
               true, true, tfm_scope);
  LayerSpec row;
  row.path = prefix;
  row.kind = LayerKind::Norm;
  row.in_ch = row.out_ch = c;
  row.ratio = ratio;
  row.streams = streams;
  row.params = 2 * static_cast<int64_t>(c);
  graph.layers.push_back(row);
}

void BlockBuilder::ln(const std::string& prefix, int c) {
  store.create(prefix + ".gamma", Tensor::full(Shape{1, c, 1, 1}, 1.0f), false,
               true, tfm_scope);
  store.create(prefix + ".beta", Tensor::zeros(Shape{1, c, 1, 1}), false, true,
               tfm_scope);
  LayerSpec row;
  row.path = prefix;
  row.kind = LayerKind::Norm;
  row.in_ch = row.out_ch = c;
  row.ratio = ratio;
  row.streams = streams;
  row.params = 2 * static_cast<int64_t>(c);
  graph.layers.push_back(row);
}

void BlockBuilder::op(LayerKind kind, const std::string& label, int c,
                      int streams_override) {
  LayerSpec row;
  row.path = label;
  row.kind = kind;
  row.in_ch = row.out_ch = c;
  row.ratio = ratio;
  row.streams = streams_override >= 0 ? streams_override : streams;
  graph.layers.push_back(row);
}

Tensor conv_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x,
                const ConvSpec& spec, bool has_bias) {
  const Tensor& w = rt.store.get(prefix + ".weight");
  if (has_bias) {
    const Tensor& b = rt.store.get(prefix + ".bias");
    return conv2d(x, w, &b, spec);
  }
  return conv2d(x, w, nullptr, spec);
}

Tensor bn_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x) {
  return batchnorm(x, rt.store.get(prefix + ".gamma"),
                   rt.store.get(prefix + ".beta"),
                   rt.store.get(prefix + ".running_mean"),
                   rt.store.get(prefix + ".running_var"), kNormEps,
                   kBnMomentum, rt.training);
}

Tensor ln_fwd(BlockRuntime& rt, const std::string& prefix, const Tensor& x) {
  return layernorm_channel(x, rt.store.get(prefix + ".gamma"),
                           rt.store.get(prefix + ".beta"), kNormEps);
}

void build_se(BlockBuilder& b, const std::string& prefix, int channels,
              int reduced) {
  if (reduced < 1) throw ConfigError("se: reduced channels must be >= 1");
  b.op(LayerKind::Elementwise, prefix + ".gap", channels);
  b.conv(prefix + ".fc1", channels, reduced, 1, 1, true);
  b.graph.layers.back().unit_spatial = true;
  b.conv(prefix + ".fc2", reduced, channels, 1, 1, true);
  b.graph.layers.back().unit_spatial = true;
  b.op(LayerKind::Elementwise, prefix + ".gate", channels);
}

Tensor se_forward(BlockRuntime& rt, const std::string& prefix,
                  const Tensor& x) {
  Tensor g = global_avg_pool(x);
  g = conv_fwd(rt, prefix + ".fc1", g, pointwise_spec(), true);
  g = silu(g);
  g = conv_fwd(rt, prefix + ".fc2", g, pointwise_spec(), true);
  g = sigmoid(g);
  return scale_channels(x, g);
}

int LfemSpec::se_reduced() const {
  return std::max(1, static_cast<int>(std::lround(se_ratio * in_ch)));
}

void build_lfem(BlockBuilder& b, const std::string& prefix,
                const LfemSpec& spec) {
  int ce = spec.expand * spec.in_ch;
  b.conv(prefix + ".expand", spec.in_ch, ce, 1, 1, false);
  b.bn(prefix + ".expand_bn", ce);
  b.op(LayerKind::Act, prefix + ".expand_act", ce);
  b.conv(prefix + ".dw", ce, ce, 3, ce, false);
  b.bn(prefix + ".dw_bn", ce);
  b.op(LayerKind::Act, prefix + ".dw_act", ce);
  build_se(b, prefix + ".se", ce, spec.se_reduced());
  b.conv(prefix + ".project", ce, spec.out_ch, 1, 1, false);
  b.bn(prefix + ".project_bn", spec.out_ch);
  if (spec.in_ch == spec.out_ch) {
    b.op(LayerKind::Elementwise, prefix + ".residual", spec.out_ch);
  }
}

Tensor lfem_forward(BlockRuntime& rt, const std::string& prefix,
                    const LfemSpec& spec, const Tensor& x) {
  if (x.shape().c != spec.in_ch) {
    throw ShapeError("lfem " + prefix + ": input channels " +
                     std::to_string(x.shape().c) + ", expected " +
                     std::to_string(spec.in_ch));
  }
  Tensor e = conv_fwd(rt, prefix + ".expand", x, pointwise_spec(), false);
  e = bn_fwd(rt, prefix + ".expand_bn", e);
  e = silu(e);
  Tensor d = conv_fwd(rt, prefix + ".dw", e,
                      ConvSpec{1, 1, 1, spec.expand * spec.in_ch}, false);
  d = bn_fwd(rt, prefix + ".dw_bn", d);
  d = silu(d);
  Tensor s = se_forward(rt, prefix + ".se", d);
  Tensor p = conv_fwd(rt, prefix + ".project", s, pointwise_spec(), false);
  p = bn_fwd(rt, prefix + ".project_bn", p);
  if (spec.in_ch != spec.out_ch) return p;
  return add(x, droppath_branch(rt, p, spec.droppath));
}

void build_tfm(BlockBuilder& b, const std::string& prefix, int channels) {
  bool saved = b.tfm_scope;
  int saved_streams = b.streams;
  b.tfm_scope = true;
  b.streams = 1;  // fusion runs once per pair
  b.conv(prefix + ".conv", 2 * channels, channels, 1, 1, true);
  b.ln(prefix + ".norm", channels);
  b.op(LayerKind::Act, prefix + ".act", channels);
  b.tfm_scope = saved;
  b.streams = saved_streams;
}

Tensor tfm_forward(BlockRuntime& rt, const std::string& prefix,
                   const Tensor& x1, const Tensor& x2) {
  if (!(x1.shape() == x2.shape())) {
    throw ShapeError("tfm " + prefix + ": stream shapes differ, " +
                     x1.shape().str() + " vs " + x2.shape().str());
  }
  Tensor xc = concat_channels(x1, x2);
  Tensor xs = conv_fwd(rt, prefix + ".conv", xc, pointwise_spec(), true);
  Tensor xn = ln_fwd(rt, prefix + ".norm", xs);
  return gelu(xn);
}

void build_lka(BlockBuilder& b, const std::string& prefix,
               const LkaSpec& spec) {
  if (spec.k1 % 2 == 0 || spec.k2 % 2 == 0 || spec.k1 < 1 || spec.k2 < 1 ||
      spec.dilation < 1) {
    throw ConfigError("lka: kernels must be odd and dilation positive");
  }
  int c = spec.channels;
  b.conv(prefix + ".dw_dense", c, c, spec.k1, c, true);
  b.conv(prefix + ".dw_dilated", c, c, spec.k2, c, true);
  b.conv(prefix + ".pw", c, c, 1, 1, true);
}

Tensor lka_forward(BlockRuntime& rt, const std::string& prefix,
                   const LkaSpec& spec, const Tensor& t) {
  int c = spec.channels;
  Tensor s = conv_fwd(rt, prefix + ".dw_dense", t,
                      ConvSpec{1, (spec.k1 - 1) / 2, 1, c}, true);
  s = conv_fwd(rt, prefix + ".dw_dilated", s,
               ConvSpec{1, spec.dilation * (spec.k2 - 1) / 2, spec.dilation, c},
               true);
  return conv_fwd(rt, prefix + ".pw", s, pointwise_spec(), true);
}

void build_sclka(BlockBuilder& b, const std::string& prefix,
                 const LkaSpec& spec) {
  build_tfm(b, prefix + ".tfm", spec.channels);
  int saved = b.streams;
  b.streams = 1;  // one attention map per pair
  build_lka(b, prefix + ".lka", spec);
  b.streams = saved;
  b.op(LayerKind::Elementwise, prefix + ".gate", spec.channels, 2);
}

std::pair<Tensor, Tensor> sclka_forward(BlockRuntime& rt,
                                        const std::string& prefix,
                                        const LkaSpec& spec, const Tensor& x1,
                                        const Tensor& x2) {
  Tensor t = tfm_forward(rt, prefix + ".tfm", x1, x2);
  Tensor a = lka_forward(rt, prefix + ".lka", spec, t);
  return {mul(x1, a), mul(x2, a)};
}

void build_attn_block(BlockBuilder& b, const std::string& prefix,
                      const AttnSpec& spec) {
  int c = spec.channels;
  b.bn(prefix + ".norm1", c);
  b.conv(prefix + ".pw_in", c, c, 1, 1, true);
  b.op(LayerKind::Act, prefix + ".pw_in_act", c);
  if (spec.shared_attn) {
    build_tfm(b, prefix + ".tfm", c);
    int saved = b.streams;
    b.streams = 1;
    build_lka(b, prefix + ".lka", spec.lka);
    b.streams = saved;
    b.op(LayerKind::Elementwise, prefix + ".gate", c, 2);
  } else {
    build_lka(b, prefix + ".lka", spec.lka);
    b.op(LayerKind::Elementwise, prefix + ".gate", c);
  }
  b.conv(prefix + ".pw_out", c, c, 1, 1, true);
  b.op(LayerKind::Elementwise, prefix + ".residual1", c);
  b.bn(prefix + ".norm2", c);
  int cf = spec.ffn_ratio * c;
  b.conv(prefix + ".ffn.pw1", c, cf, 1, 1, true);
  b.conv(prefix + ".ffn.dw", cf, cf, 3, cf, true);
  b.op(LayerKind::Act, prefix + ".ffn.act", cf);
  b.conv(prefix + ".ffn.pw2", cf, c, 1, 1, true);
  b.op(LayerKind::Elementwise, prefix + ".residual2", c);
}

Tensor attn_block_forward(BlockRuntime& rt, const std::string& prefix,
                          const AttnSpec& spec, const Tensor& x) {
  Tensor u = bn_fwd(rt, prefix + ".norm1", x);
  u = conv_fwd(rt, prefix + ".pw_in", u, pointwise_spec(), true);
  u = gelu(u);
  Tensor gated;
  if (spec.shared_attn) {
    int n2 = u.shape().n;
    if (n2 % 2 != 0) {
      throw ShapeError("shared attention expects two stacked streams");
    }
    int n = n2 / 2;
    Tensor u1 = slice_batch(u, 0, n);
    Tensor u2 = slice_batch(u, n, n2);
    Tensor t = tfm_forward(rt, prefix + ".tfm", u1, u2);
    Tensor a = lka_forward(rt, prefix + ".lka", spec.lka, t);
    gated = mul(u, concat_batch(a, a));
  } else {
    Tensor a = lka_forward(rt, prefix + ".lka", spec.lka, u);
    gated = mul(u, a);
  }
  Tensor y = conv_fwd(rt, prefix + ".pw_out", gated, pointwise_spec(), true);
  Tensor x1 = add(x, droppath_branch(rt, y, spec.droppath));

  Tensor f = bn_fwd(rt, prefix + ".norm2", x1);
  f = conv_fwd(rt, prefix + ".ffn.pw1", f, pointwise_spec(), true);
  f = conv_fwd(rt, prefix + ".ffn.dw", f,
               ConvSpec{1, 1, 1, spec.ffn_ratio * spec.channels}, true);
  f = gelu(f);
  f = conv_fwd(rt, prefix + ".ffn.pw2", f, pointwise_spec(), true);
  return add(x1, droppath_branch(rt, f, spec.droppath));
}

void build_stem(BlockBuilder& b, const std::string& prefix, int out_ch) {
  b.conv(prefix + ".conv", 3, out_ch, 3, 1, false);
  b.bn(prefix + ".bn", out_ch);
  b.op(LayerKind::Act, prefix + ".act", out_ch);
}

Tensor stem_forward(BlockRuntime& rt, const std::string& prefix,
                    const Tensor& x) {
  if (x.shape().c != 3) {
    throw ShapeError("stem: expected 3 input channels, got " +
                     std::to_string(x.shape().c));
  }
  Tensor y = conv_fwd(rt, prefix + ".conv", x, ConvSpec{1, 1, 1, 1}, false);
  y = bn_fwd(rt, prefix + ".bn", y);
  return silu(y);
}

void build_msfsh(BlockBuilder& b, const std::string& prefix,
                 const std::array<int, 5>& stage_channels) {
  int saved_ratio = b.ratio;
  int saved_streams = b.streams;
  b.streams = 1;  // the head consumes fused single-stream maps
  for (int s = 1; s <= 5; ++s) {
    b.ratio = 1 << (s - 1);
    b.conv(prefix + ".stage" + std::to_string(s), stage_channels[s - 1], 1, 3,
           1, true);
    b.ratio = 1;
    b.op(LayerKind::Resize, prefix + ".up" + std::to_string(s), 1);
  }
  b.ratio = 1;
  b.conv(prefix + ".fuse", 5, 1, 1, 1, true);
  b.ratio = saved_ratio;
  b.streams = saved_streams;
}

std::vector<Tensor> msfsh_forward(BlockRuntime& rt, const std::string& prefix,
                                  const std::array<Tensor, 5>& feats,
                                  int out_h, int out_w) {
  std::vector<Tensor> stage_logits;
  stage_logits.reserve(5);
  for (int s = 1; s <= 5; ++s) {
    Tensor m = conv_fwd(rt, prefix + ".stage" + std::to_string(s),
                        feats[s - 1], ConvSpec{1, 1, 1, 1}, true);
    stage_logits.push_back(bilinear_resize(m, out_h, out_w));
  }
  Tensor cat = stage_logits[0];
  for (int s = 1; s < 5; ++s) cat = concat_channels(cat, stage_logits[s]);
  Tensor fused = conv_fwd(rt, prefix + ".fuse", cat, pointwise_spec(), true);
  std::vector<Tensor> out;
  out.push_back(fused);
  for (auto& t : stage_logits) out.push_back(t);
  return out;
}

}  // namespace schanger
