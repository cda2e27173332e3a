#include "schanger/networks.hpp"

#include "schanger/errors.hpp"

namespace schanger {

VariantConfig small_variant() {
  VariantConfig v;
  v.name = "small";
  v.channels = {8, 16, 32, 40, 48, 48};
  return v;
}

VariantConfig base_variant() {
  VariantConfig v;
  v.name = "base";
  v.channels = {24, 32, 48, 64, 104, 120};
  return v;
}

VariantConfig variant_by_name(const std::string& name) {
  if (name == "small") return small_variant();
  if (name == "base") return base_variant();
  throw ConfigError("unknown variant: " + name);
}

namespace {

LfemSpec lfem_spec(const VariantConfig& v, int in_ch, int out_ch) {
  LfemSpec s;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.expand = v.expand;
  s.se_ratio = v.se_ratio;
  s.droppath = v.droppath;
  return s;
}

AttnSpec attn_spec(const VariantConfig& v, int channels, bool shared) {
  AttnSpec a;
  a.channels = channels;
  a.ffn_ratio = v.ffn_ratio;
  a.shared_attn = shared;
  a.droppath = v.droppath;
  a.lka = LkaSpec{channels, v.k1, v.k2, v.dilation};
  return a;
}

std::string stage_name(const char* base, int stage) {
  return std::string(base) + std::to_string(stage);
}

BuiltModel build_model(const VariantConfig& v, uint64_t seed, bool siamese) {
  BuiltModel m;
  m.graph.arch = siamese ? "schanger" : "spnet";
  m.graph.variant = v;
  m.store.meta.arch = m.graph.arch;
  m.store.meta.variant = v.name;
  m.store.meta.seed = seed;

  Rng rng(seed);
  BlockBuilder b{m.store, m.graph, rng};
  b.streams = siamese ? 2 : 1;
  const auto& C = v.channels;

  b.ratio = 1;
  build_stem(b, "stem", C[0]);

  for (int st = 1; st <= 5; ++st) {
    b.ratio = 1 << (st - 1);
    if (st > 1) {
      b.op(LayerKind::Pool, stage_name("enc", st) + ".pool", C[st - 1]);
    }
    build_lfem(b, stage_name("enc", st) + ".lfem1",
               lfem_spec(v, C[st - 1], C[st]));
    build_lfem(b, stage_name("enc", st) + ".lfem2",
               lfem_spec(v, C[st], C[st]));
  }

  for (int st = 1; st <= 5; ++st) {
    b.ratio = 1 << (st - 1);
    build_attn_block(b, stage_name("attn", st), attn_spec(v, C[st], siamese));
  }

  b.ratio = 16;
  build_lfem(b, "dec5.lfem1", lfem_spec(v, C[5], C[5]));
  build_lfem(b, "dec5.lfem2", lfem_spec(v, C[5], C[5]));

  for (int st = 4; st >= 1; --st) {
    b.ratio = 1 << (st - 1);
    b.op(LayerKind::Resize, stage_name("dec", st) + ".up", C[st + 1]);
    build_lfem(b, stage_name("dec", st) + ".lfem1",
               lfem_spec(v, C[st + 1], C[st]));
    b.op(LayerKind::Elementwise, stage_name("dec", st) + ".skip_add", C[st]);
    build_lfem(b, stage_name("dec", st) + ".lfem2",
               lfem_spec(v, C[st], C[st]));
    if (siamese) build_tfm(b, stage_name("sfa", st) + ".tfm", C[st]);
  }

  if (siamese) {
    // Stage-5 fusion averages the two streams at the deepest ratio:
    // one add and one scale per output element.
    b.ratio = 16;
    b.op(LayerKind::Elementwise, "tap5.add", C[5], 1);
    b.op(LayerKind::Elementwise, "tap5.scale", C[5], 1);
  }

  b.ratio = 1;
  build_msfsh(b, "head", {C[1], C[2], C[3], C[4], C[5]});
  return m;
}

void check_input(const Tensor& x, const char* who) {
  const Shape s = x.shape();
  if (s.c != 3) {
    throw ShapeError(std::string(who) + ": expected 3-channel input, got " +
                     s.str());
  }
  if (s.h < 16 || s.w < 16 || s.h % 16 != 0 || s.w % 16 != 0) {
    throw ShapeError(std::string(who) +
                     ": spatial dims must be multiples of 16, got " + s.str());
  }
}

// Shared trunk; for the Siamese model x carries both streams stacked
// along the batch axis.
std::vector<Tensor> forward_impl(const ModelGraph& g, ParamStore& store,
                                 const Tensor& x, bool training, Rng* rng,
                                 bool siamese) {
  const VariantConfig& v = g.variant;
  const auto& C = v.channels;
  BlockRuntime rt{store, training, rng, siamese ? 2 : 1};
  const int H = x.shape().h;
  const int W = x.shape().w;

  Tensor cur = stem_forward(rt, "stem", x);
  std::array<Tensor, 6> enc;
  for (int st = 1; st <= 5; ++st) {
    if (st > 1) cur = maxpool2(cur);
    cur = lfem_forward(rt, stage_name("enc", st) + ".lfem1",
                       lfem_spec(v, C[st - 1], C[st]), cur);
    cur = lfem_forward(rt, stage_name("enc", st) + ".lfem2",
                       lfem_spec(v, C[st], C[st]), cur);
    enc[st] = cur;
  }

  std::array<Tensor, 6> skip;
  for (int st = 1; st <= 5; ++st) {
    skip[st] = attn_block_forward(rt, stage_name("attn", st),
                                  attn_spec(v, C[st], siamese), enc[st]);
  }

  std::array<Tensor, 6> dec;
  Tensor d = lfem_forward(rt, "dec5.lfem1", lfem_spec(v, C[5], C[5]), skip[5]);
  dec[5] = lfem_forward(rt, "dec5.lfem2", lfem_spec(v, C[5], C[5]), d);

  for (int st = 4; st >= 1; --st) {
    int scale = 1 << (st - 1);
    Tensor up = bilinear_resize(dec[st + 1], H / scale, W / scale);
    Tensor t = lfem_forward(rt, stage_name("dec", st) + ".lfem1",
                            lfem_spec(v, C[st + 1], C[st]), up);
    t = add(t, skip[st]);
    dec[st] = lfem_forward(rt, stage_name("dec", st) + ".lfem2",
                           lfem_spec(v, C[st], C[st]), t);
  }

  std::array<Tensor, 5> taps;
  if (siamese) {
    const int n = x.shape().n / 2;
    for (int st = 1; st <= 4; ++st) {
      Tensor s1 = slice_batch(dec[st], 0, n);
      Tensor s2 = slice_batch(dec[st], n, 2 * n);
      taps[st - 1] = tfm_forward(rt, stage_name("sfa", st) + ".tfm", s1, s2);
    }
    Tensor b1 = slice_batch(dec[5], 0, n);
    Tensor b2 = slice_batch(dec[5], n, 2 * n);
    taps[4] = mul_scalar(add(b1, b2), 0.5f);
  } else {
    for (int st = 1; st <= 5; ++st) taps[st - 1] = dec[st];
  }

  return msfsh_forward(rt, "head", taps, H, W);
}

}  // namespace

BuiltModel build_spnet(const VariantConfig& variant, uint64_t seed) {
  return build_model(variant, seed, false);
}

BuiltModel build_schanger(const VariantConfig& variant, uint64_t seed) {
  return build_model(variant, seed, true);
}

std::vector<Tensor> spnet_forward(const ModelGraph& graph, ParamStore& store,
                                  const Tensor& image, bool training,
                                  Rng* rng) {
  if (graph.arch != "spnet") {
    throw ConfigError("spnet_forward on arch " + graph.arch);
  }
  check_input(image, "spnet_forward");
  return forward_impl(graph, store, image, training, rng, false);
}

std::vector<Tensor> schanger_forward(const ModelGraph& graph,
                                     ParamStore& store, const Tensor& t1,
                                     const Tensor& t2, bool training,
                                     Rng* rng) {
  if (graph.arch != "schanger") {
    throw ConfigError("schanger_forward on arch " + graph.arch);
  }
  check_input(t1, "schanger_forward");
  check_input(t2, "schanger_forward");
  if (!(t1.shape() == t2.shape())) {
    throw ShapeError("schanger_forward: temporal shapes differ, " +
                     t1.shape().str() + " vs " + t2.shape().str());
  }
  Tensor stacked = concat_batch(t1, t2);
  return forward_impl(graph, store, stacked, training, rng, true);
}

}  // namespace schanger
