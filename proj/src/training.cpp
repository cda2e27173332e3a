#include "schanger/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "schanger/errors.hpp"
#include "schanger/ops.hpp"

namespace schanger {

Tensor bce_dice_loss(const Tensor& logits, const Tensor& target) {
  if (!(logits.shape() == target.shape())) {
    throw ShapeError("loss expects logits and target of equal shape, got " +
                     logits.shape().str() + " vs " + target.shape().str());
  }
  Tensor bce = bce_with_logits_mean(logits, target);
  Tensor p = sigmoid(logits);
  Tensor inter = sum_per_sample(mul(p, target));
  Tensor denom = add(sum_per_sample(p), sum_per_sample(target));
  Tensor dice = div_ew(add_scalar(mul_scalar(inter, 2.0f), 1.0f),
                       add_scalar(denom, 1.0f));
  Tensor dice_loss = add_scalar(mul_scalar(mean_all(dice), -1.0f), 1.0f);
  return add(bce, dice_loss);
}

Tensor deep_supervision_loss(const std::vector<Tensor>& logits,
                             const Tensor& target,
                             const std::vector<float>& weights) {
  if (logits.empty()) throw ConfigError("deep supervision needs >= 1 head");
  if (!weights.empty() && weights.size() != logits.size()) {
    throw ConfigError("deep supervision weight count mismatch");
  }
  Tensor total;
  for (size_t i = 0; i < logits.size(); ++i) {
    float w = weights.empty() ? 1.0f : weights[i];
    Tensor term = mul_scalar(bce_dice_loss(logits[i], target), w);
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps,
                   double base_lr) {
  if (total_steps < 1) throw ConfigError("lr schedule needs total_steps >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw ConfigError("warmup_steps must lie in [0, total_steps]");
  }
  if (step < 0) throw ConfigError("lr schedule step must be >= 0");
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return base_lr;
  double t = static_cast<double>(step - warmup_steps) /
             static_cast<double>(total_steps - warmup_steps);
  t = std::min(t, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

EmaState ema_init(const ParamStore& store, float momentum) {
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw ConfigError("ema momentum must lie in [0, 1)");
  }
  EmaState ema;
  ema.momentum = momentum;
  for (const auto& path : store.paths()) {
    const auto& src = store.get(path).data();
    ema.shadow[path].assign(src.begin(), src.end());
  }
  return ema;
}

void ema_update(EmaState& ema, const ParamStore& store) {
  const float m = ema.momentum;
  for (const auto& path : store.paths()) {
    auto it = ema.shadow.find(path);
    if (it == ema.shadow.end()) {
      throw ConfigError("ema shadow missing tensor " + path);
    }
    const auto& src = store.get(path).data();
    auto& dst = it->second;
    if (dst.size() != src.size()) {
      throw ShapeError("ema shadow size mismatch for " + path);
    }
    for (size_t i = 0; i < src.size(); ++i) {
      dst[i] = m * dst[i] + (1.0f - m) * src[i];
    }
  }
}

void ema_write_to(const EmaState& ema, ParamStore& store) {
  for (const auto& path : store.paths()) {
    auto it = ema.shadow.find(path);
    if (it == ema.shadow.end()) {
      throw ConfigError("ema shadow missing tensor " + path);
    }
    auto& dst = store.get(path).data();
    if (dst.size() != it->second.size()) {
      throw ShapeError("ema shadow size mismatch for " + path);
    }
    dst.assign(it->second.begin(), it->second.end());
  }
}

void AdamW::step(ParamStore& store, double lr) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (const auto& path : store.paths()) {
    ParamEntry& e = store.entry(path);
    if (e.is_buffer || e.frozen) continue;
    auto& data = e.tensor.data();
    auto& grad = e.tensor.grad();
    auto& mv = m[path];
    auto& vv = v[path];
    if (mv.size() != data.size()) mv.assign(data.size(), 0.0f);
    if (vv.size() != data.size()) vv.assign(data.size(), 0.0f);
    const bool has_grad = grad.size() == data.size();
    const bool decay = !e.no_decay && weight_decay > 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
      double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in " + path);
      }
      double mi = beta1 * mv[i] + (1.0 - beta1) * g;
      double vi = beta2 * vv[i] + (1.0 - beta2) * g * g;
      mv[i] = static_cast<float>(mi);
      vv[i] = static_cast<float>(vi);
      double p = data[i];
      if (decay) p -= lr * weight_decay * p;
      p -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      data[i] = static_cast<float>(p);
    }
  }
}

namespace {

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

Tensor clone_raster(const Tensor& t) {
  return Tensor::from_data(t.shape(), t.data());
}

Tensor crop_raster(const Tensor& t, int top, int left, int size) {
  const Shape s = t.shape();
  Tensor out = Tensor::zeros({s.n, s.c, size, size});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          out.at(n, c, y, x) = t.at(n, c, top + y, left + x);
        }
      }
    }
  }
  return out;
}

void flip_h(Tensor& t) {
  const Shape s = t.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w / 2; ++x) {
          std::swap(t.at(n, c, y, x), t.at(n, c, y, s.w - 1 - x));
        }
      }
    }
  }
}

void flip_v(Tensor& t) {
  const Shape s = t.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h / 2; ++y) {
        for (int x = 0; x < s.w; ++x) {
          std::swap(t.at(n, c, y, x), t.at(n, c, s.h - 1 - y, x));
        }
      }
    }
  }
}

// Rotation, isotropic scale and translation about the raster centre.
// Coordinates outside the source clamp to the border.
Tensor affine_raster(const Tensor& t, double angle_deg, double tx, double ty,
                     double scale, bool nearest) {
  const Shape s = t.shape();
  Tensor out = Tensor::zeros(s);
  const double rad = angle_deg * M_PI / 180.0;
  const double ca = std::cos(rad);
  const double sa = std::sin(rad);
  const double cx = (s.w - 1) * 0.5;
  const double cy = (s.h - 1) * 0.5;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const double xr = (x - cx) - tx;
      const double yr = (y - cy) - ty;
      double sx = (ca * xr + sa * yr) / scale + cx;
      double sy = (-sa * xr + ca * yr) / scale + cy;
      sx = std::min(static_cast<double>(s.w - 1), std::max(0.0, sx));
      sy = std::min(static_cast<double>(s.h - 1), std::max(0.0, sy));
      if (nearest) {
        const int ix = static_cast<int>(std::lround(sx));
        const int iy = static_cast<int>(std::lround(sy));
        for (int n = 0; n < s.n; ++n) {
          for (int c = 0; c < s.c; ++c) {
            out.at(n, c, y, x) = t.at(n, c, iy, ix);
          }
        }
      } else {
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, s.w - 1);
        const int y1 = std::min(y0 + 1, s.h - 1);
        const float fx = static_cast<float>(sx - x0);
        const float fy = static_cast<float>(sy - y0);
        for (int n = 0; n < s.n; ++n) {
          for (int c = 0; c < s.c; ++c) {
            const float v00 = t.at(n, c, y0, x0);
            const float v01 = t.at(n, c, y0, x1);
            const float v10 = t.at(n, c, y1, x0);
            const float v11 = t.at(n, c, y1, x1);
            const float top = v00 + fx * (v01 - v00);
            const float bot = v10 + fx * (v11 - v10);
            out.at(n, c, y, x) = top + fy * (bot - top);
          }
        }
      }
    }
  }
  return out;
}

void jitter_contrast(Tensor& img, Rng& rng) {
  const Shape s = img.shape();
  const float f = static_cast<float>(rng.uniform(0.7, 1.3));
  const int64_t plane = static_cast<int64_t>(s.h) * s.w;
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) mean += img.at(0, c, y, x);
    }
    mean /= static_cast<double>(plane);
    const float mu = static_cast<float>(mean);
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        float& v = img.at(0, c, y, x);
        v = clamp01((v - mu) * f + mu);
      }
    }
  }
}

void jitter_gamma(Tensor& img, Rng& rng) {
  const float g = static_cast<float>(rng.uniform(0.7, 1.5));
  for (float& v : img.data()) v = std::pow(clamp01(v), g);
}

void jitter_emboss(Tensor& img, Rng& rng) {
  static const float kKernel[3][3] = {
      {-2.0f, -1.0f, 0.0f}, {-1.0f, 1.0f, 1.0f}, {0.0f, 1.0f, 2.0f}};
  const float alpha = static_cast<float>(rng.uniform(0.2, 0.6));
  const Shape s = img.shape();
  Tensor src = clone_raster(img);
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        float acc = 0.0f;
        for (int ky = -1; ky <= 1; ++ky) {
          for (int kx = -1; kx <= 1; ++kx) {
            const int yy = std::min(s.h - 1, std::max(0, y + ky));
            const int xx = std::min(s.w - 1, std::max(0, x + kx));
            acc += kKernel[ky + 1][kx + 1] * src.at(0, c, yy, xx);
          }
        }
        float& v = img.at(0, c, y, x);
        v = clamp01((1.0f - alpha) * v + alpha * clamp01(acc));
      }
    }
  }
}

void jitter_noise(Tensor& img, Rng& rng) {
  const double sigma = rng.uniform(0.01, 0.05);
  for (float& v : img.data()) {
    v = clamp01(v + static_cast<float>(rng.normal(0.0, sigma)));
  }
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max(r, std::max(g, b));
  const float mn = std::min(r, std::min(g, b));
  const float d = mx - mn;
  v = mx;
  s = mx <= 0.0f ? 0.0f : d / mx;
  if (d <= 0.0f) {
    h = 0.0f;
  } else if (mx == r) {
    h = std::fmod((g - b) / d, 6.0f) / 6.0f;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0f) / 6.0f;
  } else {
    h = ((r - g) / d + 4.0f) / 6.0f;
  }
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = std::fmod(std::max(h, 0.0f), 1.0f) * 6.0f;
  const int i = std::min(5, static_cast<int>(hh));
  const float f = hh - i;
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - s * f);
  const float t = v * (1.0f - s * (1.0f - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void jitter_hsv(Tensor& img, Rng& rng) {
  const Shape s = img.shape();
  if (s.c != 3) {
    // Grayscale replicated planes: reduce to a value jitter.
    const float fv = static_cast<float>(rng.uniform(0.8, 1.2));
    for (float& v : img.data()) v = clamp01(v * fv);
    return;
  }
  const float dh = static_cast<float>(rng.uniform(-0.05, 0.05));
  const float fs = static_cast<float>(rng.uniform(0.7, 1.3));
  const float fv = static_cast<float>(rng.uniform(0.8, 1.2));
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      float h, sat, val;
      rgb_to_hsv(img.at(0, 0, y, x), img.at(0, 1, y, x), img.at(0, 2, y, x),
                 h, sat, val);
      h = std::fmod(h + dh + 1.0f, 1.0f);
      sat = clamp01(sat * fs);
      val = clamp01(val * fv);
      hsv_to_rgb(h, sat, val, img.at(0, 0, y, x), img.at(0, 1, y, x),
                 img.at(0, 2, y, x));
    }
  }
}

void jitter_motion_blur(Tensor& img, Rng& rng) {
  const int len = rng.randint(0, 1) == 0 ? 3 : 5;
  const bool horizontal = rng.bernoulli(0.5);
  const int half = len / 2;
  const Shape s = img.shape();
  Tensor src = clone_raster(img);
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        float acc = 0.0f;
        for (int k = -half; k <= half; ++k) {
          const int yy =
              horizontal ? y : std::min(s.h - 1, std::max(0, y + k));
          const int xx =
              horizontal ? std::min(s.w - 1, std::max(0, x + k)) : x;
          acc += src.at(0, c, yy, xx);
        }
        img.at(0, c, y, x) = acc / static_cast<float>(len);
      }
    }
  }
}

void photometric(Tensor& img, Rng& rng) {
  switch (rng.randint(0, 5)) {
    case 0: jitter_contrast(img, rng); break;
    case 1: jitter_gamma(img, rng); break;
    case 2: jitter_emboss(img, rng); break;
    case 3: jitter_noise(img, rng); break;
    case 4: jitter_hsv(img, rng); break;
    default: jitter_motion_blur(img, rng); break;
  }
}

}  // namespace

TrainSample augment(const TrainSample& sample, const AugmentConfig& cfg,
                    Rng& rng) {
  if (!sample.a.defined() || !sample.label.defined()) {
    throw DataError("augment needs an image and a label: " + sample.id);
  }
  TrainSample out;
  out.id = sample.id;
  out.a = clone_raster(sample.a);
  if (sample.b.defined()) out.b = clone_raster(sample.b);
  out.label = clone_raster(sample.label);

  const Shape s = out.a.shape();
  if (cfg.crop > 0 && (cfg.crop < s.h || cfg.crop < s.w)) {
    if (cfg.crop > s.h || cfg.crop > s.w) {
      throw ConfigError("crop size exceeds the image");
    }
    const int top = rng.randint(0, s.h - cfg.crop);
    const int left = rng.randint(0, s.w - cfg.crop);
    out.a = crop_raster(out.a, top, left, cfg.crop);
    if (out.b.defined()) out.b = crop_raster(out.b, top, left, cfg.crop);
    out.label = crop_raster(out.label, top, left, cfg.crop);
  }
  if (cfg.flip_p > 0.0f && rng.bernoulli(cfg.flip_p)) {
    flip_h(out.a);
    if (out.b.defined()) flip_h(out.b);
    flip_h(out.label);
  }
  if (cfg.flip_p > 0.0f && rng.bernoulli(cfg.flip_p)) {
    flip_v(out.a);
    if (out.b.defined()) flip_v(out.b);
    flip_v(out.label);
  }
  if (cfg.geometric_p > 0.0f && rng.bernoulli(cfg.geometric_p)) {
    const Shape cur = out.a.shape();
    const double angle = rng.uniform(-15.0, 15.0);
    const double tx = rng.uniform(-0.1, 0.1) * cur.w;
    const double ty = rng.uniform(-0.1, 0.1) * cur.h;
    const double scale = rng.uniform(0.9, 1.1);
    out.a = affine_raster(out.a, angle, tx, ty, scale, false);
    if (out.b.defined()) {
      out.b = affine_raster(out.b, angle, tx, ty, scale, false);
    }
    out.label = affine_raster(out.label, angle, tx, ty, scale, true);
  }
  if (out.b.defined() && cfg.temporal_swap_p > 0.0f &&
      rng.bernoulli(cfg.temporal_swap_p)) {
    std::swap(out.a, out.b);
  }
  if (cfg.photometric_p > 0.0f) {
    if (rng.bernoulli(cfg.photometric_p)) photometric(out.a, rng);
    if (out.b.defined() && rng.bernoulli(cfg.photometric_p)) {
      photometric(out.b, rng);
    }
  }
  return out;
}

namespace {

Tensor stack_samples(const std::vector<Tensor>& rasters) {
  const Shape s0 = rasters.front().shape();
  Shape out{static_cast<int>(rasters.size()), s0.c, s0.h, s0.w};
  std::vector<float> buf;
  buf.reserve(out.numel());
  for (const auto& t : rasters) {
    if (!(t.shape() == s0)) {
      throw DataError("batch rasters have mismatched shapes: " +
                      t.shape().str() + " vs " + s0.str());
    }
    buf.insert(buf.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from_data(out, std::move(buf));
}

void zero_all_grads(ParamStore& store) {
  for (const auto& path : store.paths()) store.get(path).zero_grad();
}

}  // namespace

TrainResult train_model(BuiltModel& model, std::vector<TrainSample> samples,
                        const TrainConfig& cfg) {
  if (samples.empty()) throw DataError("training set is empty");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (cfg.warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  const bool siamese = model.graph.arch == "schanger";
  for (const auto& s : samples) {
    if (!s.a.defined() || !s.label.defined()) {
      throw DataError("sample is missing an image or label: " + s.id);
    }
    if (siamese && !s.b.defined()) {
      throw DataError("bitemporal training needs both images: " + s.id);
    }
  }

  Rng master(cfg.seed);
  Rng shuffle_rng(master.next_seed());
  Rng aug_rng(master.next_seed());
  Rng droppath_rng(master.next_seed());

  AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  TrainResult result;
  result.ema = ema_init(model.store, cfg.ema_momentum);

  const int64_t n = static_cast<int64_t>(samples.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.epochs;
  const int64_t warmup = std::min<int64_t>(
      static_cast<int64_t>(cfg.warmup_epochs) * steps_per_epoch, total_steps);

  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  int64_t gstep = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0.0;
    double last_lr = 0.0;
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
      const int64_t stop = std::min(n, start + cfg.batch_size);
      std::vector<Tensor> as, bs, ls;
      for (int64_t i = start; i < stop; ++i) {
        TrainSample s = augment(samples[order[i]], cfg.augment, aug_rng);
        as.push_back(s.a);
        if (siamese) bs.push_back(s.b);
        ls.push_back(s.label);
      }
      Tensor a = normalize_input(stack_samples(as));
      Tensor label = stack_samples(ls);
      std::vector<Tensor> outs;
      if (siamese) {
        Tensor b = normalize_input(stack_samples(bs));
        outs = schanger_forward(model.graph, model.store, a, b, true,
                                &droppath_rng);
      } else {
        outs = spnet_forward(model.graph, model.store, a, true, &droppath_rng);
      }
      Tensor loss = deep_supervision_loss(outs, label, {});
      const float lv = loss.scalar();
      if (!std::isfinite(lv)) {
        throw NumericError("loss became non-finite at step " +
                           std::to_string(gstep) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      zero_all_grads(model.store);
      loss.backward();
      const double lr = lr_schedule(gstep, warmup, total_steps, cfg.lr);
      opt.step(model.store, lr);
      ema_update(result.ema, model.store);
      loss_sum += lv;
      last_lr = lr;
      ++gstep;
    }
    EpochStat stat;
    stat.epoch = epoch;
    stat.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    stat.last_lr = last_lr;
    result.history.push_back(stat);
    if (cfg.on_epoch) cfg.on_epoch(stat);
  }
  return result;
}

}  // namespace schanger
