#include "schanger/evaluation.hpp"

#include <cmath>
#include <filesystem>

#include "schanger/errors.hpp"
#include "schanger/ops.hpp"

namespace schanger {

Confusion& Confusion::operator+=(const Confusion& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Metrics metrics_from(const Confusion& c) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) {
    throw ConfigError("confusion counts must be non-negative");
  }
  if (c.total() == 0) throw ConfigError("confusion is empty");
  Metrics m;
  const int64_t pos_union = c.tp + c.fp + c.fn;
  if (pos_union == 0) {
    m.precision = m.recall = m.f1 = m.iou = 1.0;
    m.degenerate = true;
  } else {
    m.precision =
        c.tp + c.fp > 0
            ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp)
            : 0.0;
    m.recall =
        c.tp + c.fn > 0
            ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn)
            : 0.0;
    m.f1 = 2.0 * static_cast<double>(c.tp) /
           static_cast<double>(2 * c.tp + c.fp + c.fn);
    m.iou = static_cast<double>(c.tp) / static_cast<double>(pos_union);
  }
  m.accuracy = static_cast<double>(c.tp + c.tn) /
               static_cast<double>(c.total());
  return m;
}

Tensor binarize_logits(const Tensor& logits, float threshold) {
  NoGradGuard ng;
  Tensor out = Tensor::zeros(logits.shape());
  const auto& src = logits.data();
  auto& dst = out.data();
  for (size_t i = 0; i < src.size(); ++i) {
    if (!std::isfinite(src[i])) {
      throw NumericError("non-finite logit during binarization");
    }
    dst[i] = src[i] >= threshold ? 1.0f : 0.0f;
  }
  return out;
}

Confusion confusion_from(const Tensor& pred_binary, const Tensor& target) {
  if (!(pred_binary.shape() == target.shape())) {
    throw ShapeError("confusion expects equal shapes, got " +
                     pred_binary.shape().str() + " vs " +
                     target.shape().str());
  }
  Confusion c;
  const auto& p = pred_binary.data();
  const auto& t = target.data();
  for (size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != 0.0f && p[i] != 1.0f) || (t[i] != 0.0f && t[i] != 1.0f)) {
      throw DataError("confusion inputs must be binary");
    }
    const bool pp = p[i] == 1.0f;
    const bool tt = t[i] == 1.0f;
    if (pp && tt) ++c.tp;
    else if (pp && !tt) ++c.fp;
    else if (!pp && tt) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

Tensor crop_region(const Tensor& t, int top, int left, int h, int w) {
  const Shape s = t.shape();
  Tensor out = Tensor::zeros({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          out.at(n, c, y, x) = t.at(n, c, top + y, left + x);
        }
      }
    }
  }
  return out;
}

std::vector<int> tile_positions(int length, int tile) {
  std::vector<int> ps;
  for (int p = 0; p + tile <= length; p += tile) ps.push_back(p);
  if (ps.empty() || ps.back() + tile < length) ps.push_back(length - tile);
  return ps;
}

}  // namespace

Tensor predict_logits(const BuiltModel& model, const TrainSample& sample,
                      int tile) {
  NoGradGuard ng;
  const bool siamese = model.graph.arch == "schanger";
  if (!sample.a.defined()) {
    throw DataError("prediction needs an input image: " + sample.id);
  }
  if (siamese && !sample.b.defined()) {
    throw DataError("bitemporal prediction needs both images: " + sample.id);
  }
  // Eval-mode forward passes read the store without touching it.
  ParamStore& store = const_cast<ParamStore&>(model.store);
  auto run = [&](const Tensor& a, const Tensor& b) {
    Tensor an = normalize_input(a);
    if (siamese) {
      return schanger_forward(model.graph, store, an, normalize_input(b),
                              false, nullptr)
          .front();
    }
    return spnet_forward(model.graph, store, an, false, nullptr).front();
  };

  const Shape s = sample.a.shape();
  if (tile < 0) throw ConfigError("tile size must be >= 0");
  if (tile == 0 || (tile >= s.h && tile >= s.w)) {
    return run(sample.a, sample.b);
  }
  if (tile < 16 || tile % 16 != 0) {
    throw ConfigError("tile size must be a positive multiple of 16");
  }
  if (tile > s.h || tile > s.w) {
    throw ConfigError("tile must fit both raster dimensions");
  }
  Tensor out = Tensor::zeros({s.n, 1, s.h, s.w});
  for (int top : tile_positions(s.h, tile)) {
    for (int left : tile_positions(s.w, tile)) {
      Tensor ta = crop_region(sample.a, top, left, tile, tile);
      Tensor tb = sample.b.defined()
                      ? crop_region(sample.b, top, left, tile, tile)
                      : Tensor();
      Tensor logits = run(ta, tb);
      for (int n = 0; n < s.n; ++n) {
        for (int y = 0; y < tile; ++y) {
          for (int x = 0; x < tile; ++x) {
            out.at(n, 0, top + y, left + x) = logits.at(n, 0, y, x);
          }
        }
      }
    }
  }
  return out;
}

EvalResult evaluate(const BuiltModel& model,
                    const std::vector<TrainSample>& samples,
                    const EvalConfig& cfg) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  if (!cfg.dump_dir.empty()) {
    std::filesystem::create_directories(cfg.dump_dir);
  }
  EvalResult result;
  for (const auto& sample : samples) {
    if (!sample.label.defined()) {
      throw DataError("evaluation sample has no label: " + sample.id);
    }
    Tensor logits = predict_logits(model, sample, cfg.tile);
    Tensor pred = binarize_logits(logits, 0.0f);
    Confusion c = confusion_from(pred, sample.label);
    result.confusion += c;
    result.per_sample.push_back(metrics_from(c));
    ++result.samples;
    if (!cfg.dump_dir.empty()) {
      const std::string stemname = cfg.dump_dir + "/" + sample.id;
      write_prediction_mask(stemname + "_pred.png", pred);
      if (cfg.composites) {
        write_composite(stemname + "_composite.png", pred, sample.label);
      }
    }
  }
  result.metrics = metrics_from(result.confusion);
  return result;
}

}  // namespace schanger
