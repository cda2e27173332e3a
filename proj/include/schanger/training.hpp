#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "schanger/data_io.hpp"
#include "schanger/networks.hpp"

namespace schanger {

// Mean binary cross-entropy plus mean soft Dice (smoothing 1.0, per
// sample then batch-averaged), both on logits.
Tensor bce_dice_loss(const Tensor& logits, const Tensor& target);

// Sum of per-head bce_dice losses, one weight per head (all 1 by
// default in training).
Tensor deep_supervision_loss(const std::vector<Tensor>& logits,
                             const Tensor& target,
                             const std::vector<float>& weights);

// 0-based step index; the first warmup_steps steps ramp linearly to
// base_lr, then cosine decay towards zero over the remaining steps.
double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps,
                   double base_lr);

// Exponential moving average over every stored tensor (parameters and
// running statistics alike), updated in one synchronized call.
struct EmaState {
  float momentum = 0.9998f;
  std::map<std::string, std::vector<float>> shadow;
};
EmaState ema_init(const ParamStore& store, float momentum);
void ema_update(EmaState& ema, const ParamStore& store);
void ema_write_to(const EmaState& ema, ParamStore& store);

// Decoupled weight decay; biases and norm affine parameters are never
// decayed. Frozen parameters and buffers are skipped entirely.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-4;
  int64_t step_count = 0;
  std::map<std::string, std::vector<float>> m, v;

  void step(ParamStore& store, double lr);
};

struct AugmentConfig {
  int crop = 0;  // 0 disables cropping
  float flip_p = 0.5f;
  float geometric_p = 0.3f;
  float photometric_p = 0.5f;
  float temporal_swap_p = 0.5f;
};

// Applies the same geometry to every raster of the sample; photometric
// jitter is drawn per temporal image. All-zero probabilities (and crop
// 0) return the sample unchanged.
TrainSample augment(const TrainSample& sample, const AugmentConfig& cfg,
                    Rng& rng);

struct EpochStat {
  int epoch = 0;
  double mean_loss = 0.0;
  double last_lr = 0.0;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 5e-4;
  double weight_decay = 2e-4;
  int warmup_epochs = 1;
  float ema_momentum = 0.9998f;
  AugmentConfig augment;
  uint64_t seed = 0;
  std::function<void(const EpochStat&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochStat> history;
  EmaState ema;
};

// Single-worker deterministic loop; works for both architectures (the
// single-temporal model trains on samples whose b tensor is undefined).
// Aborts with a numeric error naming the step if the loss goes
// non-finite.
TrainResult train_model(BuiltModel& model, std::vector<TrainSample> samples,
                        const TrainConfig& cfg);

}  // namespace schanger
