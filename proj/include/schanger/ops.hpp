#pragma once

#include <functional>
#include <vector>

#include "schanger/rng.hpp"
#include "schanger/tensor.hpp"

namespace schanger {

struct ConvSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

// Weight layout (out_ch, in_ch/groups, kh, kw); bias (1, out_ch, 1, 1).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias,
              const ConvSpec& spec);

// 2x2 max pooling, stride 2. Odd spatial dims are rejected.
Tensor maxpool2(const Tensor& x);

// Bilinear interpolation with half-pixel centers (align_corners=false).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// Batch normalization over (N, H, W) per channel. In training mode the
// running buffers are updated in place (outside the autograd graph).
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, float eps,
                 float momentum, bool training);

// Layer normalization over the channel axis at each spatial position.
Tensor layernorm_channel(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, float eps);

enum class Act { Gelu, Silu, Sigmoid };

Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor activation(const Tensor& x, Act kind);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_ew(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, float v);
Tensor mul_scalar(const Tensor& x, float v);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int c_begin, int c_end);
Tensor concat_batch(const Tensor& a, const Tensor& b);
Tensor slice_batch(const Tensor& x, int n_begin, int n_end);

// Broadcast multiplies: gate is (N, C, 1, 1); mask is (N, 1, 1, 1).
Tensor scale_channels(const Tensor& x, const Tensor& gate);
Tensor scale_samples(const Tensor& x, const Tensor& mask);

Tensor global_avg_pool(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_per_sample(const Tensor& x);  // (N, 1, 1, 1)

// Stochastic depth on the residual branch. Keep decisions are drawn per
// sample; with tie_groups=g the batch is treated as g stacked copies of
// n/g samples sharing one decision. rate may be 1.0 (drop everything).
Tensor droppath(const Tensor& x, float rate, bool training, Rng& rng,
                int tie_groups = 1);

// Mean binary cross-entropy directly on logits (log-sum-exp stable form);
// target carries no gradient.
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& target);

// Central-difference check of reverse-mode gradients for a scalar-valued
// closure. Returns the max relative error over every element of every
// input, with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, double eps);

}  // namespace schanger
