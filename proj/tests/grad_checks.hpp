#pragma once

// Finite-difference suites shared by the unit tests and the acceptance
// runner. Every case rebuilds its inputs from a seed, wires one
// operation or block into a scalar closure, and reports the max
// relative gradient error from grad_check.
//
// Three measures keep the comparison meaningful in 32-bit arithmetic:
// the scalar subtracts the unperturbed output before projecting, so
// float rounding of the sum stays small next to the directional change;
// inputs are sampled where the local derivatives are bounded away from
// zero; and projection weights are redrawn until every analytic
// gradient element clears a per-case floor, since elements near zero
// cannot be resolved by finite differences at this precision. Exact
// zeros are exempt from the floor: a gradient the op genuinely does not
// have stays zero on both sides, while a dropped gradient shows up as a
// full-size mismatch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "schanger/blocks.hpp"
#include "schanger/ops.hpp"

namespace gradsuite {

using namespace schanger;

struct GradCase {
  std::string name;
  std::function<double(uint64_t seed)> run;
};

inline Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  FloatVec v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::from_data(s, std::move(v));
}

inline Tensor rand_normal(const Shape& s, Rng& rng, double stddev) {
  FloatVec v(static_cast<size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::from_data(s, std::move(v));
}

// Values bounded away from zero in magnitude, random sign.
inline Tensor rand_signed(const Shape& s, Rng& rng, double lo, double hi) {
  FloatVec v(static_cast<size_t>(s.numel()));
  for (auto& x : v) {
    double mag = rng.uniform(lo, hi);
    x = static_cast<float>(rng.bernoulli(0.5) ? mag : -mag);
  }
  return Tensor::from_data(s, std::move(v));
}

// A shuffled evenly spaced grid: all values distinct with a fixed
// minimum gap, so max pooling selections stay stable under the
// finite-difference probes.
inline Tensor rand_separated(const Shape& s, Rng& rng, double gap) {
  const size_t n = static_cast<size_t>(s.numel());
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  FloatVec v(n);
  const double mid = 0.5 * gap * static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    v[order[i]] = static_cast<float>(gap * static_cast<double>(i) - mid);
  }
  return Tensor::from_data(s, std::move(v));
}

inline Tensor constant_copy(const Tensor& t) {
  return Tensor::from_data(t.shape(), t.data());
}

// Projects the output against fixed weights after removing the
// unperturbed baseline.
inline Tensor centered(const Tensor& y, const Tensor& y0, const Tensor& p) {
  return sum_all(mul(sub(y, y0), p));
}

using Closure = std::function<Tensor(std::vector<Tensor>&)>;

struct ProbeCase {
  std::vector<Tensor> inputs;
  // Draws fresh projection weights and returns the loss closure.
  std::function<Closure(Rng&)> make;
  double eps = 0.02;
  double min_grad = 0.05;
  int tries = 500;
};

inline double run_probe(ProbeCase pc, Rng& prng) {
  for (int t = 0; t < pc.tries; ++t) {
    Closure fn = pc.make(prng);
    for (auto& in : pc.inputs) {
      in.set_requires_grad(true);
      in.zero_grad();
    }
    Tensor loss = fn(pc.inputs);
    loss.backward();
    double lo = std::numeric_limits<double>::infinity();
    for (auto& in : pc.inputs) {
      for (float g : in.grad()) {
        if (g != 0.0f) lo = std::min(lo, std::abs(static_cast<double>(g)));
      }
    }
    for (auto& in : pc.inputs) {
      in.zero_grad();
      in.set_requires_grad(false);
    }
    if (std::isfinite(lo) && lo >= pc.min_grad) {
      return grad_check(fn, pc.inputs, pc.eps);
    }
  }
  throw std::runtime_error("no well-conditioned projection found");
}

inline std::vector<GradCase> op_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](const std::string& name,
                      std::function<double(uint64_t)> run) {
    cases.push_back({name, std::move(run)});
  };

  // Convolutions use positive inputs, weights, and projections so every
  // gradient element is a sum of positive terms with a known floor.
  auto conv_case = [](uint64_t seed, const Shape& xs, const Shape& ws,
                      const ConvSpec& spec, bool bias) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform(xs, drng, 0.5, 1.2);
    Tensor w = rand_uniform(ws, drng, 0.5, 1.2);
    Tensor b = rand_uniform({1, ws.n, 1, 1}, drng, 0.5, 1.2);
    std::vector<Tensor> inputs{x, w};
    if (bias) inputs.push_back(b);
    Tensor y0 = constant_copy(conv2d(x, w, bias ? &b : nullptr, spec));
    ProbeCase pc;
    pc.inputs = inputs;
    pc.make = [y0, spec, bias](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p, spec, bias](std::vector<Tensor>& in) {
        return centered(conv2d(in[0], in[1], bias ? &in[2] : nullptr, spec),
                        y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.05;
    return run_probe(pc, prng);
  };

  add_case("conv2d_3x3_pad1", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 3, 6, 6}, {4, 3, 3, 3}, ConvSpec{1, 1, 1, 1},
                     false);
  });
  add_case("conv2d_stride2_bias", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 2, 8, 8}, {3, 2, 3, 3}, ConvSpec{2, 1, 1, 1},
                     true);
  });
  add_case("conv2d_dilated3", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 2, 8, 8}, {2, 2, 3, 3}, ConvSpec{1, 3, 3, 1},
                     false);
  });
  add_case("conv2d_depthwise5_bias", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 4, 7, 7}, {4, 1, 5, 5}, ConvSpec{1, 2, 1, 4},
                     true);
  });
  add_case("conv2d_grouped", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 4, 5, 5}, {6, 2, 3, 3}, ConvSpec{1, 1, 1, 2},
                     false);
  });
  add_case("conv2d_pointwise_bias", [conv_case](uint64_t seed) {
    return conv_case(seed, {1, 5, 4, 4}, {3, 5, 1, 1}, ConvSpec{1, 0, 1, 1},
                     true);
  });

  add_case("maxpool2", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_separated({1, 2, 6, 6}, drng, 0.3);
    Tensor y0 = constant_copy(maxpool2(x));
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(maxpool2(in[0]), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.3;
    return run_probe(pc, prng);
  });

  auto resize_case = [](uint64_t seed, const Shape& xs, int oh, int ow,
                        double floor) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_normal(xs, drng, 1.0);
    Tensor y0 = constant_copy(bilinear_resize(x, oh, ow));
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [y0, oh, ow](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p, oh, ow](std::vector<Tensor>& in) {
        return centered(bilinear_resize(in[0], oh, ow), y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = floor;
    return run_probe(pc, prng);
  };
  add_case("bilinear_upsample", [resize_case](uint64_t seed) {
    return resize_case(seed, {1, 2, 4, 4}, 7, 7, 0.02);
  });
  // Downsampling leaves each used source pixel with one interpolation
  // product as its gradient; the smallest such product sets the floor.
  add_case("bilinear_downsample", [resize_case](uint64_t seed) {
    return resize_case(seed, {1, 2, 8, 8}, 3, 3, 0.01);
  });

  add_case("batchnorm_train", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform({1, 2, 4, 4}, drng, -1.5, 1.5);
    Tensor gamma = rand_signed({1, 2, 1, 1}, drng, 0.6, 1.4);
    Tensor beta = rand_normal({1, 2, 1, 1}, drng, 0.5);
    Tensor y0;
    {
      Tensor rm = Tensor::zeros({1, 2, 1, 1});
      Tensor rv = Tensor::full({1, 2, 1, 1}, 1.0f);
      y0 = constant_copy(batchnorm(x, gamma, beta, rm, rv, 1e-5f, 0.1f, true));
    }
    ProbeCase pc;
    pc.inputs = {x, gamma, beta};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        Tensor rm = Tensor::zeros({1, 2, 1, 1});
        Tensor rv = Tensor::full({1, 2, 1, 1}, 1.0f);
        return centered(
            batchnorm(in[0], in[1], in[2], rm, rv, 1e-5f, 0.1f, true), y0, p);
      };
    };
    pc.eps = 0.01;
    pc.min_grad = 0.15;
    return run_probe(pc, prng);
  });

  add_case("batchnorm_eval", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform({1, 3, 4, 4}, drng, 0.5, 1.5);
    Tensor gamma = rand_signed({1, 3, 1, 1}, drng, 0.6, 1.4);
    Tensor beta = rand_normal({1, 3, 1, 1}, drng, 0.5);
    Tensor rm = Tensor::full({1, 3, 1, 1}, -2.0f);
    Tensor rv = rand_uniform({1, 3, 1, 1}, drng, 0.7, 1.3);
    Tensor y0;
    {
      Tensor m = constant_copy(rm);
      Tensor v = constant_copy(rv);
      y0 = constant_copy(batchnorm(x, gamma, beta, m, v, 1e-5f, 0.1f, false));
    }
    ProbeCase pc;
    pc.inputs = {x, gamma, beta};
    pc.make = [y0, rm, rv](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p, rm, rv](std::vector<Tensor>& in) {
        Tensor m = constant_copy(rm);
        Tensor v = constant_copy(rv);
        return centered(
            batchnorm(in[0], in[1], in[2], m, v, 1e-5f, 0.1f, false), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.05;
    return run_probe(pc, prng);
  });

  add_case("layernorm_channel", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform({1, 8, 2, 2}, drng, -1.5, 1.5);
    Tensor gamma = rand_signed({1, 8, 1, 1}, drng, 0.6, 1.4);
    Tensor beta = rand_normal({1, 8, 1, 1}, drng, 0.5);
    Tensor y0 = constant_copy(layernorm_channel(x, gamma, beta, 1e-5f));
    ProbeCase pc;
    pc.inputs = {x, gamma, beta};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(layernorm_channel(in[0], in[1], in[2], 1e-5f), y0, p);
      };
    };
    pc.eps = 0.01;
    pc.min_grad = 0.15;
    return run_probe(pc, prng);
  });

  // Activations are sampled where the derivative has a known lower
  // bound; the flat negative tails get their own cases.
  auto act_case = [](uint64_t seed, Act kind, double lo, double hi,
                     double floor, double eps) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform({1, 3, 3, 3}, drng, lo, hi);
    Tensor y0 = constant_copy(activation(x, kind));
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [y0, kind](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p, kind](std::vector<Tensor>& in) {
        return centered(activation(in[0], kind), y0, p);
      };
    };
    pc.eps = eps;
    pc.min_grad = floor;
    return run_probe(pc, prng);
  };
  add_case("gelu_positive", [act_case](uint64_t seed) {
    return act_case(seed, Act::Gelu, 0.2, 1.5, 0.2, 0.02);
  });
  add_case("gelu_negative", [act_case](uint64_t seed) {
    return act_case(seed, Act::Gelu, -2.1, -1.6, 0.03, 0.02);
  });
  add_case("silu_positive", [act_case](uint64_t seed) {
    return act_case(seed, Act::Silu, 0.2, 1.5, 0.25, 0.02);
  });
  add_case("silu_negative", [act_case](uint64_t seed) {
    return act_case(seed, Act::Silu, -2.2, -1.7, 0.03, 0.02);
  });
  add_case("sigmoid", [act_case](uint64_t seed) {
    return act_case(seed, Act::Sigmoid, -1.2, 1.2, 0.08, 0.03);
  });

  auto binary_case = [](uint64_t seed, int kind) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    const Shape s{1, 3, 4, 4};
    Tensor a = kind == 3 ? rand_uniform(s, drng, 0.5, 1.5)
                         : rand_signed(s, drng, 0.5, 1.5);
    Tensor b = kind == 3 ? rand_signed(s, drng, 0.8, 1.2)
                         : rand_signed(s, drng, 0.5, 1.5);
    auto apply = [kind](const Tensor& u, const Tensor& v) {
      switch (kind) {
        case 0: return add(u, v);
        case 1: return sub(u, v);
        case 2: return mul(u, v);
        default: return div_ew(u, v);
      }
    };
    Tensor y0 = constant_copy(apply(a, b));
    ProbeCase pc;
    pc.inputs = {a, b};
    pc.make = [y0, apply](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p, apply](std::vector<Tensor>& in) {
        return centered(apply(in[0], in[1]), y0, p);
      };
    };
    pc.eps = kind == 3 ? 0.01 : 0.1;
    pc.min_grad = 0.1;
    return run_probe(pc, prng);
  };
  add_case("add", [binary_case](uint64_t s) { return binary_case(s, 0); });
  add_case("sub", [binary_case](uint64_t s) { return binary_case(s, 1); });
  add_case("mul", [binary_case](uint64_t s) { return binary_case(s, 2); });
  add_case("div_ew", [binary_case](uint64_t s) { return binary_case(s, 3); });

  add_case("add_self", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 3, 4, 4}, drng, 1.0);
    Tensor y0 = constant_copy(add(a, a));
    ProbeCase pc;
    pc.inputs = {a};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(add(in[0], in[0]), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("mul_self", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_signed({1, 3, 4, 4}, drng, 0.5, 1.5);
    Tensor y0 = constant_copy(mul(a, a));
    ProbeCase pc;
    pc.inputs = {a};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(mul(in[0], in[0]), y0, p);
      };
    };
    pc.eps = 0.05;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  auto scalar_case = [](uint64_t seed, bool additive) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 2, 4, 4}, drng, 1.0);
    auto apply = [additive](const Tensor& u) {
      return additive ? add_scalar(u, 0.7f) : mul_scalar(u, -1.3f);
    };
    Tensor y0 = constant_copy(apply(a));
    ProbeCase pc;
    pc.inputs = {a};
    pc.make = [y0, apply](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p, apply](std::vector<Tensor>& in) {
        return centered(apply(in[0]), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  };
  add_case("add_scalar",
           [scalar_case](uint64_t s) { return scalar_case(s, true); });
  add_case("mul_scalar",
           [scalar_case](uint64_t s) { return scalar_case(s, false); });

  add_case("concat_slice_channels", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 2, 4, 4}, drng, 1.0);
    Tensor b = rand_normal({1, 3, 4, 4}, drng, 1.0);
    Tensor y0 = constant_copy(slice_channels(concat_channels(a, b), 1, 4));
    ProbeCase pc;
    pc.inputs = {a, b};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(slice_channels(concat_channels(in[0], in[1]), 1, 4),
                        y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("concat_slice_batch", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 2, 4, 4}, drng, 1.0);
    Tensor b = rand_normal({1, 2, 4, 4}, drng, 1.0);
    Tensor y0 = constant_copy(slice_batch(concat_batch(a, b), 1, 2));
    ProbeCase pc;
    pc.inputs = {a, b};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(slice_batch(concat_batch(in[0], in[1]), 1, 2), y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("scale_channels", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_uniform({1, 3, 4, 4}, drng, 0.5, 1.5);
    Tensor g = rand_signed({1, 3, 1, 1}, drng, 0.5, 1.5);
    Tensor y0 = constant_copy(scale_channels(x, g));
    ProbeCase pc;
    pc.inputs = {x, g};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(scale_channels(in[0], in[1]), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("scale_samples", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_uniform({1, 2, 4, 4}, drng, 0.5, 1.5);
    Tensor b = rand_uniform({1, 2, 4, 4}, drng, 0.5, 1.5);
    Tensor m = rand_signed({2, 1, 1, 1}, drng, 0.5, 1.5);
    Tensor y0 = constant_copy(scale_samples(concat_batch(a, b), m));
    ProbeCase pc;
    pc.inputs = {a, b, m};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(scale_samples(concat_batch(in[0], in[1]), in[2]), y0,
                        p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("global_avg_pool", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_normal({1, 4, 4, 4}, drng, 1.0);
    Tensor y0 = constant_copy(global_avg_pool(x));
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(global_avg_pool(in[0]), y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.02;
    return run_probe(pc, prng);
  });

  add_case("sum_all", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_normal({1, 2, 4, 4}, drng, 1.0);
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [](Rng&) -> Closure {
      return [](std::vector<Tensor>& in) { return sum_all(in[0]); };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.5;
    return run_probe(pc, prng);
  });

  add_case("mean_all", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_normal({1, 2, 4, 4}, drng, 1.0);
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [](Rng&) -> Closure {
      return [](std::vector<Tensor>& in) { return mean_all(in[0]); };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.01;
    return run_probe(pc, prng);
  });

  add_case("sum_per_sample", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 2, 4, 4}, drng, 1.0);
    Tensor b = rand_normal({1, 2, 4, 4}, drng, 1.0);
    Tensor y0 = constant_copy(sum_per_sample(concat_batch(a, b)));
    ProbeCase pc;
    pc.inputs = {a, b};
    pc.make = [y0](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p](std::vector<Tensor>& in) {
        return centered(sum_per_sample(concat_batch(in[0], in[1])), y0, p);
      };
    };
    pc.eps = 0.1;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("droppath_train", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor a = rand_normal({1, 2, 3, 3}, drng, 1.0);
    Tensor b = rand_normal({1, 2, 3, 3}, drng, 1.0);
    // Scan for a mask seed that keeps at least one sample, otherwise
    // the whole output is zero and there is nothing to differentiate.
    uint64_t mask_seed = seed + 17;
    Tensor y0;
    for (int off = 0; off < 64; ++off) {
      Rng probe(mask_seed);
      y0 = constant_copy(
          droppath(concat_batch(a, b), 0.35f, true, probe, 2));
      bool live = false;
      for (float v : y0.data()) live = live || v != 0.0f;
      if (live) break;
      ++mask_seed;
    }
    auto pass = [mask_seed](const Tensor& u, const Tensor& v) {
      Rng local(mask_seed);
      return droppath(concat_batch(u, v), 0.35f, true, local, 2);
    };
    ProbeCase pc;
    pc.inputs = {a, b};
    pc.make = [y0, pass](Rng& r) -> Closure {
      Tensor p = rand_uniform(y0.shape(), r, 0.5, 1.2);
      return [y0, p, pass](std::vector<Tensor>& in) {
        return centered(pass(in[0], in[1]), y0, p);
      };
    };
    pc.eps = 0.15;
    pc.min_grad = 0.2;
    return run_probe(pc, prng);
  });

  add_case("bce_with_logits_mean", [](uint64_t seed) {
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x = rand_signed({1, 1, 3, 3}, drng, 0.2, 1.8);
    FloatVec t(9);
    for (auto& v : t) v = drng.bernoulli(0.5) ? 1.0f : 0.0f;
    Tensor target = Tensor::from_data({1, 1, 3, 3}, std::move(t));
    ProbeCase pc;
    pc.inputs = {x};
    pc.make = [target](Rng&) -> Closure {
      return [target](std::vector<Tensor>& in) {
        return bce_with_logits_mean(in[0], target);
      };
    };
    pc.eps = 0.05;
    pc.min_grad = 0.01;
    return run_probe(pc, prng);
  });

  return cases;
}

// Registers one standalone block and exposes its store to the case.
struct BlockHarness {
  ParamStore store;
  ModelGraph graph;
  Rng build_rng;
  BlockBuilder builder;

  explicit BlockHarness(uint64_t seed)
      : build_rng(seed), builder{store, graph, build_rng} {}

  BlockRuntime runtime(bool training) {
    return BlockRuntime{store, training, nullptr, 1};
  }
};

inline std::vector<GradCase> block_grad_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](const std::string& name,
                      std::function<double(uint64_t)> run) {
    cases.push_back({name, std::move(run)});
  };

  // Shared scaffolding: a single-input block forward with recentered
  // projection and conditioning redraws.
  auto single = [](uint64_t seed, std::shared_ptr<BlockHarness> h,
                   std::function<Tensor(BlockRuntime&, const Tensor&)> fwd,
                   Tensor x, std::vector<Tensor> extra_params, bool training,
                   double floor) {
    Rng prng(seed * 2 + 2);
    Tensor y0;
    {
      BlockRuntime rt = h->runtime(training);
      y0 = constant_copy(fwd(rt, x));
    }
    ProbeCase pc;
    pc.inputs = {x};
    for (auto& t : extra_params) pc.inputs.push_back(t);
    pc.make = [h, y0, fwd, training](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [h, y0, p, fwd, training](std::vector<Tensor>& in) {
        BlockRuntime rt = h->runtime(training);
        return centered(fwd(rt, in[0]), y0, p);
      };
    };
    pc.eps = 0.02;
    pc.min_grad = floor;
    return run_probe(pc, prng);
  };

  add_case("se_block", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    build_se(h->builder, "se", 6, 2);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_uniform({1, 6, 5, 5}, drng, 0.5, 1.5);
    Tensor fc1b = h->store.get("se.fc1.bias");
    return single(
        seed, h,
        [](BlockRuntime& rt, const Tensor& x) {
          return se_forward(rt, "se", x);
        },
        x, {fc1b}, false, 0.01);
  });

  add_case("lfem_residual", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    LfemSpec spec;
    spec.in_ch = 6;
    spec.out_ch = 6;
    build_lfem(h->builder, "blk", spec);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_normal({1, 6, 5, 5}, drng, 1.0);
    return single(
        seed, h,
        [spec](BlockRuntime& rt, const Tensor& x) {
          return lfem_forward(rt, "blk", spec, x);
        },
        x, {}, true, 0.02);
  });

  add_case("lfem_projecting", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    LfemSpec spec;
    spec.in_ch = 4;
    spec.out_ch = 8;
    build_lfem(h->builder, "blk", spec);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_normal({1, 4, 5, 5}, drng, 1.0);
    return single(
        seed, h,
        [spec](BlockRuntime& rt, const Tensor& x) {
          return lfem_forward(rt, "blk", spec, x);
        },
        x, {}, true, 0.02);
  });

  add_case("tfm_block", [](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    build_tfm(h->builder, "tfm", 5);
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x1 = rand_normal({1, 5, 5, 5}, drng, 1.0);
    Tensor x2 = rand_normal({1, 5, 5, 5}, drng, 1.0);
    Tensor cb = h->store.get("tfm.conv.bias");
    Tensor y0;
    {
      BlockRuntime rt = h->runtime(false);
      y0 = constant_copy(tfm_forward(rt, "tfm", x1, x2));
    }
    ProbeCase pc;
    pc.inputs = {x1, x2, cb};
    pc.make = [h, y0](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [h, y0, p](std::vector<Tensor>& in) {
        BlockRuntime rt = h->runtime(false);
        return centered(tfm_forward(rt, "tfm", in[0], in[1]), y0, p);
      };
    };
    pc.eps = 0.02;
    pc.min_grad = 0.02;
    return run_probe(pc, prng);
  });

  add_case("lka_chain", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    LkaSpec spec{4, 5, 7, 3};
    build_lka(h->builder, "lka", spec);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_normal({1, 4, 8, 8}, drng, 1.0);
    Tensor bias = h->store.get("lka.pw.bias");
    return single(
        seed, h,
        [spec](BlockRuntime& rt, const Tensor& x) {
          return lka_forward(rt, "lka", spec, x);
        },
        x, {bias}, false, 0.02);
  });

  add_case("sclka_pair", [](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    LkaSpec spec{4, 5, 7, 3};
    build_sclka(h->builder, "sc", spec);
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x1 = rand_normal({1, 4, 6, 6}, drng, 1.0);
    Tensor x2 = rand_normal({1, 4, 6, 6}, drng, 1.0);
    Tensor y01, y02;
    {
      BlockRuntime rt = h->runtime(false);
      auto [a, b] = sclka_forward(rt, "sc", spec, x1, x2);
      y01 = constant_copy(a);
      y02 = constant_copy(b);
    }
    ProbeCase pc;
    pc.inputs = {x1, x2};
    pc.make = [h, spec, y01, y02](Rng& r) -> Closure {
      Tensor p1 = rand_signed(y01.shape(), r, 0.5, 1.5);
      Tensor p2 = rand_signed(y02.shape(), r, 0.5, 1.5);
      return [h, spec, y01, y02, p1, p2](std::vector<Tensor>& in) {
        BlockRuntime rt = h->runtime(false);
        auto [a, b] = sclka_forward(rt, "sc", spec, in[0], in[1]);
        return add(centered(a, y01, p1), centered(b, y02, p2));
      };
    };
    pc.eps = 0.02;
    pc.min_grad = 0.02;
    return run_probe(pc, prng);
  });

  add_case("vanm_block", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    AttnSpec spec;
    spec.channels = 4;
    spec.lka = LkaSpec{4, 5, 7, 3};
    build_attn_block(h->builder, "at", spec);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_normal({1, 4, 6, 6}, drng, 1.0);
    return single(
        seed, h,
        [spec](BlockRuntime& rt, const Tensor& x) {
          return attn_block_forward(rt, "at", spec, x);
        },
        x, {}, true, 0.02);
  });

  add_case("scam_block", [](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    AttnSpec spec;
    spec.channels = 4;
    spec.shared_attn = true;
    spec.lka = LkaSpec{4, 5, 7, 3};
    build_attn_block(h->builder, "at", spec);
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor x1 = rand_normal({1, 4, 8, 8}, drng, 1.0);
    Tensor x2 = rand_normal({1, 4, 8, 8}, drng, 1.0);
    auto pass = [h, spec](BlockRuntime& rt, const Tensor& a, const Tensor& b) {
      rt.tie_groups = 2;
      return attn_block_forward(rt, "at", spec, concat_batch(a, b));
    };
    Tensor y0;
    {
      BlockRuntime rt = h->runtime(true);
      y0 = constant_copy(pass(rt, x1, x2));
    }
    ProbeCase pc;
    pc.inputs = {x1, x2};
    pc.make = [h, y0, pass](Rng& r) -> Closure {
      Tensor p = rand_signed(y0.shape(), r, 0.5, 1.5);
      return [h, y0, p, pass](std::vector<Tensor>& in) {
        BlockRuntime rt = h->runtime(true);
        return centered(pass(rt, in[0], in[1]), y0, p);
      };
    };
    pc.eps = 0.02;
    pc.min_grad = 0.02;
    return run_probe(pc, prng);
  });

  add_case("stem_block", [single](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    build_stem(h->builder, "stem", 5);
    Rng drng(seed * 2 + 1);
    Tensor x = rand_normal({1, 3, 6, 6}, drng, 1.0);
    return single(
        seed, h,
        [](BlockRuntime& rt, const Tensor& x) {
          return stem_forward(rt, "stem", x);
        },
        x, {}, true, 0.02);
  });

  add_case("msfsh_head", [](uint64_t seed) {
    auto h = std::make_shared<BlockHarness>(seed);
    std::array<int, 5> chans{3, 4, 4, 5, 5};
    build_msfsh(h->builder, "head", chans);
    Rng drng(seed * 2 + 1);
    Rng prng(seed * 2 + 2);
    Tensor f1 = rand_normal({1, 3, 8, 8}, drng, 1.0);
    Tensor f2 = rand_normal({1, 4, 4, 4}, drng, 1.0);
    Tensor f3 = rand_normal({1, 4, 2, 2}, drng, 1.0);
    Tensor f4 = rand_normal({1, 5, 2, 2}, drng, 1.0);
    Tensor f5 = rand_normal({1, 5, 1, 1}, drng, 1.0);
    std::vector<Tensor> y0s;
    {
      BlockRuntime rt = h->runtime(false);
      std::array<Tensor, 5> feats{f1, f2, f3, f4, f5};
      for (const Tensor& o : msfsh_forward(rt, "head", feats, 8, 8)) {
        y0s.push_back(constant_copy(o));
      }
    }
    ProbeCase pc;
    pc.inputs = {f1, f2, f3, f4, f5};
    pc.make = [h, y0s](Rng& r) -> Closure {
      std::vector<Tensor> ps;
      for (const Tensor& y0 : y0s) {
        ps.push_back(rand_signed(y0.shape(), r, 0.5, 1.5));
      }
      return [h, y0s, ps](std::vector<Tensor>& in) {
        BlockRuntime rt = h->runtime(false);
        std::array<Tensor, 5> feats{in[0], in[1], in[2], in[3], in[4]};
        std::vector<Tensor> outs = msfsh_forward(rt, "head", feats, 8, 8);
        Tensor total = centered(outs[0], y0s[0], ps[0]);
        for (size_t i = 1; i < outs.size(); ++i) {
          total = add(total, centered(outs[i], y0s[i], ps[i]));
        }
        return total;
      };
    };
    pc.eps = 0.02;
    pc.min_grad = 0.01;
    return run_probe(pc, prng);
  });

  return cases;
}

// Runs every case over the seed range and returns the worst error seen
// together with the case that produced it.
struct SuiteResult {
  double max_err = 0.0;
  std::string worst_case;
  int cases = 0;
  int evaluations = 0;
};

inline SuiteResult run_grad_suite(const std::vector<GradCase>& cases,
                                  int seeds) {
  SuiteResult r;
  r.cases = static_cast<int>(cases.size());
  for (const auto& c : cases) {
    for (int s = 0; s < seeds; ++s) {
      double err = c.run(1000 + static_cast<uint64_t>(s));
      ++r.evaluations;
      if (err > r.max_err) {
        r.max_err = err;
        r.worst_case = c.name + " seed " + std::to_string(1000 + s);
      }
    }
  }
  return r;
}

}  // namespace gradsuite
