#include "schanger/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "schanger/errors.hpp"

extern "C" void openblas_set_num_threads(int);

namespace schanger {

namespace {

const bool g_blas_init = [] {
  // Single-core sandbox; a thread pool only adds latency.
  openblas_set_num_threads(1);
  return true;
}();

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Serial floating-point reductions cannot pipeline or vectorize because
// each add depends on the previous one. Four explicit partial sums break
// the dependence chain; the final combine order is fixed, so results stay
// deterministic run to run.
double sum_lanes(const float* p, int64_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += p[i];
    s1 += p[i + 1];
    s2 += p[i + 2];
    s3 += p[i + 3];
  }
  double acc = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) acc += p[i];
  return acc;
}

double dot_lanes(const float* a, const float* b, int64_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * static_cast<double>(b[i]);
    s1 += a[i + 1] * static_cast<double>(b[i + 1]);
    s2 += a[i + 2] * static_cast<double>(b[i + 2]);
    s3 += a[i + 3] * static_cast<double>(b[i + 3]);
  }
  double acc = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) acc += a[i] * static_cast<double>(b[i]);
  return acc;
}

float dot_lanes_f32(const float* a, const float* b, int n) {
  float s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  float acc = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

struct SumDot {
  double sum;
  double dot;
};

// One pass producing sum(a) and sum(a*b), for normalization statistics.
SumDot sum_dot_lanes(const float* a, const float* b, int64_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  double d0 = 0, d1 = 0, d2 = 0, d3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    s1 += a[i + 1];
    s2 += a[i + 2];
    s3 += a[i + 3];
    d0 += a[i] * static_cast<double>(b[i]);
    d1 += a[i + 1] * static_cast<double>(b[i + 1]);
    d2 += a[i + 2] * static_cast<double>(b[i + 2]);
    d3 += a[i + 3] * static_cast<double>(b[i + 3]);
  }
  SumDot out{(s0 + s1) + (s2 + s3), (d0 + d1) + (d2 + d3)};
  for (; i < n; ++i) {
    out.sum += a[i];
    out.dot += a[i] * static_cast<double>(b[i]);
  }
  return out;
}

// Branch-free sigmoid built from arithmetic, casts, and integer selects
// only, so loops over it vectorize. The compiler refuses to if-convert
// float-valued ternaries and fmin/fmax under strict FP rules, so the
// argument is saturated through its integer bit pattern instead; past
// |v| = 30 the result is 0 or 1 to float precision anyway, and non-finite
// arguments land on the saturated branch. exp(-v) then uses a degree-5
// minimax polynomial on [-ln2/2, ln2/2] after range reduction with
// round-to-nearest done by the 1.5 * 2^23 shift trick; relative error
// stays near 1e-7.
inline float fast_sigmoid(float v) {
  const int32_t sat = 0x41f00000;
  int32_t vb = std::bit_cast<int32_t>(v);
  int32_t mag = vb & 0x7fffffff;
  mag = mag > sat ? sat : mag;
  float u = -std::bit_cast<float>((vb & ~0x7fffffff) | mag);
  const float log2e = 1.44269504089f;
  const float ln2_hi = 0.693359375f;
  const float ln2_lo = -2.12194440e-4f;
  const float round_magic = 12582912.0f;
  float t = u * log2e;
  float shifted = t + round_magic;
  float kfl = shifted - round_magic;
  int32_t k = std::bit_cast<int32_t>(shifted) - std::bit_cast<int32_t>(round_magic);
  float r = u - kfl * ln2_hi;
  r -= kfl * ln2_lo;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  float y = (p * r) * r + r + 1.0f;
  float e = y * std::bit_cast<float>((k + 127) << 23);
  return 1.0f / (1.0f + e);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Builds the result node. parents/backward are attached only when the
// autograd tape is live and some input needs gradients.
Tensor make_result(const Shape& shape, FloatVec data,
                   std::vector<NodePtr> parents,
                   std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->data = std::move(data);
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    for (auto& p : parents) {
      if (p && p->requires_grad) node->parents.push_back(p);
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(node);
}

bool wants_grad(const NodePtr& p) { return p && p->requires_grad; }

void accumulate(const NodePtr& p, std::span<const float> contribution) {
  if (contribution.size() == p->data.size() && p->grad_begin_dense()) {
    std::copy(contribution.begin(), contribution.end(), p->grad.begin());
    return;
  }
  p->ensure_grad();
  float* g = p->grad.data();
  const float* c = contribution.data();
  for (size_t i = 0; i < contribution.size(); ++i) g[i] += c[i];
}

struct ConvPlan {
  int n, ci, h, w;
  int co, cig, kh, kw;
  int stride, pad, dil, groups;
  int oh, ow;
  int cog;        // out channels per group
  int k;          // rows of the col matrix: cig * kh * kw
  int s;          // columns: oh * ow
};

ConvPlan plan_conv(const Shape& xs, const Shape& ws, const ConvSpec& sp) {
  ConvPlan p;
  p.n = xs.n;
  p.ci = xs.c;
  p.h = xs.h;
  p.w = xs.w;
  p.co = ws.n;
  p.cig = ws.c;
  p.kh = ws.h;
  p.kw = ws.w;
  p.stride = sp.stride;
  p.pad = sp.pad;
  p.dil = sp.dilation;
  p.groups = sp.groups;
  if (sp.stride < 1 || sp.dilation < 1 || sp.pad < 0 || sp.groups < 1) {
    throw ConfigError("conv2d: invalid stride/pad/dilation/groups");
  }
  require(p.ci % p.groups == 0 && p.co % p.groups == 0,
          "conv2d: channels not divisible by groups");
  require(p.cig == p.ci / p.groups,
          "conv2d: weight in-channels mismatch, weight " + ws.str() +
              " input " + xs.str());
  p.oh = (p.h + 2 * p.pad - p.dil * (p.kh - 1) - 1) / p.stride + 1;
  p.ow = (p.w + 2 * p.pad - p.dil * (p.kw - 1) - 1) / p.stride + 1;
  require(p.h + 2 * p.pad >= p.dil * (p.kh - 1) + 1 &&
              p.w + 2 * p.pad >= p.dil * (p.kw - 1) + 1,
          "conv2d: kernel does not fit input " + xs.str());
  p.cog = p.co / p.groups;
  p.k = p.cig * p.kh * p.kw;
  p.s = p.oh * p.ow;
  return p;
}

// Gathers one sample's group-g patch matrix (k x s).
void im2col(const float* xn, const ConvPlan& p, int g, float* col) {
  for (int ci = 0; ci < p.cig; ++ci) {
    const float* plane = xn + static_cast<int64_t>(g * p.cig + ci) * p.h * p.w;
    for (int kh = 0; kh < p.kh; ++kh) {
      for (int kw = 0; kw < p.kw; ++kw) {
        float* row = col + (static_cast<int64_t>(ci) * p.kh * p.kw +
                            kh * p.kw + kw) *
                               p.s;
        for (int oh = 0; oh < p.oh; ++oh) {
          int ih = oh * p.stride - p.pad + kh * p.dil;
          float* dst = row + static_cast<int64_t>(oh) * p.ow;
          if (ih < 0 || ih >= p.h) {
            std::memset(dst, 0, sizeof(float) * p.ow);
            continue;
          }
          const float* src = plane + static_cast<int64_t>(ih) * p.w;
          for (int ow = 0; ow < p.ow; ++ow) {
            int iw = ow * p.stride - p.pad + kw * p.dil;
            dst[ow] = (iw >= 0 && iw < p.w) ? src[iw] : 0.0f;
          }
        }
      }
    }
  }
}

// Scatter-adds a col matrix back into one sample's group-g input grad.
void col2im_add(const float* col, const ConvPlan& p, int g, float* dxn) {
  for (int ci = 0; ci < p.cig; ++ci) {
    float* plane = dxn + static_cast<int64_t>(g * p.cig + ci) * p.h * p.w;
    for (int kh = 0; kh < p.kh; ++kh) {
      for (int kw = 0; kw < p.kw; ++kw) {
        const float* row = col + (static_cast<int64_t>(ci) * p.kh * p.kw +
                                  kh * p.kw + kw) *
                                     p.s;
        for (int oh = 0; oh < p.oh; ++oh) {
          int ih = oh * p.stride - p.pad + kh * p.dil;
          if (ih < 0 || ih >= p.h) continue;
          float* dst = plane + static_cast<int64_t>(ih) * p.w;
          const float* src = row + static_cast<int64_t>(oh) * p.ow;
          for (int ow = 0; ow < p.ow; ++ow) {
            int iw = ow * p.stride - p.pad + kw * p.dil;
            if (iw >= 0 && iw < p.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvPlan& p) {
  return p.kh == 1 && p.kw == 1 && p.stride == 1 && p.pad == 0 &&
         p.groups == 1;
}

bool is_depthwise(const ConvPlan& p) {
  return p.groups == p.ci && p.co == p.ci && p.cig == 1;
}

void conv_forward(const float* x, const float* w, const float* b,
                  const ConvPlan& p, float* y) {
  const int64_t x_sample = static_cast<int64_t>(p.ci) * p.h * p.w;
  const int64_t y_sample = static_cast<int64_t>(p.co) * p.s;
  if (is_depthwise(p) && p.stride == 1) {
    // Tap-major accumulation over contiguous row slices; the valid
    // output range per tap is hoisted out of the inner loop.
    const int64_t plane_elems = static_cast<int64_t>(p.h) * p.w;
    for (int n = 0; n < p.n; ++n) {
      for (int c = 0; c < p.ci; ++c) {
        const float* plane = x + n * x_sample + c * plane_elems;
        const float* ker = w + static_cast<int64_t>(c) * p.kh * p.kw;
        float* out = y + n * y_sample + static_cast<int64_t>(c) * p.s;
        const float bias_v = b ? b[c] : 0.0f;
        for (int i = 0; i < p.s; ++i) out[i] = bias_v;
        for (int kh = 0; kh < p.kh; ++kh) {
          const int off_h = kh * p.dil - p.pad;
          const int oh_lo = std::max(0, -off_h);
          const int oh_hi = std::min(p.oh, p.h - off_h);
          for (int kw = 0; kw < p.kw; ++kw) {
            const float kv = ker[kh * p.kw + kw];
            const int off_w = kw * p.dil - p.pad;
            const int ow_lo = std::max(0, -off_w);
            const int ow_hi = std::min(p.ow, p.w - off_w);
            const int len = ow_hi - ow_lo;
            if (len <= 0) continue;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              float* dst = out + static_cast<int64_t>(oh) * p.ow + ow_lo;
              const float* src =
                  plane + static_cast<int64_t>(oh + off_h) * p.w + ow_lo +
                  off_w;
              for (int i = 0; i < len; ++i) dst[i] += kv * src[i];
            }
          }
        }
      }
    }
    return;
  }
  if (is_depthwise(p)) {
    for (int n = 0; n < p.n; ++n) {
      for (int c = 0; c < p.ci; ++c) {
        const float* plane = x + n * x_sample + static_cast<int64_t>(c) * p.h * p.w;
        const float* ker = w + static_cast<int64_t>(c) * p.kh * p.kw;
        float* out = y + n * y_sample + static_cast<int64_t>(c) * p.s;
        float bias_v = b ? b[c] : 0.0f;
        for (int oh = 0; oh < p.oh; ++oh) {
          for (int ow = 0; ow < p.ow; ++ow) {
            float acc = bias_v;
            for (int kh = 0; kh < p.kh; ++kh) {
              int ih = oh * p.stride - p.pad + kh * p.dil;
              if (ih < 0 || ih >= p.h) continue;
              for (int kw = 0; kw < p.kw; ++kw) {
                int iw = ow * p.stride - p.pad + kw * p.dil;
                if (iw < 0 || iw >= p.w) continue;
                acc += ker[kh * p.kw + kw] * plane[ih * p.w + iw];
              }
            }
            out[oh * p.ow + ow] = acc;
          }
        }
      }
    }
    return;
  }

  FloatVec col;
  if (!is_pointwise(p)) col.resize(static_cast<size_t>(p.k) * p.s);
  for (int n = 0; n < p.n; ++n) {
    for (int g = 0; g < p.groups; ++g) {
      const float* mat;
      if (is_pointwise(p)) {
        mat = x + n * x_sample;
      } else {
        im2col(x + n * x_sample, p, g, col.data());
        mat = col.data();
      }
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, p.cog, p.s, p.k,
                  1.0f, w + static_cast<int64_t>(g) * p.cog * p.k, p.k, mat,
                  p.s, 0.0f, y + n * y_sample + static_cast<int64_t>(g) * p.cog * p.s,
                  p.s);
    }
    if (b) {
      float* out = y + n * y_sample;
      for (int c = 0; c < p.co; ++c) {
        float bias_v = b[c];
        float* row = out + static_cast<int64_t>(c) * p.s;
        for (int i = 0; i < p.s; ++i) row[i] += bias_v;
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias,
              const ConvSpec& spec) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  ConvPlan p = plan_conv(xs, ws, spec);
  if (bias) {
    require(bias->shape() == Shape{1, p.co, 1, 1},
            "conv2d: bias shape " + bias->shape().str() + " for " +
                std::to_string(p.co) + " out channels");
  }
  // Scanning only the kernel keeps the guard cheap; a poisoned activation
  // still surfaces at the loss and logit finiteness checks downstream.
  if (!all_finite(weight.data()) || (bias && !all_finite(bias->data()))) {
    throw NumericError("conv2d: non-finite weight");
  }

  Shape ys{p.n, p.co, p.oh, p.ow};
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  conv_forward(x.data().data(), weight.data().data(),
               bias ? bias->data().data() : nullptr, p, ydata.data());

  NodePtr xn = x.node();
  NodePtr wn = weight.node();
  NodePtr bn = bias ? bias->node() : nullptr;
  auto backward = [xn, wn, bn, p](TensorNode& self) {
    const float* dy = self.grad.data();
    const int64_t x_sample = static_cast<int64_t>(p.ci) * p.h * p.w;
    const int64_t y_sample = static_cast<int64_t>(p.co) * p.s;

    if (wants_grad(bn)) {
      bn->ensure_grad();
      for (int n = 0; n < p.n; ++n) {
        for (int c = 0; c < p.co; ++c) {
          const float* row = dy + n * y_sample + static_cast<int64_t>(c) * p.s;
          bn->grad[c] += static_cast<float>(sum_lanes(row, p.s));
        }
      }
    }

    bool need_dx = wants_grad(xn);
    bool need_dw = wants_grad(wn);
    if (!need_dx && !need_dw) return;
    // Scatter paths (depthwise taps, col2im) must start from zeros; the
    // GEMM paths can overwrite a fresh buffer on their first contribution.
    bool fresh_dx = false, fresh_dw = false;
    if (need_dx) {
      if (is_pointwise(p)) fresh_dx = xn->grad_begin_dense();
      else xn->ensure_grad();
    }
    if (need_dw) {
      if (is_depthwise(p)) wn->ensure_grad();
      else fresh_dw = wn->grad_begin_dense();
    }
    const float* xd = xn->data.data();
    const float* wd = wn->data.data();

    if (is_depthwise(p) && p.stride == 1) {
      const int64_t plane_elems = static_cast<int64_t>(p.h) * p.w;
      for (int n = 0; n < p.n; ++n) {
        for (int c = 0; c < p.ci; ++c) {
          const float* plane = xd + n * x_sample + c * plane_elems;
          const float* ker = wd + static_cast<int64_t>(c) * p.kh * p.kw;
          const float* dout = dy + n * y_sample + static_cast<int64_t>(c) * p.s;
          float* dplane =
              need_dx ? xn->grad.data() + n * x_sample + c * plane_elems
                      : nullptr;
          float* dker = need_dw ? wn->grad.data() +
                                      static_cast<int64_t>(c) * p.kh * p.kw
                                : nullptr;
          for (int kh = 0; kh < p.kh; ++kh) {
            const int off_h = kh * p.dil - p.pad;
            const int oh_lo = std::max(0, -off_h);
            const int oh_hi = std::min(p.oh, p.h - off_h);
            for (int kw = 0; kw < p.kw; ++kw) {
              const float kv = ker[kh * p.kw + kw];
              const int off_w = kw * p.dil - p.pad;
              const int ow_lo = std::max(0, -off_w);
              const int ow_hi = std::min(p.ow, p.w - off_w);
              const int len = ow_hi - ow_lo;
              if (len <= 0) continue;
              float acc = 0.0f;
              for (int oh = oh_lo; oh < oh_hi; ++oh) {
                const float* g_row =
                    dout + static_cast<int64_t>(oh) * p.ow + ow_lo;
                const int64_t in_off =
                    static_cast<int64_t>(oh + off_h) * p.w + ow_lo + off_w;
                if (dker) {
                  acc += dot_lanes_f32(g_row, plane + in_off, len);
                }
                if (dplane) {
                  float* dx_row = dplane + in_off;
                  for (int i = 0; i < len; ++i) dx_row[i] += kv * g_row[i];
                }
              }
              if (dker) dker[kh * p.kw + kw] += acc;
            }
          }
        }
      }
      return;
    }
    if (is_depthwise(p)) {
      for (int n = 0; n < p.n; ++n) {
        for (int c = 0; c < p.ci; ++c) {
          const float* plane = xd + n * x_sample + static_cast<int64_t>(c) * p.h * p.w;
          const float* ker = wd + static_cast<int64_t>(c) * p.kh * p.kw;
          const float* dout = dy + n * y_sample + static_cast<int64_t>(c) * p.s;
          float* dplane = need_dx
                              ? xn->grad.data() + n * x_sample +
                                    static_cast<int64_t>(c) * p.h * p.w
                              : nullptr;
          float* dker = need_dw
                            ? wn->grad.data() + static_cast<int64_t>(c) * p.kh * p.kw
                            : nullptr;
          for (int oh = 0; oh < p.oh; ++oh) {
            for (int ow = 0; ow < p.ow; ++ow) {
              float g = dout[oh * p.ow + ow];
              if (g == 0.0f) continue;
              for (int kh = 0; kh < p.kh; ++kh) {
                int ih = oh * p.stride - p.pad + kh * p.dil;
                if (ih < 0 || ih >= p.h) continue;
                for (int kw = 0; kw < p.kw; ++kw) {
                  int iw = ow * p.stride - p.pad + kw * p.dil;
                  if (iw < 0 || iw >= p.w) continue;
                  if (dker) dker[kh * p.kw + kw] += g * plane[ih * p.w + iw];
                  if (dplane) dplane[ih * p.w + iw] += g * ker[kh * p.kw + kw];
                }
              }
            }
          }
        }
      }
      return;
    }

    FloatVec col;
    FloatVec dcol;
    if (!is_pointwise(p)) {
      if (need_dw) col.resize(static_cast<size_t>(p.k) * p.s);
      if (need_dx) dcol.resize(static_cast<size_t>(p.k) * p.s);
    }
    for (int n = 0; n < p.n; ++n) {
      for (int g = 0; g < p.groups; ++g) {
        const float* dy_g = dy + n * y_sample + static_cast<int64_t>(g) * p.cog * p.s;
        const float* w_g = wd + static_cast<int64_t>(g) * p.cog * p.k;
        if (need_dw) {
          const float* mat;
          if (is_pointwise(p)) {
            mat = xd + n * x_sample;
          } else {
            im2col(xd + n * x_sample, p, g, col.data());
            mat = col.data();
          }
          // dW += dY * col^T, accumulated across samples via beta=1.
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, p.cog, p.k, p.s,
                      1.0f, dy_g, p.s, mat, p.s,
                      fresh_dw && n == 0 ? 0.0f : 1.0f,
                      wn->grad.data() + static_cast<int64_t>(g) * p.cog * p.k,
                      p.k);
        }
        if (need_dx) {
          if (is_pointwise(p)) {
            // dX += W^T * dY directly into the grad slice.
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, p.k, p.s,
                        p.cog, 1.0f, w_g, p.k, dy_g, p.s,
                        fresh_dx ? 0.0f : 1.0f,
                        xn->grad.data() + n * x_sample, p.s);
          } else {
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, p.k, p.s,
                        p.cog, 1.0f, w_g, p.k, dy_g, p.s, 0.0f, dcol.data(),
                        p.s);
            col2im_add(dcol.data(), p, g, xn->grad.data() + n * x_sample);
          }
        }
      }
    }
  };

  std::vector<NodePtr> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return make_result(ys, std::move(ydata), std::move(parents),
                     std::move(backward));
}

Tensor maxpool2(const Tensor& x) {
  const Shape xs = x.shape();
  require(xs.h % 2 == 0 && xs.w % 2 == 0,
          "maxpool2: odd spatial dims " + xs.str());
  Shape ys{xs.n, xs.c, xs.h / 2, xs.w / 2};
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  auto argmax = std::make_shared<std::vector<int64_t>>(ydata.size());
  const float* xd = x.data().data();
  int64_t oi = 0;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const float* plane =
          xd + (static_cast<int64_t>(n) * xs.c + c) * xs.h * xs.w;
      int64_t base = (static_cast<int64_t>(n) * xs.c + c) * xs.h * xs.w;
      for (int oh = 0; oh < ys.h; ++oh) {
        for (int ow = 0; ow < ys.w; ++ow) {
          int ih = oh * 2, iw = ow * 2;
          int64_t best = static_cast<int64_t>(ih) * xs.w + iw;
          float best_v = plane[best];
          for (int dh = 0; dh < 2; ++dh) {
            for (int dw = 0; dw < 2; ++dw) {
              int64_t idx = static_cast<int64_t>(ih + dh) * xs.w + (iw + dw);
              if (plane[idx] > best_v) {
                best_v = plane[idx];
                best = idx;
              }
            }
          }
          ydata[oi] = best_v;
          (*argmax)[oi] = base + best;
          ++oi;
        }
      }
    }
  }
  NodePtr xn = x.node();
  auto backward = [xn, argmax](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[(*argmax)[i]] += self.grad[i];
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

namespace {

// Half-pixel source mapping used by both directions of bilinear_resize.
struct LinearMap {
  std::vector<int> lo, hi;
  std::vector<float> w_hi;  // weight on hi; lo gets 1 - w_hi
};

LinearMap linear_map(int in, int out) {
  LinearMap m;
  m.lo.resize(out);
  m.hi.resize(out);
  m.w_hi.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    double floor_src = std::floor(src);
    int lo = static_cast<int>(floor_src);
    float frac = static_cast<float>(src - floor_src);
    m.lo[i] = std::clamp(lo, 0, in - 1);
    m.hi[i] = std::clamp(lo + 1, 0, in - 1);
    m.w_hi[i] = frac;
  }
  return m;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  const Shape xs = x.shape();
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  if (out_h == xs.h && out_w == xs.w) return x;
  Shape ys{xs.n, xs.c, out_h, out_w};
  auto hmap = std::make_shared<LinearMap>(linear_map(xs.h, out_h));
  auto wmap = std::make_shared<LinearMap>(linear_map(xs.w, out_w));
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  const float* xd = x.data().data();
  int64_t oi = 0;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const float* plane =
          xd + (static_cast<int64_t>(n) * xs.c + c) * xs.h * xs.w;
      for (int oh = 0; oh < out_h; ++oh) {
        int h0 = hmap->lo[oh], h1 = hmap->hi[oh];
        float fh = hmap->w_hi[oh];
        for (int ow = 0; ow < out_w; ++ow) {
          int w0 = wmap->lo[ow], w1 = wmap->hi[ow];
          float fw = wmap->w_hi[ow];
          float top = plane[h0 * xs.w + w0] * (1 - fw) + plane[h0 * xs.w + w1] * fw;
          float bot = plane[h1 * xs.w + w0] * (1 - fw) + plane[h1 * xs.w + w1] * fw;
          ydata[oi++] = top * (1 - fh) + bot * fh;
        }
      }
    }
  }
  NodePtr xn = x.node();
  auto backward = [xn, hmap, wmap, xs, out_h, out_w](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    const float* dy = self.grad.data();
    int64_t oi = 0;
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        float* dplane =
            xn->grad.data() + (static_cast<int64_t>(n) * xs.c + c) * xs.h * xs.w;
        for (int oh = 0; oh < out_h; ++oh) {
          int h0 = hmap->lo[oh], h1 = hmap->hi[oh];
          float fh = hmap->w_hi[oh];
          for (int ow = 0; ow < out_w; ++ow) {
            int w0 = wmap->lo[ow], w1 = wmap->hi[ow];
            float fw = wmap->w_hi[ow];
            float g = dy[oi++];
            dplane[h0 * xs.w + w0] += g * (1 - fh) * (1 - fw);
            dplane[h0 * xs.w + w1] += g * (1 - fh) * fw;
            dplane[h1 * xs.w + w0] += g * fh * (1 - fw);
            dplane[h1 * xs.w + w1] += g * fh * fw;
          }
        }
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

namespace {

void check_affine(const Shape& xs, const Tensor& gamma, const Tensor& beta,
                  const char* op) {
  Shape want{1, xs.c, 1, 1};
  require(gamma.shape() == want && beta.shape() == want,
          std::string(op) + ": affine params must be " + want.str());
}

}  // namespace

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, float eps,
                 float momentum, bool training) {
  const Shape xs = x.shape();
  check_affine(xs, gamma, beta, "batchnorm");
  check_affine(xs, running_mean, running_var, "batchnorm");
  if (eps <= 0.0f) throw ConfigError("batchnorm: eps must be positive");
  if (momentum < 0.0f || momentum > 1.0f) {
    throw ConfigError("batchnorm: momentum outside [0,1]");
  }

  const int C = xs.c;
  const int64_t plane = static_cast<int64_t>(xs.h) * xs.w;
  const int64_t count = static_cast<int64_t>(xs.n) * plane;
  const float* xd = x.data().data();
  const float* gd = gamma.data().data();
  const float* bd = beta.data().data();

  auto mean = std::make_shared<std::vector<float>>(C);
  auto invstd = std::make_shared<std::vector<float>>(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const float* p = xd + (static_cast<int64_t>(n) * C + c) * plane;
        SumDot sd = sum_dot_lanes(p, p, plane);
        sum += sd.sum;
        sq += sd.dot;
      }
      double mu = sum / count;
      double var = sq / count - mu * mu;
      if (var < 0.0) var = 0.0;
      (*mean)[c] = static_cast<float>(mu);
      (*invstd)[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
      float& rm = running_mean.data()[c];
      float& rv = running_var.data()[c];
      double var_unbiased = count > 1 ? var * count / (count - 1) : var;
      rm = static_cast<float>((1.0 - momentum) * rm + momentum * mu);
      rv = static_cast<float>((1.0 - momentum) * rv + momentum * var_unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = running_mean.data()[c];
      (*invstd)[c] =
          static_cast<float>(1.0 / std::sqrt(running_var.data()[c] + eps));
    }
  }

  Shape ys = xs;
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* src = xd + (static_cast<int64_t>(n) * C + c) * plane;
      float* dst = ydata.data() + (static_cast<int64_t>(n) * C + c) * plane;
      float mu = (*mean)[c], inv = (*invstd)[c], g = gd[c], b = bd[c];
      for (int64_t i = 0; i < plane; ++i) {
        dst[i] = (src[i] - mu) * inv * g + b;
      }
    }
  }

  NodePtr xn = x.node();
  NodePtr gn = gamma.node();
  NodePtr bn = beta.node();
  auto backward = [xn, gn, bn, mean, invstd, xs, plane, count,
                   training](TensorNode& self) {
    const int C = xs.c;
    const float* dy = self.grad.data();
    const float* xd = xn->data.data();
    const float* gd = gn->data.data();
    bool need_dx = wants_grad(xn);
    bool need_dg = wants_grad(gn);
    bool need_db = wants_grad(bn);
    bool fresh_dx = need_dx && xn->grad_begin_dense();
    if (need_dg) gn->ensure_grad();
    if (need_db) bn->ensure_grad();
    for (int c = 0; c < C; ++c) {
      float mu = (*mean)[c], inv = (*invstd)[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      if (need_dx || need_dg || need_db) {
        double sum_dy_x = 0.0;
        for (int n = 0; n < xs.n; ++n) {
          const float* dyp = dy + (static_cast<int64_t>(n) * C + c) * plane;
          const float* xp = xd + (static_cast<int64_t>(n) * C + c) * plane;
          SumDot sd = sum_dot_lanes(dyp, xp, plane);
          sum_dy += sd.sum;
          sum_dy_x += sd.dot;
        }
        sum_dy_xhat = (sum_dy_x - mu * sum_dy) * inv;
      }
      if (need_dg) gn->grad[c] += static_cast<float>(sum_dy_xhat);
      if (need_db) bn->grad[c] += static_cast<float>(sum_dy);
      if (!need_dx) continue;
      float g = gd[c];
      if (training) {
        float k1 = static_cast<float>(sum_dy / count);
        float k2 = static_cast<float>(sum_dy_xhat / count);
        for (int n = 0; n < xs.n; ++n) {
          const float* dyp = dy + (static_cast<int64_t>(n) * C + c) * plane;
          const float* xp = xd + (static_cast<int64_t>(n) * C + c) * plane;
          float* dxp =
              xn->grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
          if (fresh_dx) {
            for (int64_t i = 0; i < plane; ++i) {
              float xhat = (xp[i] - mu) * inv;
              dxp[i] = g * inv * (dyp[i] - k1 - xhat * k2);
            }
          } else {
            for (int64_t i = 0; i < plane; ++i) {
              float xhat = (xp[i] - mu) * inv;
              dxp[i] += g * inv * (dyp[i] - k1 - xhat * k2);
            }
          }
        }
      } else {
        for (int n = 0; n < xs.n; ++n) {
          const float* dyp = dy + (static_cast<int64_t>(n) * C + c) * plane;
          float* dxp =
              xn->grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
          if (fresh_dx) {
            for (int64_t i = 0; i < plane; ++i) dxp[i] = g * inv * dyp[i];
          } else {
            for (int64_t i = 0; i < plane; ++i) dxp[i] += g * inv * dyp[i];
          }
        }
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn, gn, bn}, std::move(backward));
}

Tensor layernorm_channel(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, float eps) {
  const Shape xs = x.shape();
  check_affine(xs, gamma, beta, "layernorm");
  if (eps <= 0.0f) throw ConfigError("layernorm: eps must be positive");
  const int C = xs.c;
  const int64_t plane = static_cast<int64_t>(xs.h) * xs.w;
  const float* xd = x.data().data();
  const float* gd = gamma.data().data();
  const float* bd = beta.data().data();

  const int64_t positions = static_cast<int64_t>(xs.n) * plane;
  auto mean = std::make_shared<std::vector<float>>(positions);
  auto invstd = std::make_shared<std::vector<float>>(positions);
  Shape ys = xs;
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  for (int n = 0; n < xs.n; ++n) {
    const float* sample = xd + static_cast<int64_t>(n) * C * plane;
    float* out = ydata.data() + static_cast<int64_t>(n) * C * plane;
    for (int64_t i = 0; i < plane; ++i) {
      double sum = 0.0, sq = 0.0;
      for (int c = 0; c < C; ++c) {
        float v = sample[c * plane + i];
        sum += v;
        sq += static_cast<double>(v) * v;
      }
      double mu = sum / C;
      double var = sq / C - mu * mu;
      if (var < 0.0) var = 0.0;
      float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
      int64_t pos = n * plane + i;
      (*mean)[pos] = static_cast<float>(mu);
      (*invstd)[pos] = inv;
      for (int c = 0; c < C; ++c) {
        float xhat = (sample[c * plane + i] - (*mean)[pos]) * inv;
        out[c * plane + i] = xhat * gd[c] + bd[c];
      }
    }
  }

  NodePtr xn = x.node();
  NodePtr gn = gamma.node();
  NodePtr bn = beta.node();
  auto backward = [xn, gn, bn, mean, invstd, xs, plane](TensorNode& self) {
    const int C = xs.c;
    const float* dy = self.grad.data();
    const float* xd = xn->data.data();
    const float* gd = gn->data.data();
    bool need_dx = wants_grad(xn);
    bool need_dg = wants_grad(gn);
    bool need_db = wants_grad(bn);
    bool fresh_dx = need_dx && xn->grad_begin_dense();
    if (need_dg) gn->ensure_grad();
    if (need_db) bn->ensure_grad();
    for (int n = 0; n < xs.n; ++n) {
      const float* sample = xd + static_cast<int64_t>(n) * C * plane;
      const float* dysample = dy + static_cast<int64_t>(n) * C * plane;
      for (int64_t i = 0; i < plane; ++i) {
        int64_t pos = n * plane + i;
        float mu = (*mean)[pos], inv = (*invstd)[pos];
        double sum_t = 0.0, sum_t_xhat = 0.0;
        for (int c = 0; c < C; ++c) {
          float xhat = (sample[c * plane + i] - mu) * inv;
          float t = dysample[c * plane + i] * gd[c];
          sum_t += t;
          sum_t_xhat += static_cast<double>(t) * xhat;
          if (need_dg) gn->grad[c] += dysample[c * plane + i] * xhat;
          if (need_db) bn->grad[c] += dysample[c * plane + i];
        }
        if (!need_dx) continue;
        float k1 = static_cast<float>(sum_t / C);
        float k2 = static_cast<float>(sum_t_xhat / C);
        float* dxsample = xn->grad.data() + static_cast<int64_t>(n) * C * plane;
        if (fresh_dx) {
          for (int c = 0; c < C; ++c) {
            float xhat = (sample[c * plane + i] - mu) * inv;
            float t = dysample[c * plane + i] * gd[c];
            dxsample[c * plane + i] = inv * (t - k1 - xhat * k2);
          }
        } else {
          for (int c = 0; c < C; ++c) {
            float xhat = (sample[c * plane + i] - mu) * inv;
            float t = dysample[c * plane + i] * gd[c];
            dxsample[c * plane + i] += inv * (t - k1 - xhat * k2);
          }
        }
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn, gn, bn}, std::move(backward));
}

namespace {

// Fwd and Dfdx are stateless functors so the per-element calls inline.
template <class Fwd, class Dfdx>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Dfdx dfdx) {
  const Shape ys = x.shape();
  FloatVec ydata(x.data().size());
  const float* xd = x.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = fwd(xd[i]);
  NodePtr xn = x.node();
  auto backward = [xn, dfdx](TensorNode& self) {
    if (!wants_grad(xn)) return;
    const bool fresh = xn->grad_begin_dense();
    const float* xd = xn->data.data();
    if (fresh) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        xn->grad[i] = self.grad[i] * dfdx(xd[i], self.data[i]);
      }
    } else {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        xn->grad[i] += self.grad[i] * dfdx(xd[i], self.data[i]);
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

float sigmoid_f(float v) { return 1.0f / (1.0f + std::exp(-v)); }

// Shared backward for activations whose derivative was stashed during the
// forward pass, leaving only a multiply-accumulate per element here.
Tensor cached_deriv_result(const Shape& ys, FloatVec ydata,
                           NodePtr xn,
                           std::shared_ptr<FloatVec> deriv) {
  auto backward = [xn, deriv](TensorNode& self) {
    if (!wants_grad(xn)) return;
    const bool fresh = xn->grad_begin_dense();
    const float* dv = deriv->data();
    float* gx = xn->grad.data();
    const float* gy = self.grad.data();
    if (fresh) {
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] = gy[i] * dv[i];
    } else {
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += gy[i] * dv[i];
    }
  };
  return make_result(ys, std::move(ydata), {std::move(xn)},
                     std::move(backward));
}

bool will_need_grad(const Tensor& x) {
  return GradMode::enabled() && x.node() && x.node()->requires_grad;
}

}  // namespace

Tensor gelu(const Tensor& x) {
  const size_t m = x.data().size();
  FloatVec ydata(m);
  const float* xd = x.data().data();
  if (!will_need_grad(x)) {
    for (size_t i = 0; i < m; ++i) {
      const float v = xd[i];
      ydata[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    return make_result(x.shape(), std::move(ydata), {x.node()}, {});
  }
  auto deriv = std::make_shared<FloatVec>(m);
  float* dv = deriv->data();
  for (size_t i = 0; i < m; ++i) {
    const double v = xd[i];
    const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    ydata[i] = static_cast<float>(v * phi);
    dv[i] = static_cast<float>(phi + v * pdf);
  }
  return cached_deriv_result(x.shape(), std::move(ydata), x.node(),
                             std::move(deriv));
}

Tensor silu(const Tensor& x) {
  const size_t m = x.data().size();
  FloatVec ydata(m);
  const float* xd = x.data().data();
  if (!will_need_grad(x)) {
    for (size_t i = 0; i < m; ++i) ydata[i] = xd[i] * fast_sigmoid(xd[i]);
    return make_result(x.shape(), std::move(ydata), {x.node()}, {});
  }
  auto deriv = std::make_shared<FloatVec>(m);
  float* dv = deriv->data();
  for (size_t i = 0; i < m; ++i) {
    const float v = xd[i];
    const float s = fast_sigmoid(v);
    ydata[i] = v * s;
    dv[i] = s * (1.0f + v * (1.0f - s));
  }
  return cached_deriv_result(x.shape(), std::move(ydata), x.node(),
                             std::move(deriv));
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x, [](float v) { return fast_sigmoid(v); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor activation(const Tensor& x, Act kind) {
  switch (kind) {
    case Act::Gelu: return gelu(x);
    case Act::Silu: return silu(x);
    case Act::Sigmoid: return sigmoid(x);
  }
  throw ConfigError("activation: unknown kind");
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      a.shape().str() + " vs " +
                                      b.shape().str());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  FloatVec ydata(a.data().size());
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = ad[i] + bd[i];
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn](TensorNode& self) {
    if (wants_grad(an)) accumulate(an, self.grad);
    if (wants_grad(bn)) accumulate(bn, self.grad);
  };
  return make_result(a.shape(), std::move(ydata), {an, bn},
                     std::move(backward));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  FloatVec ydata(a.data().size());
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = ad[i] - bd[i];
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn](TensorNode& self) {
    if (wants_grad(an)) accumulate(an, self.grad);
    if (wants_grad(bn)) {
      if (bn->grad_begin_dense()) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          bn->grad[i] = -self.grad[i];
        }
      } else {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          bn->grad[i] -= self.grad[i];
        }
      }
    }
  };
  return make_result(a.shape(), std::move(ydata), {an, bn},
                     std::move(backward));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  FloatVec ydata(a.data().size());
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = ad[i] * bd[i];
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn](TensorNode& self) {
    if (wants_grad(an)) {
      const bool fresh = an->grad_begin_dense();
      const float* bd = bn->data.data();
      if (fresh) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          an->grad[i] = self.grad[i] * bd[i];
        }
      } else {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          an->grad[i] += self.grad[i] * bd[i];
        }
      }
    }
    if (wants_grad(bn)) {
      const bool fresh = bn->grad_begin_dense();
      const float* ad = an->data.data();
      if (fresh) {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          bn->grad[i] = self.grad[i] * ad[i];
        }
      } else {
        for (size_t i = 0; i < self.grad.size(); ++i) {
          bn->grad[i] += self.grad[i] * ad[i];
        }
      }
    }
  };
  return make_result(a.shape(), std::move(ydata), {an, bn},
                     std::move(backward));
}

Tensor div_ew(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  FloatVec ydata(a.data().size());
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) {
    if (bd[i] == 0.0f) throw NumericError("div: zero denominator");
    ydata[i] = ad[i] / bd[i];
  }
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn](TensorNode& self) {
    const float* ad = an->data.data();
    const float* bd = bn->data.data();
    if (wants_grad(an)) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        an->grad[i] += self.grad[i] / bd[i];
      }
    }
    if (wants_grad(bn)) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        bn->grad[i] -= self.grad[i] * ad[i] / (bd[i] * bd[i]);
      }
    }
  };
  return make_result(a.shape(), std::move(ydata), {an, bn},
                     std::move(backward));
}

Tensor add_scalar(const Tensor& x, float v) {
  FloatVec ydata(x.data().size());
  const float* xd = x.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = xd[i] + v;
  NodePtr xn = x.node();
  auto backward = [xn](TensorNode& self) {
    if (wants_grad(xn)) accumulate(xn, self.grad);
  };
  return make_result(x.shape(), std::move(ydata), {xn}, std::move(backward));
}

Tensor mul_scalar(const Tensor& x, float v) {
  FloatVec ydata(x.data().size());
  const float* xd = x.data().data();
  for (size_t i = 0; i < ydata.size(); ++i) ydata[i] = xd[i] * v;
  NodePtr xn = x.node();
  auto backward = [xn, v](TensorNode& self) {
    if (!wants_grad(xn)) return;
    if (xn->grad_begin_dense()) {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        xn->grad[i] = self.grad[i] * v;
      }
    } else {
      for (size_t i = 0; i < self.grad.size(); ++i) {
        xn->grad[i] += self.grad[i] * v;
      }
    }
  };
  return make_result(x.shape(), std::move(ydata), {xn}, std::move(backward));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape as = a.shape(), bs = b.shape();
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
          "concat_channels: " + as.str() + " vs " + bs.str());
  Shape ys{as.n, as.c + bs.c, as.h, as.w};
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  const int64_t plane = static_cast<int64_t>(as.h) * as.w;
  const int64_t a_sample = as.c * plane, b_sample = bs.c * plane;
  for (int n = 0; n < as.n; ++n) {
    std::memcpy(ydata.data() + n * (a_sample + b_sample),
                a.data().data() + n * a_sample, a_sample * sizeof(float));
    std::memcpy(ydata.data() + n * (a_sample + b_sample) + a_sample,
                b.data().data() + n * b_sample, b_sample * sizeof(float));
  }
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn, a_sample, b_sample, n_count = as.n](TensorNode& self) {
    const bool need_a = wants_grad(an), need_b = wants_grad(bn);
    const bool fresh_a = need_a && an->grad_begin_dense();
    const bool fresh_b = need_b && bn->grad_begin_dense();
    for (int n = 0; n < n_count; ++n) {
      const float* g = self.grad.data() + n * (a_sample + b_sample);
      if (need_a) {
        float* dst = an->grad.data() + n * a_sample;
        if (fresh_a) {
          for (int64_t i = 0; i < a_sample; ++i) dst[i] = g[i];
        } else {
          for (int64_t i = 0; i < a_sample; ++i) dst[i] += g[i];
        }
      }
      if (need_b) {
        float* dst = bn->grad.data() + n * b_sample;
        if (fresh_b) {
          for (int64_t i = 0; i < b_sample; ++i) dst[i] = g[a_sample + i];
        } else {
          for (int64_t i = 0; i < b_sample; ++i) dst[i] += g[a_sample + i];
        }
      }
    }
  };
  return make_result(ys, std::move(ydata), {an, bn}, std::move(backward));
}

Tensor slice_channels(const Tensor& x, int c_begin, int c_end) {
  const Shape xs = x.shape();
  require(0 <= c_begin && c_begin < c_end && c_end <= xs.c,
          "slice_channels: bad range");
  Shape ys{xs.n, c_end - c_begin, xs.h, xs.w};
  const int64_t plane = static_cast<int64_t>(xs.h) * xs.w;
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  for (int n = 0; n < xs.n; ++n) {
    std::memcpy(ydata.data() + static_cast<int64_t>(n) * ys.c * plane,
                x.data().data() + (static_cast<int64_t>(n) * xs.c + c_begin) * plane,
                static_cast<int64_t>(ys.c) * plane * sizeof(float));
  }
  NodePtr xn = x.node();
  auto backward = [xn, xs, ys, c_begin, plane](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    for (int n = 0; n < xs.n; ++n) {
      const float* g = self.grad.data() + static_cast<int64_t>(n) * ys.c * plane;
      float* dst =
          xn->grad.data() + (static_cast<int64_t>(n) * xs.c + c_begin) * plane;
      for (int64_t i = 0; i < static_cast<int64_t>(ys.c) * plane; ++i) {
        dst[i] += g[i];
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
  const Shape as = a.shape(), bs = b.shape();
  require(as.c == bs.c && as.h == bs.h && as.w == bs.w,
          "concat_batch: " + as.str() + " vs " + bs.str());
  Shape ys{as.n + bs.n, as.c, as.h, as.w};
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  std::memcpy(ydata.data(), a.data().data(), a.data().size() * sizeof(float));
  std::memcpy(ydata.data() + a.data().size(), b.data().data(),
              b.data().size() * sizeof(float));
  NodePtr an = a.node(), bn = b.node();
  auto backward = [an, bn](TensorNode& self) {
    size_t a_len = an->data.size();
    if (wants_grad(an)) accumulate(an, {self.grad.data(), a_len});
    if (wants_grad(bn)) {
      accumulate(bn, {self.grad.data() + a_len, bn->data.size()});
    }
  };
  return make_result(ys, std::move(ydata), {an, bn}, std::move(backward));
}

Tensor slice_batch(const Tensor& x, int n_begin, int n_end) {
  const Shape xs = x.shape();
  require(0 <= n_begin && n_begin < n_end && n_end <= xs.n,
          "slice_batch: bad range");
  Shape ys{n_end - n_begin, xs.c, xs.h, xs.w};
  const int64_t sample = static_cast<int64_t>(xs.c) * xs.h * xs.w;
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  std::memcpy(ydata.data(), x.data().data() + n_begin * sample,
              ydata.size() * sizeof(float));
  NodePtr xn = x.node();
  auto backward = [xn, n_begin, sample](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    float* dst = xn->grad.data() + n_begin * sample;
    for (size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

Tensor scale_channels(const Tensor& x, const Tensor& gate) {
  const Shape xs = x.shape(), gs = gate.shape();
  require(gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1,
          "scale_channels: gate " + gs.str() + " for " + xs.str());
  const int64_t plane = static_cast<int64_t>(xs.h) * xs.w;
  FloatVec ydata(x.data().size());
  const float* xd = x.data().data();
  const float* gd = gate.data().data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      float g = gd[n * xs.c + c];
      const float* src = xd + (static_cast<int64_t>(n) * xs.c + c) * plane;
      float* dst = ydata.data() + (static_cast<int64_t>(n) * xs.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * g;
    }
  }
  NodePtr xn = x.node(), gn = gate.node();
  auto backward = [xn, gn, xs, plane](TensorNode& self) {
    const float* dy = self.grad.data();
    if (wants_grad(xn)) {
      const bool fresh = xn->grad_begin_dense();
      const float* gd = gn->data.data();
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
          float g = gd[n * xs.c + c];
          const float* dyp = dy + (static_cast<int64_t>(n) * xs.c + c) * plane;
          float* dst =
              xn->grad.data() + (static_cast<int64_t>(n) * xs.c + c) * plane;
          if (fresh) {
            for (int64_t i = 0; i < plane; ++i) dst[i] = dyp[i] * g;
          } else {
            for (int64_t i = 0; i < plane; ++i) dst[i] += dyp[i] * g;
          }
        }
      }
    }
    if (wants_grad(gn)) {
      gn->ensure_grad();
      const float* xd = xn->data.data();
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
          const float* dyp = dy + (static_cast<int64_t>(n) * xs.c + c) * plane;
          const float* xp = xd + (static_cast<int64_t>(n) * xs.c + c) * plane;
          gn->grad[n * xs.c + c] +=
              static_cast<float>(dot_lanes(dyp, xp, plane));
        }
      }
    }
  };
  return make_result(xs, std::move(ydata), {xn, gn}, std::move(backward));
}

Tensor scale_samples(const Tensor& x, const Tensor& mask) {
  const Shape xs = x.shape(), ms = mask.shape();
  require(ms.n == xs.n && ms.c == 1 && ms.h == 1 && ms.w == 1,
          "scale_samples: mask " + ms.str() + " for " + xs.str());
  const int64_t sample = static_cast<int64_t>(xs.c) * xs.h * xs.w;
  FloatVec ydata(x.data().size());
  const float* xd = x.data().data();
  const float* md = mask.data().data();
  for (int n = 0; n < xs.n; ++n) {
    float m = md[n];
    const float* src = xd + n * sample;
    float* dst = ydata.data() + n * sample;
    for (int64_t i = 0; i < sample; ++i) dst[i] = src[i] * m;
  }
  NodePtr xn = x.node(), mn = mask.node();
  auto backward = [xn, mn, xs, sample](TensorNode& self) {
    const float* dy = self.grad.data();
    if (wants_grad(xn)) {
      const bool fresh = xn->grad_begin_dense();
      const float* md = mn->data.data();
      for (int n = 0; n < xs.n; ++n) {
        float m = md[n];
        const float* dyp = dy + n * sample;
        float* dst = xn->grad.data() + n * sample;
        if (fresh) {
          for (int64_t i = 0; i < sample; ++i) dst[i] = dyp[i] * m;
        } else {
          for (int64_t i = 0; i < sample; ++i) dst[i] += dyp[i] * m;
        }
      }
    }
    if (wants_grad(mn)) {
      mn->ensure_grad();
      const float* xd = xn->data.data();
      for (int n = 0; n < xs.n; ++n) {
        const float* dyp = dy + n * sample;
        const float* xp = xd + n * sample;
        mn->grad[n] += static_cast<float>(dot_lanes(dyp, xp, sample));
      }
    }
  };
  return make_result(xs, std::move(ydata), {xn, mn}, std::move(backward));
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape xs = x.shape();
  const int64_t plane = static_cast<int64_t>(xs.h) * xs.w;
  Shape ys{xs.n, xs.c, 1, 1};
  FloatVec ydata(static_cast<size_t>(ys.numel()));
  const float* xd = x.data().data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const float* src = xd + (static_cast<int64_t>(n) * xs.c + c) * plane;
      ydata[n * xs.c + c] = static_cast<float>(sum_lanes(src, plane) / plane);
    }
  }
  NodePtr xn = x.node();
  auto backward = [xn, xs, plane](TensorNode& self) {
    if (!wants_grad(xn)) return;
    const bool fresh = xn->grad_begin_dense();
    for (int n = 0; n < xs.n; ++n) {
      for (int c = 0; c < xs.c; ++c) {
        float g = self.grad[n * xs.c + c] / plane;
        float* dst =
            xn->grad.data() + (static_cast<int64_t>(n) * xs.c + c) * plane;
        if (fresh) {
          for (int64_t i = 0; i < plane; ++i) dst[i] = g;
        } else {
          for (int64_t i = 0; i < plane; ++i) dst[i] += g;
        }
      }
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  NodePtr xn = x.node();
  auto backward = [xn](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    float g = self.grad[0];
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  };
  return make_result(Shape{1, 1, 1, 1}, {static_cast<float>(acc)}, {xn},
                     std::move(backward));
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  NodePtr xn = x.node();
  auto backward = [xn, inv](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    float g = static_cast<float>(self.grad[0] * inv);
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  };
  return make_result(Shape{1, 1, 1, 1}, {static_cast<float>(acc * inv)}, {xn},
                     std::move(backward));
}

Tensor sum_per_sample(const Tensor& x) {
  const Shape xs = x.shape();
  const int64_t sample = static_cast<int64_t>(xs.c) * xs.h * xs.w;
  Shape ys{xs.n, 1, 1, 1};
  FloatVec ydata(xs.n);
  const float* xd = x.data().data();
  for (int n = 0; n < xs.n; ++n) {
    double acc = 0.0;
    const float* src = xd + n * sample;
    for (int64_t i = 0; i < sample; ++i) acc += src[i];
    ydata[n] = static_cast<float>(acc);
  }
  NodePtr xn = x.node();
  auto backward = [xn, sample, n_count = xs.n](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    for (int n = 0; n < n_count; ++n) {
      float g = self.grad[n];
      float* dst = xn->grad.data() + n * sample;
      for (int64_t i = 0; i < sample; ++i) dst[i] += g;
    }
  };
  return make_result(ys, std::move(ydata), {xn}, std::move(backward));
}

Tensor droppath(const Tensor& x, float rate, bool training, Rng& rng,
                int tie_groups) {
  if (rate < 0.0f || rate > 1.0f) {
    throw ConfigError("droppath: rate outside [0,1]");
  }
  if (!training || rate == 0.0f) return x;
  const Shape xs = x.shape();
  if (tie_groups < 1 || xs.n % tie_groups != 0) {
    throw ConfigError("droppath: batch not divisible into tie groups");
  }
  int per_group = xs.n / tie_groups;
  FloatVec mask_data(xs.n);
  for (int i = 0; i < per_group; ++i) {
    bool keep = rng.uniform() >= rate;
    float v = keep ? 1.0f / (1.0f - rate) : 0.0f;
    for (int g = 0; g < tie_groups; ++g) mask_data[g * per_group + i] = v;
  }
  Tensor mask = Tensor::from_data(Shape{xs.n, 1, 1, 1}, std::move(mask_data));
  return scale_samples(x, mask);
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& target) {
  check_same_shape(logits, target, "bce_with_logits");
  if (!all_finite(logits.data())) {
    throw NumericError("bce_with_logits: non-finite logits");
  }
  const float* xd = logits.data().data();
  const float* yd = target.data().data();
  const size_t m = logits.data().size();
  double acc = 0.0;
  for (size_t i = 0; i < m; ++i) {
    float t = yd[i];
    if (t != 0.0f && t != 1.0f) {
      throw DataError("bce_with_logits: target not in {0,1}");
    }
    double v = xd[i];
    acc += std::max(v, 0.0) - v * t + std::log1p(std::exp(-std::abs(v)));
  }
  NodePtr xn = logits.node();
  NodePtr yn = target.node();
  const double inv_m = 1.0 / static_cast<double>(m);
  auto backward = [xn, yn, inv_m](TensorNode& self) {
    if (!wants_grad(xn)) return;
    xn->ensure_grad();
    float g = static_cast<float>(self.grad[0] * inv_m);
    const float* xd = xn->data.data();
    const float* yd = yn->data.data();
    for (size_t i = 0; i < xn->grad.size(); ++i) {
      xn->grad[i] += g * (sigmoid_f(xd[i]) - yd[i]);
    }
  };
  return make_result(Shape{1, 1, 1, 1}, {static_cast<float>(acc * inv_m)},
                     {xn}, std::move(backward));
}

double grad_check(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, double eps) {
  if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out = fn(inputs);
  if (out.numel() != 1) {
    throw ShapeError("grad_check: closure must produce a scalar");
  }
  if (!std::isfinite(out.data()[0])) {
    throw NumericError("grad_check: non-finite output");
  }
  out.backward();

  std::vector<std::vector<float>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    if (t.grad().empty()) {
      analytic.emplace_back(t.data().size(), 0.0f);
    } else {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    }
  }

  NoGradGuard no_grad;
  double max_rel = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& data = inputs[ti].data();
    for (size_t i = 0; i < data.size(); ++i) {
      float saved = data[i];
      data[i] = static_cast<float>(saved + eps);
      double lp = fn(inputs).scalar();
      data[i] = static_cast<float>(saved - eps);
      double lm = fn(inputs).scalar();
      data[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw NumericError("grad_check: non-finite probe");
      }
      double numeric = (lp - lm) / (2.0 * eps);
      double a = analytic[ti][i];
      double rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace schanger
