#pragma once

#include <algorithm>
#include <cstdlib>
#include <tuple>

#include "enelf/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace enelf {

// Border handling for padded convolutions. Replicate clamps source
// indices to the image edge, so a spatially constant channel stays
// constant through the layer; the pruning surgery relies on that.
enum class PadMode { Zero, Replicate };

enum class BnMode { Train, Infer };

template <typename T>
struct ConvParams {
  Tensor<T> weight;     // conv: [Cout, Cin, k, k]; transposed: [Cin, Cout, k, k]
  std::vector<T> bias;  // [Cout]
  int64_t stride = 1;
  int64_t padding = 0;
  PadMode pad_mode = PadMode::Zero;

  int64_t kernel() const { return weight.shape().h; }
};

template <typename T>
struct BnParams {
  std::vector<T> gamma;  // learnable scale, the pruning criterion
  std::vector<T> beta;   // learnable shift
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  int64_t channels() const { return static_cast<int64_t>(gamma.size()); }

  static BnParams identity(int64_t c, T gamma0 = T(1)) {
    BnParams p;
    p.gamma.assign(c, gamma0);
    p.beta.assign(c, T(0));
    p.running_mean.assign(c, T(0));
    p.running_var.assign(c, T(1));
    return p;
  }
};

// Batch statistics captured by a train-mode forward, needed by the
// matching backward.
template <typename T>
struct BnCache {
  std::vector<T> mean;  // per-channel batch mean
  std::vector<T> var;   // per-channel biased batch variance
};

namespace detail {

inline int64_t clamp_idx(int64_t i, int64_t n) {
  return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Shape4 conv2d_out_shape(const Shape4& x, const ConvParams<T>& p) {
  const int64_t k = p.kernel();
  if (p.weight.shape().w != k)
    throw ShapeError("conv2d: non-square kernel");
  if (x.c != p.weight.shape().c)
    throw ShapeError("conv2d: input channels " + std::to_string(x.c) +
                     " != weight Cin " + std::to_string(p.weight.shape().c));
  if (p.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int64_t hn = x.h + 2 * p.padding - k;
  const int64_t wn = x.w + 2 * p.padding - k;
  if (hn < 0 || wn < 0 || hn % p.stride != 0 || wn % p.stride != 0)
    throw ShapeError("conv2d: non-integral output extent for input " +
                     x.str());
  return Shape4{x.n, p.weight.shape().n, hn / p.stride + 1,
                wn / p.stride + 1};
}

template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const ConvParams<T>& p) {
  const Shape4 os = conv2d_out_shape(x.shape(), p);
  const int64_t N = x.shape().n, Cin = x.shape().c, H = x.shape().h,
                W = x.shape().w;
  const int64_t Cout = os.c, Ho = os.h, Wo = os.w;
  const int64_t k = p.kernel(), s = p.stride, pad = p.padding;
  const bool repl = p.pad_mode == PadMode::Replicate;

  Tensor<T> y(os);

  // 1x1 stride-1 fast path: a plain matrix product over pixels.
  if (k == 1 && s == 1 && pad == 0) {
    const int64_t P = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Cout; ++co) {
        T* out = y.data() + (n * Cout + co) * P;
        std::fill(out, out + P, p.bias[co]);
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T wv = p.weight[co * Cin + ci];
          const T* in = x.data() + (n * Cin + ci) * P;
          for (int64_t i = 0; i < P; ++i) out[i] += wv * in[i];
        }
      }
    return y;
  }

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      T* out = y.data() + ((n * Cout + co) * Ho) * Wo;
      std::fill(out, out + Ho * Wo, p.bias[co]);
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* in = x.data() + ((n * Cin + ci) * H) * W;
        const T* wk = p.weight.data() + ((co * Cin + ci) * k) * k;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            const T wv = wk[a * k + b];
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * s - pad + a;
              if (repl)
                ih = detail::clamp_idx(ih, H);
              else if (ih < 0 || ih >= H)
                continue;
              T* orow = out + oh * Wo;
              const T* irow = in + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                int64_t iw = ow * s - pad + b;
                if (repl)
                  iw = detail::clamp_idx(iw, W);
                else if (iw < 0 || iw >= W)
                  continue;
                orow[ow] += wv * irow[iw];
              }
            }
          }
      }
    }
  return y;
}

template <typename T>
std::tuple<Tensor<T>, Tensor<T>, std::vector<T>> conv2d_bwd(
    const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
  const Shape4 os = conv2d_out_shape(x.shape(), p);
  if (!(grad_out.shape() == os))
    throw ShapeError("conv2d_bwd: grad_out shape " + grad_out.shape().str() +
                     " != forward output " + os.str());
  const int64_t N = x.shape().n, Cin = x.shape().c, H = x.shape().h,
                W = x.shape().w;
  const int64_t Cout = os.c, Ho = os.h, Wo = os.w;
  const int64_t k = p.kernel(), s = p.stride, pad = p.padding;
  const bool repl = p.pad_mode == PadMode::Replicate;

  Tensor<T> gx(x.shape());
  Tensor<T> gw(p.weight.shape());
  std::vector<T> gb(Cout, T(0));

  for (int64_t co = 0; co < Cout; ++co) {
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) acc += go[i];
    }
    gb[co] = acc;
  }

  // grad_w: each (co, ci) slice owned by one iteration, fixed inner order
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t co = 0; co < Cout; ++co)
    for (int64_t ci = 0; ci < Cin; ++ci) {
      T* gwk = gw.data() + ((co * Cin + ci) * k) * k;
      for (int64_t n = 0; n < N; ++n) {
        const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
        const T* in = x.data() + ((n * Cin + ci) * H) * W;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            T acc = 0;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * s - pad + a;
              if (repl)
                ih = detail::clamp_idx(ih, H);
              else if (ih < 0 || ih >= H)
                continue;
              const T* gorow = go + oh * Wo;
              const T* irow = in + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                int64_t iw = ow * s - pad + b;
                if (repl)
                  iw = detail::clamp_idx(iw, W);
                else if (iw < 0 || iw >= W)
                  continue;
                acc += gorow[ow] * irow[iw];
              }
            }
            gwk[a * k + b] += acc;
          }
      }
    }

  // grad_x: scatter per (n, ci); replicate clamping routes border
  // contributions to the clamped source pixel
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t ci = 0; ci < Cin; ++ci) {
      T* gxp = gx.data() + ((n * Cin + ci) * H) * W;
      for (int64_t co = 0; co < Cout; ++co) {
        const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
        const T* wk = p.weight.data() + ((co * Cin + ci) * k) * k;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            const T wv = wk[a * k + b];
            for (int64_t oh = 0; oh < Ho; ++oh) {
              int64_t ih = oh * s - pad + a;
              if (repl)
                ih = detail::clamp_idx(ih, H);
              else if (ih < 0 || ih >= H)
                continue;
              const T* gorow = go + oh * Wo;
              T* gxrow = gxp + ih * W;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                int64_t iw = ow * s - pad + b;
                if (repl)
                  iw = detail::clamp_idx(iw, W);
                else if (iw < 0 || iw >= W)
                  continue;
                gxrow[iw] += wv * gorow[ow];
              }
            }
          }
      }
    }

  return {std::move(gx), std::move(gw), std::move(gb)};
}

// ---------------------------------------------------------------------------
// transposed conv2d (scatter-add adjoint of conv2d)

template <typename T>
Shape4 convt2d_out_shape(const Shape4& x, const ConvParams<T>& p) {
  const int64_t k = p.kernel();
  if (p.weight.shape().w != k)
    throw ShapeError("convt2d: non-square kernel");
  if (x.c != p.weight.shape().n)
    throw ShapeError("convt2d: input channels " + std::to_string(x.c) +
                     " != weight Cin " + std::to_string(p.weight.shape().n));
  if (p.stride < 1) throw ShapeError("convt2d: stride must be >= 1");
  const int64_t ho = (x.h - 1) * p.stride - 2 * p.padding + k;
  const int64_t wo = (x.w - 1) * p.stride - 2 * p.padding + k;
  if (ho < 1 || wo < 1)
    throw ShapeError("convt2d: output extent < 1 for input " + x.str());
  return Shape4{x.n, p.weight.shape().c, ho, wo};
}

template <typename T>
Tensor<T> convt2d_fwd(const Tensor<T>& x, const ConvParams<T>& p) {
  const Shape4 os = convt2d_out_shape(x.shape(), p);
  const int64_t N = x.shape().n, Cin = x.shape().c, H = x.shape().h,
                W = x.shape().w;
  const int64_t Cout = os.c, Ho = os.h, Wo = os.w;
  const int64_t k = p.kernel(), s = p.stride, pad = p.padding;

  Tensor<T> y(os);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      T* out = y.data() + ((n * Cout + co) * Ho) * Wo;
      std::fill(out, out + Ho * Wo, p.bias[co]);
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* in = x.data() + ((n * Cin + ci) * H) * W;
        const T* wk = p.weight.data() + ((ci * Cout + co) * k) * k;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            const T wv = wk[a * k + b];
            for (int64_t ih = 0; ih < H; ++ih) {
              const int64_t oh = ih * s - pad + a;
              if (oh < 0 || oh >= Ho) continue;
              const T* irow = in + ih * W;
              T* orow = out + oh * Wo;
              for (int64_t iw = 0; iw < W; ++iw) {
                const int64_t ow = iw * s - pad + b;
                if (ow < 0 || ow >= Wo) continue;
                orow[ow] += wv * irow[iw];
              }
            }
          }
      }
    }
  return y;
}

template <typename T>
std::tuple<Tensor<T>, Tensor<T>, std::vector<T>> convt2d_bwd(
    const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& grad_out) {
  const Shape4 os = convt2d_out_shape(x.shape(), p);
  if (!(grad_out.shape() == os))
    throw ShapeError("convt2d_bwd: grad_out shape " + grad_out.shape().str() +
                     " != forward output " + os.str());
  const int64_t N = x.shape().n, Cin = x.shape().c, H = x.shape().h,
                W = x.shape().w;
  const int64_t Cout = os.c, Ho = os.h, Wo = os.w;
  const int64_t k = p.kernel(), s = p.stride, pad = p.padding;

  Tensor<T> gx(x.shape());
  Tensor<T> gw(p.weight.shape());
  std::vector<T> gb(Cout, T(0));

  for (int64_t co = 0; co < Cout; ++co) {
    T acc = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) acc += go[i];
    }
    gb[co] = acc;
  }

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t ci = 0; ci < Cin; ++ci)
    for (int64_t co = 0; co < Cout; ++co) {
      T* gwk = gw.data() + ((ci * Cout + co) * k) * k;
      for (int64_t n = 0; n < N; ++n) {
        const T* in = x.data() + ((n * Cin + ci) * H) * W;
        const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            T acc = 0;
            for (int64_t ih = 0; ih < H; ++ih) {
              const int64_t oh = ih * s - pad + a;
              if (oh < 0 || oh >= Ho) continue;
              const T* irow = in + ih * W;
              const T* gorow = go + oh * Wo;
              for (int64_t iw = 0; iw < W; ++iw) {
                const int64_t ow = iw * s - pad + b;
                if (ow < 0 || ow >= Wo) continue;
                acc += irow[iw] * gorow[ow];
              }
            }
            gwk[a * k + b] += acc;
          }
      }
    }

  // grad_x gathers from grad_out; this is conv2d_fwd of grad_out with the
  // same kernel (adjoint identity)
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t ci = 0; ci < Cin; ++ci) {
      T* gxp = gx.data() + ((n * Cin + ci) * H) * W;
      for (int64_t co = 0; co < Cout; ++co) {
        const T* go = grad_out.data() + ((n * Cout + co) * Ho) * Wo;
        const T* wk = p.weight.data() + ((ci * Cout + co) * k) * k;
        for (int64_t a = 0; a < k; ++a)
          for (int64_t b = 0; b < k; ++b) {
            const T wv = wk[a * k + b];
            for (int64_t ih = 0; ih < H; ++ih) {
              const int64_t oh = ih * s - pad + a;
              if (oh < 0 || oh >= Ho) continue;
              const T* gorow = go + oh * Wo;
              T* gxrow = gxp + ih * W;
              for (int64_t iw = 0; iw < W; ++iw) {
                const int64_t ow = iw * s - pad + b;
                if (ow < 0 || ow >= Wo) continue;
                gxrow[iw] += wv * gorow[ow];
              }
            }
          }
      }
    }

  return {std::move(gx), std::move(gw), std::move(gb)};
}

// ---------------------------------------------------------------------------
// batch normalization

// Train mode normalizes by batch mean / biased variance over N*H*W and
// updates running stats in-place (mean with the batch mean, variance with
// the unbiased batch variance). Infer mode reads running stats only.
template <typename T>
Tensor<T> bn_fwd(const Tensor<T>& x, BnParams<T>& p, BnMode mode,
                 BnCache<T>* cache = nullptr) {
  const int64_t C = p.channels();
  if (x.shape().c != C)
    throw ShapeError("bn_fwd: input channels " + std::to_string(x.shape().c) +
                     " != BN channels " + std::to_string(C));
  const int64_t N = x.shape().n, H = x.shape().h, W = x.shape().w;
  const int64_t m = N * H * W;

  Tensor<T> y(x.shape());
  std::vector<T> mean(C), var(C);

  if (mode == BnMode::Train) {
    if (m == 1)
      throw ShapeError("bn_fwd: degenerate batch (N*H*W == 1) in train mode");
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t c = 0; c < C; ++c) {
      double sum = 0, sq = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* in = x.data() + ((n * C + c) * H) * W;
        for (int64_t i = 0; i < H * W; ++i) {
          sum += in[i];
          sq += static_cast<double>(in[i]) * in[i];
        }
      }
      const double mu = sum / m;
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(std::max(0.0, sq / m - mu * mu));
    }
    const T mom = p.momentum;
    for (int64_t c = 0; c < C; ++c) {
      const T unbiased = var[c] * static_cast<T>(m) / static_cast<T>(m - 1);
      p.running_mean[c] = (T(1) - mom) * p.running_mean[c] + mom * mean[c];
      p.running_var[c] = (T(1) - mom) * p.running_var[c] + mom * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = p.running_mean[c];
      var[c] = p.running_var[c];
    }
  }

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T inv = T(1) / std::sqrt(var[c] + p.eps);
      const T g = p.gamma[c], b = p.beta[c], mu = mean[c];
      const T* in = x.data() + ((n * C + c) * H) * W;
      T* out = y.data() + ((n * C + c) * H) * W;
      for (int64_t i = 0; i < H * W; ++i)
        out[i] = g * (in[i] - mu) * inv + b;
    }

  if (cache) {
    cache->mean = std::move(mean);
    cache->var = std::move(var);
  }
  return y;
}

// Exact gradients of the train-mode normalization (mean/var depend on x).
// For infer mode the stats are constants and the formula degenerates.
template <typename T>
std::tuple<Tensor<T>, std::vector<T>, std::vector<T>> bn_bwd(
    const Tensor<T>& x, const BnParams<T>& p, BnMode mode,
    const Tensor<T>& grad_out, const BnCache<T>& cache) {
  const int64_t C = p.channels();
  if (!(x.shape() == grad_out.shape()) || x.shape().c != C)
    throw ShapeError("bn_bwd: shape mismatch");
  const int64_t N = x.shape().n, H = x.shape().h, W = x.shape().w;
  const int64_t m = N * H * W;

  Tensor<T> gx(x.shape());
  std::vector<T> ggamma(C, T(0)), gbeta(C, T(0));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t c = 0; c < C; ++c) {
    const T mu = (mode == BnMode::Train) ? cache.mean[c] : p.running_mean[c];
    const T v = (mode == BnMode::Train) ? cache.var[c] : p.running_var[c];
    const T inv = T(1) / std::sqrt(v + p.eps);

    double sum_gy = 0, sum_gy_xhat = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T* in = x.data() + ((n * C + c) * H) * W;
      const T* go = grad_out.data() + ((n * C + c) * H) * W;
      for (int64_t i = 0; i < H * W; ++i) {
        sum_gy += go[i];
        sum_gy_xhat += static_cast<double>(go[i]) * (in[i] - mu) * inv;
      }
    }
    gbeta[c] = static_cast<T>(sum_gy);
    ggamma[c] = static_cast<T>(sum_gy_xhat);

    const T g = p.gamma[c];
    if (mode == BnMode::Train) {
      const T mean_gy = static_cast<T>(sum_gy / m);
      const T mean_gy_xhat = static_cast<T>(sum_gy_xhat / m);
      for (int64_t n = 0; n < N; ++n) {
        const T* in = x.data() + ((n * C + c) * H) * W;
        const T* go = grad_out.data() + ((n * C + c) * H) * W;
        T* out = gx.data() + ((n * C + c) * H) * W;
        for (int64_t i = 0; i < H * W; ++i) {
          const T xhat = (in[i] - mu) * inv;
          out[i] = g * inv * (go[i] - mean_gy - xhat * mean_gy_xhat);
        }
      }
    } else {
      for (int64_t n = 0; n < N; ++n) {
        const T* go = grad_out.data() + ((n * C + c) * H) * W;
        T* out = gx.data() + ((n * C + c) * H) * W;
        for (int64_t i = 0; i < H * W; ++i) out[i] = g * inv * go[i];
      }
    }
  }

  return {std::move(gx), std::move(ggamma), std::move(gbeta)};
}

// ---------------------------------------------------------------------------
// activations

// tanh-approximation GELU
template <typename T>
T gelu_scalar(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T c = T(0.7978845608028654);
  const T a = T(0.044715);
  const T u = c * (x + a * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * a * x * x);
}

template <typename T>
Tensor<T> gelu_fwd(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const int64_t n = x.size();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_bwd(const Tensor<T>& x, const Tensor<T>& grad_out) {
  if (!x.same_shape(grad_out)) throw ShapeError("gelu_bwd: shape mismatch");
  Tensor<T> gx(x.shape());
  const int64_t n = x.size();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; ++i) gx[i] = grad_out[i] * gelu_grad_scalar(x[i]);
  return gx;
}

template <typename T>
Tensor<T> sigmoid_fwd(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const int64_t n = x.size();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  return y;
}

// takes the forward output, not the input
template <typename T>
Tensor<T> sigmoid_bwd(const Tensor<T>& y, const Tensor<T>& grad_out) {
  if (!y.same_shape(grad_out)) throw ShapeError("sigmoid_bwd: shape mismatch");
  Tensor<T> gx(y.shape());
  const int64_t n = y.size();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; ++i)
    gx[i] = grad_out[i] * y[i] * (T(1) - y[i]);
  return gx;
}

// ---------------------------------------------------------------------------
// threading

inline void set_worker_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

// honors ENELF_THREADS when set
inline void apply_thread_env() {
  if (const char* env = std::getenv("ENELF_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_worker_threads(n);
  }
}

}  // namespace enelf
