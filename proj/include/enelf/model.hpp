#pragma once

#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "enelf/layers.hpp"
#include "enelf/rays.hpp"

namespace enelf {

// One super-resolution stage. The transposed conv must satisfy
// kernel - 2*padding == stride == scale so every input extent H maps to
// exactly scale*H.
struct SrSpec {
  int64_t scale = 2;
  int64_t kernel = 4;
  int64_t stride = 2;
  int64_t padding = 1;
  int64_t out_channels = 16;

  static SrSpec up2(int64_t out_ch) { return {2, 4, 2, 1, out_ch}; }
  static SrSpec up3(int64_t out_ch) { return {3, 3, 3, 0, out_ch}; }
};

struct ModelConfig {
  int64_t d_blocks = 8;
  int64_t width = 32;
  std::vector<SrSpec> sr_blocks;
  RayCfg ray;
  int64_t input_h = 16;
  int64_t input_w = 16;

  int64_t in_channels() const { return ray.channels(); }

  int64_t upsample() const {
    int64_t s = 1;
    for (const auto& sr : sr_blocks) s *= sr.scale;
    return s;
  }
  int64_t render_h() const { return input_h * upsample(); }
  int64_t render_w() const { return input_w * upsample(); }

  void validate() const {
    if (d_blocks < 1) throw ConfigError("ModelConfig: d_blocks must be >= 1");
    if (width < 8) throw ConfigError("ModelConfig: width must be >= 8");
    if (input_h < 1 || input_w < 1)
      throw ConfigError("ModelConfig: input grid extents must be >= 1");
    if (ray.t_near >= ray.t_far)
      throw ConfigError("ModelConfig: t_near must be < t_far");
    for (const auto& sr : sr_blocks) {
      if (sr.scale != 2 && sr.scale != 3)
        throw ConfigError("ModelConfig: SR scale must be 2 or 3");
      if (sr.kernel - 2 * sr.padding != sr.stride || sr.stride != sr.scale)
        throw ConfigError(
            "ModelConfig: SR spec must satisfy kernel - 2*padding == stride "
            "== scale");
      if (sr.out_channels < 1)
        throw ConfigError("ModelConfig: SR out_channels must be >= 1");
    }
  }
};

// Decreasing SR channel schedule: width/4, width/8, ... floored at 16.
inline std::vector<SrSpec> default_sr_tower(int64_t width,
                                            const std::vector<int>& scales) {
  std::vector<SrSpec> out;
  for (size_t i = 0; i < scales.size(); ++i) {
    const int64_t ch = std::max<int64_t>(16, width >> (i + 2));
    out.push_back(scales[i] == 3 ? SrSpec::up3(ch) : SrSpec::up2(ch));
  }
  return out;
}

enum class LayerKind { Conv, ConvT, Bn, Gelu, Sigmoid, ResBegin, ResEnd };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::ConvT: return "convt";
    case LayerKind::Bn: return "bn";
    case LayerKind::Gelu: return "gelu";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::ResBegin: return "res_begin";
    case LayerKind::ResEnd: return "res_end";
  }
  return "?";
}

template <typename T>
struct Layer {
  LayerKind kind;
  std::string name;
  ConvParams<T> conv;  // Conv / ConvT
  BnParams<T> bn;      // Bn
  bool bn_prunable = false;

  // accumulated gradients (train paths only)
  Tensor<T> grad_w;
  std::vector<T> grad_b;
  std::vector<T> grad_gamma, grad_beta;

  int64_t in_channels() const {
    switch (kind) {
      case LayerKind::Conv: return conv.weight.shape().c;
      case LayerKind::ConvT: return conv.weight.shape().n;
      case LayerKind::Bn: return bn.channels();
      default: return -1;  // shape-preserving
    }
  }
  int64_t out_channels() const {
    switch (kind) {
      case LayerKind::Conv: return conv.weight.shape().n;
      case LayerKind::ConvT: return conv.weight.shape().c;
      case LayerKind::Bn: return bn.channels();
      default: return -1;
    }
  }
};

template <typename T>
struct EnelfModel {
  ModelConfig config;
  std::vector<Layer<T>> layers;
  BnMode mode = BnMode::Infer;
};

using ModelF = EnelfModel<float>;

// ---------------------------------------------------------------------------
// construction

template <typename T>
Layer<T> make_conv(std::string name, int64_t cin, int64_t cout, int64_t k,
                   int64_t stride, int64_t pad, PadMode pm, Rng& rng) {
  Layer<T> l;
  l.kind = LayerKind::Conv;
  l.name = std::move(name);
  l.conv.weight =
      tensor_random<T>(Shape4{cout, cin, k, k}, rng, Dist::kaiming_fan_in());
  l.conv.bias.assign(cout, T(0));
  l.conv.stride = stride;
  l.conv.padding = pad;
  l.conv.pad_mode = pm;
  return l;
}

template <typename T>
Layer<T> make_convt(std::string name, int64_t cin, int64_t cout, int64_t k,
                    int64_t stride, int64_t pad, Rng& rng) {
  Layer<T> l;
  l.kind = LayerKind::ConvT;
  l.name = std::move(name);
  // kaiming fan-in over the (Cout, k, k) trailing dims of [Cin, Cout, k, k]
  l.conv.weight =
      tensor_random<T>(Shape4{cin, cout, k, k}, rng, Dist::kaiming_fan_in());
  l.conv.bias.assign(cout, T(0));
  l.conv.stride = stride;
  l.conv.padding = pad;
  return l;
}

template <typename T>
Layer<T> make_bn(std::string name, int64_t c, bool prunable, T gamma0) {
  Layer<T> l;
  l.kind = LayerKind::Bn;
  l.name = std::move(name);
  l.bn = BnParams<T>::identity(c, gamma0);
  l.bn_prunable = prunable;
  return l;
}

template <typename T>
Layer<T> make_plain(LayerKind kind, std::string name) {
  Layer<T> l;
  l.kind = kind;
  l.name = std::move(name);
  return l;
}

// Layer order: head 1x1 conv (C0 -> W); D x residual block
// [BN -> GELU -> Conv1x1 -> BN -> GELU -> Conv1x1] with skip add; per SR
// spec a transposed conv followed by [BN -> GELU -> Conv3x3]; tail 1x1
// conv to 3 channels and a sigmoid.
//
// The first BN of each block normalizes the trunk itself and is excluded
// from pruning; the second BN and the SR BNs own a producer/consumer conv
// pair and are prunable. The SR refinement conv uses replicate padding so
// surgery's bias absorption stays exact at image borders.
//
// gamma0 is the BN scale init: 1 normally, 0.5 when sparsity training is
// enabled so the L1 pull starts mid-range.
template <typename T>
EnelfModel<T> build_model(const ModelConfig& cfg, Rng& rng, T gamma0 = T(1)) {
  cfg.validate();
  EnelfModel<T> m;
  m.config = cfg;
  const int64_t W = cfg.width;

  m.layers.push_back(
      make_conv<T>("head", cfg.in_channels(), W, 1, 1, 0, PadMode::Zero, rng));

  for (int64_t d = 0; d < cfg.d_blocks; ++d) {
    const std::string b = "block" + std::to_string(d);
    m.layers.push_back(make_plain<T>(LayerKind::ResBegin, b + ".skip"));
    m.layers.push_back(make_bn<T>(b + ".bn1", W, /*prunable=*/false, gamma0));
    m.layers.push_back(make_plain<T>(LayerKind::Gelu, b + ".gelu1"));
    m.layers.push_back(
        make_conv<T>(b + ".conv1", W, W, 1, 1, 0, PadMode::Zero, rng));
    m.layers.push_back(make_bn<T>(b + ".bn2", W, /*prunable=*/true, gamma0));
    m.layers.push_back(make_plain<T>(LayerKind::Gelu, b + ".gelu2"));
    m.layers.push_back(
        make_conv<T>(b + ".conv2", W, W, 1, 1, 0, PadMode::Zero, rng));
    m.layers.push_back(make_plain<T>(LayerKind::ResEnd, b + ".add"));
  }

  int64_t ch = W;
  for (size_t i = 0; i < cfg.sr_blocks.size(); ++i) {
    const SrSpec& sr = cfg.sr_blocks[i];
    const std::string b = "sr" + std::to_string(i);
    m.layers.push_back(make_convt<T>(b + ".convt", ch, sr.out_channels,
                                     sr.kernel, sr.stride, sr.padding, rng));
    m.layers.push_back(
        make_bn<T>(b + ".bn", sr.out_channels, /*prunable=*/true, gamma0));
    m.layers.push_back(make_plain<T>(LayerKind::Gelu, b + ".gelu"));
    m.layers.push_back(make_conv<T>(b + ".conv", sr.out_channels,
                                    sr.out_channels, 3, 1, 1,
                                    PadMode::Replicate, rng));
    ch = sr.out_channels;
  }

  m.layers.push_back(
      make_conv<T>("tail", ch, 3, 1, 1, 0, PadMode::Zero, rng));
  m.layers.push_back(make_plain<T>(LayerKind::Sigmoid, "sigmoid"));

  validate_channel_chain(m);
  return m;
}

// Checks every consecutive producer/consumer pair and residual width match.
template <typename T>
void validate_channel_chain(const EnelfModel<T>& m) {
  int64_t ch = m.config.in_channels();
  std::vector<int64_t> res_stack;
  for (const auto& l : m.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::ConvT:
        if (l.in_channels() != ch)
          throw ConfigError("channel chain broken at " + l.name + ": expects " +
                            std::to_string(l.in_channels()) + ", gets " +
                            std::to_string(ch));
        ch = l.out_channels();
        break;
      case LayerKind::Bn:
        if (l.in_channels() != ch)
          throw ConfigError("channel chain broken at " + l.name + ": BN over " +
                            std::to_string(l.in_channels()) + ", gets " +
                            std::to_string(ch));
        break;
      case LayerKind::ResBegin:
        res_stack.push_back(ch);
        break;
      case LayerKind::ResEnd:
        if (res_stack.empty())
          throw ConfigError("residual end without begin at " + l.name);
        if (res_stack.back() != ch)
          throw ConfigError("residual width mismatch at " + l.name + ": " +
                            std::to_string(res_stack.back()) + " vs " +
                            std::to_string(ch));
        res_stack.pop_back();
        break;
      default:
        break;
    }
  }
  if (!res_stack.empty()) throw ConfigError("unterminated residual block");
  if (ch != 3) throw ConfigError("model does not end in 3 channels");
}

// ---------------------------------------------------------------------------
// forward / backward

// Activation record for one forward pass: acts[i] is the input of layer i,
// acts.back() the network output. bn_caches aligns with layers.
template <typename T>
struct Tape {
  std::vector<Tensor<T>> acts;
  std::vector<BnCache<T>> bn_caches;
};

template <typename T>
Tensor<T> forward(EnelfModel<T>& m, const Tensor<T>& input,
                  Tape<T>* tape = nullptr) {
  if (input.shape().c != m.config.in_channels())
    throw ShapeError("forward: input channels " +
                     std::to_string(input.shape().c) + " != expected " +
                     std::to_string(m.config.in_channels()));
  if (tape) {
    tape->acts.clear();
    tape->bn_caches.assign(m.layers.size(), BnCache<T>{});
  }

  Tensor<T> cur = input;
  std::vector<Tensor<T>> res_stack;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    Layer<T>& l = m.layers[i];
    if (tape) tape->acts.push_back(cur);
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv2d_fwd(cur, l.conv);
        break;
      case LayerKind::ConvT:
        cur = convt2d_fwd(cur, l.conv);
        break;
      case LayerKind::Bn:
        cur = bn_fwd(cur, l.bn, m.mode, tape ? &tape->bn_caches[i] : nullptr);
        break;
      case LayerKind::Gelu:
        cur = gelu_fwd(cur);
        break;
      case LayerKind::Sigmoid:
        cur = sigmoid_fwd(cur);
        break;
      case LayerKind::ResBegin:
        res_stack.push_back(cur);
        break;
      case LayerKind::ResEnd: {
        if (res_stack.empty())
          throw ConfigError("forward: residual end without begin");
        const Tensor<T>& saved = res_stack.back();
        if (!saved.same_shape(cur))
          throw ShapeError("forward: residual shape mismatch at " + l.name);
        for (int64_t j = 0; j < cur.size(); ++j) cur[j] += saved[j];
        res_stack.pop_back();
        break;
      }
    }
  }
  if (tape) tape->acts.push_back(cur);
  return cur;
}

template <typename T>
Tensor<T> forward(EnelfModel<T>& m, const RayGrid<T>& grid,
                  Tape<T>* tape = nullptr) {
  return forward(m, grid.features, tape);
}

// Zeroes (allocating on first use) the gradient accumulators. In-place on
// reuse, so ParamRef pointers taken after the first call stay valid.
template <typename T>
void zero_grads(EnelfModel<T>& m) {
  for (auto& l : m.layers) {
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT) {
      if (l.grad_w.same_shape(l.conv.weight))
        l.grad_w.fill(T(0));
      else
        l.grad_w = Tensor<T>(l.conv.weight.shape());
      l.grad_b.assign(l.conv.bias.size(), T(0));
    } else if (l.kind == LayerKind::Bn) {
      l.grad_gamma.assign(l.bn.gamma.size(), T(0));
      l.grad_beta.assign(l.bn.beta.size(), T(0));
    }
  }
}

// Reverse pass over the taped forward; accumulates parameter gradients
// into the layers and returns the gradient w.r.t. the network input.
template <typename T>
Tensor<T> backward(EnelfModel<T>& m, const Tape<T>& tape,
                   const Tensor<T>& grad_output) {
  if (tape.acts.size() != m.layers.size() + 1)
    throw ShapeError("backward: tape does not match model");
  Tensor<T> g = grad_output;
  std::vector<Tensor<T>> res_grads;
  for (size_t ri = m.layers.size(); ri-- > 0;) {
    Layer<T>& l = m.layers[ri];
    const Tensor<T>& x = tape.acts[ri];
    switch (l.kind) {
      case LayerKind::Conv: {
        auto [gx, gw, gb] = conv2d_bwd(x, l.conv, g);
        for (int64_t j = 0; j < gw.size(); ++j) l.grad_w[j] += gw[j];
        for (size_t j = 0; j < gb.size(); ++j) l.grad_b[j] += gb[j];
        g = std::move(gx);
        break;
      }
      case LayerKind::ConvT: {
        auto [gx, gw, gb] = convt2d_bwd(x, l.conv, g);
        for (int64_t j = 0; j < gw.size(); ++j) l.grad_w[j] += gw[j];
        for (size_t j = 0; j < gb.size(); ++j) l.grad_b[j] += gb[j];
        g = std::move(gx);
        break;
      }
      case LayerKind::Bn: {
        auto [gx, gg, gb] =
            bn_bwd(x, l.bn, m.mode, g, tape.bn_caches[ri]);
        for (size_t j = 0; j < gg.size(); ++j) l.grad_gamma[j] += gg[j];
        for (size_t j = 0; j < gb.size(); ++j) l.grad_beta[j] += gb[j];
        g = std::move(gx);
        break;
      }
      case LayerKind::Gelu:
        g = gelu_bwd(x, g);
        break;
      case LayerKind::Sigmoid:
        g = sigmoid_bwd(tape.acts[ri + 1], g);
        break;
      case LayerKind::ResEnd:
        // the add fans the gradient out to both paths
        res_grads.push_back(g);
        break;
      case LayerKind::ResBegin: {
        if (res_grads.empty())
          throw ConfigError("backward: residual begin without end");
        const Tensor<T>& skip = res_grads.back();
        for (int64_t j = 0; j < g.size(); ++j) g[j] += skip[j];
        res_grads.pop_back();
        break;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// parameter enumeration (optimizer / checkpoint order)

template <typename T>
struct ParamRef {
  std::string name;
  T* value = nullptr;
  T* grad = nullptr;
  int64_t count = 0;
};

template <typename T>
std::vector<ParamRef<T>> collect_params(EnelfModel<T>& m,
                                        bool with_grads = false) {
  std::vector<ParamRef<T>> out;
  for (auto& l : m.layers) {
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT) {
      out.push_back({l.name + ".weight", l.conv.weight.data(),
                     with_grads ? l.grad_w.data() : nullptr,
                     l.conv.weight.size()});
      out.push_back({l.name + ".bias", l.conv.bias.data(),
                     with_grads ? l.grad_b.data() : nullptr,
                     static_cast<int64_t>(l.conv.bias.size())});
    } else if (l.kind == LayerKind::Bn) {
      out.push_back({l.name + ".gamma", l.bn.gamma.data(),
                     with_grads ? l.grad_gamma.data() : nullptr,
                     static_cast<int64_t>(l.bn.gamma.size())});
      out.push_back({l.name + ".beta", l.bn.beta.data(),
                     with_grads ? l.grad_beta.data() : nullptr,
                     static_cast<int64_t>(l.bn.beta.size())});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// accounting

struct CountReport {
  int64_t total = 0;
  std::vector<std::pair<std::string, int64_t>> per_layer;
};

// Learnable parameters: conv/convt Cout*Cin*k^2 + Cout, BN 2C (running
// stats excluded).
template <typename T>
CountReport count_params(const EnelfModel<T>& m) {
  CountReport r;
  for (const auto& l : m.layers) {
    int64_t n = 0;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT)
      n = l.conv.weight.size() + static_cast<int64_t>(l.conv.bias.size());
    else if (l.kind == LayerKind::Bn)
      n = 2 * l.bn.channels();
    else
      continue;
    r.per_layer.emplace_back(l.name, n);
    r.total += n;
  }
  return r;
}

// FLOP accounting at a given input grid. Conv: 2*Cin*k^2*Cout*Ho*Wo plus
// Cout*Ho*Wo for the bias; transposed convs counted identically at their
// output resolution. BN 4 and GELU 8 per element, sigmoid 4 per element.
template <typename T>
CountReport count_flops(const EnelfModel<T>& m, int64_t h0, int64_t w0) {
  CountReport r;
  int64_t h = h0, w = w0;
  for (const auto& l : m.layers) {
    int64_t fl = 0;
    switch (l.kind) {
      case LayerKind::Conv: {
        const int64_t k = l.conv.kernel();
        const int64_t ho = (h + 2 * l.conv.padding - k) / l.conv.stride + 1;
        const int64_t wo = (w + 2 * l.conv.padding - k) / l.conv.stride + 1;
        const int64_t cin = l.in_channels(), cout = l.out_channels();
        fl = 2 * cin * k * k * cout * ho * wo + cout * ho * wo;
        h = ho;
        w = wo;
        break;
      }
      case LayerKind::ConvT: {
        const int64_t k = l.conv.kernel();
        const int64_t ho = (h - 1) * l.conv.stride - 2 * l.conv.padding + k;
        const int64_t wo = (w - 1) * l.conv.stride - 2 * l.conv.padding + k;
        const int64_t cin = l.in_channels(), cout = l.out_channels();
        fl = 2 * cin * k * k * cout * ho * wo + cout * ho * wo;
        h = ho;
        w = wo;
        break;
      }
      case LayerKind::Bn:
        fl = 4 * l.bn.channels() * h * w;
        break;
      case LayerKind::Gelu:
        fl = 8 * current_channels(m, &l) * h * w;
        break;
      case LayerKind::Sigmoid:
        fl = 4 * 3 * h * w;
        break;
      default:
        break;
    }
    if (l.kind == LayerKind::ResBegin || l.kind == LayerKind::ResEnd) continue;
    r.per_layer.emplace_back(l.name, fl);
    r.total += fl;
  }
  return r;
}

// channel count flowing into a shape-preserving layer, derived by walking
// the chain up to it
template <typename T>
int64_t current_channels(const EnelfModel<T>& m, const Layer<T>* upto) {
  int64_t ch = m.config.in_channels();
  for (const auto& l : m.layers) {
    if (&l == upto) return ch;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT)
      ch = l.out_channels();
  }
  return ch;
}

// half-precision export accounting: 2 bytes per learnable parameter
template <typename T>
double model_size_mb(const EnelfModel<T>& m) {
  return static_cast<double>(count_params(m).total) * 2.0 / 1e6;
}

}  // namespace enelf
