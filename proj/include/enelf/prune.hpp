#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <string>
#include <vector>

#include "enelf/model.hpp"

namespace enelf {

// Keep/drop decision per prunable BN layer, plus the global threshold
// that produced it.
struct PruneMask {
  struct LayerMask {
    size_t layer_index = 0;  // position in EnelfModel::layers
    std::string name;
    std::vector<uint8_t> keep;  // 1 = keep channel
    int64_t kept() const {
      int64_t n = 0;
      for (uint8_t k : keep) n += k;
      return n;
    }
    int64_t dropped() const {
      return static_cast<int64_t>(keep.size()) - kept();
    }
  };

  std::vector<LayerMask> layers;
  double threshold = -1;  // tau; |gamma| <= tau is the drop criterion
  double ratio = 0;

  int64_t total_channels() const {
    int64_t n = 0;
    for (const auto& l : layers) n += static_cast<int64_t>(l.keep.size());
    return n;
  }
  int64_t total_dropped() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.dropped();
    return n;
  }
};

namespace detail {

template <typename T>
std::vector<size_t> prunable_bn_indices(const EnelfModel<T>& m) {
  std::vector<size_t> out;
  for (size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].kind == LayerKind::Bn && m.layers[i].bn_prunable)
      out.push_back(i);
  return out;
}

inline int64_t layer_floor(int64_t channels) {
  return std::max<int64_t>(
      1, static_cast<int64_t>(
             std::ceil(0.1 * static_cast<double>(channels))));
}

}  // namespace detail

// Global-threshold channel selection over all prunable BN scaling factors:
// tau is the ceil(r * total)-th smallest |gamma|; channels with
// |gamma| <= tau are dropped, ties broken by (layer index, channel index)
// ascending, subject to a per-layer keep floor of max(1, ceil(0.1*C)).
template <typename T>
PruneMask compute_mask(const EnelfModel<T>& m, double ratio) {
  if (ratio < 0 || ratio >= 1)
    throw ConfigError("compute_mask: ratio must be in [0,1)");
  const auto idx = detail::prunable_bn_indices(m);
  if (idx.empty())
    throw ConfigError("compute_mask: model has no prunable BN layers");

  PruneMask mask;
  mask.ratio = ratio;
  for (size_t i : idx) {
    const Layer<T>& l = m.layers[i];
    PruneMask::LayerMask lm;
    lm.layer_index = i;
    lm.name = l.name;
    lm.keep.assign(l.bn.gamma.size(), 1);
    mask.layers.push_back(std::move(lm));
  }

  const int64_t total = mask.total_channels();
  const int64_t quota =
      static_cast<int64_t>(std::ceil(ratio * static_cast<double>(total)));
  if (quota == 0) {
    mask.threshold = -1;  // keep-all sentinel: |gamma| > -1 always
    return mask;
  }

  struct Cand {
    double mag;
    size_t order;  // position within mask.layers
    int64_t ch;
  };
  std::vector<Cand> cands;
  cands.reserve(total);
  for (size_t o = 0; o < idx.size(); ++o) {
    const auto& gamma = m.layers[idx[o]].bn.gamma;
    for (int64_t c = 0; c < static_cast<int64_t>(gamma.size()); ++c)
      cands.push_back({std::abs(static_cast<double>(gamma[c])), o, c});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.mag != b.mag) return a.mag < b.mag;
    if (a.order != b.order) return a.order < b.order;
    return a.ch < b.ch;
  });

  mask.threshold = cands[static_cast<size_t>(quota - 1)].mag;

  std::vector<int64_t> kept(mask.layers.size());
  for (size_t o = 0; o < mask.layers.size(); ++o)
    kept[o] = static_cast<int64_t>(mask.layers[o].keep.size());

  int64_t dropped = 0;
  for (const Cand& c : cands) {
    if (dropped >= quota || c.mag > mask.threshold) break;
    const int64_t floor =
        detail::layer_floor(static_cast<int64_t>(mask.layers[c.order].keep.size()));
    if (kept[c.order] - 1 < floor) continue;  // floor forces this keep
    mask.layers[c.order].keep[static_cast<size_t>(c.ch)] = 0;
    --kept[c.order];
    ++dropped;
  }
  return mask;
}

// Fraction of keep bits that differ (Hamming distance over the
// concatenated mask, normalized to [0,1]).
inline double mask_distance(const PruneMask& a, const PruneMask& b) {
  if (a.layers.size() != b.layers.size())
    throw ConfigError("mask_distance: masks have different structure");
  int64_t total = 0, diff = 0;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const auto& ka = a.layers[i].keep;
    const auto& kb = b.layers[i].keep;
    if (ka.size() != kb.size())
      throw ConfigError("mask_distance: masks have different structure");
    for (size_t c = 0; c < ka.size(); ++c) {
      ++total;
      diff += (ka[c] != kb[c]) ? 1 : 0;
    }
  }
  if (total == 0) return 0;
  return static_cast<double>(diff) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// surgery

namespace detail {

template <typename T>
std::vector<T> filter_vec(const std::vector<T>& v,
                          const std::vector<uint8_t>& keep) {
  std::vector<T> out;
  out.reserve(v.size());
  for (size_t i = 0; i < v.size(); ++i)
    if (keep[i]) out.push_back(v[i]);
  return out;
}

// drop rows (dim0) of a [D0, D1, k, k] weight
template <typename T>
Tensor<T> filter_dim0(const Tensor<T>& w, const std::vector<uint8_t>& keep,
                      int64_t kept) {
  const Shape4 s = w.shape();
  Tensor<T> out(Shape4{kept, s.c, s.h, s.w});
  const int64_t slice = s.c * s.h * s.w;
  int64_t o = 0;
  for (int64_t i = 0; i < s.n; ++i) {
    if (!keep[static_cast<size_t>(i)]) continue;
    std::copy(w.data() + i * slice, w.data() + (i + 1) * slice,
              out.data() + o * slice);
    ++o;
  }
  return out;
}

// drop slices of dim1 of a [D0, D1, k, k] weight
template <typename T>
Tensor<T> filter_dim1(const Tensor<T>& w, const std::vector<uint8_t>& keep,
                      int64_t kept) {
  const Shape4 s = w.shape();
  Tensor<T> out(Shape4{s.n, kept, s.h, s.w});
  const int64_t kk = s.h * s.w;
  for (int64_t i = 0; i < s.n; ++i) {
    int64_t o = 0;
    for (int64_t j = 0; j < s.c; ++j) {
      if (!keep[static_cast<size_t>(j)]) continue;
      std::copy(w.data() + (i * s.c + j) * kk, w.data() + (i * s.c + j + 1) * kk,
                out.data() + (i * kept + o) * kk);
      ++o;
    }
  }
  return out;
}

}  // namespace detail

// Rebuilds the model with masked channels physically removed. For each
// dropped BN channel c the producing conv loses output channel c and the
// consuming conv loses input channel c; the constant the dropped channel
// would have carried in infer mode (BN output beta_c, through the GELU)
// is absorbed into the consumer's bias. The result's infer-mode forward
// equals the original's with gamma_c := 0.
template <typename T>
EnelfModel<T> apply_surgery(const EnelfModel<T>& model,
                            const PruneMask& mask) {
  EnelfModel<T> m = model;  // deep copy (value semantics)

  for (const auto& lm : mask.layers) {
    const size_t bi = lm.layer_index;
    if (bi >= m.layers.size() || m.layers[bi].kind != LayerKind::Bn ||
        m.layers[bi].name != lm.name ||
        m.layers[bi].bn.gamma.size() != lm.keep.size())
      throw ConfigError("apply_surgery: mask does not match model at " +
                        lm.name);
    if (!m.layers[bi].bn_prunable)
      throw ConfigError("apply_surgery: " + lm.name + " is not prunable");

    const int64_t kept = lm.kept();
    if (kept == 0)
      throw ConfigError("apply_surgery: mask drops every channel of " +
                        lm.name);
    if (kept == static_cast<int64_t>(lm.keep.size())) continue;

    // architecture guarantees producer conv at bi-1, GELU at bi+1,
    // consumer conv at bi+2
    if (bi < 1 || bi + 2 >= m.layers.size())
      throw ConfigError("apply_surgery: " + lm.name + " has no conv pair");
    Layer<T>& producer = m.layers[bi - 1];
    Layer<T>& bn = m.layers[bi];
    Layer<T>& act = m.layers[bi + 1];
    Layer<T>& consumer = m.layers[bi + 2];
    if ((producer.kind != LayerKind::Conv && producer.kind != LayerKind::ConvT) ||
        act.kind != LayerKind::Gelu || consumer.kind != LayerKind::Conv)
      throw ConfigError("apply_surgery: unexpected layer pattern around " +
                        lm.name);

    // absorb the dropped channels' constants into the consumer bias
    const Shape4 cw = consumer.conv.weight.shape();
    for (size_t c = 0; c < lm.keep.size(); ++c) {
      if (lm.keep[c]) continue;
      const T constant = gelu_scalar(bn.bn.beta[c]);
      for (int64_t o = 0; o < cw.n; ++o) {
        T tap_sum = 0;
        const T* wk =
            consumer.conv.weight.data() + ((o * cw.c + static_cast<int64_t>(c)) * cw.h) * cw.w;
        for (int64_t t = 0; t < cw.h * cw.w; ++t) tap_sum += wk[t];
        consumer.conv.bias[static_cast<size_t>(o)] += constant * tap_sum;
      }
    }

    // shrink consumer input channels
    consumer.conv.weight = detail::filter_dim1(consumer.conv.weight, lm.keep, kept);

    // shrink producer output channels
    if (producer.kind == LayerKind::Conv)
      producer.conv.weight = detail::filter_dim0(producer.conv.weight, lm.keep, kept);
    else
      producer.conv.weight = detail::filter_dim1(producer.conv.weight, lm.keep, kept);
    producer.conv.bias = detail::filter_vec(producer.conv.bias, lm.keep);

    // shrink the BN itself
    bn.bn.gamma = detail::filter_vec(bn.bn.gamma, lm.keep);
    bn.bn.beta = detail::filter_vec(bn.bn.beta, lm.keep);
    bn.bn.running_mean = detail::filter_vec(bn.bn.running_mean, lm.keep);
    bn.bn.running_var = detail::filter_vec(bn.bn.running_var, lm.keep);

    // drop stale gradient buffers
    producer.grad_w = Tensor<T>();
    producer.grad_b.clear();
    consumer.grad_w = Tensor<T>();
    consumer.grad_b.clear();
    bn.grad_gamma.clear();
    bn.grad_beta.clear();
  }

  validate_channel_chain(m);
  return m;
}

// ---------------------------------------------------------------------------
// early-bird ticket detection

struct MaskHistory {
  struct Snapshot {
    int64_t iteration;
    PruneMask mask;
  };
  std::vector<Snapshot> snapshots;

  void add(int64_t iteration, PruneMask mask) {
    if (!snapshots.empty() && iteration <= snapshots.back().iteration)
      throw ConfigError("MaskHistory: iterations must be strictly increasing");
    snapshots.push_back({iteration, std::move(mask)});
  }
};

struct EbtResult {
  bool found = false;
  size_t snapshot_index = 0;
  int64_t iteration = 0;
};

// Earliest snapshot i whose trailing window of t snapshots has max
// pairwise mask distance < epsilon.
inline EbtResult ebt_detect(const MaskHistory& history, double epsilon = 0.01,
                            size_t window = 5) {
  const auto& snaps = history.snapshots;
  if (window < 2) throw ConfigError("ebt_detect: window must be >= 2");
  if (snaps.size() < window) return {};
  for (size_t i = window - 1; i < snaps.size(); ++i) {
    double max_d = 0;
    for (size_t a = i + 1 - window; a <= i; ++a)
      for (size_t b = a + 1; b <= i; ++b)
        max_d = std::max(max_d, mask_distance(snaps[a].mask, snaps[b].mask));
    if (max_d < epsilon) return {true, i, snaps[i].iteration};
  }
  return {};
}

// ---------------------------------------------------------------------------
// report

template <typename T>
nlohmann::json prune_report(const EnelfModel<T>& before,
                            const EnelfModel<T>& after,
                            const PruneMask& mask) {
  nlohmann::json per_layer = nlohmann::json::array();
  for (const auto& lm : mask.layers)
    per_layer.push_back({{"name", lm.name},
                         {"kept", lm.kept()},
                         {"dropped", lm.dropped()}});
  const auto& cfg = before.config;
  return {{"ratio", mask.ratio},
          {"threshold", mask.threshold},
          {"per_layer", per_layer},
          {"params_before", count_params(before).total},
          {"params_after", count_params(after).total},
          {"flops_before", count_flops(before, cfg.input_h, cfg.input_w).total},
          {"flops_after", count_flops(after, cfg.input_h, cfg.input_w).total},
          {"prunable_policy",
           "block-internal and SR-tower BNs; trunk/skip-path BNs excluded"}};
}

}  // namespace enelf
