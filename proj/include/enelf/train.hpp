#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "enelf/checkpoint.hpp"
#include "enelf/dataset.hpp"
#include "enelf/model.hpp"

namespace enelf {

struct TrainConfig {
  int64_t iters = 3000;
  int64_t batch_size = 2;  // whole views per step
  double lr = 5e-4;
  double sparsity_lambda = 1e-4;
  uint64_t seed = 1;
  int64_t eval_every = 100;
  int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string stage = "distill";

  void validate() const {
    if (iters < 0) throw ConfigError("TrainConfig: iters must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (sparsity_lambda < 0) throw ConfigError("TrainConfig: lambda must be >= 0");
  }
};

// step decay: halve at 25/50/75% of the run
inline double lr_at(const TrainConfig& cfg, int64_t step) {
  double lr = cfg.lr;
  for (double q : {0.25, 0.5, 0.75}) {
    const int64_t edge = static_cast<int64_t>(q * static_cast<double>(cfg.iters));
    if (edge > 0 && step >= edge) lr *= 0.5;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
std::pair<double, Tensor<T>> mse_loss(const Tensor<T>& pred,
                                      const Tensor<T>& target) {
  if (!pred.same_shape(target)) throw ShapeError("mse_loss: shape mismatch");
  const int64_t n = pred.size();
  Tensor<T> grad(pred.shape());
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += d * d;
    grad[i] = static_cast<T>(2.0 * d / static_cast<double>(n));
  }
  return {acc / static_cast<double>(n), std::move(grad)};
}

template <typename T>
struct SparsityResult {
  double penalty = 0;
  // (layer index, lambda * sign(gamma)) for each prunable BN
  std::vector<std::pair<size_t, std::vector<T>>> grad_gamma;
};

// L1 pull on the BN scaling factors of prunable layers only;
// sign(0) taken as 0.
template <typename T>
SparsityResult<T> sparsity_penalty(const EnelfModel<T>& m, double lambda) {
  SparsityResult<T> r;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer<T>& l = m.layers[i];
    if (l.kind != LayerKind::Bn || !l.bn_prunable) continue;
    std::vector<T> g(l.bn.gamma.size(), T(0));
    for (size_t c = 0; c < l.bn.gamma.size(); ++c) {
      const double v = static_cast<double>(l.bn.gamma[c]);
      r.penalty += lambda * std::abs(v);
      g[c] = static_cast<T>(v > 0 ? lambda : (v < 0 ? -lambda : 0.0));
    }
    r.grad_gamma.emplace_back(i, std::move(g));
  }
  return r;
}

template <typename T>
double sum_abs_prunable_gamma(const EnelfModel<T>& m) {
  double acc = 0;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::Bn && l.bn_prunable)
      for (const T& g : l.bn.gamma) acc += std::abs(static_cast<double>(g));
  return acc;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m1, m2;  // aligned with collect_params order
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  template <typename Refs>
  void init(const Refs& params) {
    m1.clear();
    m2.clear();
    for (const auto& p : params) {
      m1.emplace_back(p.count, T(0));
      m2.emplace_back(p.count, T(0));
    }
    step = 0;
  }
};

// standard bias-corrected update; reads grads, writes params
template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, AdamState<T>& st, double lr) {
  if (params.size() != st.m1.size())
    throw ConfigError("adam_step: state does not match parameter list");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].value;
    const T* g = params[i].grad;
    std::vector<T>& m = st.m1[i];
    std::vector<T>& v = st.m2[i];
    for (int64_t j = 0; j < params[i].count; ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      const double vj = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] -= static_cast<T>(lr * (mj / c1) / (std::sqrt(vj / c2) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainRow {
  int64_t step;
  double loss, psnr, lr, sum_abs_gamma;
};

struct TrainLog {
  std::vector<TrainRow> rows;
};

namespace detail {

inline double quick_psnr(double mse) {
  return 10.0 * std::log10(1.0 / std::max(mse, 1e-10));
}

// names the first layer whose taped output is not finite
template <typename T>
std::string first_nan_layer(const EnelfModel<T>& m, const Tape<T>& tape) {
  for (size_t i = 0; i + 1 < tape.acts.size(); ++i)
    if (!tape.acts[i + 1].all_finite())
      return m.layers[i].name;
  return "loss";
}

}  // namespace detail

// Stage-1 / stage-3 optimization: MSE photometric loss plus the L1 BN
// penalty, Adam with step decay, deterministic epoch shuffling. Views are
// encoded once and cached. Logs every eval_every steps (and step 0);
// checkpoints are written to ckpt_path when non-empty.
template <typename T>
TrainLog train_loop(
    EnelfModel<T>& model, const DistilledDataset& ds, const TrainConfig& cfg,
    const std::string& log_path = "", const std::string& ckpt_path = "",
    const std::function<void(int64_t, EnelfModel<T>&)>& on_eval = nullptr) {
  cfg.validate();
  if (ds.view_count() < 1) throw ConfigError("train_loop: empty dataset");
  if (ds.height != model.config.render_h() ||
      ds.width != model.config.render_w())
    throw ConfigError("train_loop: dataset resolution " +
                      std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                      " != model output " +
                      std::to_string(model.config.render_h()) + "x" +
                      std::to_string(model.config.render_w()));

  TrainLog log;
  std::ofstream csv;
  if (!log_path.empty()) {
    csv.open(log_path, std::ios::app);
    if (!csv) throw IoError(IoCode::OpenFail, "cannot open log: " + log_path);
    if (csv.tellp() == 0) csv << "step,loss,psnr,lr,sum_abs_gamma\n";
  }

  const int64_t n_views = ds.view_count();
  const ModelConfig& mc = model.config;

  // per-view encoded grids, computed on first use
  std::vector<Tensor<T>> enc_cache(n_views);
  auto encoded = [&](int64_t v) -> const Tensor<T>& {
    if (enc_cache[v].empty()) {
      enc_cache[v] = encode_rays<T>(ds.poses[v], ds.height, ds.width, mc.ray,
                                    mc.input_h, mc.input_w)
                         .features;
    }
    return enc_cache[v];
  };

  Rng shuffle_rng(cfg.seed);
  std::vector<int64_t> order(n_views);
  for (int64_t i = 0; i < n_views; ++i) order[i] = i;
  int64_t cursor = n_views;  // force shuffle on first use
  auto next_view = [&]() {
    if (cursor >= n_views) {
      for (int64_t i = n_views - 1; i > 0; --i) {
        const int64_t j =
            static_cast<int64_t>(shuffle_rng.next_u64() % (i + 1));
        std::swap(order[i], order[j]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  // grads must exist before taking refs; zero_grads keeps them in place
  // afterwards
  zero_grads(model);
  auto params = collect_params(model, /*with_grads=*/true);
  AdamState<T> adam;
  adam.init(params);

  const int64_t B = cfg.batch_size;
  Tape<T> tape;

  for (int64_t step = 0; step < cfg.iters; ++step) {
    std::vector<int64_t> batch(B);
    for (int64_t b = 0; b < B; ++b) batch[b] = next_view();

    Tensor<T> input(Shape4{B, mc.in_channels(), mc.input_h, mc.input_w});
    Tensor<T> target(Shape4{B, 3, ds.height, ds.width});
    for (int64_t b = 0; b < B; ++b) {
      const Tensor<T>& e = encoded(batch[b]);
      std::copy(e.data(), e.data() + e.size(),
                input.data() + b * e.size());
      const TensorF& img = ds.images[batch[b]];
      T* dst = target.data() + b * img.size();
      for (int64_t i = 0; i < img.size(); ++i) dst[i] = static_cast<T>(img[i]);
    }

    model.mode = BnMode::Train;
    Tensor<T> pred = forward(model, input, &tape);
    auto [mse, grad_pred] = mse_loss(pred, target);
    auto sparse = sparsity_penalty(model, cfg.sparsity_lambda);
    const double loss = mse + sparse.penalty;

    if (!std::isfinite(loss)) {
      throw std::runtime_error("train_loop: NaN loss at step " +
                               std::to_string(step) + ", first NaN in layer " +
                               detail::first_nan_layer(model, tape));
    }

    if (step % std::max<int64_t>(1, cfg.eval_every) == 0) {
      const TrainRow row{step, loss, detail::quick_psnr(mse), lr_at(cfg, step),
                         sum_abs_prunable_gamma(model)};
      log.rows.push_back(row);
      if (csv.is_open())
        csv << row.step << "," << row.loss << "," << row.psnr << "," << row.lr
            << "," << row.sum_abs_gamma << "\n"
            << std::flush;
      if (on_eval) on_eval(step, model);
    }

    zero_grads(model);
    backward(model, tape, grad_pred);
    for (auto& [li, g] : sparse.grad_gamma) {
      auto& gg = model.layers[li].grad_gamma;
      for (size_t c = 0; c < g.size(); ++c) gg[c] += g[c];
    }
    adam_step(params, adam, lr_at(cfg, step));

    if (!ckpt_path.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.iters) {
      save_checkpoint(model, ckpt_path + ".step" + std::to_string(step + 1));
    }
  }

  model.mode = BnMode::Infer;
  if (!ckpt_path.empty() && cfg.iters > 0) save_checkpoint(model, ckpt_path);
  return log;
}

}  // namespace enelf
