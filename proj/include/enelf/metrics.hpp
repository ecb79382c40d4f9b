#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "enelf/dataset.hpp"
#include "enelf/image_io.hpp"
#include "enelf/model.hpp"

namespace enelf {

// 10*log10(1 / max(MSE, 1e-10)) with MAX = 1; identical images clamp to
// 100 dB.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!pred.same_shape(target)) throw ShapeError("psnr: shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(pred.size());
  return 10.0 * std::log10(1.0 / std::max(mse, 1e-10));
}

namespace detail {

inline std::vector<double> ssim_gaussian11() {
  std::vector<double> w(11);
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// separable valid-mode filter of one [H, W] plane, horizontal then vertical
inline std::vector<double> filter_valid(const std::vector<double>& img,
                                        int64_t h, int64_t w,
                                        const std::vector<double>& k) {
  const int64_t kn = static_cast<int64_t>(k.size());
  const int64_t wo = w - kn + 1, ho = h - kn + 1;
  std::vector<double> tmp(static_cast<size_t>(h * wo));
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < wo; ++c) {
      double acc = 0;
      for (int64_t i = 0; i < kn; ++i) acc += k[i] * img[r * w + c + i];
      tmp[r * wo + c] = acc;
    }
  std::vector<double> out(static_cast<size_t>(ho * wo));
  for (int64_t r = 0; r < ho; ++r)
    for (int64_t c = 0; c < wo; ++c) {
      double acc = 0;
      for (int64_t i = 0; i < kn; ++i) acc += k[i] * tmp[(r + i) * wo + c];
      out[r * wo + c] = acc;
    }
  return out;
}

}  // namespace detail

// Mean SSIM: per-channel sliding 11x11 Gaussian window (sigma 1.5),
// K1=0.01, K2=0.03, L=1, valid-window averaging, channels averaged.
template <typename T>
double ssim(const Tensor<T>& pred, const Tensor<T>& target) {
  if (!pred.same_shape(target)) throw ShapeError("ssim: shape mismatch");
  const int64_t N = pred.shape().n, C = pred.shape().c, H = pred.shape().h,
                W = pred.shape().w;
  if (H < 11 || W < 11)
    throw ShapeError("ssim: image smaller than the 11x11 window");

  static const std::vector<double> kern = detail::ssim_gaussian11();
  const double c1 = 1e-4;  // (K1*L)^2
  const double c2 = 9e-4;  // (K2*L)^2

  double total = 0;
  int64_t planes = 0;
  std::vector<double> x(static_cast<size_t>(H * W)), y(x.size()), xx(x.size()),
      yy(x.size()), xy(x.size());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* px = pred.data() + ((n * C + c) * H) * W;
      const T* py = target.data() + ((n * C + c) * H) * W;
      for (int64_t i = 0; i < H * W; ++i) {
        x[i] = px[i];
        y[i] = py[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      const auto mx = detail::filter_valid(x, H, W, kern);
      const auto my = detail::filter_valid(y, H, W, kern);
      const auto mxx = detail::filter_valid(xx, H, W, kern);
      const auto myy = detail::filter_valid(yy, H, W, kern);
      const auto mxy = detail::filter_valid(xy, H, W, kern);
      double acc = 0;
      for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cov = mxy[i] - mx[i] * my[i];
        acc += (2 * mx[i] * my[i] + c1) * (2 * cov + c2) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += acc / static_cast<double>(mx.size());
      ++planes;
    }
  return total / static_cast<double>(planes);
}

// ---------------------------------------------------------------------------
// latency

struct LatencyStats {
  std::vector<double> samples_ms;
  double median_ms = 0;
  double p90_ms = 0;
  double rays_per_sec = 0;
};

// Wall-clock forward latency over `runs` measured passes after `warmup`
// unmeasured ones. rays/sec counts output pixels at the render resolution.
// single_thread pins the worker pool for stable numbers.
template <typename T>
LatencyStats bench_latency(EnelfModel<T>& model, int64_t warmup, int64_t runs,
                           bool single_thread = false) {
  if (runs < 1) throw ConfigError("bench_latency: runs must be >= 1");
  const ModelConfig& cfg = model.config;

#ifdef _OPENMP
  const int prev_threads = omp_get_max_threads();
  if (single_thread) omp_set_num_threads(1);
#else
  (void)single_thread;
#endif

  Rng rng(12345);
  Tensor<T> input = tensor_random<T>(
      Shape4{1, cfg.in_channels(), cfg.input_h, cfg.input_w}, rng,
      Dist::uniform(-1, 1));
  model.mode = BnMode::Infer;

  for (int64_t i = 0; i < warmup; ++i) (void)forward(model, input);

  LatencyStats st;
  st.samples_ms.reserve(runs);
  for (int64_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)forward(model, input);
    const auto t1 = std::chrono::steady_clock::now();
    st.samples_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }

#ifdef _OPENMP
  if (single_thread) omp_set_num_threads(prev_threads);
#endif

  std::vector<double> sorted = st.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  st.median_ms = (n % 2 == 1) ? sorted[n / 2]
                              : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  st.p90_ms = sorted[std::min(
      n - 1, static_cast<size_t>(std::ceil(0.9 * static_cast<double>(n))) - 1)];
  st.rays_per_sec = static_cast<double>(cfg.render_h() * cfg.render_w()) /
                    (st.median_ms / 1000.0);
  return st;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalReport {
  std::vector<double> per_view_psnr;
  std::vector<double> per_view_ssim;
  double mean_psnr = 0;
  double mean_ssim = 0;
  int64_t params = 0;
  int64_t flops = 0;
  double size_mb = 0;
  bool has_latency = false;
  double median_ms = 0, p90_ms = 0, rays_per_sec = 0;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j{{"per_view_psnr", r.per_view_psnr},
                   {"per_view_ssim", r.per_view_ssim},
                   {"mean_psnr", r.mean_psnr},
                   {"mean_ssim", r.mean_ssim},
                   {"params", r.params},
                   {"flops", r.flops},
                   {"size_mb", r.size_mb}};
  if (r.has_latency)
    j["latency"] = {{"median_ms", r.median_ms},
                    {"p90_ms", r.p90_ms},
                    {"rays_per_sec", r.rays_per_sec}};
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.per_view_psnr = j.at("per_view_psnr").get<std::vector<double>>();
  r.per_view_ssim = j.at("per_view_ssim").get<std::vector<double>>();
  r.mean_psnr = j.at("mean_psnr");
  r.mean_ssim = j.at("mean_ssim");
  r.params = j.at("params");
  r.flops = j.at("flops");
  r.size_mb = j.at("size_mb");
  if (j.contains("latency")) {
    r.has_latency = true;
    r.median_ms = j["latency"].at("median_ms");
    r.p90_ms = j["latency"].at("p90_ms");
    r.rays_per_sec = j["latency"].at("rays_per_sec");
  }
  return r;
}

// Renders every view of the dataset in infer mode and aggregates quality
// plus the model's accounting numbers. Optionally dumps per-view PPM pairs
// for qualitative comparison.
template <typename T>
EvalReport evaluate(EnelfModel<T>& model, const DistilledDataset& ds,
                    const std::string& dump_dir = "") {
  if (ds.view_count() == 0)
    throw ConfigError("evaluate: empty test set");
  if (ds.height != model.config.render_h() ||
      ds.width != model.config.render_w())
    throw ConfigError("evaluate: dataset resolution does not match model");
  if (!dump_dir.empty()) std::filesystem::create_directories(dump_dir);

  model.mode = BnMode::Infer;
  EvalReport r;
  for (int64_t v = 0; v < ds.view_count(); ++v) {
    const RayGrid<T> grid =
        encode_rays<T>(ds.poses[v], ds.height, ds.width, model.config.ray,
                       model.config.input_h, model.config.input_w);
    Tensor<T> pred = forward(model, grid.features);
    Tensor<T> target = ds.images[v].template cast<T>();
    r.per_view_psnr.push_back(psnr(pred, target));
    r.per_view_ssim.push_back(ssim(pred, target));
    if (!dump_dir.empty()) {
      write_ppm(pred, 0, dump_dir + "/view" + std::to_string(v) + "_pred.ppm");
      write_ppm(target, 0, dump_dir + "/view" + std::to_string(v) + "_gt.ppm");
    }
  }
  const auto n = static_cast<double>(ds.view_count());
  for (double v : r.per_view_psnr) r.mean_psnr += v / n;
  for (double v : r.per_view_ssim) r.mean_ssim += v / n;
  r.params = count_params(model).total;
  r.flops = count_flops(model, model.config.input_h, model.config.input_w).total;
  r.size_mb = model_size_mb(model);
  return r;
}

}  // namespace enelf
