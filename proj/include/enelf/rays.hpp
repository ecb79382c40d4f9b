#pragma once

#include "enelf/geometry.hpp"
#include "enelf/tensor.hpp"

namespace enelf {

// Ray sampling / positional-encoding parameters.
struct RayCfg {
  int64_t points = 4;  // K sample points per ray
  int64_t freqs = 6;   // L frequency bands
  double t_near = 0.8;
  double t_far = 5.0;

  // channels per encoded grid: 3 coordinates x K points x (1 + 2L)
  int64_t channels() const { return 3 * points * (2 * freqs + 1); }
};

template <typename T>
struct RayGrid {
  Tensor<T> features;  // [1, C0, H0, W0]
  CameraPose pose;
  double grid_focal = 0;  // focal rescaled to the grid resolution
};

// Encodes one scalar coordinate as [p, sin(2^0 pi p), cos(2^0 pi p), ...,
// sin(2^(L-1) pi p), cos(2^(L-1) pi p)] into out[0..2L].
template <typename T>
inline void encode_coord(double p, int64_t freqs, T* out, int64_t stride) {
  out[0] = static_cast<T>(p);
  double scale = M_PI;
  for (int64_t f = 0; f < freqs; ++f) {
    out[(2 * f + 1) * stride] = static_cast<T>(std::sin(scale * p));
    out[(2 * f + 2) * stride] = static_cast<T>(std::cos(scale * p));
    scale *= 2.0;
  }
}

// Casts a ray through every cell of an h0 x w0 grid, samples K points at
// depths linspace(t_near, t_far), and positionally encodes each coordinate.
// Channel order is frozen as ((point * 3 + coordinate) * (2L+1) + enc) with
// enc 0 the raw value, then interleaved sin/cos per frequency.
//
// `render_h`/`render_w` are the resolution pose.focal refers to; the grid
// reuses the same pinhole with focal scaled by h0/render_h, so grid rays
// pass through the centers of the corresponding render-pixel blocks.
template <typename T>
RayGrid<T> encode_rays(const CameraPose& pose, int64_t render_h,
                       int64_t render_w, const RayCfg& rc, int64_t h0,
                       int64_t w0) {
  if (rc.t_near >= rc.t_far)
    throw ConfigError("encode_rays: t_near must be < t_far");
  if (rc.points < 1 || rc.freqs < 1)
    throw ConfigError("encode_rays: need points >= 1 and freqs >= 1");
  if (!pose.rotation.orthonormal())
    throw ConfigError("encode_rays: pose rotation is not orthonormal");
  if (pose.focal <= 0) throw ConfigError("encode_rays: focal must be > 0");
  (void)render_w;

  const double grid_focal =
      pose.focal * static_cast<double>(h0) / static_cast<double>(render_h);
  const int64_t K = rc.points, L = rc.freqs;
  const int64_t enc = 2 * L + 1;

  RayGrid<T> grid;
  grid.pose = pose;
  grid.grid_focal = grid_focal;
  grid.features = Tensor<T>(Shape4{1, rc.channels(), h0, w0});

  const int64_t plane = h0 * w0;
  T* base = grid.features.data();

  for (int64_t r = 0; r < h0; ++r)
    for (int64_t c = 0; c < w0; ++c) {
      const Ray ray = ray_through_pixel(pose, grid_focal, h0, w0, r, c);
      const int64_t px = r * w0 + c;
      for (int64_t k = 0; k < K; ++k) {
        const double t =
            (K == 1) ? rc.t_near
                     : rc.t_near + (rc.t_far - rc.t_near) *
                                       static_cast<double>(k) /
                                       static_cast<double>(K - 1);
        const Vec3 p = ray.origin + ray.dir * t;
        const double coords[3] = {p.x, p.y, p.z};
        for (int64_t d = 0; d < 3; ++d) {
          const int64_t ch0 = (k * 3 + d) * enc;
          encode_coord(coords[d], L, base + ch0 * plane + px, plane);
        }
      }
    }
  return grid;
}

}  // namespace enelf
