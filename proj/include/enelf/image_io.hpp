#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>

#include "enelf/io_util.hpp"
#include "enelf/tensor.hpp"

namespace enelf {

// Binary PPM (P6, 8-bit). Values round(clamp(v,0,1)*255).
template <typename T>
void write_ppm(const Tensor<T>& img, int64_t n, const std::string& path) {
  if (img.shape().c != 3 || n >= img.shape().n)
    throw ShapeError("write_ppm: need a [N,3,H,W] tensor and valid index");
  const int64_t H = img.shape().h, W = img.shape().w;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoCode::OpenFail, "cannot open for write: " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(static_cast<double>(img.at(n, ch, r, c)),
                                    0.0, 1.0);
        f.put(static_cast<char>(std::lround(v * 255.0)));
      }
  if (!f) throw IoError(IoCode::OpenFail, "write failed: " + path);
}

}  // namespace enelf
