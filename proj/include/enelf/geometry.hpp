#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "enelf/tensor.hpp"

namespace enelf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return {x / n, y / n, z / n};
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// Column-major basis: columns are the camera axes in world space.
struct Mat3 {
  // m[r][c]
  double m[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

  Vec3 mul(const Vec3& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }

  Vec3 col(int c) const { return {m[0][c], m[1][c], m[2][c]}; }

  static Mat3 from_cols(const Vec3& x, const Vec3& y, const Vec3& z) {
    Mat3 r;
    r.m[0][0] = x.x; r.m[1][0] = x.y; r.m[2][0] = x.z;
    r.m[0][1] = y.x; r.m[1][1] = y.y; r.m[2][1] = y.z;
    r.m[0][2] = z.x; r.m[1][2] = z.y; r.m[2][2] = z.z;
    return r;
  }

  bool orthonormal(double tol = 1e-6) const {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const double d = col(i).dot(col(j)) - (i == j ? 1.0 : 0.0);
        if (std::abs(d) > tol) return false;
      }
    return true;
  }
};

// Camera-to-world pose. The camera looks along its -z axis; x is right,
// y is up in the image plane. focal is in pixels at the pose's native
// render resolution.
struct CameraPose {
  Vec3 position;
  Mat3 rotation;
  double focal = 0;
};

// look-at `target` with world up +y
inline Mat3 look_at_rotation(const Vec3& position, const Vec3& target,
                             const Vec3& up = {0, 1, 0}) {
  const Vec3 z = (position - target).normalized();  // camera backs away along +z
  const Vec3 x = up.cross(z).normalized();
  const Vec3 y = z.cross(x);
  return Mat3::from_cols(x, y, z);
}

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
};

// The one ray-generation routine shared by the renderer and the ray
// encoder: ray through the center of pixel (row, col) of an h x w image
// with principal point at the image center.
inline Ray ray_through_pixel(const CameraPose& pose, double focal, int64_t h,
                             int64_t w, int64_t row, int64_t col) {
  if (focal <= 0) throw ConfigError("ray_through_pixel: focal must be > 0");
  const double cx = 0.5 * static_cast<double>(w);
  const double cy = 0.5 * static_cast<double>(h);
  const Vec3 dir_cam = {(static_cast<double>(col) + 0.5 - cx) / focal,
                        -(static_cast<double>(row) + 0.5 - cy) / focal, -1.0};
  return {pose.position, pose.rotation.mul(dir_cam).normalized()};
}

}  // namespace enelf
