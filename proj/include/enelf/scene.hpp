#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "enelf/geometry.hpp"
#include "enelf/tensor.hpp"

namespace enelf {

struct Sphere {
  Vec3 center;
  double radius = 1;
  Vec3 albedo;
};

struct GroundPlane {
  double y = 0;
  Vec3 albedo_a;  // checker tiles
  Vec3 albedo_b;
  double period = 1;
};

// Closed-form ray-traced scene standing in for a pretrained teacher:
// Lambertian spheres and an optional checkered ground plane under one
// directional light, with a vertical-gradient background.
struct Scene {
  std::string id;
  std::vector<Sphere> spheres;
  std::optional<GroundPlane> ground;
  Vec3 light = Vec3{0, 1, 0};  // unit, points toward the light
  double ambient = 0.1;
  Vec3 zenith;
  Vec3 nadir;

  void validate() const {
    for (const auto& s : spheres)
      if (s.radius <= 0) throw ConfigError("scene: sphere radius must be > 0");
    if (std::abs(light.norm() - 1.0) > 1e-9)
      throw ConfigError("scene: light direction must be unit length");
    if (ambient < 0 || ambient >= 1)
      throw ConfigError("scene: ambient must be in [0,1)");
  }
};

// Default scene, fixed constants.
inline Scene lego_lite_scene() {
  Scene s;
  s.id = "lego-lite";
  s.spheres = {
      {{0.0, 0.45, 0.0}, 0.45, {0.82, 0.25, 0.20}},
      {{-0.90, 0.30, 0.35}, 0.30, {0.20, 0.50, 0.85}},
      {{0.70, 0.25, -0.55}, 0.25, {0.90, 0.75, 0.25}},
  };
  s.ground = GroundPlane{0.0, {0.72, 0.72, 0.72}, {0.28, 0.30, 0.33}, 0.9};
  s.light = Vec3{0.5, 1.0, 0.25}.normalized();
  s.ambient = 0.18;
  s.zenith = {0.55, 0.70, 0.95};
  s.nadir = {0.90, 0.92, 0.96};
  return s;
}

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json spheres = nlohmann::json::array();
  for (const auto& sp : s.spheres)
    spheres.push_back({{"center", {sp.center.x, sp.center.y, sp.center.z}},
                       {"radius", sp.radius},
                       {"albedo", {sp.albedo.x, sp.albedo.y, sp.albedo.z}}});
  nlohmann::json j{{"id", s.id},
                   {"version", 1},
                   {"spheres", spheres},
                   {"light", {s.light.x, s.light.y, s.light.z}},
                   {"ambient", s.ambient},
                   {"zenith", {s.zenith.x, s.zenith.y, s.zenith.z}},
                   {"nadir", {s.nadir.x, s.nadir.y, s.nadir.z}}};
  if (s.ground)
    j["ground"] = {
        {"y", s.ground->y},
        {"albedo_a", {s.ground->albedo_a.x, s.ground->albedo_a.y, s.ground->albedo_a.z}},
        {"albedo_b", {s.ground->albedo_b.x, s.ground->albedo_b.y, s.ground->albedo_b.z}},
        {"period", s.ground->period}};
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  auto vec3 = [](const nlohmann::json& a) {
    return Vec3{a.at(0), a.at(1), a.at(2)};
  };
  Scene s;
  s.id = j.at("id");
  for (const auto& sp : j.at("spheres"))
    s.spheres.push_back(
        {vec3(sp.at("center")), sp.at("radius"), vec3(sp.at("albedo"))});
  if (j.contains("ground"))
    s.ground = GroundPlane{j["ground"].at("y"), vec3(j["ground"].at("albedo_a")),
                           vec3(j["ground"].at("albedo_b")),
                           j["ground"].at("period")};
  s.light = vec3(j.at("light"));
  s.ambient = j.at("ambient");
  s.zenith = vec3(j.at("zenith"));
  s.nadir = vec3(j.at("nadir"));
  s.validate();
  return s;
}

// scene registry: known ids resolve to built-ins
inline Scene scene_by_id(const std::string& id) {
  if (id == "lego-lite") return lego_lite_scene();
  throw ConfigError("unknown scene id: " + id);
}

namespace detail {

struct Hit {
  double t = -1;
  Vec3 normal;
  Vec3 albedo;
};

inline bool sphere_hit(const Sphere& s, const Vec3& o, const Vec3& d,
                       double t_min, Hit& out) {
  const Vec3 oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.dot(oc) - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return false;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t <= t_min) t = -b + sq;
  if (t <= t_min) return false;
  out.t = t;
  const Vec3 p = o + d * t;
  out.normal = (p - s.center).normalized();
  out.albedo = s.albedo;
  return true;
}

inline bool plane_hit(const GroundPlane& g, const Vec3& o, const Vec3& d,
                      double t_min, Hit& out) {
  if (std::abs(d.y) < 1e-12) return false;
  const double t = (g.y - o.y) / d.y;
  if (t <= t_min) return false;
  out.t = t;
  out.normal = d.y < 0 ? Vec3{0, 1, 0} : Vec3{0, -1, 0};
  const Vec3 p = o + d * t;
  const long long cx = static_cast<long long>(std::floor(p.x / g.period));
  const long long cz = static_cast<long long>(std::floor(p.z / g.period));
  out.albedo = ((cx + cz) & 1) == 0 ? g.albedo_a : g.albedo_b;
  return true;
}

inline bool nearest_hit(const Scene& s, const Vec3& o, const Vec3& d,
                        double t_min, Hit& best) {
  bool any = false;
  Hit h;
  for (const auto& sp : s.spheres)
    if (sphere_hit(sp, o, d, t_min, h) && (!any || h.t < best.t)) {
      best = h;
      any = true;
    }
  if (s.ground && plane_hit(*s.ground, o, d, t_min, h) &&
      (!any || h.t < best.t)) {
    best = h;
    any = true;
  }
  return any;
}

inline bool occluded(const Scene& s, const Vec3& p, const Vec3& toward_light) {
  Hit h;
  return nearest_hit(s, p, toward_light, 1e-6, h);
}

}  // namespace detail

// Nearest positive intersection, Lambertian shading with a hard shadow
// test, gradient background on miss:
//   hit:  clamp(albedo * max(0, n.l) * lit + ambient)
//   miss: lerp(nadir, zenith) by 0.5*(dir_y + 1)
inline Vec3 render_ray(const Scene& scene, const Vec3& origin,
                       const Vec3& dir) {
  if (std::abs(dir.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("render_ray: dir must be normalized");

  detail::Hit hit;
  if (!detail::nearest_hit(scene, origin, dir, 1e-6, hit)) {
    const double u = 0.5 * (dir.y + 1.0);
    return scene.nadir * (1.0 - u) + scene.zenith * u;
  }

  const Vec3 p = origin + dir * hit.t;
  const double ndotl = hit.normal.dot(scene.light);
  double diffuse = std::max(0.0, ndotl);
  if (diffuse > 0 &&
      detail::occluded(scene, p + hit.normal * 1e-4, scene.light))
    diffuse = 0;

  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {clamp01(hit.albedo.x * diffuse + scene.ambient),
          clamp01(hit.albedo.y * diffuse + scene.ambient),
          clamp01(hit.albedo.z * diffuse + scene.ambient)};
}

// Deterministic hemisphere orbit: azimuth stratified-uniform over [0, 2pi),
// elevation uniform in [elev_lo_deg, elev_hi_deg], look-at the origin.
inline CameraPose sample_pose(int64_t i, int64_t n_views, uint64_t seed,
                              double radius, double elev_lo_deg,
                              double elev_hi_deg, double focal) {
  if (n_views < 1) throw ConfigError("sample_pose: n_views must be >= 1");
  if (i < 0 || i >= n_views) throw ConfigError("sample_pose: index out of range");
  Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
  const double theta =
      2.0 * M_PI * (static_cast<double>(i) + rng.uniform(0.0, 1.0)) /
      static_cast<double>(n_views);
  const double phi =
      rng.uniform(elev_lo_deg, elev_hi_deg) * M_PI / 180.0;
  CameraPose pose;
  pose.position = Vec3{std::cos(phi) * std::cos(theta), std::sin(phi),
                       std::cos(phi) * std::sin(theta)} *
                  radius;
  pose.rotation = look_at_rotation(pose.position, {0, 0, 0});
  pose.focal = focal;
  return pose;
}

// Renders a full view through the same per-pixel ray routine the encoder
// uses. Output [1, 3, H, W] in [0, 1].
inline TensorF render_view(const Scene& scene, const CameraPose& pose,
                           int64_t h, int64_t w) {
  TensorF img(Shape4{1, 3, h, w});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      const Ray ray = ray_through_pixel(pose, pose.focal, h, w, r, c);
      const Vec3 rgb = render_ray(scene, ray.origin, ray.dir);
      img.at(0, 0, r, c) = static_cast<float>(rgb.x);
      img.at(0, 1, r, c) = static_cast<float>(rgb.y);
      img.at(0, 2, r, c) = static_cast<float>(rgb.z);
    }
  return img;
}

}  // namespace enelf
