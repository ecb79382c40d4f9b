#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "enelf/io_util.hpp"
#include "enelf/scene.hpp"

namespace enelf {

// Persisted set of (camera pose, rendered image) pairs produced by the
// analytic teacher.
struct DistilledDataset {
  std::string scene_id;
  int64_t height = 0;
  int64_t width = 0;
  double focal = 0;
  uint64_t seed = 0;
  std::vector<CameraPose> poses;
  std::vector<TensorF> images;  // each [1, 3, H, W], values in [0, 1]

  int64_t view_count() const { return static_cast<int64_t>(poses.size()); }
};

// Dataset layout (little-endian): magic "ENLD", u32 version=1,
// u64 header_len, header JSON {scene, views, h, w, focal, seed}, then per
// sample 12 f32 camera-to-world pose (row-major 3x4) followed by H*W*3
// f32 interleaved rgb, trailing CRC32.
inline void save_dataset(const DistilledDataset& ds, const std::string& path) {
  nlohmann::json header{{"scene", ds.scene_id}, {"views", ds.view_count()},
                        {"h", ds.height},       {"w", ds.width},
                        {"focal", ds.focal},    {"seed", ds.seed}};
  const std::string htext = header.dump();

  ByteWriter w;
  w.text("ENLD");
  w.u32(1);
  w.u64(htext.size());
  w.text(htext);
  for (int64_t i = 0; i < ds.view_count(); ++i) {
    const CameraPose& p = ds.poses[i];
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c)
        w.f32(static_cast<float>(p.rotation.m[r][c]));
      const double t[3] = {p.position.x, p.position.y, p.position.z};
      w.f32(static_cast<float>(t[r]));
    }
    const TensorF& img = ds.images[i];
    for (int64_t r = 0; r < ds.height; ++r)
      for (int64_t c = 0; c < ds.width; ++c)
        for (int64_t ch = 0; ch < 3; ++ch) w.f32(img.at(0, ch, r, c));
  }
  w.finish_crc();
  w.save(path);
}

inline DistilledDataset load_dataset(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.check_crc();
  if (r.text(4) != "ENLD") throw IoError(IoCode::BadMagic, "not an ENLD file");
  const uint32_t version = r.u32();
  if (version != 1)
    throw IoError(IoCode::BadVersion,
                  "unsupported dataset version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.text(r.u64()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoCode::BadFormat, std::string("bad header JSON: ") + e.what());
  }

  DistilledDataset ds;
  ds.scene_id = header.at("scene");
  ds.height = header.at("h");
  ds.width = header.at("w");
  ds.focal = header.at("focal");
  ds.seed = header.at("seed");
  const int64_t views = header.at("views");
  if (views < 0 || ds.height < 1 || ds.width < 1)
    throw IoError(IoCode::BadFormat, "bad dataset header");

  for (int64_t i = 0; i < views; ++i) {
    CameraPose p;
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col)
        p.rotation.m[row][col] = r.f32();
      const float t = r.f32();
      (row == 0 ? p.position.x : row == 1 ? p.position.y : p.position.z) = t;
    }
    p.focal = ds.focal;
    ds.poses.push_back(p);
    TensorF img(Shape4{1, 3, ds.height, ds.width});
    for (int64_t row = 0; row < ds.height; ++row)
      for (int64_t col = 0; col < ds.width; ++col)
        for (int64_t ch = 0; ch < 3; ++ch)
          img.at(0, ch, row, col) = r.f32();
    ds.images.push_back(std::move(img));
  }
  return ds;
}

struct OrbitCfg {
  double radius = 2.6;
  double elev_lo_deg = 10;
  double elev_hi_deg = 80;
};

// Renders n_views hemisphere-orbit views of the scene and writes one
// dataset file. Rendering parallelizes per view with per-view derived
// seeds; output ordering is fixed by view index.
inline DistilledDataset distill(const Scene& scene, int64_t n_views,
                                int64_t h, int64_t w, double focal,
                                uint64_t seed, const OrbitCfg& orbit = {}) {
  if (n_views < 1) throw ConfigError("distill: n_views must be >= 1");
  scene.validate();
  DistilledDataset ds;
  ds.scene_id = scene.id;
  ds.height = h;
  ds.width = w;
  ds.focal = focal;
  ds.seed = seed;
  ds.poses.resize(n_views);
  ds.images.resize(n_views);
  for (int64_t i = 0; i < n_views; ++i) {
    ds.poses[i] = sample_pose(i, n_views, seed, orbit.radius,
                              orbit.elev_lo_deg, orbit.elev_hi_deg, focal);
    ds.images[i] = render_view(scene, ds.poses[i], h, w);
  }
  return ds;
}

inline void distill_to_file(const Scene& scene, int64_t n_views, int64_t h,
                            int64_t w, double focal, uint64_t seed,
                            const std::string& path,
                            const OrbitCfg& orbit = {}) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  save_dataset(distill(scene, n_views, h, w, focal, seed, orbit), path);
}

}  // namespace enelf
