#pragma once

#include <unordered_map>

#include <nlohmann/json.hpp>

#include "enelf/io_util.hpp"
#include "enelf/model.hpp"

namespace enelf {

using json = nlohmann::json;

inline json sr_spec_to_json(const SrSpec& s) {
  return {{"scale", s.scale},
          {"kernel", s.kernel},
          {"stride", s.stride},
          {"padding", s.padding},
          {"out_channels", s.out_channels}};
}

inline SrSpec sr_spec_from_json(const json& j) {
  SrSpec s;
  s.scale = j.at("scale");
  s.kernel = j.at("kernel");
  s.stride = j.at("stride");
  s.padding = j.at("padding");
  s.out_channels = j.at("out_channels");
  return s;
}

inline json model_config_to_json(const ModelConfig& c) {
  json sr = json::array();
  for (const auto& s : c.sr_blocks) sr.push_back(sr_spec_to_json(s));
  return {{"d_blocks", c.d_blocks},
          {"width", c.width},
          {"sr_blocks", sr},
          {"ray",
           {{"points", c.ray.points},
            {"freqs", c.ray.freqs},
            {"t_near", c.ray.t_near},
            {"t_far", c.ray.t_far}}},
          {"input_h", c.input_h},
          {"input_w", c.input_w}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.d_blocks = j.at("d_blocks");
  c.width = j.at("width");
  for (const auto& s : j.at("sr_blocks")) c.sr_blocks.push_back(sr_spec_from_json(s));
  c.ray.points = j.at("ray").at("points");
  c.ray.freqs = j.at("ray").at("freqs");
  c.ray.t_near = j.at("ray").at("t_near");
  c.ray.t_far = j.at("ray").at("t_far");
  c.input_h = j.at("input_h");
  c.input_w = j.at("input_w");
  return c;
}

namespace detail {

// Structural description of one layer, enough to rebuild a (possibly
// surgered) model before its tensors are loaded.
template <typename T>
json layer_to_json(const Layer<T>& l) {
  json j{{"kind", layer_kind_name(l.kind)}, {"name", l.name}};
  if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT) {
    const auto& s = l.conv.weight.shape();
    j["w0"] = s.n;
    j["w1"] = s.c;
    j["k"] = l.conv.kernel();
    j["stride"] = l.conv.stride;
    j["padding"] = l.conv.padding;
    j["pad_mode"] = l.conv.pad_mode == PadMode::Replicate ? "replicate" : "zero";
  } else if (l.kind == LayerKind::Bn) {
    j["channels"] = l.bn.channels();
    j["prunable"] = l.bn_prunable;
    j["eps"] = static_cast<double>(l.bn.eps);
    j["momentum"] = static_cast<double>(l.bn.momentum);
  }
  return j;
}

template <typename T>
Layer<T> layer_from_json(const json& j) {
  Layer<T> l;
  const std::string kind = j.at("kind");
  l.name = j.at("name");
  if (kind == "conv" || kind == "convt") {
    l.kind = kind == "conv" ? LayerKind::Conv : LayerKind::ConvT;
    const int64_t w0 = j.at("w0"), w1 = j.at("w1"), k = j.at("k");
    l.conv.weight = Tensor<T>(Shape4{w0, w1, k, k});
    l.conv.bias.assign(
        static_cast<size_t>(l.kind == LayerKind::Conv ? w0 : w1), T(0));
    l.conv.stride = j.at("stride");
    l.conv.padding = j.at("padding");
    l.conv.pad_mode = j.at("pad_mode") == "replicate" ? PadMode::Replicate
                                                      : PadMode::Zero;
  } else if (kind == "bn") {
    l.kind = LayerKind::Bn;
    l.bn = BnParams<T>::identity(j.at("channels").get<int64_t>());
    l.bn_prunable = j.at("prunable");
    l.bn.eps = static_cast<T>(j.at("eps").get<double>());
    l.bn.momentum = static_cast<T>(j.at("momentum").get<double>());
  } else if (kind == "gelu") {
    l.kind = LayerKind::Gelu;
  } else if (kind == "sigmoid") {
    l.kind = LayerKind::Sigmoid;
  } else if (kind == "res_begin") {
    l.kind = LayerKind::ResBegin;
  } else if (kind == "res_end") {
    l.kind = LayerKind::ResEnd;
  } else {
    throw IoError(IoCode::BadFormat, "unknown layer kind: " + kind);
  }
  return l;
}

// every persisted tensor of one layer, in a fixed order
template <typename T>
std::vector<std::pair<std::string, std::pair<T*, Shape4>>> layer_tensors(
    Layer<T>& l) {
  std::vector<std::pair<std::string, std::pair<T*, Shape4>>> out;
  auto vec1 = [](std::vector<T>& v) {
    return Shape4{static_cast<int64_t>(v.size()), 1, 1, 1};
  };
  if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvT) {
    out.push_back({l.name + ".weight",
                   {l.conv.weight.data(), l.conv.weight.shape()}});
    out.push_back({l.name + ".bias", {l.conv.bias.data(), vec1(l.conv.bias)}});
  } else if (l.kind == LayerKind::Bn) {
    out.push_back({l.name + ".gamma", {l.bn.gamma.data(), vec1(l.bn.gamma)}});
    out.push_back({l.name + ".beta", {l.bn.beta.data(), vec1(l.bn.beta)}});
    out.push_back({l.name + ".running_mean",
                   {l.bn.running_mean.data(), vec1(l.bn.running_mean)}});
    out.push_back({l.name + ".running_var",
                   {l.bn.running_var.data(), vec1(l.bn.running_var)}});
  }
  return out;
}

}  // namespace detail

// Checkpoint layout (little-endian): magic "ENLF", u32 version=1,
// u64 config_len, config JSON, u32 tensor_count, per tensor
// {u16 name_len, name, u8 dtype (0 = f32), u8 ndim, u32 dims[ndim],
// u64 byte_len, raw f32 values}, trailing CRC32 of all preceding bytes.
template <typename T>
void save_checkpoint(EnelfModel<T>& m, const std::string& path) {
  json cfg{{"config", model_config_to_json(m.config)},
           {"layers", json::array()}};
  for (const auto& l : m.layers)
    cfg["layers"].push_back(detail::layer_to_json(l));
  const std::string cfg_text = cfg.dump();

  ByteWriter w;
  w.text("ENLF");
  w.u32(1);
  w.u64(cfg_text.size());
  w.text(cfg_text);

  uint32_t count = 0;
  for (auto& l : m.layers) count += static_cast<uint32_t>(detail::layer_tensors(l).size());
  w.u32(count);

  for (auto& l : m.layers)
    for (auto& [name, t] : detail::layer_tensors(l)) {
      auto [ptr, shape] = t;
      w.u16(static_cast<uint16_t>(name.size()));
      w.text(name);
      w.u8(0);  // f32
      // vectors persist as 1-D, conv weights as 4-D
      const bool vec = shape.c == 1 && shape.h == 1 && shape.w == 1;
      const uint8_t ndim = vec ? 1 : 4;
      w.u8(ndim);
      w.u32(static_cast<uint32_t>(shape.n));
      if (!vec) {
        w.u32(static_cast<uint32_t>(shape.c));
        w.u32(static_cast<uint32_t>(shape.h));
        w.u32(static_cast<uint32_t>(shape.w));
      }
      const int64_t n = shape.numel();
      w.u64(static_cast<uint64_t>(n) * 4);
      for (int64_t i = 0; i < n; ++i)
        w.f32(static_cast<float>(ptr[i]));
    }

  w.finish_crc();
  w.save(path);
}

template <typename T = float>
EnelfModel<T> load_checkpoint(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.check_crc();

  if (r.text(4) != "ENLF") throw IoError(IoCode::BadMagic, "not an ENLF file");
  const uint32_t version = r.u32();
  if (version != 1)
    throw IoError(IoCode::BadVersion,
                  "unsupported checkpoint version " + std::to_string(version));

  const uint64_t cfg_len = r.u64();
  json cfg;
  try {
    cfg = json::parse(r.text(cfg_len));
  } catch (const json::exception& e) {
    throw IoError(IoCode::BadFormat, std::string("bad config JSON: ") + e.what());
  }

  EnelfModel<T> m;
  m.config = model_config_from_json(cfg.at("config"));
  for (const auto& lj : cfg.at("layers"))
    m.layers.push_back(detail::layer_from_json<T>(lj));

  const uint32_t count = r.u32();
  std::unordered_map<std::string, std::pair<T*, Shape4>> slots;
  for (auto& l : m.layers)
    for (auto& [name, t] : detail::layer_tensors(l)) slots[name] = t;
  if (slots.size() != count)
    throw IoError(IoCode::BadFormat,
                  "tensor count " + std::to_string(count) + " != expected " +
                      std::to_string(slots.size()));

  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16();
    const std::string name = r.text(name_len);
    const uint8_t dtype = r.u8();
    if (dtype != 0)
      throw IoError(IoCode::BadFormat, "unsupported dtype in " + name);
    const uint8_t ndim = r.u8();
    Shape4 s{1, 1, 1, 1};
    if (ndim == 1) {
      s.n = r.u32();
    } else if (ndim == 4) {
      s.n = r.u32();
      s.c = r.u32();
      s.h = r.u32();
      s.w = r.u32();
    } else {
      throw IoError(IoCode::BadFormat, "unsupported ndim in " + name);
    }
    const uint64_t byte_len = r.u64();
    if (byte_len != static_cast<uint64_t>(s.numel()) * 4)
      throw IoError(IoCode::BadFormat, "byte length mismatch in " + name);
    auto it = slots.find(name);
    if (it == slots.end())
      throw IoError(IoCode::BadFormat, "unknown tensor " + name);
    if (!(it->second.second == s))
      throw IoError(IoCode::BadFormat, "shape mismatch for " + name);
    T* dst = it->second.first;
    for (int64_t j = 0; j < s.numel(); ++j)
      dst[j] = static_cast<T>(r.f32());
  }

  validate_channel_chain(m);
  return m;
}

}  // namespace enelf
