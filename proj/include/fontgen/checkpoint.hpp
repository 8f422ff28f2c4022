#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fontgen/common.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen {

// On-disk container: magic, little-endian u64 manifest length, JSON manifest,
// then raw f64 little-endian array payload. Round-trips are bit-exact because
// parameter bytes never pass through text formatting.
struct Checkpoint {
  std::string kind;
  nlohmann::json meta;  // arbitrary structured metadata (config, counters, ...)
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return t;
    throw DataError("checkpoint is missing array '" + name + "'");
  }
  bool has_array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return true;
    return false;
  }
};

namespace detail {
inline constexpr char kCkptMagic[8] = {'F', 'G', 'C', 'K', 'P', 'T', '1', '\n'};

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["kind"] = ckpt.kind;
  manifest["meta"] = ckpt.meta;
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    nlohmann::json a;
    a["name"] = name;
    a["shape"] = t.shape();
    a["dtype"] = "f64";
    a["offset"] = offset;
    a["numel"] = t.numel();
    arrays.push_back(a);
    offset += t.numel() * sizeof(double);
  }
  manifest["arrays"] = arrays;

  const std::string json_text = manifest.dump();
  std::string header;
  header.append(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::put_u64_le(header, json_text.size());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot create checkpoint: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
  for (const auto& [name, t] : ckpt.arrays) {
    static_assert(sizeof(real) == 8, "payload format assumes 64-bit reals");
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(real)));
  }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  unsigned char lenbuf[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  if (!in.read(reinterpret_cast<char*>(lenbuf), 8)) throw DataError("truncated checkpoint: " + path);
  const std::uint64_t json_len = detail::get_u64_le(lenbuf);
  std::string json_text(json_len, '\0');
  if (!in.read(json_text.data(), static_cast<std::streamsize>(json_len)))
    throw DataError("truncated checkpoint manifest: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint manifest in " + path + ": " + e.what());
  }
  if (manifest.value("format_version", 0) != 1) throw DataError("unsupported checkpoint version in " + path);

  Checkpoint ckpt;
  ckpt.kind = manifest.at("kind").get<std::string>();
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& a : manifest.at("arrays")) {
    const auto shape = a.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    if (t.numel() != a.at("numel").get<std::uint64_t>())
      throw DataError("checkpoint array '" + a.at("name").get<std::string>() + "' has inconsistent size");
    if (a.at("dtype").get<std::string>() != "f64") throw DataError("unsupported checkpoint dtype");
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(real))))
      throw DataError("truncated checkpoint payload: " + path);
    ckpt.arrays.emplace_back(a.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace fontgen
