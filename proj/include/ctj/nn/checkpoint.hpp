#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/nn/layers.hpp"
#include "ctj/nn/optim.hpp"

namespace ctj::nn {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes `values` as little-endian float32.
template <class Vec>
void write_f32_blob(const fs::path& path, const Vec& values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t w;
    std::memcpy(&w, &f, sizeof w);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "io_error", "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
}

inline std::vector<float> read_f32_blob(const fs::path& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint_invalid", "missing tensor blob " + path.string());
  std::vector<std::uint32_t> words(expected);
  is.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(expected * 4));
  require(static_cast<std::size_t>(is.gcount()) == expected * 4, "checkpoint_invalid",
          "tensor blob too short: " + path.string());
  char extra;
  require(!is.read(&extra, 1), "checkpoint_invalid", "tensor blob too long: " + path.string());
  std::vector<float> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t w = words[i];
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    std::memcpy(&out[i], &w, sizeof w);
  }
  return out;
}

/// Stores every parameter as `<name>.f32` under `dir`; returns the manifest
/// entries.
template <class T>
json save_params(const fs::path& dir, const ParamList<T>& params) {
  fs::create_directories(dir);
  json entries = json::array();
  for (const auto& p : params) {
    const std::string file = p.name + ".f32";
    write_f32_blob(dir / file, p.tensor->values());
    entries.push_back({{"name", p.name}, {"shape", {p.tensor->rows(), p.tensor->cols()}}, {"file", file}});
  }
  return entries;
}

/// Loads blobs listed in `entries` into matching parameters. Every parameter
/// must be present with the same shape.
template <class T>
void load_params(const fs::path& dir, const json& entries, const ParamList<T>& params) {
  std::map<std::string, const json*> by_name;
  for (const auto& e : entries) by_name[e.at("name").get<std::string>()] = &e;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    require(it != by_name.end(), "checkpoint_invalid", "checkpoint lacks tensor " + p.name);
    const json& e = *it->second;
    const auto rows = e.at("shape")[0].get<std::size_t>();
    const auto cols = e.at("shape")[1].get<std::size_t>();
    require(rows == p.tensor->rows() && cols == p.tensor->cols(), "checkpoint_invalid",
            "shape mismatch for tensor " + p.name);
    const auto vals = read_f32_blob(dir / e.at("file").get<std::string>(), rows * cols);
    auto& dst = p.tensor->values();
    for (std::size_t i = 0; i < vals.size(); ++i) dst[i] = static_cast<T>(vals[i]);
  }
}

template <class T>
bool params_finite(const ParamList<T>& params) {
  for (const auto& p : params)
    if (!all_finite(*p.tensor)) return false;
  return true;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "io_error", "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint_invalid", "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error("checkpoint_invalid", path.string() + ": " + e.what());
  }
}

/// Adam moments are stored as float64 blobs so a resumed run continues
/// bit-exactly.
inline void write_f64_blob(const fs::path& path, const std::vector<double>& values) {
  static_assert(std::endian::native == std::endian::little, "f64 optimizer blobs assume a little-endian host");
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "io_error", "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 8));
}

inline std::vector<double> read_f64_blob(const fs::path& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint_invalid", "missing optimizer blob " + path.string());
  std::vector<double> out(expected);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected * 8));
  require(static_cast<std::size_t>(is.gcount()) == expected * 8, "checkpoint_invalid",
          "optimizer blob too short: " + path.string());
  return out;
}

/// Moments and step count of `opt`, one blob pair per parameter.
template <class T>
void save_optimizer(const fs::path& dir, Adam<T>& opt) {
  fs::create_directories(dir);
  const auto& params = opt.params();
  json entries = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_f64_blob(dir / (params[i].name + ".m.f64"), opt.first_moments()[i]);
    write_f64_blob(dir / (params[i].name + ".v.f64"), opt.second_moments()[i]);
    entries.push_back({{"name", params[i].name}, {"size", params[i].tensor->size()}});
  }
  write_json(dir / "optimizer.json", {{"steps", opt.steps()}, {"lr", opt.config().lr}, {"moments", entries}});
}

template <class T>
void load_optimizer(const fs::path& dir, Adam<T>& opt) {
  const auto meta = read_json(dir / "optimizer.json");
  const auto& params = opt.params();
  require(meta.at("moments").size() == params.size(), "checkpoint_invalid", "optimizer state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(meta.at("moments")[i].at("name").get<std::string>() == params[i].name, "checkpoint_invalid",
            "optimizer state order differs at " + params[i].name);
    opt.first_moments()[i] = read_f64_blob(dir / (params[i].name + ".m.f64"), params[i].tensor->size());
    opt.second_moments()[i] = read_f64_blob(dir / (params[i].name + ".v.f64"), params[i].tensor->size());
  }
  opt.set_steps(meta.at("steps").get<std::uint64_t>());
}

}  // namespace ctj::nn
