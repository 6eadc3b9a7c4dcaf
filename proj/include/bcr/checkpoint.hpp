#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bcr/tensor.hpp"
#include "json.hpp"

// Single-file checkpoint: magic "BCRK", u32 little-endian manifest length,
// JSON manifest (name/dtype/shape/offset/nbytes per tensor), then one raw
// little-endian blob. Round trips bit-exactly.

namespace bcr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

}  // namespace detail

template <typename T>
void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, const Tensor<T>*>>& entries) {
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, tensor] : entries) {
    const uint64_t nbytes =
        static_cast<uint64_t>(tensor->numel()) * sizeof(T);
    manifest.push_back({{"name", name},
                        {"dtype", detail::dtype_name<T>()},
                        {"shape", tensor->shape()},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = manifest.dump();
  if (text.size() > 0xffffffffull) {
    throw std::runtime_error("checkpoint manifest too large");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write("BCRK", 4);
  const uint32_t len = static_cast<uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : entries) {
    out.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(tensor->numel() * sizeof(T)));
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "BCRK", 4) != 0) {
    throw std::runtime_error("bad checkpoint magic: " + path);
  }
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw std::runtime_error("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(text);

  const std::streampos blob_start = in.tellg();
  std::map<std::string, Tensor<T>> out;
  for (const auto& item : manifest) {
    const std::string name = item.at("name").get<std::string>();
    const std::string dtype = item.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<T>()) {
      throw std::runtime_error("checkpoint dtype mismatch for " + name +
                               ": stored " + dtype);
    }
    const std::vector<int> shape = item.at("shape").get<std::vector<int>>();
    const uint64_t offset = item.at("offset").get<uint64_t>();
    const uint64_t nbytes = item.at("nbytes").get<uint64_t>();
    Tensor<T> t(shape);
    if (static_cast<uint64_t>(t.numel()) * sizeof(T) != nbytes) {
      throw std::runtime_error("checkpoint size mismatch for " + name);
    }
    in.seekg(blob_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("truncated checkpoint blob: " + path);
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace bcr
