#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hici/tensor.hpp"

// Tensor archive: <dir>/manifest.json lists every tensor as
//   {"name", "shape", "dtype" ("f64" | "f32"), "offset", "nbytes"}
// together with free-form metadata under "meta"; <dir>/tensors.bin holds the
// raw little-endian values back to back at the listed byte offsets.
namespace hici::io {

enum class DType { f64, f32 };

inline const char* dtype_name(DType t) { return t == DType::f64 ? "f64" : "f32"; }

struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";

namespace detail {
template <typename U>
void put_le(std::vector<unsigned char>& out, U bits) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
}

template <typename U>
U get_le(const unsigned char* p) {
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
  return bits;
}
}  // namespace detail

using TensorRefs = std::vector<std::pair<std::string, const Tensor*>>;

struct Archive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw format_error("archive has no tensor named '" + name + "'");
    return it->second;
  }
};

inline void save(const std::filesystem::path& dir, const TensorRefs& tensors, const nlohmann::json& meta = {},
                 DType dtype = DType::f64) {
  std::filesystem::create_directories(dir);
  std::vector<unsigned char> blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const std::size_t offset = blob.size();
    for (double v : t->data()) {
      if (dtype == DType::f64)
        detail::put_le(blob, std::bit_cast<std::uint64_t>(v));
      else
        detail::put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    entries.push_back({{"name", name},
                       {"shape", t->shape()},
                       {"dtype", dtype_name(dtype)},
                       {"offset", offset},
                       {"nbytes", blob.size() - offset}});
  }
  nlohmann::json manifest = {{"format", "hici-tensors/1"}, {"blob", kBlobFile}, {"tensors", entries}};
  if (!meta.is_null()) manifest["meta"] = meta;

  std::ofstream bin(dir / kBlobFile, std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw format_error("failed writing " + (dir / kBlobFile).string());
  std::ofstream man(dir / kManifestFile, std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw format_error("failed writing " + (dir / kManifestFile).string());
}

inline Archive load(const std::filesystem::path& dir) {
  std::ifstream man(dir / kManifestFile);
  if (!man) throw format_error("cannot open " + (dir / kManifestFile).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("malformed manifest: " + std::string(e.what()));
  }
  std::ifstream bin(dir / manifest.value("blob", std::string(kBlobFile)), std::ios::binary);
  if (!bin) throw format_error("cannot open tensor blob in " + dir.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Archive out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto dtype = e.at("dtype").get<std::string>();
    const auto offset = e.at("offset").get<std::size_t>();
    const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
    if (width == 0) throw format_error("tensor '" + name + "': unknown dtype " + dtype);
    const std::size_t n = numel(shape);
    if (offset + n * width > blob.size()) throw format_error("tensor '" + name + "' runs past end of blob");
    std::vector<double> values(n);
    const unsigned char* p = blob.data() + offset;
    for (std::size_t i = 0; i < n; ++i, p += width)
      values[i] = width == 8 ? std::bit_cast<double>(detail::get_le<std::uint64_t>(p))
                             : static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p)));
    out.tensors.emplace(name, Tensor(shape, std::move(values)));
  }
  return out;
}

}  // namespace hici::io
