//
//   Copyright 2026 The morphatlas Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.

#pragma once

// Volume persistence: raw little-endian float32 payloads with a JSON sidecar,
// and a strict subset of single-file NIfTI-1.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphatlas/errors.hpp"
#include "morphatlas/grid.hpp"

namespace morphatlas {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class VolumeFormat { rawf32, nifti1 };

// Dimension-erased volume. Values are component-major, last axis fastest.
struct RawVolume {
  std::vector<std::size_t> dims;
  std::vector<double> spacing;
  std::size_t components = 1;
  std::vector<double> values;
  json meta = json::object();

  std::size_t voxels() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
  bool is_vector() const { return components > 1; }
};

inline VolumeFormat format_for_path(const fs::path& p) {
  const auto name = p.filename().string();
  return name.size() > 4 && name.ends_with(".nii") ? VolumeFormat::nifti1 : VolumeFormat::rawf32;
}

// foo.rawf32 -> foo.json
inline fs::path sidecar_path(const fs::path& payload) {
  fs::path s = payload;
  s.replace_extension(".json");
  return s;
}

namespace detail {

inline void require_exists(const fs::path& p) {
  if (!fs::exists(p)) throw FileNotFound("no such file: " + p.string());
}

inline std::vector<char> read_bytes(const fs::path& p) {
  require_exists(p);
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + p.string());
}

template <class T>
T load_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  U u = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) u |= static_cast<U>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<T>(u);
}

template <class T>
void store_le(char* p, T value) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  const U u = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(T); ++b) p[b] = static_cast<char>((u >> (8 * b)) & 0xffu);
}

inline json read_json(const fs::path& p) {
  require_exists(p);
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

} // namespace detail

inline void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + p.string());
}

inline json read_json(const fs::path& p) { return detail::read_json(p); }

// Writes values as little-endian float32, with no sidecar.
inline void write_rawf32_payload(const fs::path& p, std::span<const double> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) detail::store_le(bytes.data() + 4 * i, static_cast<float>(values[i]));
  detail::write_bytes(p, bytes);
}

inline std::vector<double> read_rawf32_payload(const fs::path& p) {
  const auto bytes = detail::read_bytes(p);
  if (bytes.size() % 4 != 0) throw FormatError(p.string() + ": payload length is not a multiple of 4 bytes");
  std::vector<double> v(bytes.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::load_le<float>(bytes.data() + 4 * i);
  return v;
}

// Geometry fields of a sidecar or meta.json.
inline json geometry_json(const RawVolume& vol) {
  json j = vol.meta.is_object() ? vol.meta : json::object();
  j["dims"] = vol.dims;
  j["spacing"] = vol.spacing;
  j["components"] = vol.components;
  j["intent"] = vol.is_vector() ? "vector" : "scalar";
  return j;
}

namespace detail {

inline RawVolume read_rawf32(const fs::path& p) {
  require_exists(p);
  fs::path side = sidecar_path(p);
  if (!fs::exists(side)) side = p.parent_path() / "meta.json";
  if (!fs::exists(side)) throw FormatError(p.string() + ": no sidecar " + sidecar_path(p).string() + " or meta.json");
  const json j = read_json(side);
  RawVolume vol;
  try {
    vol.dims = j.at("dims").get<std::vector<std::size_t>>();
    vol.spacing = j.contains("spacing") ? j.at("spacing").get<std::vector<double>>()
                                        : std::vector<double>(vol.dims.size(), 1.0);
  } catch (const json::exception& e) {
    throw FormatError(side.string() + ": bad geometry: " + e.what());
  }
  if (vol.dims.size() != 2 && vol.dims.size() != 3)
    throw FormatError(side.string() + ": only 2D and 3D grids are supported");
  if (vol.spacing.size() != vol.dims.size()) throw FormatError(side.string() + ": spacing/dims length mismatch");
  vol.values = read_rawf32_payload(p);
  const std::size_t n = vol.voxels();
  if (j.contains("components") && j["components"].is_number_unsigned()) {
    vol.components = j["components"].get<std::size_t>();
    // A shared meta.json describes the grid, not necessarily this payload.
    if (side.filename() == "meta.json" && vol.values.size() != vol.components * n) vol.components = 0;
  } else {
    vol.components = 0;
  }
  if (vol.components == 0) {
    if (vol.values.size() == n)
      vol.components = 1;
    else if (vol.values.size() == vol.dims.size() * n)
      vol.components = vol.dims.size();
  }
  if (vol.components == 0 || vol.values.size() != vol.components * n)
    throw FormatError(p.string() + ": payload holds " + std::to_string(vol.values.size()) +
                      " floats, inconsistent with the declared grid");
  vol.meta = j;
  return vol;
}

// NIfTI-1 header offsets.
namespace nii {
constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDim = 40;         // short[8]
constexpr std::size_t kIntentCode = 68;  // short
constexpr std::size_t kDatatype = 70;    // short
constexpr std::size_t kBitpix = 72;      // short
constexpr std::size_t kPixdim = 76;      // float[8]
constexpr std::size_t kVoxOffset = 108;  // float
constexpr std::size_t kSclSlope = 112;   // float
constexpr std::size_t kSclInter = 116;   // float
constexpr std::size_t kMagic = 344;      // char[4]
constexpr std::int16_t kFloat32 = 16;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kIntentVector = 1007;
} // namespace nii

inline std::string datatype_name(std::int16_t code) {
  switch (code) {
  case 2: return "uint8";
  case 8: return "int32";
  case 32: return "complex64";
  case 64: return "float64";
  case 128: return "rgb24";
  case 256: return "int8";
  case 512: return "uint16";
  case 768: return "uint32";
  case 1792: return "complex128";
  default: return "code " + std::to_string(code);
  }
}

// NIfTI voxel (i, j, k) maps to grid index (i, j, k); NIfTI stores i fastest.
inline RawVolume read_nifti(const fs::path& p) {
  using namespace nii;
  const auto bytes = read_bytes(p);
  if (bytes.size() < kHeaderSize) throw FormatError(p.string() + ": truncated NIfTI header");
  const char* h = bytes.data();
  const auto sizeof_hdr = load_le<std::int32_t>(h);
  if (sizeof_hdr != 348) {
    if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr))) == 348) throw UnsupportedFeature("sizeof_hdr", "big-endian NIfTI files");
    throw FormatError(p.string() + ": sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
  }
  if (std::memcmp(h + kMagic, "n+1\0", 4) != 0) {
    if (std::memcmp(h + kMagic, "ni1\0", 4) == 0) throw UnsupportedFeature("magic", "two-file .hdr/.img pairs");
    throw FormatError(p.string() + ": bad NIfTI-1 magic");
  }
  std::array<std::int16_t, 8> dim{};
  for (std::size_t i = 0; i < 8; ++i) dim[i] = load_le<std::int16_t>(h + kDim + 2 * i);
  const auto datatype = load_le<std::int16_t>(h + kDatatype);
  if (datatype != kFloat32 && datatype != kInt16) throw UnsupportedFeature("datatype", datatype_name(datatype));
  const std::size_t bpv = datatype == kFloat32 ? 4 : 2;
  const auto vox_offset = static_cast<std::size_t>(load_le<float>(h + kVoxOffset));
  if (vox_offset < kHeaderSize + 4) throw FormatError(p.string() + ": vox_offset below 352");
  if (bytes.size() >= kHeaderSize + 4 && bytes[kHeaderSize] != 0) throw UnsupportedFeature("extension", "header extensions");

  RawVolume vol;
  std::size_t spatial = 0;
  if (dim[0] == 2 || dim[0] == 3) {
    spatial = static_cast<std::size_t>(dim[0]);
    vol.components = 1;
  } else if (dim[0] == 5 && dim[4] == 1 && (dim[5] == 2 || dim[5] == 3)) {
    spatial = static_cast<std::size_t>(dim[5]);
    for (std::size_t a = spatial + 1; a <= 3; ++a)
      if (dim[a] != 1) throw UnsupportedFeature("dim", "vector payload with extra spatial axes");
    vol.components = spatial;
  } else {
    throw UnsupportedFeature("dim", "dim[0] = " + std::to_string(dim[0]) + " (only 2D/3D scalars and 5D vector fields)");
  }
  for (std::size_t a = 0; a < spatial; ++a) {
    if (dim[a + 1] < 1) throw FormatError(p.string() + ": nonpositive dim[" + std::to_string(a + 1) + "]");
    vol.dims.push_back(static_cast<std::size_t>(dim[a + 1]));
    const float px = load_le<float>(h + kPixdim + 4 * (a + 1));
    vol.spacing.push_back(px > 0.0f ? px : 1.0);
  }
  float slope = load_le<float>(h + kSclSlope);
  float inter = load_le<float>(h + kSclInter);
  if (slope == 0.0f || !std::isfinite(slope)) {
    slope = 1.0f;
    inter = 0.0f;
  }
  const std::size_t n = vol.voxels();
  const std::size_t count = n * vol.components;
  if (bytes.size() < vox_offset + count * bpv) throw FormatError(p.string() + ": truncated NIfTI payload");
  vol.values.resize(count);
  const char* data = h + vox_offset;
  for (std::size_t c = 0; c < vol.components; ++c) {
    for (std::size_t src = 0; src < n; ++src) {
      // src enumerates NIfTI order (axis 0 fastest); dst is last-axis-fastest.
      std::size_t rem = src, dst = 0, stride = 1;
      std::vector<std::size_t> idx(spatial);
      for (std::size_t a = 0; a < spatial; ++a) {
        idx[a] = rem % vol.dims[a];
        rem /= vol.dims[a];
      }
      for (std::size_t a = spatial; a-- > 0;) {
        dst += idx[a] * stride;
        stride *= vol.dims[a];
      }
      const std::size_t k = c * n + src;
      const double raw = datatype == kFloat32 ? static_cast<double>(load_le<float>(data + 4 * k))
                                              : static_cast<double>(load_le<std::int16_t>(data + 2 * k));
      vol.values[c * n + dst] = datatype == kFloat32 && slope == 1.0f && inter == 0.0f ? raw : raw * slope + inter;
    }
  }
  vol.meta = json{{"dims", vol.dims}, {"spacing", vol.spacing}, {"components", vol.components}};
  return vol;
}

inline void write_nifti(const RawVolume& vol, const fs::path& p) {
  using namespace nii;
  const std::size_t spatial = vol.dims.size();
  const std::size_t n = vol.voxels();
  std::vector<char> bytes(352 + 4 * n * vol.components, 0);
  char* h = bytes.data();
  store_le<std::int32_t>(h, 348);
  std::array<std::int16_t, 8> dim{};
  dim.fill(1);
  if (vol.is_vector()) {
    dim[0] = 5;
    dim[5] = static_cast<std::int16_t>(vol.components);
    store_le<std::int16_t>(h + kIntentCode, kIntentVector);
  } else {
    dim[0] = static_cast<std::int16_t>(spatial);
  }
  for (std::size_t a = 0; a < spatial; ++a) dim[a + 1] = static_cast<std::int16_t>(vol.dims[a]);
  for (std::size_t i = 0; i < 8; ++i) store_le<std::int16_t>(h + kDim + 2 * i, dim[i]);
  store_le<std::int16_t>(h + kDatatype, kFloat32);
  store_le<std::int16_t>(h + kBitpix, 32);
  store_le<float>(h + kPixdim, 1.0f);
  for (std::size_t a = 0; a < spatial; ++a) store_le<float>(h + kPixdim + 4 * (a + 1), static_cast<float>(vol.spacing[a]));
  store_le<float>(h + kVoxOffset, 352.0f);
  store_le<float>(h + kSclSlope, 1.0f);
  std::memcpy(h + kMagic, "n+1\0", 4);
  char* data = h + 352;
  for (std::size_t c = 0; c < vol.components; ++c)
    for (std::size_t dst = 0; dst < n; ++dst) {
      std::size_t rem = dst, src = 0, stride = 1;
      std::vector<std::size_t> idx(spatial);
      for (std::size_t a = spatial; a-- > 0;) {
        idx[a] = rem % vol.dims[a];
        rem /= vol.dims[a];
      }
      for (std::size_t a = 0; a < spatial; ++a) {
        src += idx[a] * stride;
        stride *= vol.dims[a];
      }
      store_le<float>(data + 4 * (c * n + src), static_cast<float>(vol.values[c * n + dst]));
    }
  write_bytes(p, bytes);
}

} // namespace detail

inline RawVolume read_volume(const fs::path& p) {
  return format_for_path(p) == VolumeFormat::nifti1 ? detail::read_nifti(p) : detail::read_rawf32(p);
}

inline void write_volume(const RawVolume& vol, const fs::path& p, VolumeFormat fmt) {
  if (vol.values.size() != vol.voxels() * vol.components)
    throw ShapeMismatch("write_volume: value count does not match dims x components");
  if (fmt == VolumeFormat::nifti1) {
    detail::write_nifti(vol, p);
    return;
  }
  write_rawf32_payload(p, vol.values);
  json side = vol.meta.is_object() ? vol.meta : json::object();
  side.update(geometry_json(vol));
  write_json(sidecar_path(p), side);
}

inline void write_volume(const RawVolume& vol, const fs::path& p) { write_volume(vol, p, format_for_path(p)); }

template <std::size_t D>
RawVolume to_raw(const ScalarImage<D>& img, json meta = json::object()) {
  RawVolume v;
  v.dims.assign(img.shape().dims.begin(), img.shape().dims.end());
  v.spacing.assign(img.shape().spacing.begin(), img.shape().spacing.end());
  v.values.assign(img.values().begin(), img.values().end());
  v.meta = std::move(meta);
  return v;
}

template <std::size_t D>
RawVolume to_raw(const VectorField<D>& f, json meta = json::object()) {
  RawVolume v;
  v.dims.assign(f.shape().dims.begin(), f.shape().dims.end());
  v.spacing.assign(f.shape().spacing.begin(), f.shape().spacing.end());
  v.components = D;
  v.values.reserve(D * f.size());
  for (std::size_t a = 0; a < D; ++a) v.values.insert(v.values.end(), f.comp(a).begin(), f.comp(a).end());
  v.meta = std::move(meta);
  return v;
}

template <std::size_t D>
GridShape<D> shape_of(const RawVolume& v) {
  if (v.dims.size() != D)
    throw ShapeMismatch("volume is " + std::to_string(v.dims.size()) + "D, expected " + std::to_string(D) + "D");
  Index<D> dims{};
  std::array<double, D> h{};
  for (std::size_t a = 0; a < D; ++a) {
    dims[a] = v.dims[a];
    h[a] = v.spacing[a];
  }
  return GridShape<D>(dims, h);
}

template <std::size_t D>
ScalarImage<D> image_from_raw(const RawVolume& v) {
  if (v.components != 1) throw ShapeMismatch("expected a scalar volume, found " + std::to_string(v.components) + " components");
  return ScalarImage<D>(shape_of<D>(v), v.values);
}

template <std::size_t D>
VectorField<D> field_from_raw(const RawVolume& v) {
  if (v.components != D) throw ShapeMismatch("expected a " + std::to_string(D) + "-component vector volume");
  const auto shape = shape_of<D>(v);
  std::array<std::vector<double>, D> comps;
  const std::size_t n = shape.size();
  for (std::size_t a = 0; a < D; ++a)
    comps[a].assign(v.values.begin() + static_cast<std::ptrdiff_t>(a * n),
                    v.values.begin() + static_cast<std::ptrdiff_t>((a + 1) * n));
  return VectorField<D>(shape, std::move(comps));
}

template <std::size_t D>
ScalarImage<D> read_image(const fs::path& p) {
  return image_from_raw<D>(read_volume(p));
}

template <std::size_t D>
VectorField<D> read_field(const fs::path& p) {
  return field_from_raw<D>(read_volume(p));
}

template <std::size_t D>
void write_image(const ScalarImage<D>& img, const fs::path& p, json meta = json::object()) {
  write_volume(to_raw(img, std::move(meta)), p);
}

template <std::size_t D>
void write_field(const VectorField<D>& f, const fs::path& p, json meta = json::object()) {
  write_volume(to_raw(f, std::move(meta)), p);
}

// Round-trips values through float32, the precision of every on-disk payload.
template <std::size_t D>
ScalarImage<D> quantize_f32(ScalarImage<D> img) {
  for (double& x : img.values()) x = static_cast<float>(x);
  return img;
}

template <std::size_t D>
VectorField<D> quantize_f32(VectorField<D> f) {
  for (std::size_t a = 0; a < D; ++a)
    for (double& x : f.comp(a)) x = static_cast<float>(x);
  return f;
}

} // namespace morphatlas
