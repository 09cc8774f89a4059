// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "ssm/error.hpp"
#include "ssm/numerics/tensor.hpp"

namespace ssm::io {

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// a reader never observes a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline constexpr std::string_view kCheckpointMagic = "SSMCKPT1";
inline constexpr std::string_view kDatasetMagic = "SSMDATA1";

namespace detail {

inline void put_u32(std::string& out, std::uint64_t v) {
  if (v > UINT32_MAX) throw InvalidArgument("value does not fit the u32 container field");
  const auto x = static_cast<std::uint32_t>(v);
  char b[4];
  std::memcpy(b, &x, 4);
  out.append(b, 4);
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    std::memcpy(&v, take(4), 4);
    return v;
  }

  std::string_view take_view(std::size_t n) { return {take(n), n}; }

  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw IoError(origin_ + ": truncated container");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  std::string_view bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes blobs as: magic, then per blob u32 name length, UTF-8 name,
/// u32 rank, u32 dims, row-major little-endian float64 values.
inline std::string encode_container(std::string_view magic, const std::vector<NamedTensor>& blobs) {
  std::string out(magic);
  for (const auto& b : blobs) {
    detail::put_u32(out, b.name.size());
    out += b.name;
    detail::put_u32(out, b.value.rank());
    for (std::size_t d : b.value.shape()) detail::put_u32(out, d);
    out.append(reinterpret_cast<const char*>(b.value.data()), b.value.size() * sizeof(double));
  }
  return out;
}

inline std::vector<NamedTensor> decode_container(std::string_view bytes, std::string_view magic,
                                                 const std::string& origin = "container") {
  if (bytes.substr(0, magic.size()) != magic) {
    throw IoError(origin + ": expected magic " + std::string(magic));
  }
  detail::Reader r(bytes.substr(magic.size()), origin);
  std::vector<NamedTensor> blobs;
  while (!r.done()) {
    NamedTensor b;
    b.name = std::string(r.take_view(r.u32()));
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<double> values(shape_size(shape));
    std::memcpy(values.data(), r.take(values.size() * sizeof(double)), values.size() * sizeof(double));
    b.value = Tensor(std::move(shape), std::move(values));
    blobs.push_back(std::move(b));
  }
  return blobs;
}

inline void write_container(const std::filesystem::path& path, std::string_view magic,
                            const std::vector<NamedTensor>& blobs) {
  write_file_atomic(path, encode_container(magic, blobs));
}

inline std::vector<NamedTensor> read_container(const std::filesystem::path& path, std::string_view magic) {
  return decode_container(read_file(path), magic, path.string());
}

inline const Tensor& find_blob(const std::vector<NamedTensor>& blobs, std::string_view name) {
  for (const auto& b : blobs)
    if (b.name == name) return b.value;
  throw LookupError("container has no blob named '" + std::string(name) + "'");
}

}  // namespace ssm::io
