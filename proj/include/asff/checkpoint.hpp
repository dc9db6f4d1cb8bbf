#pragma once

// Checkpoint file layout (all integers little-endian):
//   "ASFF" | u32 version | u64 header length | UTF-8 JSON header | blobs
// The header is {"meta": {...}, "tensors": {name: {dtype, shape, offset,
// length}}}; offsets are bytes from the start of the blob section and every
// blob is little-endian float32.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asff/errors.hpp"
#include "asff/params.hpp"
#include "asff/tensor.hpp"

namespace asff {

inline constexpr char kCheckpointMagic[4] = {'A', 'S', 'F', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["meta"] = ckpt.meta;
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != t.shape.size()) {
      throw InvalidArgument("encode_checkpoint: tensor " + t.name + " has " + std::to_string(t.values.size()) +
                            " values for shape " + t.shape.str());
    }
    if (index.contains(t.name)) throw InvalidArgument("encode_checkpoint: duplicate tensor name " + t.name);
    const std::uint64_t length = t.values.size() * sizeof(float);
    index[t.name] = {{"dtype", "f32"},
                     {"shape", {t.shape.n, t.shape.c, t.shape.h, t.shape.w}},
                     {"offset", offset},
                     {"length", length}};
    offset += length;
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& t : ckpt.tensors) {
    for (float v : t.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const auto fail = [&](const std::string& why) { return FormatError(origin + ": " + why); };
  constexpr std::size_t kPrefix = 4 + 4 + 8;
  if (bytes.size() < kPrefix) throw fail("truncated before the header (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw fail("bad magic, not an ASFF checkpoint");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto version = detail::get_le<std::uint32_t>(raw + 4);
  if (version != kCheckpointVersion) {
    throw fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = detail::get_le<std::uint64_t>(raw + 8);
  if (header_len > bytes.size() - kPrefix) throw fail("truncated header");
  const auto header = nlohmann::ordered_json::parse(bytes.begin() + kPrefix,
                                                    bytes.begin() + static_cast<std::ptrdiff_t>(kPrefix + header_len),
                                                    nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw fail("header is not valid JSON");
  if (!header.contains("tensors") || !header["tensors"].is_object()) throw fail("header has no tensor index");

  Checkpoint ckpt;
  if (header.contains("meta")) ckpt.meta = header["meta"];
  const std::size_t blob_start = kPrefix + header_len;
  const std::size_t blob_size = bytes.size() - blob_start;
  try {
    for (const auto& [name, entry] : header["tensors"].items()) {
      if (entry.at("dtype").get<std::string>() != "f32") throw fail("tensor " + name + " has unsupported dtype");
      const auto dims = entry.at("shape").get<std::vector<std::size_t>>();
      if (dims.size() != 4) throw fail("tensor " + name + " shape must have 4 dims");
      const Shape shape{dims[0], dims[1], dims[2], dims[3]};
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto length = entry.at("length").get<std::uint64_t>();
      if (length != shape.size() * sizeof(float)) throw fail("tensor " + name + " length does not match its shape");
      if (offset > blob_size || length > blob_size - offset) throw fail("truncated data for tensor " + name);
      CheckpointTensor t{name, shape, std::vector<float>(shape.size())};
      const unsigned char* p = raw + blob_start + offset;
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        t.values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
      }
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::ordered_json::exception& e) {
    throw fail(std::string("malformed tensor index: ") + e.what());
  }
  return ckpt;
}

// Written to a sibling temp file, then renamed over `path`.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

template <typename T>
CheckpointTensor to_checkpoint_tensor(const std::string& name, const Tensor<T>& t) {
  CheckpointTensor out{name, t.shape(), std::vector<float>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<float>(t[i]);
  return out;
}

// Copies values into `dst` by name; shapes must match.
template <typename T>
void load_tensor(const Checkpoint& ckpt, const std::string& name, Tensor<T>& dst) {
  const CheckpointTensor* src = ckpt.find(name);
  if (src == nullptr) throw FormatError("checkpoint is missing tensor " + name);
  if (src->shape != dst.shape()) {
    throw FormatError("checkpoint tensor " + name + " has shape " + src->shape.str() + ", expected " + dst.shape().str());
  }
  for (std::size_t i = 0; i < src->values.size(); ++i) dst[i] = static_cast<T>(src->values[i]);
}

}  // namespace asff
