#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "afuse/batch.hpp"
#include "afuse/parameters.hpp"

namespace afuse {

using Json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

/// Named float32 tensors plus free-form metadata.
///
/// Layout: u64 little-endian header length, JSON header (format version,
/// names, shapes, precision, seed, byte offsets, CRC32 of the payload, meta),
/// then the raw little-endian float32 payload in sorted-name order.
struct Checkpoint {
  TensorMap<float> tensors;
  std::uint64_t seed = 0;
  Json meta = Json::object();
};

std::uint32_t crc32_of(std::span<const char> bytes);

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Verifies the header and the payload CRC.
Checkpoint decode_checkpoint(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint to_checkpoint(const ParameterStore<float>& params, Json meta = Json::object());
ParameterStore<float> to_store(const Checkpoint& ckpt);

/// Rejects missing, extra or misshapen parameters.
void check_parameters(const ParamSpecMap& spec, const ParameterStore<float>& params, const std::string& context);

/// Samples stored as tensors "x", "y" and "labels" (class ids as floats).
Checkpoint to_checkpoint(const SampleBatch& batch, Json meta = Json::object());
SampleBatch to_batch(const Checkpoint& ckpt);

/// Stable content hash (16 hex digits) of the encoded tensors.
std::string content_hash(const SampleBatch& batch);
std::string content_hash(const ParameterStore<float>& params);

/// Writes JSON with sorted keys and a trailing newline.
void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

}  // namespace afuse
