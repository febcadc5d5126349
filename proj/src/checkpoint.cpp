#include "afuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <zlib.h>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::string_view kFormat = "afuse-checkpoint";

std::string hex16(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace

std::uint32_t crc32_of(std::span<const char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  Json entries = Json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    const std::size_t bytes = t.size() * sizeof(float);
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}, {"bytes", bytes}});
    payload.append(reinterpret_cast<const char*>(t.data()), bytes);
  }
  Json header = {{"format", kFormat},
                 {"version", kCheckpointVersion},
                 {"precision", "float32"},
                 {"seed", ckpt.seed},
                 {"tensors", entries},
                 {"payload_bytes", payload.size()},
                 {"crc32", crc32_of(payload)},
                 {"meta", ckpt.meta}};
  const std::string text = header.dump();
  std::string out(sizeof(std::uint64_t), '\0');
  const std::uint64_t len = text.size();
  std::memcpy(out.data(), &len, sizeof len);
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(std::uint64_t)) throw ValidationError("checkpoint truncated before header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof len);
  if (len > bytes.size() - sizeof len) throw ValidationError("checkpoint header length exceeds file size");
  Json header;
  try {
    header = Json::parse(bytes.substr(sizeof len, len));
  } catch (const Json::parse_error& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != kFormat) throw ValidationError("not an afuse checkpoint");
  if (header.value("version", -1) != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + header.value("version", Json()).dump());
  }
  if (header.value("precision", "") != "float32") throw ValidationError("unsupported checkpoint precision");
  const std::string_view payload = bytes.substr(sizeof len + len);
  if (payload.size() != header.at("payload_bytes").get<std::size_t>()) {
    throw ValidationError("checkpoint payload size does not match header");
  }
  if (crc32_of(payload) != header.at("crc32").get<std::uint32_t>()) {
    throw ValidationError("checkpoint CRC32 mismatch: payload corrupted");
  }
  Checkpoint ckpt;
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.meta = header.at("meta");
  for (const auto& e : header.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto n = e.at("bytes").get<std::size_t>();
    if (n != numel(shape) * sizeof(float) || offset + n > payload.size()) {
      throw ValidationError("checkpoint entry '" + e.at("name").get<std::string>() + "' is inconsistent");
    }
    Tensor<float> t(shape);
    std::memcpy(t.data(), payload.data() + offset, n);
    ckpt.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ValidationError("failed writing '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Checkpoint to_checkpoint(const ParameterStore<float>& params, Json meta) {
  Checkpoint c;
  c.tensors = params.tensors();
  c.seed = params.seed();
  c.meta = std::move(meta);
  return c;
}

ParameterStore<float> to_store(const Checkpoint& ckpt) {
  ParameterStore<float> p(ckpt.seed);
  for (const auto& [name, t] : ckpt.tensors) p.set(name, t);
  return p;
}

void check_parameters(const ParamSpecMap& spec, const ParameterStore<float>& params, const std::string& context) {
  for (const auto& [name, ps] : spec) {
    if (!params.contains(name)) throw ValidationError(context + ": missing parameter '" + name + "'");
    if (params.at(name).shape() != ps.shape) {
      throw ValidationError(context + ": parameter '" + name + "' has shape " + to_string(params.at(name).shape()) +
                            ", architecture expects " + to_string(ps.shape));
    }
  }
  for (const auto& [name, t] : params) {
    if (!spec.contains(name)) throw ValidationError(context + ": unexpected parameter '" + name + "'");
  }
}

Checkpoint to_checkpoint(const SampleBatch& batch, Json meta) {
  Checkpoint c;
  c.tensors["x"] = batch.x;
  c.tensors["y"] = batch.y;
  Tensor<float> labels({batch.size(), batch.height(), batch.width()});
  for (std::size_t i = 0; i < batch.labels.size(); ++i) labels[i] = static_cast<float>(batch.labels[i]);
  c.tensors["labels"] = std::move(labels);
  c.meta = std::move(meta);
  return c;
}

SampleBatch to_batch(const Checkpoint& ckpt) {
  for (const char* key : {"x", "y", "labels"}) {
    if (!ckpt.tensors.contains(key)) throw ValidationError(std::string("dataset file lacks tensor '") + key + "'");
  }
  SampleBatch b;
  b.x = ckpt.tensors.at("x");
  b.y = ckpt.tensors.at("y");
  const auto& l = ckpt.tensors.at("labels");
  if (b.x.shape() != b.y.shape() || b.x.rank() != 4 || b.x.dim(1) != 1 || l.size() != b.x.size()) {
    throw ValidationError("dataset tensors have inconsistent shapes");
  }
  b.labels.resize(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) b.labels[i] = static_cast<int>(l[i]);
  return b;
}

std::string content_hash(const SampleBatch& batch) {
  Checkpoint c = to_checkpoint(batch);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : c.tensors) {
    h = fnv1a(name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)), h);
  }
  return hex16(h);
}

std::string content_hash(const ParameterStore<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params) {
    h = fnv1a(name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)), h);
  }
  return hex16(h);
}

void write_json(const std::filesystem::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ValidationError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace afuse
