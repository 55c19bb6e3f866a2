#include "fsadapt/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "fsadapt/errors.hpp"

namespace fsadapt {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'A', 'D', 'C', 'K', 'P', 'T'};

}  // namespace

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void append_f64_le(std::string& out, double v) { append_u64_le(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

double read_f64_le(const unsigned char* p) { return std::bit_cast<double>(read_u64_le(p)); }

const NamedTensor* Checkpoint::find(const std::string& key) const {
  for (const auto& t : tensors) {
    if (t.key == key) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = ckpt.config;
  Json entries = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw ContractError("checkpoint tensor " + t.key + " has inconsistent shape");
    }
    entries.push_back({{"key", t.key}, {"shape", t.shape}, {"offset", offset}});
    offset += 8 * t.values.size();
  }
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  append_u64_le(out, text.size());
  out += text;
  for (const auto& t : ckpt.tensors) {
    for (const double v : t.values) append_f64_le(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16) {
    throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                      " (header needs 16 bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("checkpoint: bad magic at byte 0");
  }
  const std::uint64_t manifest_len = read_u64_le(bytes.data() + 8);
  if (manifest_len > bytes.size() - 16) {
    throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                      " (manifest needs " + std::to_string(manifest_len) + " bytes from byte 16)");
  }
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), manifest_len);
  Json manifest;
  try {
    manifest = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint: malformed manifest at byte " + std::to_string(16 + e.byte));
  }
  if (!manifest.is_object() || manifest.value("format", std::string()) != kCheckpointFormat) {
    throw FormatError("checkpoint: unsupported format version (expected " +
                      std::string(kCheckpointFormat) + ")");
  }
  const std::size_t blob_start = 16 + manifest_len;
  const std::size_t blob_size = bytes.size() - blob_start;

  Checkpoint ckpt;
  ckpt.config = manifest.at("config");
  std::uint64_t expected_offset = 0;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      NamedTensor t;
      t.key = entry.at("key").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_numel(t.shape);
      if (offset != expected_offset) {
        throw FormatError("checkpoint: tensor " + t.key + " has non-canonical offset");
      }
      if (offset + 8 * n > blob_size) {
        throw FormatError("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                          " (tensor " + t.key + " ends at byte " +
                          std::to_string(blob_start + offset + 8 * n) + ")");
      }
      t.values.resize(n);
      const unsigned char* p = bytes.data() + blob_start + offset;
      for (std::size_t i = 0; i < n; ++i) {
        t.values[i] = read_f64_le(p + 8 * i);
        if (!std::isfinite(t.values[i])) {
          throw FormatError("checkpoint: non-finite value in " + t.key + " at byte " +
                            std::to_string(blob_start + offset + 8 * i));
        }
      }
      expected_offset += 8 * n;
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed tensor table: ") + e.what());
  }
  if (expected_offset != blob_size) {
    throw FormatError("checkpoint: " + std::to_string(blob_size - expected_offset) +
                      " trailing bytes at byte " + std::to_string(blob_start + expected_offset));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  return decode_checkpoint(bytes);
}

}  // namespace fsadapt
