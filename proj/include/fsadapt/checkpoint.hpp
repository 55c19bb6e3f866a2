#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fsadapt/json_io.hpp"
#include "fsadapt/tensor.hpp"

namespace fsadapt {

inline constexpr const char* kCheckpointFormat = "fsadapt-checkpoint/1";

struct NamedTensor {
  std::string key;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedTensor&) const = default;
};

/// Parameter snapshot plus the configuration that produced it.
///
/// On disk: 8-byte magic "FSADCKPT", u64 little-endian manifest length, the
/// manifest as compact JSON ({format, config, tensors: [{key, shape,
/// offset}]}), then each tensor as little-endian float64 at its byte offset
/// from the start of the blob. Encoding is canonical, so decode followed by
/// encode reproduces the input bytes.
struct Checkpoint {
  Json config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& key) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Little-endian helpers shared by the binary file formats.
void append_u64_le(std::string& out, std::uint64_t v);
void append_f64_le(std::string& out, double v);
std::uint64_t read_u64_le(const unsigned char* p);
double read_f64_le(const unsigned char* p);

}  // namespace fsadapt
