#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gramlm/model.hpp"
#include "gramlm/rng.hpp"

namespace gramlm {

inline constexpr std::uint32_t kTensorFileVersion = 1;

struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> data;  // column-major, as Eigen stores it

  bool operator==(const NamedTensor&) const = default;
};

// "GRAMTENS" magic, u32 version, u32 header length, JSON header (carries the
// kind and config block), u32 tensor count, then per tensor: u16 name
// length, name, u8 dtype (0 = f32), u32 rows, u32 cols, little-endian data.
struct TensorFile {
  std::string header_json;
  std::vector<NamedTensor> tensors;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
// Throws IoError, ParseError, or VersionError.
TensorFile read_tensor_file(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& json);

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
  std::optional<ModelParams<float>> adam_m;
  std::optional<ModelParams<float>> adam_v;
  std::uint64_t step = 0;
  RngState rng;
  // Free-form JSON object stored alongside (objective, provenance, ...).
  std::string meta_json = "{}";
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws VersionError when tensors do not match the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Fine-tuning export: encoder tensors only, plus the shape block.
void save_encoder(const std::filesystem::path& path, const Encoder<float>& encoder,
                  const std::string& meta_json = "{}");
Encoder<float> load_encoder(const std::filesystem::path& path);

}  // namespace gramlm
