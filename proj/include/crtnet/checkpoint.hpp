#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crtnet/model.hpp"
#include "crtnet/tensor.hpp"

namespace crtnet {

/// Binary container shared by model and training checkpoints:
///
///   "CRTNETCK" | u32 version | u32 kind
///   u32 meta_len | meta_len bytes of "key=value\n" lines
///   u64 record_count | records
///   record: u32 name_len | name | u32 rank | u64 dims[rank] | f64 values (LE)
struct CheckpointFile {
  enum class Kind : std::uint32_t { Model = 0, Training = 1 };
  Kind kind = Kind::Model;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> records;
};

std::string encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

/// Meta keys are prefixed with "model.".
CheckpointFile model_checkpoint(const ModelConfig& config, const CrtnetParams& params);

struct LoadedModel {
  ModelConfig config;
  CrtnetParams params;
};
/// Accepts model and training checkpoints; extra records are ignored.
LoadedModel load_model(const CheckpointFile& file);
LoadedModel load_model(const std::filesystem::path& path);

/// Copies stored values into `params` by name. Throws CheckpointError on a
/// missing record or shape mismatch.
void assign_params(const CheckpointFile& file, const CrtnetParams& params);

/// Entries whose key starts with `prefix`, prefix removed.
std::map<std::string, std::string> strip_prefix(const std::map<std::string, std::string>& kv,
                                                const std::string& prefix);

}  // namespace crtnet
