#pragma once

#include "mammovl/nn/layers.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mammovl {

struct TensorRecord {
  std::string name;
  nn::Tensor value;
};

/// Single-file parameter archive:
///   "MVLCKPT1" | u64 LE header length | JSON header | float32 LE payload
/// The header carries format_version, kind, config, model, epoch,
/// validation_loss, sha256 (of the payload) and the tensor table.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  std::string kind = "vision-language";
  nlohmann::json config = nlohmann::json::object();  // run config snapshot
  nlohmann::json model = nlohmann::json::object();   // architecture (+ vocabulary)
  int epoch = 0;
  double validation_loss = 0.0;
  std::vector<TensorRecord> tensors;
  std::string sha256;  // set by save_checkpoint / load_checkpoint
};

std::string sha256_hex(std::string_view bytes);
std::string payload_bytes(const std::vector<TensorRecord>& tensors);

/// Writes to a temporary sibling and renames into place. Fills ckpt.sha256.
void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws IntegrityError on a bad magic, truncated file or hash mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<TensorRecord> snapshot_parameters(const nn::ParameterList& params);
/// Copies values by name; every parameter must be present with the same
/// shape. Extra records are ignored when `allow_extra` is set.
void restore_parameters(const std::vector<TensorRecord>& records, nn::ParameterList& params,
                        bool allow_extra = false);

/// sha256 over the named parameter values (used to prove that attaching a
/// head leaves the backbone untouched).
std::string parameters_sha256(const nn::ParameterList& params);

}  // namespace mammovl
