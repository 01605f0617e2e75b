// Checkpoint file layout (all integers little-endian):
//
//   "ECGLCKPT"              8-byte magic
//   u32                     format version
//   string                  metadata JSON (config, config hash, step, epoch, best metric, RNG state)
//   u32                     tensor count
//   per tensor: string name, u8 dtype (0 = f32, 1 = f64), u64 rows, u64 cols, payload
//   u64                     FNV-1a of every preceding byte
//
// Strings are a u64 length followed by bytes. Parameters are stored as
// "param/<name>", AdamW moments as "adam.m/<name>" and "adam.v/<name>".
#pragma once

#include "ecglp/model.hpp"
#include "ecglp/optim.hpp"

#include <json.hpp>

#include <filesystem>

namespace ecglp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF32;
  Matrix<double> value;  // f32 payloads widen exactly and narrow back bit-for-bit
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  ModelConfig model_config() const;
};

/// Writes to a temporary sibling and renames, so readers never see a partial file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, unsupported version, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename S>
Checkpoint make_checkpoint(const Model<S>& model, const AdamW<S>* optimizer, nlohmann::json meta);

/// Copies parameters into `model`. The stored config hash must match the model's;
/// the error message names both hashes.
template <typename S>
void restore_parameters(Model<S>& model, const Checkpoint& ckpt);

template <typename S>
void restore_optimizer(AdamW<S>& optimizer, const Checkpoint& ckpt);

/// Copies only text-encoder parameters (token/position tables and blocks).
/// Returns the number of tensors copied; shapes must match.
template <typename S>
int copy_text_encoder(Model<S>& model, const Checkpoint& ckpt);

}  // namespace ecglp
