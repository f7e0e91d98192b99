#pragma once

// Single-file model archive, little-endian:
//
//   8 bytes   magic "RATTNCKP"
//   u32       schema version (kCheckpointSchema)
//   u64       metadata length L, then L bytes of JSON:
//               { "spec": {...}, "epoch": k, "rng": [4 x u64],
//                 "train": {...} | null, "history": [...],
//                 "channel_means": [r, g, b] | null }
//   u64       tensor count
//   per tensor:
//     u32 name length, name bytes
//     u64 n, h, w, c
//     n*h*w*c float32 values
//
// Tensor names are the parameter names ("stage1.block0.branch0.conv.weight"),
// batch-norm buffers ("....bn.running_mean") and optimizer state
// ("momentum/<parameter name>").

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rattn/model.hpp"
#include "rattn/training.hpp"

namespace rattn {

inline constexpr std::uint32_t kCheckpointSchema = 1;

struct Checkpoint {
  ModelSpec spec;
  std::optional<TrainConfig> train;
  std::size_t epoch = 0;  // completed epochs
  Rng::State rng{};
  TrainingHistory history;
  std::optional<ChannelMeans> means;  // normalization used in training
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

/// Written to a temporary file first and renamed, so a crash never leaves a
/// half-written archive under the final name.
void write_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt);

/// Throws IoError on a missing file, bad magic, unknown schema or truncation.
Checkpoint read_checkpoint(const std::filesystem::path& file);

/// Parameters and batch-norm buffers of a model.
void store_model(Model<float>& model, Checkpoint& ckpt);

/// Copies every parameter and buffer back; a missing or mis-shaped tensor is an IoError.
void restore_model(const Checkpoint& ckpt, Model<float>& model);

/// Builds the model described by the archive and loads its weights.
Model<float> load_model(const std::filesystem::path& file);

}  // namespace rattn
