#pragma once

// Run configuration, stored as JSON with four sections and a seed:
//
//   {
//     "model":  { "variant": 50, "mode": "se_r", "reduction_ratio": 8, ... },
//     "loss":   { "w1": 0.3, "w2": 0.3 },
//     "train":  { "epochs": 200, "batch_size": 128, ... , "augment": { ... } },
//     "data":   { "root": "", "subset": 0, "test_subset": 0 },
//     "output": { "dir": "runs/default" },
//     "seed": 0
//   }
//
// Every key is optional; unknown keys are rejected. See configs/ for examples.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "rattn/model.hpp"
#include "rattn/training.hpp"

namespace rattn {

struct DataConfig {
  std::string root;
  std::size_t subset = 0;       // training images kept (0 = all)
  std::size_t test_subset = 0;  // test images kept (0 = same as subset)
  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  ModelSpec model = ModelSpec::make(34, ModelMode::SeR);
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;

  /// The configuration an empty file parses to (SE-R-ResNet34, loss weights 0.3).
  static RunConfig defaults();

  /// Cross-field checks (loss arity, model spec, schedule). Throws ConfigError.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Parses and validates. Errors name the offending key, e.g. "loss.w2".
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& file);

/// Canonical JSON with every key written out.
std::string serialize_config(const RunConfig& cfg);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Weights used when the config names none: 0.3 for every aux head.
LossWeights default_loss_weights(const ModelSpec& spec);

}  // namespace rattn
