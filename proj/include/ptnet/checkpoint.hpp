#pragma once

// Checkpoints are directories: manifest.json plus one PTN1 file per tensor.

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "ptnet/model.hpp"
#include "ptnet/prototype.hpp"
#include "ptnet/trainer.hpp"

namespace ptnet {

struct BankFile {
  PrototypeBank bank;
  BackboneConfig backbone;  // encoder the statistics were computed with
  std::uint64_t model_seed = 0;
};

void save_bank(const std::filesystem::path& dir, const PrototypeBank& bank, const BackboneConfig& backbone,
               std::uint64_t model_seed);
BankFile load_bank(const std::filesystem::path& dir);

struct Checkpoint {
  PtNet model;
  TrainConfig train;
  TrainState state;
  nlohmann::json extra;  // free-form run metadata echoed back
};

/// Stores parameters, optimizer moments, DWA history and configuration.
/// Values are written as f64 so a reload is bit-identical.
void save_checkpoint(const std::filesystem::path& dir, const PtNet& model, const TrainConfig& train,
                     const TrainState& state, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace ptnet
