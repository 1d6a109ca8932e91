#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "ptnet/model.hpp"
#include "ptnet/prototype.hpp"
#include "ptnet/synthscene.hpp"
#include "ptnet/trainer.hpp"

namespace ptnet {

/// Every generator, model, prototype and training setting of a run.
/// Serialized as INI with sections [data], [model], [prototype], [train]
/// and [ablation]; unknown sections or keys are rejected.
struct RunConfig {
  DatasetConfig data;
  ModelConfig model;
  BankConfig bank;
  TrainConfig train;

  static RunConfig parse_ini(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_ini() const;
  nlohmann::json to_json() const;
};

}  // namespace ptnet
