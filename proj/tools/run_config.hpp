#pragma once

// Effective run configuration shared by every subcommand. Values come from
// built-in defaults, then an optional JSON config file, then command-line
// flags.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "knnmem/trainer.hpp"

namespace knnmem::cli {

enum class KeyType { integer, real, boolean, text, integer_list };

struct ConfigKey {
  std::string name;
  KeyType type;
  nlohmann::json default_value;
  std::string help;
};

/// Every recognised key with its default, in documentation order.
const std::vector<ConfigKey>& config_schema();
const ConfigKey* find_key(std::string_view name);

struct RunConfig {
  std::string train;
  std::string dev;
  std::string classes;
  std::size_t num_classes = 0;
  std::size_t dev_per_class = 500;
  std::string external;
  std::string external_classes;
  std::size_t external_num_classes = 0;
  std::string out_dir = "knnmem-out";
  std::string setup;
  double low_resource_fraction = 0.1;
  std::vector<std::size_t> unbalanced_counts = {2000, 4000, 8000, 16000};
  TrainConfig trainer;

  /// Schema defaults as a JSON object.
  static nlohmann::json defaults();
  /// Throws ConfigError on unknown keys or wrongly typed values.
  static RunConfig from_json(const nlohmann::json& object);
  nlohmann::json to_json() const;
};

/// Overlays `patch` onto `base` after checking every key against the schema.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, std::string_view source);
nlohmann::json load_config_file(const std::filesystem::path& path);

}  // namespace knnmem::cli
