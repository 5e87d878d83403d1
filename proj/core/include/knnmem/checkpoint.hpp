#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "knnmem/model.hpp"

namespace knnmem {

struct Checkpoint {
  KnnModel model;
  /// 1-based epoch the parameters were taken from.
  std::size_t epoch = 0;
  double dev_accuracy = 0.0;
  /// Effective run configuration as JSON text; empty when unknown.
  std::string run_config;
};

// File layout: "KNNTXT01", one byte float width (8), u64 manifest length,
// JSON manifest (model config, vocabulary and its hash, epoch, dev accuracy,
// tensor list), then each tensor's values as little-endian doubles in
// manifest order.
void save_checkpoint(const Checkpoint& checkpoint, std::ostream& out);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws DataError when `vocab` differs from the checkpoint's vocabulary.
void check_vocabulary(const Checkpoint& checkpoint, const Vocabulary& vocab);

}  // namespace knnmem
