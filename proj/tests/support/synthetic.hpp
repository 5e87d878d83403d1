#pragma once

// Synthetic corpora and small model configurations for tests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "knnmem/corpus.hpp"
#include "knnmem/model.hpp"
#include "knnmem/rng.hpp"

namespace knnmem::testing {

/// Documents with ids 0.. in order; tokens come from tokenize(text).
Corpus make_corpus(const std::vector<std::pair<Label, std::string>>& docs);

/// Each class owns a handful of topic words; documents mix three topic words
/// with shared filler, so the label is recoverable from the text.
Corpus topic_corpus(std::size_t per_class, std::size_t classes, std::uint64_t seed, DocId first_id = 0);

/// Uniformly random documents over a vocabulary of `vocab` words "w0".."wN".
Corpus random_corpus(Rng& rng, std::size_t docs, std::size_t vocab, std::size_t max_len, std::size_t classes);

/// Label recoverable only through retrieval. Training documents come in
/// pairs sharing a rare marker token and a label; every dev document shares
/// the marker of one training document and takes its label. All other
/// tokens are unique to their document.
struct MarkerTask {
  Corpus train;
  Corpus dev;
};
MarkerTask marker_task(std::size_t pairs, std::size_t dev, std::size_t classes, std::uint64_t seed);

/// Small encoder dimensions for fast tests.
EncoderConfig tiny_encoder(std::size_t hidden = 8);
ModelConfig tiny_model(const std::string& preset, std::size_t classes, std::size_t perspectives = 3,
                       std::size_t hidden = 8);

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Writes a corpus as a 1-based class CSV (`"class","title","body"`).
void write_csv(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace knnmem::testing
