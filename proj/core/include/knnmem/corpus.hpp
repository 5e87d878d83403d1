#pragma once

// Labeled text datasets: CSV ingestion, tokenization, vocabularies, and the
// dev/low-resource/unbalanced splits used by the experiments.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

namespace knnmem {

using DocId = std::uint32_t;
using Label = std::uint32_t;

struct Document {
  DocId id = 0;
  Label label = 0;
  std::string title;
  std::string body;
  std::vector<std::string> tokens;

  /// Title and body joined by one space.
  std::string text() const { return title + " " + body; }
};

using Corpus = std::vector<Document>;

class LabelSpace {
 public:
  explicit LabelSpace(std::vector<std::string> names);
  /// Classes named "1".."c".
  static LabelSpace numbered(std::size_t c);
  /// One class name per non-empty line (the classes.txt shipped with the
  /// public CSV distributions).
  static LabelSpace from_file(const std::filesystem::path& path);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(Label label) const { return names_.at(label); }

 private:
  std::vector<std::string> names_;
};

/// Word and character vocabularies. Id 0 is the shared unknown slot in both.
class Vocabulary {
 public:
  static constexpr std::uint32_t kUnknown = 0;

  Vocabulary();
  /// Rebuilds a vocabulary from its ordered entries (index 0 = unknown).
  Vocabulary(std::vector<std::string> words, std::u32string chars);

  std::uint32_t word_id(std::string_view token) const;
  std::uint32_t char_id(char32_t c) const;
  std::vector<std::uint32_t> char_ids(std::string_view token) const;

  std::size_t word_count() const { return words_.size(); }
  std::size_t char_count() const { return chars_.size(); }
  /// Word for each id; entry 0 is the placeholder "<unk>".
  const std::vector<std::string>& words() const { return words_; }
  /// Character for each id; entry 0 is U+0000 standing for unknown.
  const std::u32string& chars() const { return chars_; }

  /// Stable fingerprint of both maps.
  std::uint64_t hash() const;

  void add_word(const std::string& word);
  void add_char(char32_t c);

 private:
  std::vector<std::string> words_;
  std::u32string chars_;
  std::unordered_map<std::string, std::uint32_t> word_ids_;
  std::unordered_map<char32_t, std::uint32_t> char_ids_;
};

struct SplitSpec {
  std::size_t dev_per_class = 500;
  std::uint64_t seed = 0;
};

struct LowResource {
  double fraction = 0.1;
};
struct Unbalanced {
  std::vector<std::size_t> per_class;
};
using SubsampleMode = std::variant<LowResource, Unbalanced>;

/// Lowercases, splits on Unicode whitespace, strips non-alphanumeric
/// characters from both ends of each piece, and drops empty pieces.
std::vector<std::string> tokenize(std::string_view text);

/// Parses CSV records `"class","title"[,"body"...]` with 1-based class
/// indices. Ids are assigned in record order starting at 0. `source` names
/// the input in error messages.
Corpus parse_dataset(std::istream& in, const LabelSpace& labels, std::string_view source = "<stream>");
Corpus load_dataset(const std::filesystem::path& path, const LabelSpace& labels);

Vocabulary build_vocab(const Corpus& train, std::size_t min_count = 1);

/// Holds out exactly dev_per_class documents of every class. Both halves keep
/// the input order.
std::pair<Corpus, Corpus> split_dev(const Corpus& corpus, std::size_t num_classes, const SplitSpec& spec);

Corpus subsample(const Corpus& train, std::size_t num_classes, const SubsampleMode& mode, std::uint64_t seed);

/// Documents per class; labels outside [0, num_classes) are an error.
std::vector<std::size_t> class_counts(const Corpus& corpus, std::size_t num_classes);

/// Tokenized cache: `id<TAB>label<TAB>tok tok ...` per line.
void write_corpus_cache(const Corpus& corpus, std::ostream& out);
Corpus read_corpus_cache(std::istream& in);

/// Lookup of documents by id, for resolving neighbor ids.
class DocumentStore {
 public:
  DocumentStore() = default;
  DocumentStore(const Corpus* corpus, std::size_t num_classes);

  const Document& at(DocId id) const;
  bool contains(DocId id) const { return index_.contains(id); }
  const Corpus& corpus() const { return *corpus_; }
  std::size_t num_classes() const { return num_classes_; }

 private:
  const Corpus* corpus_ = nullptr;
  std::size_t num_classes_ = 0;
  std::unordered_map<DocId, std::size_t> index_;
};

}  // namespace knnmem
