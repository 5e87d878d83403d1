#include "knnmem/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <set>
#include <sstream>

#include "knnmem/error.hpp"
#include "knnmem/rng.hpp"
#include "knnmem/utf8.hpp"

namespace knnmem {

// ---------------------------------------------------------------- labels

LabelSpace::LabelSpace(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() < 2) throw ConfigError("a label space needs at least 2 classes");
  std::set<std::string> seen(names_.begin(), names_.end());
  if (seen.size() != names_.size()) throw ConfigError("class names must be distinct");
}

LabelSpace LabelSpace::numbered(std::size_t c) {
  std::vector<std::string> names;
  for (std::size_t i = 1; i <= c; ++i) names.push_back(std::to_string(i));
  return LabelSpace(std::move(names));
}

LabelSpace LabelSpace::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open class list " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return LabelSpace(std::move(names));
}

// ------------------------------------------------------------ vocabulary

Vocabulary::Vocabulary() {
  add_word("<unk>");
  add_char(U'\0');
}

Vocabulary::Vocabulary(std::vector<std::string> words, std::u32string chars) {
  if (words.empty() || chars.empty()) throw DataError("vocabulary must contain the unknown slots");
  for (auto& w : words) {
    if (word_ids_.contains(w)) throw DataError("duplicate vocabulary word: " + w);
    add_word(w);
  }
  for (char32_t c : chars) {
    if (char_ids_.contains(c)) throw DataError("duplicate vocabulary character");
    add_char(c);
  }
}

void Vocabulary::add_word(const std::string& word) {
  if (word_ids_.contains(word)) return;
  word_ids_.emplace(word, static_cast<std::uint32_t>(words_.size()));
  words_.push_back(word);
}

void Vocabulary::add_char(char32_t c) {
  if (char_ids_.contains(c)) return;
  char_ids_.emplace(c, static_cast<std::uint32_t>(chars_.size()));
  chars_.push_back(c);
}

std::uint32_t Vocabulary::word_id(std::string_view token) const {
  auto it = word_ids_.find(std::string(token));
  if (it == word_ids_.end() || it->second == 0) return kUnknown;
  return it->second;
}

std::uint32_t Vocabulary::char_id(char32_t c) const {
  auto it = char_ids_.find(c);
  return it == char_ids_.end() ? kUnknown : it->second;
}

std::vector<std::uint32_t> Vocabulary::char_ids(std::string_view token) const {
  std::vector<std::uint32_t> ids;
  for (char32_t c : utf8::decode(token)) ids.push_back(char_id(c));
  return ids;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = fnv1a("knnmem-vocab");
  for (const auto& w : words_) {
    h = fnv1a(w, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  h = fnv1a(utf8::encode(chars_.substr(1)), h);
  return h;
}

// ------------------------------------------------------------- tokenizer

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  const std::u32string cps = utf8::decode(text);
  std::size_t i = 0;
  while (i < cps.size()) {
    while (i < cps.size() && utf8::is_whitespace(cps[i])) ++i;
    std::size_t end = i;
    while (end < cps.size() && !utf8::is_whitespace(cps[end])) ++end;
    std::size_t lo = i;
    std::size_t hi = end;
    while (lo < hi && !utf8::is_alnum(cps[lo])) ++lo;
    while (hi > lo && !utf8::is_alnum(cps[hi - 1])) --hi;
    if (lo < hi) {
      std::string token;
      for (std::size_t k = lo; k < hi; ++k) utf8::append(token, utf8::to_lower(cps[k]));
      tokens.push_back(std::move(token));
    }
    i = end;
  }
  return tokens;
}

// ------------------------------------------------------------------- CSV

namespace {

struct RawRecord {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

class CsvReader {
 public:
  CsvReader(std::string data, std::string_view source) : data_(std::move(data)), source_(source) {}

  bool next(RawRecord& record) {
    skip_blank_lines();
    if (pos_ >= data_.size()) return false;
    record.line = line_;
    record.fields.clear();
    while (true) {
      record.fields.push_back(read_field());
      if (pos_ >= data_.size()) return true;
      const char c = data_[pos_];
      if (c == ',') {
        ++pos_;
        continue;
      }
      if (c == '\r' || c == '\n') {
        consume_newline();
        return true;
      }
      throw DataError(std::string(source_) + ":" + std::to_string(line_) + ": unexpected character after field");
    }
  }

 private:
  void skip_blank_lines() {
    while (pos_ < data_.size() && (data_[pos_] == '\n' || data_[pos_] == '\r')) consume_newline();
  }

  void consume_newline() {
    if (data_[pos_] == '\r' && pos_ + 1 < data_.size() && data_[pos_ + 1] == '\n') ++pos_;
    ++pos_;
    ++line_;
  }

  bool at_field_end(std::size_t p) const {
    return p >= data_.size() || data_[p] == ',' || data_[p] == '\n' || data_[p] == '\r';
  }

  std::string read_field() {
    std::string out;
    if (pos_ < data_.size() && data_[pos_] == '"') {
      const std::size_t start_line = line_;
      ++pos_;
      while (true) {
        if (pos_ >= data_.size()) {
          throw DataError(std::string(source_) + ":" + std::to_string(start_line) + ": unterminated quoted field");
        }
        const char c = data_[pos_];
        if (c == '\\' && pos_ + 1 < data_.size()) {
          const char n = data_[pos_ + 1];
          if (n == 'n') {
            out.push_back('\n');
            pos_ += 2;
            continue;
          }
          // A backslash right before the closing quote is kept literally.
          if (n == '"' && !at_field_end(pos_ + 2)) {
            out.push_back('"');
            pos_ += 2;
            continue;
          }
        }
        if (c == '"') {
          if (pos_ + 1 < data_.size() && data_[pos_ + 1] == '"') {
            out.push_back('"');
            pos_ += 2;
            continue;
          }
          ++pos_;
          return out;
        }
        if (c == '\n') ++line_;
        out.push_back(c);
        ++pos_;
      }
    }
    while (!at_field_end(pos_)) {
      if (data_[pos_] == '\\' && pos_ + 1 < data_.size() && (data_[pos_ + 1] == 'n' || data_[pos_ + 1] == '"')) {
        out.push_back(data_[pos_ + 1] == 'n' ? '\n' : '"');
        pos_ += 2;
        continue;
      }
      out.push_back(data_[pos_++]);
    }
    return out;
  }

  std::string data_;
  std::string_view source_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace

Corpus parse_dataset(std::istream& in, const LabelSpace& labels, std::string_view source) {
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CsvReader reader(std::move(data), source);
  Corpus corpus;
  RawRecord record;
  while (reader.next(record)) {
    const std::string where = std::string(source) + ":" + std::to_string(record.line);
    if (record.fields.size() < 2) {
      throw DataError(where + ": expected at least 2 fields, got " + std::to_string(record.fields.size()));
    }
    const std::string& cls = record.fields[0];
    std::size_t index = 0;
    auto [ptr, ec] = std::from_chars(cls.data(), cls.data() + cls.size(), index);
    if (ec != std::errc() || ptr != cls.data() + cls.size()) {
      throw DataError(where + ": class index '" + cls + "' is not an integer");
    }
    if (index < 1 || index > labels.size()) {
      throw DataError(where + ": class index " + cls + " outside 1.." + std::to_string(labels.size()));
    }
    Document doc;
    doc.id = static_cast<DocId>(corpus.size());
    doc.label = static_cast<Label>(index - 1);
    doc.title = record.fields[1];
    for (std::size_t f = 2; f < record.fields.size(); ++f) {
      if (f > 2) doc.body += ' ';
      doc.body += record.fields[f];
    }
    doc.tokens = tokenize(doc.text());
    if (doc.tokens.empty()) throw DataError(where + ": record has no tokens");
    corpus.push_back(std::move(doc));
  }
  if (corpus.empty()) throw DataError(std::string(source) + ": no records");
  return corpus;
}

Corpus load_dataset(const std::filesystem::path& path, const LabelSpace& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_dataset(in, labels, path.string());
}

// ----------------------------------------------------------- vocabulary

Vocabulary build_vocab(const Corpus& train, std::size_t min_count) {
  if (train.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  std::set<char32_t> chars;
  for (const auto& doc : train) {
    for (const auto& tok : doc.tokens) {
      ++counts[tok];
      for (char32_t c : utf8::decode(tok)) chars.insert(c);
    }
  }
  Vocabulary vocab;
  for (const auto& [word, count] : counts) {
    if (count >= std::max<std::size_t>(min_count, 1)) vocab.add_word(word);
  }
  for (char32_t c : chars) {
    if (c != U'\0') vocab.add_char(c);
  }
  return vocab;
}

// ---------------------------------------------------------------- splits

std::vector<std::size_t> class_counts(const Corpus& corpus, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& doc : corpus) {
    if (doc.label >= num_classes) {
      throw DataError("document " + std::to_string(doc.id) + " has label " + std::to_string(doc.label) +
                      " outside " + std::to_string(num_classes) + " classes");
    }
    ++counts[doc.label];
  }
  return counts;
}

namespace {

std::vector<std::vector<std::size_t>> positions_by_class(const Corpus& corpus, std::size_t num_classes) {
  class_counts(corpus, num_classes);
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < corpus.size(); ++i) by_class[corpus[i].label].push_back(i);
  return by_class;
}

/// Keeps `take[c]` seeded-random positions of each class, in corpus order.
std::vector<bool> select_per_class(const Corpus& corpus, std::size_t num_classes, const std::vector<std::size_t>& take,
                                   std::uint64_t seed) {
  auto by_class = positions_by_class(corpus, num_classes);
  Rng rng(seed);
  std::vector<bool> chosen(corpus.size(), false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& pos = by_class[c];
    rng.shuffle(std::span<std::size_t>(pos));
    for (std::size_t k = 0; k < take[c]; ++k) chosen[pos[k]] = true;
  }
  return chosen;
}

}  // namespace

std::pair<Corpus, Corpus> split_dev(const Corpus& corpus, std::size_t num_classes, const SplitSpec& spec) {
  const auto counts = class_counts(corpus, num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] < spec.dev_per_class) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(counts[c]) + " documents, fewer than " +
                      std::to_string(spec.dev_per_class) + " requested for dev");
    }
  }
  const auto chosen = select_per_class(corpus, num_classes, std::vector<std::size_t>(num_classes, spec.dev_per_class),
                                       spec.seed);
  Corpus train, dev;
  for (std::size_t i = 0; i < corpus.size(); ++i) (chosen[i] ? dev : train).push_back(corpus[i]);
  return {std::move(train), std::move(dev)};
}

Corpus subsample(const Corpus& train, std::size_t num_classes, const SubsampleMode& mode, std::uint64_t seed) {
  const auto counts = class_counts(train, num_classes);
  std::vector<std::size_t> take(num_classes);
  if (const auto* low = std::get_if<LowResource>(&mode)) {
    if (!(low->fraction > 0.0 && low->fraction <= 1.0)) {
      throw ConfigError("low-resource fraction must lie in (0, 1], got " + std::to_string(low->fraction));
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      // The small epsilon keeps exact products such as 0.1 * 29500 from rounding down.
      take[c] = static_cast<std::size_t>(std::floor(low->fraction * static_cast<double>(counts[c]) + 1e-9));
      take[c] = std::min(take[c], counts[c]);
    }
  } else {
    const auto& req = std::get<Unbalanced>(mode).per_class;
    if (req.size() != num_classes) {
      throw ConfigError("unbalanced subsample needs " + std::to_string(num_classes) + " counts, got " +
                        std::to_string(req.size()));
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (req[c] > counts[c]) {
        throw DataError("class " + std::to_string(c) + " has " + std::to_string(counts[c]) + " documents, " +
                        std::to_string(req[c]) + " requested");
      }
    }
    take = req;
  }
  const auto chosen = select_per_class(train, num_classes, take, seed);
  Corpus out;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (chosen[i]) out.push_back(train[i]);
  }
  return out;
}

// ----------------------------------------------------------------- cache

void write_corpus_cache(const Corpus& corpus, std::ostream& out) {
  for (const auto& doc : corpus) {
    out << doc.id << '\t' << doc.label << '\t';
    for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
      if (i) out << ' ';
      out << doc.tokens[i];
    }
    out << '\n';
  }
}

Corpus read_corpus_cache(std::istream& in) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw DataError("corpus cache line " + std::to_string(line_no) + ": expected 3 columns");
    Document doc;
    try {
      doc.id = static_cast<DocId>(std::stoul(line.substr(0, t1)));
      doc.label = static_cast<Label>(std::stoul(line.substr(t1 + 1, t2 - t1 - 1)));
    } catch (const std::exception&) {
      throw DataError("corpus cache line " + std::to_string(line_no) + ": bad id or label");
    }
    doc.title = line.substr(t2 + 1);
    doc.tokens = tokenize(doc.title);
    corpus.push_back(std::move(doc));
  }
  return corpus;
}

DocumentStore::DocumentStore(const Corpus* corpus, std::size_t num_classes) : corpus_(corpus), num_classes_(num_classes) {
  for (std::size_t i = 0; i < corpus->size(); ++i) {
    if (!index_.emplace((*corpus)[i].id, i).second) {
      throw DataError("duplicate document id " + std::to_string((*corpus)[i].id));
    }
  }
}

const Document& DocumentStore::at(DocId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("unknown document id " + std::to_string(id));
  return (*corpus_)[it->second];
}

}  // namespace knnmem
