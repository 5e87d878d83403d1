#pragma once

// BM25 retrieval over an inverted index of a training corpus.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "knnmem/corpus.hpp"

namespace knnmem {

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;

  void validate() const;
};

struct Posting {
  DocId doc = 0;
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Term -> postings (sorted by doc id) plus per-document length statistics.
class InvertedIndex {
 public:
  InvertedIndex() = default;

  std::size_t doc_count() const { return doc_ids_.size(); }
  std::size_t term_count() const { return terms_.size(); }
  double avg_doc_len() const { return avg_doc_len_; }

  /// Terms in lexicographic order.
  const std::vector<std::string>& terms() const { return terms_; }
  /// Indexed document ids in ascending order.
  const std::vector<DocId>& doc_ids() const { return doc_ids_; }

  std::optional<std::uint32_t> term_id(std::string_view term) const;
  const std::vector<Posting>& postings(std::uint32_t term) const { return postings_.at(term); }
  std::size_t df(std::uint32_t term) const { return postings_.at(term).size(); }
  /// Empty list for unknown terms.
  const std::vector<Posting>& postings(std::string_view term) const;

  bool contains(DocId id) const { return slot_.contains(id); }
  std::uint32_t doc_len(DocId id) const;
  /// Term frequency of `term` in `doc`, 0 if absent.
  std::uint32_t tf(std::uint32_t term, DocId doc) const;

  double idf(std::uint32_t term) const;

  /// Dense slot (position in doc_ids()) of every posting of `term`.
  const std::vector<std::uint32_t>& posting_slots(std::uint32_t term) const { return posting_slots_.at(term); }
  std::uint32_t doc_len_at(std::uint32_t slot) const { return doc_lens_[slot]; }

  friend InvertedIndex build_index(const Corpus& train);
  friend void save_index(const InvertedIndex& index, std::ostream& out);
  friend InvertedIndex load_index(std::istream& in);
  friend bool operator==(const InvertedIndex& a, const InvertedIndex& b);

 private:
  void finalize();

  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::uint32_t> term_ids_;
  std::vector<std::vector<Posting>> postings_;
  std::vector<DocId> doc_ids_;
  std::vector<std::uint32_t> doc_lens_;
  std::unordered_map<DocId, std::uint32_t> slot_;
  std::vector<std::vector<std::uint32_t>> posting_slots_;
  double avg_doc_len_ = 0.0;
};

struct Neighbor {
  DocId doc = 0;
  double score = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct NeighborSet {
  std::optional<DocId> query_id;
  /// Descending score, ties by ascending doc id.
  std::vector<Neighbor> neighbors;
};

using NeighborCache = std::unordered_map<DocId, NeighborSet>;

InvertedIndex build_index(const Corpus& train);

double bm25_score(const InvertedIndex& index, std::span<const std::string> query_tokens, DocId doc,
                  const Bm25Params& params = {});

/// Top-K documents with positive score. `exclude` is removed before ranking.
NeighborSet search_knn(const InvertedIndex& index, std::span<const std::string> query_tokens, std::size_t k,
                       std::optional<DocId> exclude = std::nullopt, const Bm25Params& params = {});
NeighborSet search_knn(const InvertedIndex& index, const Document& query, std::size_t k,
                       std::optional<DocId> exclude = std::nullopt, const Bm25Params& params = {});

/// One NeighborSet per document of `corpus`. With self_exclude each document
/// is removed from its own candidate list. `threads` > 1 splits the queries
/// across workers; the result does not depend on it.
NeighborCache precompute_neighbors(const InvertedIndex& index, const Corpus& corpus, std::size_t k, bool self_exclude,
                                   const Bm25Params& params = {}, std::size_t threads = 1);

// Index file: "KNNIDX01", u64 manifest length, JSON manifest, then per term
// (manifest order) its postings as little-endian u32 pairs (doc id delta, tf).
void save_index(const InvertedIndex& index, std::ostream& out);
InvertedIndex load_index(std::istream& in);
void save_index(const InvertedIndex& index, const std::filesystem::path& path);
InvertedIndex load_index(const std::filesystem::path& path);

// Neighbor cache text file: `doc_id<TAB>nbr:score,nbr:score,...` per line,
// ascending doc id, six-decimal scores.
void write_neighbor_cache(const NeighborCache& cache, std::ostream& out);
NeighborCache read_neighbor_cache(std::istream& in);

}  // namespace knnmem
