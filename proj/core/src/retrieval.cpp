#include "knnmem/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "binary_io.hpp"
#include "knnmem/error.hpp"

namespace knnmem {

namespace {

constexpr char kIndexMagic[9] = "KNNIDX01";

/// Unique query terms in first-occurrence order.
std::vector<std::string_view> unique_terms(std::span<const std::string> tokens) {
  std::vector<std::string_view> out;
  std::unordered_set<std::string_view> seen;
  for (const auto& t : tokens) {
    if (seen.insert(t).second) out.push_back(t);
  }
  return out;
}

double term_contribution(double idf, std::uint32_t tf, std::uint32_t doc_len, double avg_doc_len,
                         const Bm25Params& p) {
  const double norm = avg_doc_len > 0.0 ? static_cast<double>(doc_len) / avg_doc_len : 1.0;
  const double f = static_cast<double>(tf);
  return idf * f * (p.k1 + 1.0) / (f + p.k1 * (1.0 - p.b + p.b * norm));
}

bool ranks_before(const Neighbor& a, const Neighbor& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc < b.doc;
}

}  // namespace

void Bm25Params::validate() const {
  if (!(k1 >= 0.0)) throw ConfigError("bm25 k1 must be >= 0");
  if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("bm25 b must lie in [0, 1]");
}

// ----------------------------------------------------------------- index

std::optional<std::uint32_t> InvertedIndex::term_id(std::string_view term) const {
  auto it = term_ids_.find(std::string(term));
  if (it == term_ids_.end()) return std::nullopt;
  return it->second;
}

const std::vector<Posting>& InvertedIndex::postings(std::string_view term) const {
  static const std::vector<Posting> kEmpty;
  auto id = term_id(term);
  return id ? postings_[*id] : kEmpty;
}

std::uint32_t InvertedIndex::doc_len(DocId id) const {
  auto it = slot_.find(id);
  if (it == slot_.end()) throw DataError("document " + std::to_string(id) + " is not in the index");
  return doc_lens_[it->second];
}

std::uint32_t InvertedIndex::tf(std::uint32_t term, DocId doc) const {
  const auto& list = postings_.at(term);
  auto it = std::lower_bound(list.begin(), list.end(), doc, [](const Posting& p, DocId d) { return p.doc < d; });
  return (it != list.end() && it->doc == doc) ? it->tf : 0;
}

double InvertedIndex::idf(std::uint32_t term) const {
  const double n = static_cast<double>(doc_count());
  const double df = static_cast<double>(postings_.at(term).size());
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

void InvertedIndex::finalize() {
  term_ids_.clear();
  for (std::uint32_t t = 0; t < terms_.size(); ++t) term_ids_.emplace(terms_[t], t);
  slot_.clear();
  double total = 0.0;
  for (std::uint32_t s = 0; s < doc_ids_.size(); ++s) {
    slot_.emplace(doc_ids_[s], s);
    total += doc_lens_[s];
  }
  avg_doc_len_ = doc_ids_.empty() ? 0.0 : total / static_cast<double>(doc_ids_.size());
  posting_slots_.assign(postings_.size(), {});
  for (std::size_t t = 0; t < postings_.size(); ++t) {
    auto& slots = posting_slots_[t];
    slots.reserve(postings_[t].size());
    for (const Posting& p : postings_[t]) {
      auto it = slot_.find(p.doc);
      if (it == slot_.end()) throw DataError("posting references unknown document " + std::to_string(p.doc));
      slots.push_back(it->second);
    }
  }
}

bool operator==(const InvertedIndex& a, const InvertedIndex& b) {
  return a.terms_ == b.terms_ && a.postings_ == b.postings_ && a.doc_ids_ == b.doc_ids_ && a.doc_lens_ == b.doc_lens_;
}

InvertedIndex build_index(const Corpus& train) {
  if (train.empty()) throw DataError("cannot index an empty corpus");
  std::vector<const Document*> docs;
  docs.reserve(train.size());
  for (const auto& d : train) docs.push_back(&d);
  std::sort(docs.begin(), docs.end(), [](const Document* a, const Document* b) { return a->id < b->id; });

  InvertedIndex index;
  std::map<std::string, std::vector<Posting>> postings;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const Document& d = *docs[i];
    if (i > 0 && docs[i - 1]->id == d.id) throw DataError("duplicate document id " + std::to_string(d.id));
    std::map<std::string_view, std::uint32_t> tf;
    for (const auto& tok : d.tokens) ++tf[tok];
    for (const auto& [term, count] : tf) postings[std::string(term)].push_back(Posting{d.id, count});
    index.doc_ids_.push_back(d.id);
    index.doc_lens_.push_back(static_cast<std::uint32_t>(d.tokens.size()));
  }
  index.terms_.reserve(postings.size());
  index.postings_.reserve(postings.size());
  for (auto& [term, list] : postings) {
    index.terms_.push_back(term);
    index.postings_.push_back(std::move(list));
  }
  index.finalize();
  return index;
}

// --------------------------------------------------------------- scoring

double bm25_score(const InvertedIndex& index, std::span<const std::string> query_tokens, DocId doc,
                  const Bm25Params& params) {
  const std::uint32_t len = index.doc_len(doc);
  double score = 0.0;
  for (std::string_view term : unique_terms(query_tokens)) {
    auto t = index.term_id(term);
    if (!t) continue;
    const std::uint32_t f = index.tf(*t, doc);
    if (f == 0) continue;
    score += term_contribution(index.idf(*t), f, len, index.avg_doc_len(), params);
  }
  return score;
}

NeighborSet search_knn(const InvertedIndex& index, std::span<const std::string> query_tokens, std::size_t k,
                       std::optional<DocId> exclude, const Bm25Params& params) {
  NeighborSet result;
  result.query_id = exclude;
  if (k == 0) return result;

  const auto& ids = index.doc_ids();
  std::vector<double> acc(ids.size(), 0.0);
  std::vector<std::uint32_t> touched;
  for (std::string_view term : unique_terms(query_tokens)) {
    auto t = index.term_id(term);
    if (!t) continue;
    const double idf = index.idf(*t);
    const auto& list = index.postings(*t);
    const auto& slots = index.posting_slots(*t);
    for (std::size_t j = 0; j < list.size(); ++j) {
      const std::uint32_t slot = slots[j];
      if (acc[slot] == 0.0) touched.push_back(slot);
      acc[slot] += term_contribution(idf, list[j].tf, index.doc_len_at(slot), index.avg_doc_len(), params);
    }
  }

  std::vector<Neighbor> candidates;
  candidates.reserve(touched.size());
  for (auto slot : touched) {
    if (acc[slot] <= 0.0) continue;
    if (exclude && ids[slot] == *exclude) continue;
    candidates.push_back(Neighbor{ids[slot], acc[slot]});
  }
  const std::size_t keep = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                    ranks_before);
  candidates.resize(keep);
  result.neighbors = std::move(candidates);
  return result;
}

NeighborSet search_knn(const InvertedIndex& index, const Document& query, std::size_t k, std::optional<DocId> exclude,
                       const Bm25Params& params) {
  return search_knn(index, query.tokens, k, exclude, params);
}

NeighborCache precompute_neighbors(const InvertedIndex& index, const Corpus& corpus, std::size_t k, bool self_exclude,
                                   const Bm25Params& params, std::size_t threads) {
  std::vector<NeighborSet> results(corpus.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Document& d = corpus[i];
      results[i] = search_knn(index, d.tokens, k, self_exclude ? std::optional<DocId>(d.id) : std::nullopt, params);
      results[i].query_id = d.id;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, corpus.size()));
  if (threads == 1) {
    work(0, corpus.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (corpus.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk;
      const std::size_t e = std::min(corpus.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }
  NeighborCache cache;
  cache.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!cache.emplace(corpus[i].id, std::move(results[i])).second) {
      throw DataError("duplicate document id " + std::to_string(corpus[i].id));
    }
  }
  return cache;
}

// ----------------------------------------------------------- index file

void save_index(const InvertedIndex& index, std::ostream& out) {
  nlohmann::json manifest;
  manifest["n_docs"] = index.doc_ids_.size();
  manifest["avg_doc_len"] = index.avg_doc_len_;
  manifest["doc_ids"] = index.doc_ids_;
  manifest["doc_lens"] = index.doc_lens_;
  manifest["terms"] = index.terms_;
  std::vector<std::size_t> df;
  df.reserve(index.postings_.size());
  for (const auto& list : index.postings_) df.push_back(list.size());
  manifest["df"] = df;

  detail::write_magic(out, kIndexMagic);
  detail::write_blob(out, manifest.dump());
  for (const auto& list : index.postings_) {
    DocId prev = 0;
    for (const Posting& p : list) {
      detail::write_le<std::uint32_t>(out, p.doc - prev);
      detail::write_le<std::uint32_t>(out, p.tf);
      prev = p.doc;
    }
  }
  if (!out) throw DataError("failed to write index");
}

InvertedIndex load_index(std::istream& in) {
  detail::expect_magic(in, kIndexMagic, "index");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_blob(in, "index manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt index manifest: ") + e.what());
  }
  InvertedIndex index;
  try {
    index.doc_ids_ = manifest.at("doc_ids").get<std::vector<DocId>>();
    index.doc_lens_ = manifest.at("doc_lens").get<std::vector<std::uint32_t>>();
    index.terms_ = manifest.at("terms").get<std::vector<std::string>>();
    const auto df = manifest.at("df").get<std::vector<std::size_t>>();
    if (df.size() != index.terms_.size() || index.doc_lens_.size() != index.doc_ids_.size()) {
      throw DataError("index manifest arrays disagree in length");
    }
    index.postings_.resize(df.size());
    for (std::size_t t = 0; t < df.size(); ++t) {
      if (df[t] > index.doc_ids_.size()) throw DataError("index manifest has impossible df");
      DocId prev = 0;
      auto& list = index.postings_[t];
      list.reserve(df[t]);
      for (std::size_t j = 0; j < df[t]; ++j) {
        const DocId doc = prev + detail::read_le<std::uint32_t>(in, "postings");
        const auto tf = detail::read_le<std::uint32_t>(in, "postings");
        if (j > 0 && doc <= prev) throw DataError("index postings are not strictly increasing");
        list.push_back(Posting{doc, tf});
        prev = doc;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt index manifest: ") + e.what());
  }
  index.finalize();
  return index;
}

void save_index(const InvertedIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  save_index(index, out);
}

InvertedIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open index " + path.string());
  return load_index(in);
}

// ------------------------------------------------------- neighbor cache

void write_neighbor_cache(const NeighborCache& cache, std::ostream& out) {
  std::vector<DocId> ids;
  ids.reserve(cache.size());
  for (const auto& [id, _] : cache) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  out << std::fixed << std::setprecision(6);
  for (DocId id : ids) {
    out << id << '\t';
    const auto& list = cache.at(id).neighbors;
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (i) out << ',';
      out << list[i].doc << ':' << list[i].score;
    }
    out << '\n';
  }
}

NeighborCache read_neighbor_cache(std::istream& in) {
  NeighborCache cache;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("neighbor cache line " + std::to_string(line_no) + ": missing tab");
    NeighborSet set;
    try {
      set.query_id = static_cast<DocId>(std::stoul(line.substr(0, tab)));
      std::stringstream rest(line.substr(tab + 1));
      std::string item;
      while (std::getline(rest, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw DataError("missing ':'");
        set.neighbors.push_back(
            Neighbor{static_cast<DocId>(std::stoul(item.substr(0, colon))), std::stod(item.substr(colon + 1))});
      }
    } catch (const std::exception& e) {
      throw DataError("neighbor cache line " + std::to_string(line_no) + ": " + e.what());
    }
    cache.emplace(*set.query_id, std::move(set));
  }
  return cache;
}

}  // namespace knnmem
