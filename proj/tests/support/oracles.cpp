#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace knnmem::testing {

double oracle_bm25(const Corpus& corpus, const std::vector<std::string>& query, DocId doc, double k1, double b) {
  const double n = static_cast<double>(corpus.size());
  double total_len = 0.0;
  const Document* target = nullptr;
  for (const auto& d : corpus) {
    total_len += static_cast<double>(d.tokens.size());
    if (d.id == doc) target = &d;
  }
  if (target == nullptr) return 0.0;
  const double avgdl = total_len / n;
  const double dl = static_cast<double>(target->tokens.size());

  std::vector<std::string> unique;
  for (const auto& t : query) {
    if (std::find(unique.begin(), unique.end(), t) == unique.end()) unique.push_back(t);
  }
  double score = 0.0;
  for (const auto& term : unique) {
    double df = 0.0;
    for (const auto& d : corpus) {
      if (std::find(d.tokens.begin(), d.tokens.end(), term) != d.tokens.end()) df += 1.0;
    }
    const double tf = static_cast<double>(std::count(target->tokens.begin(), target->tokens.end(), term));
    if (df == 0.0 || tf == 0.0) continue;
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
  }
  return score;
}

std::vector<Neighbor> oracle_knn(const Corpus& corpus, const std::vector<std::string>& query, std::size_t k,
                                 std::optional<DocId> exclude, double k1, double b) {
  std::vector<Neighbor> all;
  for (const auto& d : corpus) {
    if (exclude && d.id == *exclude) continue;
    const double s = oracle_bm25(corpus, query, d.id, k1, b);
    if (s > 0.0) all.push_back(Neighbor{d.id, s});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& x, const Neighbor& y) {
    return x.score != y.score ? x.score > y.score : x.doc < y.doc;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  if (std::sqrt(na) < 1e-12 || std::sqrt(nb) < 1e-12) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<std::vector<double>> oracle_attention(const std::vector<double>& h,
                                                  const std::vector<std::vector<double>>& neighbors,
                                                  const std::vector<std::vector<double>>& W) {
  std::vector<std::vector<double>> s;
  for (const auto& n : neighbors) {
    std::vector<double> row;
    if (W.empty()) {
      row.push_back(cosine(h, n));
    } else {
      for (const auto& w : W) {
        std::vector<double> wh(h.size()), wn(h.size());
        for (std::size_t j = 0; j < h.size(); ++j) {
          wh[j] = w[j] * h[j];
          wn[j] = w[j] * n[j];
        }
        row.push_back(cosine(wh, wn));
      }
    }
    s.push_back(row);
  }
  return s;
}

std::vector<double> oracle_label_distribution(const std::vector<std::vector<double>>& s,
                                              const std::vector<Label>& labels, std::size_t classes) {
  const std::size_t I = s.empty() ? 0 : s[0].size();
  std::vector<double> out(I * classes, 0.0);
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) out[i * classes + labels[k]] += s[k][i];
  }
  return out;
}

std::vector<double> oracle_text_embedding(const std::vector<std::vector<double>>& s,
                                          const std::vector<std::vector<double>>& neighbors) {
  const std::size_t I = s.empty() ? 0 : s[0].size();
  const std::size_t l = neighbors.empty() ? 0 : neighbors[0].size();
  std::vector<double> out(I * l, 0.0);
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      for (std::size_t j = 0; j < l; ++j) out[i * l + j] += s[k][i] * neighbors[k][j];
    }
  }
  return out;
}

std::vector<double> oracle_softmax(const std::vector<double>& logits) {
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  std::vector<double> p;
  double total = 0.0;
  for (double z : logits) {
    p.push_back(std::exp(z - m));
    total += p.back();
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace knnmem::testing
