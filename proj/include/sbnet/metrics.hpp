#pragma once

// Retrieval metrics over ranked candidate lists.

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbnet {

/// query id -> candidate track ids, best first.
using Ranking = std::map<std::string, std::vector<std::string>>;

struct RetrievalMetrics {
  double mrr = 0;
  std::map<std::size_t, double> recall;  // K -> Recall@K
  std::size_t queries = 0;
};

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 1-based position of `truth` in `ranked`; throws when absent.
inline std::size_t rank_of(const std::vector<std::string>& ranked, const std::string& truth, const std::string& query) {
  const auto it = std::find(ranked.begin(), ranked.end(), truth);
  if (it == ranked.end()) throw MetricsError("query " + query + ": ground-truth track " + truth + " not among candidates");
  return static_cast<std::size_t>(it - ranked.begin()) + 1;
}

inline RetrievalMetrics evaluate_ranking(const Ranking& ranking, const std::map<std::string, std::string>& ground_truth,
                                         const std::vector<std::size_t>& ks = {1, 5, 10}) {
  if (ranking.empty()) throw MetricsError("no queries to evaluate");
  RetrievalMetrics m;
  for (std::size_t k : ks) m.recall[k] = 0;
  for (const auto& [query, ranked] : ranking) {
    const auto gt = ground_truth.find(query);
    if (gt == ground_truth.end()) throw MetricsError("query " + query + ": no ground truth");
    const std::size_t rank = rank_of(ranked, gt->second, query);
    m.mrr += 1.0 / static_cast<double>(rank);
    for (std::size_t k : ks) {
      if (rank <= k) m.recall[k] += 1;
    }
  }
  m.queries = ranking.size();
  m.mrr /= static_cast<double>(m.queries);
  for (auto& [k, r] : m.recall) r /= static_cast<double>(m.queries);
  return m;
}

}  // namespace sbnet
