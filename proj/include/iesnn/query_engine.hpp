#pragma once

// Top-k query strategies over a ranked store: linear traversal, a
// rank-prefix scan, and greedy depth-first search over a balanced tree.
// Every strategy is parameterized by a scorer so the same traversal runs on
// ciphertexts (trapdoor scoring) or on owner-side plaintext dot products.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "iesnn/aspe.hpp"
#include "iesnn/error.hpp"
#include "iesnn/random.hpp"
#include "iesnn/rank_learn.hpp"

namespace iesnn::query {

struct Hit {
  std::string doc_id;
  double score = 0.0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

struct ResultList {
  std::vector<Hit> hits;  // score descending, doc_id ascending on ties
};

struct QueryStats {
  std::size_t retrieved_index_count = 0;
  double precision = 0.0;
  std::chrono::nanoseconds elapsed{0};
  bool k_clamped = false;
};

struct QueryOutcome {
  ResultList result;
  QueryStats stats;
};

enum class Strategy { ru_tree_pi, po_tree_pi, po_tree_ci, pr_ci, lt_ci };

inline constexpr Strategy kAllStrategies[] = {Strategy::ru_tree_pi, Strategy::po_tree_pi,
                                              Strategy::po_tree_ci, Strategy::pr_ci,
                                              Strategy::lt_ci};

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::ru_tree_pi: return "RU-Tree-PI";
    case Strategy::po_tree_pi: return "PO-Tree-PI";
    case Strategy::po_tree_ci: return "PO-Tree-CI";
    case Strategy::pr_ci: return "PR-CI";
    case Strategy::lt_ci: return "LT-CI";
  }
  return "?";
}

/// Accepts "PR-CI", "pr-ci", "pr_ci" and so on.
inline Strategy parse_strategy(std::string s) {
  for (auto& ch : s) ch = ch == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (auto st : kAllStrategies) {
    std::string name = to_string(st);
    for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (name == s) return st;
  }
  fail(Errc::invalid_argument, "unknown strategy '" + s + "'");
}

inline bool plaintext_strategy(Strategy s) {
  return s == Strategy::ru_tree_pi || s == Strategy::po_tree_pi;
}

/// Scores one store entry.
using Scorer = std::function<double(const rank::StoreEntry&)>;

inline Scorer ciphertext_scorer(const aspe::Trapdoor& t) {
  return [&t](const rank::StoreEntry& e) { return aspe::score(e.index, t); };
}

inline bool hit_before(const Hit& a, const Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

/// Bounded best-k collection. Each held hit also remembers the entry's
/// learned match score, which tree pruning needs.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}

  void offer(const std::string& doc_id, double score, double match) {
    Held h{{doc_id, score}, match};
    if (held_.size() == k_) {
      if (!hit_before(h.hit, held_.back().hit)) return;
      held_.pop_back();
    }
    auto it = std::upper_bound(held_.begin(), held_.end(), h,
                               [](const Held& a, const Held& b) { return hit_before(a.hit, b.hit); });
    held_.insert(it, std::move(h));
  }

  bool full() const noexcept { return held_.size() == k_; }

  double min_match() const {
    double m = held_.front().match;
    for (const auto& h : held_) m = std::min(m, h.match);
    return m;
  }

  ResultList result() const {
    ResultList r;
    for (const auto& h : held_) r.hits.push_back(h.hit);
    return r;
  }

 private:
  struct Held {
    Hit hit;
    double match;
  };
  std::size_t k_;
  std::vector<Held> held_;
};

namespace detail {
inline std::size_t clamp_k(std::size_t k, std::size_t d, QueryStats& stats) {
  require(k >= 1, Errc::invalid_k, "k must be >= 1");
  require(d >= 1, Errc::empty_store, "query on an empty store");
  if (k > d) {
    stats.k_clamped = true;
    return d;
  }
  return k;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  std::chrono::nanoseconds elapsed() const {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() -
                                                                start_);
  }

 private:
  std::chrono::steady_clock::time_point start_;
};
}  // namespace detail

/// Scores every entry; exact top-k, retrieved count D.
inline QueryOutcome query_lt(const rank::RankedStore& store, const Scorer& scorer, std::size_t k) {
  detail::Stopwatch sw;
  QueryOutcome out;
  k = detail::clamp_k(k, store.size(), out.stats);
  TopK top(k);
  for (const auto& e : store.entries()) top.offer(e.doc_id, scorer(e), e.match);
  out.result = top.result();
  out.stats.retrieved_index_count = store.size();
  out.stats.precision = 1.0;
  out.stats.elapsed = sw.elapsed();
  return out;
}

/// W = min(D, max(k, ceil(beta * k * (1 + log2(D / k))))).
inline std::size_t pr_window(std::size_t d, std::size_t k, double beta) {
  require(beta > 0.0, Errc::invalid_argument, "beta must be > 0");
  require(k >= 1 && k <= d, Errc::invalid_k, "pr_window needs 1 <= k <= D");
  const double kd = static_cast<double>(k);
  const double w = std::ceil(beta * kd * (1.0 + std::log2(static_cast<double>(d) / kd)));
  return std::min(d, std::max(k, static_cast<std::size_t>(w)));
}

/// Scans the first W entries in learned-rank order.
inline QueryOutcome query_pr(const rank::RankedStore& store, const Scorer& scorer, std::size_t k,
                             double beta) {
  detail::Stopwatch sw;
  QueryOutcome out;
  k = detail::clamp_k(k, store.size(), out.stats);
  const auto w = pr_window(store.size(), k, beta);
  TopK top(k);
  for (std::size_t r = 0; r < w; ++r) {
    const auto& e = store.at(r);
    top.offer(e.doc_id, scorer(e), e.match);
  }
  out.result = top.result();
  out.stats.retrieved_index_count = w;
  out.stats.elapsed = sw.elapsed();
  return out;
}

// ---------------------------------------------------------------------------
// Index tree

enum class LeafOrder { probabilistic, random };

struct TreeNode {
  double max_match = 0.0;
  int left = -1;
  int right = -1;
  std::size_t rank = 0;  // store rank of the leaf entry; leaves only

  bool leaf() const noexcept { return left < 0; }
};

class IndexTree {
 public:
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const std::vector<std::size_t>& leaf_ranks() const noexcept { return leaf_ranks_; }
  std::uint64_t store_version() const noexcept { return version_; }
  std::size_t leaf_count() const noexcept { return leaf_ranks_.size(); }

  std::size_t depth() const { return nodes_.empty() ? 0 : depth_of(0); }

  /// Balanced build over leaves in the given store-rank order. Left halves
  /// take the larger share: [lo, mid) with mid = (lo + hi + 1) / 2.
  static IndexTree build(const rank::RankedStore& store, std::vector<std::size_t> leaf_ranks) {
    require(store.size() >= 1, Errc::empty_store, "build_tree: empty store");
    require(leaf_ranks.size() == store.size(), Errc::invalid_argument,
            "build_tree: leaf order must cover the store");
    IndexTree t;
    t.version_ = store.version();
    t.leaf_ranks_ = std::move(leaf_ranks);
    t.nodes_.reserve(2 * store.size() - 1);
    t.make(store, 0, t.leaf_ranks_.size());
    return t;
  }

 private:
  int make(const rank::RankedStore& store, std::size_t lo, std::size_t hi) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    if (hi - lo == 1) {
      nodes_[id].rank = leaf_ranks_[lo];
      nodes_[id].max_match = store.at(leaf_ranks_[lo]).match;
      return id;
    }
    const std::size_t mid = (lo + hi + 1) / 2;
    const int l = make(store, lo, mid);
    const int r = make(store, mid, hi);
    nodes_[id].left = l;
    nodes_[id].right = r;
    nodes_[id].max_match = std::max(nodes_[l].max_match, nodes_[r].max_match);
    return id;
  }

  std::size_t depth_of(int id) const {
    const auto& n = nodes_[id];
    if (n.leaf()) return 0;
    return 1 + std::max(depth_of(n.left), depth_of(n.right));
  }

  std::vector<TreeNode> nodes_;
  std::vector<std::size_t> leaf_ranks_;
  std::uint64_t version_ = 0;
};

inline IndexTree build_tree(const rank::RankedStore& store, LeafOrder order, std::uint64_t seed) {
  std::vector<std::size_t> ranks(store.size());
  std::iota(ranks.begin(), ranks.end(), std::size_t{0});
  if (order == LeafOrder::random) {
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(ranks));
  }
  return IndexTree::build(store, std::move(ranks));
}

/// Greedy depth-first search. Children are visited in descending subtree-max
/// order (left first on ties). Every visited node counts as retrieved. Once
/// k hits are held, a node whose subtree-max match is below
/// prune_margin * (smallest match among held hits) is not expanded.
/// `visit_log`, when given, receives the node ids in visit order.
inline QueryOutcome query_gdfs(const IndexTree& tree, const rank::RankedStore& store,
                               const Scorer& scorer, std::size_t k, double prune_margin,
                               std::vector<int>* visit_log = nullptr) {
  detail::Stopwatch sw;
  require(tree.store_version() == store.version() && tree.leaf_count() == store.size(),
          Errc::misuse, "index tree was built for a different store version");
  require(prune_margin >= 0.0, Errc::invalid_argument, "prune margin must be >= 0");
  QueryOutcome out;
  k = detail::clamp_k(k, store.size(), out.stats);
  TopK top(k);
  const auto& nodes = tree.nodes();
  std::vector<int> stack{0};
  std::size_t visited = 0;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    ++visited;
    if (visit_log) visit_log->push_back(id);
    const auto& n = nodes[id];
    if (top.full() && n.max_match < prune_margin * top.min_match()) continue;
    if (n.leaf()) {
      const auto& e = store.at(n.rank);
      top.offer(e.doc_id, scorer(e), e.match);
      continue;
    }
    const bool left_first = nodes[n.left].max_match >= nodes[n.right].max_match;
    stack.push_back(left_first ? n.right : n.left);
    stack.push_back(left_first ? n.left : n.right);
  }
  out.result = top.result();
  out.stats.retrieved_index_count = visited;
  out.stats.elapsed = sw.elapsed();
  return out;
}

/// |result ids that appear in truth| / k.
inline double precision(const ResultList& result, const ResultList& truth, std::size_t k) {
  require(k >= 1 && truth.hits.size() == k, Errc::invalid_k,
          "precision: truth must hold exactly k hits");
  require(result.hits.size() <= k, Errc::invalid_k, "precision: result longer than k");
  std::set<std::string> ids;
  for (const auto& h : truth.hits) ids.insert(h.doc_id);
  std::size_t common = 0;
  for (const auto& h : result.hits) common += ids.count(h.doc_id);
  return static_cast<double>(common) / static_cast<double>(k);
}

}  // namespace iesnn::query
