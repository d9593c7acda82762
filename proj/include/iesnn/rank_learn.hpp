#pragma once

// Learned probabilistic ranking of encrypted indexes. Every index is scored
// against a batch of random trapdoors; the summed scores order the store.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "iesnn/aspe.hpp"
#include "iesnn/binary_io.hpp"
#include "iesnn/error.hpp"
#include "iesnn/linalg.hpp"
#include "iesnn/random.hpp"

namespace iesnn::rank {

enum class Distribution { symmetric_uniform, nonneg_uniform };

inline const char* to_string(Distribution d) {
  return d == Distribution::symmetric_uniform ? "symmetric-uniform" : "nonneg-uniform";
}

inline Distribution parse_distribution(const std::string& s) {
  if (s == "symmetric-uniform") return Distribution::symmetric_uniform;
  if (s == "nonneg-uniform") return Distribution::nonneg_uniform;
  fail(Errc::invalid_argument, "unknown training distribution '" + s + "'");
}

struct TrainConfig {
  std::size_t m = 20000;
  double sigma = 1.0;
  Distribution distribution = Distribution::nonneg_uniform;
  double sparsity = 0.005;
  std::uint64_t seed = 0;

  void validate() const {
    require(m >= 1, Errc::invalid_argument, "train config: m must be >= 1");
    require(sigma > 0.0 && std::isfinite(sigma), Errc::invalid_argument,
            "train config: sigma must be > 0");
    require(sparsity > 0.0 && sparsity <= 1.0, Errc::invalid_argument,
            "train config: sparsity must lie in (0, 1]");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace detail {
inline std::uint64_t value_seed(const TrainConfig& cfg, std::size_t j) {
  return derive_seed(derive_seed(cfg.seed, 0x71), j);
}
inline std::uint64_t split_seed(const TrainConfig& cfg, std::size_t j) {
  return derive_seed(derive_seed(cfg.seed, 0x72), j);
}
}  // namespace detail

/// Random training query j. Each slot is nonzero with probability
/// `sparsity`; magnitudes are U(-a, a) (symmetric) or U(0, 2a) (nonneg),
/// a = sigma * sqrt(3), so the symmetric law has variance sigma^2.
inline aspe::PlainVector random_query(const TrainConfig& cfg, std::size_t dim, std::size_t j) {
  Rng rng(detail::value_seed(cfg, j));
  const double a = cfg.sigma * std::sqrt(3.0);
  aspe::PlainVector q{Vector::Zero(static_cast<Eigen::Index>(dim)), aspe::VectorRole::query,
                      std::nullopt};
  for (Eigen::Index t = 0; t < q.values.size(); ++t) {
    if (!rng.bernoulli(cfg.sparsity)) continue;
    q.values[t] = cfg.distribution == Distribution::symmetric_uniform ? rng.uniform(-a, a)
                                                                      : rng.uniform(0.0, 2.0 * a);
  }
  return q;
}

/// Produces the m training trapdoors in fixed-size batches, one matrix
/// product per key half, so the full list never has to be held in memory.
class RandomTrapdoorStream {
 public:
  RandomTrapdoorStream(const TrainConfig& cfg, const aspe::SecretKey& sk, std::size_t batch = 256)
      : cfg_(cfg), sk_(sk), batch_(std::max<std::size_t>(1, batch)) {
    cfg_.validate();
  }

  bool done() const noexcept { return next_ >= cfg_.m; }
  std::size_t produced() const noexcept { return next_; }

  std::vector<aspe::Trapdoor> next_batch() {
    const auto v = static_cast<Eigen::Index>(sk_.dim());
    const std::size_t n = std::min(batch_, cfg_.m - next_);
    Matrix first(v, static_cast<Eigen::Index>(n)), second(v, static_cast<Eigen::Index>(n));
    for (std::size_t b = 0; b < n; ++b) {
      const auto j = next_ + b;
      auto shares = aspe::split_query(random_query(cfg_, sk_.dim(), j), sk_,
                                      detail::split_seed(cfg_, j));
      first.col(static_cast<Eigen::Index>(b)) = shares.first;
      second.col(static_cast<Eigen::Index>(b)) = shares.second;
    }
    const Matrix t1 = sk_.m1_inv() * first;
    const Matrix t2 = sk_.m2_inv() * second;
    std::vector<aspe::Trapdoor> out(n);
    for (std::size_t b = 0; b < n; ++b) {
      out[b].t1 = t1.col(static_cast<Eigen::Index>(b));
      out[b].t2 = t2.col(static_cast<Eigen::Index>(b));
      out[b].k = 1;
    }
    next_ += n;
    return out;
  }

 private:
  TrainConfig cfg_;
  const aspe::SecretKey& sk_;
  std::size_t batch_;
  std::size_t next_ = 0;
};

inline std::vector<aspe::Trapdoor> gen_random_trapdoors(const TrainConfig& cfg,
                                                        const aspe::SecretKey& sk) {
  RandomTrapdoorStream stream(cfg, sk);
  std::vector<aspe::Trapdoor> out;
  out.reserve(cfg.m);
  while (!stream.done())
    for (auto& t : stream.next_batch()) out.push_back(std::move(t));
  return out;
}

/// Coordinate-wise sum of a trapdoor batch. Scoring is linear in the
/// trapdoor, so score(e, sum) equals the sum of the individual scores.
struct TrapdoorSum {
  Vector t1;
  Vector t2;
  std::size_t count = 0;
};

class TrapdoorAccumulator {
 public:
  explicit TrapdoorAccumulator(std::size_t dim) : s1_(dim), s2_(dim) {}

  void add(const aspe::Trapdoor& t) {
    require(t.dim() == s1_.size(), Errc::dimension_mismatch, "trapdoor dimension mismatch");
    for (std::size_t i = 0; i < s1_.size(); ++i) {
      s1_[i].add(t.t1[static_cast<Eigen::Index>(i)]);
      s2_[i].add(t.t2[static_cast<Eigen::Index>(i)]);
    }
    ++count_;
  }

  TrapdoorSum result() const {
    TrapdoorSum out{Vector(static_cast<Eigen::Index>(s1_.size())),
                    Vector(static_cast<Eigen::Index>(s2_.size())), count_};
    for (std::size_t i = 0; i < s1_.size(); ++i) {
      out.t1[static_cast<Eigen::Index>(i)] = s1_[i].value();
      out.t2[static_cast<Eigen::Index>(i)] = s2_[i].value();
    }
    return out;
  }

 private:
  std::vector<CompensatedSum> s1_, s2_;
  std::size_t count_ = 0;
};

inline TrapdoorSum sum_trapdoors(std::span<const aspe::Trapdoor> trapdoors) {
  require(!trapdoors.empty(), Errc::invalid_argument, "sum_trapdoors: empty batch");
  TrapdoorAccumulator acc(trapdoors.front().dim());
  for (const auto& t : trapdoors) acc.add(t);
  return acc.result();
}

/// Owner-side shortcut: the sum of the m training trapdoors computed as
/// m1^-1 * sum(Q1_j), m2^-1 * sum(Q2_j) with the same queries and splits the
/// stream would use. Two inverse products instead of m.
inline TrapdoorSum random_trapdoor_sum(const TrainConfig& cfg, const aspe::SecretKey& sk) {
  cfg.validate();
  const auto v = sk.dim();
  std::vector<CompensatedSum> q1(v), q2(v);
  for (std::size_t j = 0; j < cfg.m; ++j) {
    auto shares = aspe::split_query(random_query(cfg, v, j), sk, detail::split_seed(cfg, j));
    for (std::size_t t = 0; t < v; ++t) {
      q1[t].add(shares.first[static_cast<Eigen::Index>(t)]);
      q2[t].add(shares.second[static_cast<Eigen::Index>(t)]);
    }
  }
  Vector s1(static_cast<Eigen::Index>(v)), s2(static_cast<Eigen::Index>(v));
  for (std::size_t t = 0; t < v; ++t) {
    s1[static_cast<Eigen::Index>(t)] = q1[t].value();
    s2[static_cast<Eigen::Index>(t)] = q2[t].value();
  }
  return TrapdoorSum{sk.m1_inv() * s1, sk.m2_inv() * s2, cfg.m};
}

// ---------------------------------------------------------------------------
// Ranked store

struct StoreEntry {
  std::string doc_id;
  aspe::EncryptedIndex index;
  double match = 0.0;
  double committed_match = 0.0;  // score the ciphertext currently realizes
  std::size_t rank = 0;
};

/// Higher match first, then doc_id ascending.
inline bool ranks_before(const StoreEntry& a, const StoreEntry& b) {
  if (a.match != b.match) return a.match > b.match;
  return a.doc_id < b.doc_id;
}

class RankedStore {
 public:
  RankedStore() = default;

  RankedStore(TrainConfig cfg, std::vector<StoreEntry> entries, std::uint64_t version = 0)
      : cfg_(cfg), entries_(std::move(entries)), version_(version) {
    require(!entries_.empty(), Errc::empty_store, "ranked store needs at least one entry");
    const auto dim = entries_.front().index.dim();
    for (const auto& e : entries_)
      require(e.index.dim() == dim && static_cast<std::size_t>(e.index.c2.size()) == dim,
              Errc::dimension_mismatch, "store entries differ in dimension");
    for (auto& e : entries_) e.index.doc_id = e.doc_id;
    std::sort(entries_.begin(), entries_.end(), ranks_before);
    reindex(0, entries_.size());
    require(pos_.size() == entries_.size(), Errc::invalid_argument, "duplicate doc_id in store");
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t dim() const noexcept { return entries_.empty() ? 0 : entries_.front().index.dim(); }
  std::uint64_t version() const noexcept { return version_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  const std::vector<StoreEntry>& entries() const noexcept { return entries_; }
  const StoreEntry& at(std::size_t rank) const { return entries_.at(rank); }

  std::optional<std::size_t> find(const std::string& doc_id) const {
    auto it = pos_.find(doc_id);
    if (it == pos_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t rank_of(const std::string& doc_id) const {
    auto r = find(doc_id);
    require(r.has_value(), Errc::unknown_document, "unknown document '" + doc_id + "'");
    return *r;
  }

  const StoreEntry& entry(const std::string& doc_id) const { return entries_[rank_of(doc_id)]; }

  /// Sets one match score and moves the entry to its sorted position in O(D).
  void reposition(const std::string& doc_id, double new_match) {
    require(std::isfinite(new_match), Errc::invalid_argument, "match score must be finite");
    auto r = rank_of(doc_id);
    entries_[r].match = new_match;
    std::size_t lo = r, hi = r + 1;
    while (r > 0 && ranks_before(entries_[r], entries_[r - 1])) {
      std::swap(entries_[r], entries_[r - 1]);
      --r;
      lo = r;
    }
    while (r + 1 < entries_.size() && ranks_before(entries_[r + 1], entries_[r])) {
      std::swap(entries_[r], entries_[r + 1]);
      ++r;
      hi = r + 1;
    }
    reindex(lo, hi);
    ++version_;
  }

  /// Replaces several match scores and restores the order.
  void assign_matches(const std::map<std::string, double>& scores) {
    for (const auto& [id, score] : scores) {
      require(std::isfinite(score), Errc::invalid_argument, "match score must be finite");
      entries_[rank_of(id)].match = score;
    }
    std::sort(entries_.begin(), entries_.end(), ranks_before);
    reindex(0, entries_.size());
    ++version_;
  }

  /// Replaces a ciphertext; rank and match are untouched.
  void replace_index(const std::string& doc_id, aspe::EncryptedIndex index, double committed) {
    auto r = rank_of(doc_id);
    require(index.dim() == dim(), Errc::dimension_mismatch, "replacement index dimension");
    index.doc_id = doc_id;
    entries_[r].index = std::move(index);
    entries_[r].committed_match = committed;
    ++version_;
  }

 private:
  void reindex(std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      entries_[i].rank = i;
      pos_[entries_[i].doc_id] = i;
    }
  }

  TrainConfig cfg_;
  std::vector<StoreEntry> entries_;
  std::unordered_map<std::string, std::size_t> pos_;
  std::uint64_t version_ = 0;
};

namespace detail {
inline void check_training_inputs(std::span<const aspe::EncryptedIndex> indexes, std::size_t dim) {
  require(!indexes.empty(), Errc::empty_store, "train_ranking: no indexes");
  for (const auto& e : indexes)
    require(e.dim() == dim, Errc::dimension_mismatch, "train_ranking: dimension mismatch");
}

inline RankedStore assemble(std::span<const aspe::EncryptedIndex> indexes,
                            const std::vector<double>& match, const TrainConfig& cfg) {
  std::vector<StoreEntry> entries(indexes.size());
  for (std::size_t i = 0; i < indexes.size(); ++i) {
    entries[i].doc_id = indexes[i].doc_id;
    entries[i].index = indexes[i];
    entries[i].match = match[i];
    entries[i].committed_match = match[i];
  }
  return RankedStore(cfg, std::move(entries));
}
}  // namespace detail

/// match(i) = sum_j score(index_i, trapdoor_j), compensated.
inline RankedStore train_ranking(std::span<const aspe::EncryptedIndex> indexes,
                                 std::span<const aspe::Trapdoor> trapdoors,
                                 const TrainConfig& cfg) {
  require(!trapdoors.empty(), Errc::invalid_argument, "train_ranking: no trapdoors");
  detail::check_training_inputs(indexes, trapdoors.front().dim());
  std::vector<double> match(indexes.size());
  for (std::size_t i = 0; i < indexes.size(); ++i) {
    CompensatedSum acc;
    for (const auto& t : trapdoors) acc.add(aspe::score(indexes[i], t));
    match[i] = acc.value();
  }
  return detail::assemble(indexes, match, cfg);
}

inline RankedStore train_ranking(std::span<const aspe::EncryptedIndex> indexes,
                                 const TrapdoorSum& sum, const TrainConfig& cfg) {
  detail::check_training_inputs(indexes, static_cast<std::size_t>(sum.t1.size()));
  std::vector<double> match(indexes.size());
  for (std::size_t i = 0; i < indexes.size(); ++i)
    match[i] = indexes[i].c1.dot(sum.t1) + indexes[i].c2.dot(sum.t2);
  return detail::assemble(indexes, match, cfg);
}

/// Copy of `store` with the given match scores replaced and order restored.
inline RankedStore rerank(const RankedStore& store,
                          const std::map<std::string, double>& overrides) {
  for (const auto& [id, score] : overrides) {
    require(store.find(id).has_value(), Errc::unknown_document, "unknown document '" + id + "'");
    require(std::isfinite(score), Errc::invalid_argument, "override score must be finite");
  }
  if (overrides.empty()) return store;
  RankedStore out = store;
  out.assign_matches(overrides);
  return out;
}

// ---------------------------------------------------------------------------
// Store file, little-endian:
//   "IESNNSTO" | u32 version | train config (u64 m, f64 sigma, u8 dist,
//   f64 sparsity, u64 seed) | u64 store version | u64 D | u64 V |
//   D x (str doc_id, u64 rank, f64 match, f64 committed, V f64 c1, V f64 c2)
// Strings are u32-length prefixed.

inline constexpr std::string_view kStoreMagic = "IESNNSTO";
inline constexpr std::uint32_t kStoreFormat = 1;

inline std::string save_store(const RankedStore& store) {
  io::Writer w;
  w.bytes(kStoreMagic);
  w.u32(kStoreFormat);
  const auto& cfg = store.config();
  w.u64(cfg.m);
  w.f64(cfg.sigma);
  w.u8(cfg.distribution == Distribution::symmetric_uniform ? 0 : 1);
  w.f64(cfg.sparsity);
  w.u64(cfg.seed);
  w.u64(store.version());
  w.u64(store.size());
  w.u64(store.dim());
  for (const auto& e : store.entries()) {
    w.str(e.doc_id);
    w.u64(e.rank);
    w.f64(e.match);
    w.f64(e.committed_match);
    w.vec(e.index.c1);
    w.vec(e.index.c2);
  }
  return w.take();
}

inline RankedStore load_store(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kStoreMagic);
  const auto format = r.u32();
  require(format == kStoreFormat, Errc::format_error,
          "unsupported store format " + std::to_string(format));
  TrainConfig cfg;
  cfg.m = r.u64();
  cfg.sigma = r.f64();
  const auto dist = r.u8();
  require(dist <= 1, Errc::format_error, "bad distribution tag");
  cfg.distribution = dist == 0 ? Distribution::symmetric_uniform : Distribution::nonneg_uniform;
  cfg.sparsity = r.f64();
  cfg.seed = r.u64();
  const auto version = r.u64();
  const auto n = r.u64();
  const auto dim = r.u64();
  require(n >= 1 && dim >= 1 && dim <= (1u << 16), Errc::format_error, "implausible store size");
  std::vector<StoreEntry> entries(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = entries[i];
    e.doc_id = r.str();
    e.rank = r.u64();
    require(e.rank == i, Errc::format_error, "store entries out of rank order");
    e.match = r.f64();
    e.committed_match = r.f64();
    e.index.doc_id = e.doc_id;
    e.index.c1 = r.vec(dim);
    e.index.c2 = r.vec(dim);
  }
  require(r.at_end(), Errc::format_error, "trailing bytes in store file");
  for (std::size_t i = 1; i < n; ++i)
    require(ranks_before(entries[i - 1], entries[i]), Errc::format_error,
            "store entries out of sort order");
  return RankedStore(cfg, std::move(entries), version);
}

}  // namespace iesnn::rank
