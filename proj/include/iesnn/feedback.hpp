#pragma once

// Feedback learning. The observer turns query results into popularity
// targets, residuals and rank floats; the updater moves learned match scores
// toward popularity with sgn/satlins activations and commits the new scores
// to the stored ciphertexts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "iesnn/aspe.hpp"
#include "iesnn/binary_io.hpp"
#include "iesnn/counters.hpp"
#include "iesnn/error.hpp"
#include "iesnn/query_engine.hpp"
#include "iesnn/rank_learn.hpp"

namespace iesnn::feedback {

struct FeedbackRecord {
  std::uint64_t round = 0;
  query::ResultList result;
  std::map<std::string, std::size_t> store_ranks_at_query;
  std::uint64_t store_version = 0;
};

inline FeedbackRecord make_record(const rank::RankedStore& store, query::ResultList result,
                                  std::uint64_t round) {
  FeedbackRecord fb{round, std::move(result), {}, store.version()};
  for (const auto& h : fb.result.hits) fb.store_ranks_at_query[h.doc_id] = store.rank_of(h.doc_id);
  return fb;
}

struct UpdateTarget {
  std::map<std::string, double> residuals;      // score space, normalized units
  std::map<std::string, long> rank_floats;      // store rank - popularity rank
  std::map<std::string, double> popularity;     // popularity target in [-1, 1]
  double eta = 0.0;                             // observer rate the residuals used
  std::uint64_t round = 0;

  bool empty() const noexcept { return residuals.empty(); }
};

struct PopularityState {
  std::map<std::string, double> hit_counts;  // decayed, so real-valued
  double decay = 1.0;
  double eta = 0.1;

  void validate() const {
    require(decay > 0.0 && decay <= 1.0, Errc::invalid_argument, "decay must lie in (0, 1]");
    require(eta > 0.0, Errc::invalid_argument, "popularity eta must be > 0");
  }

  double hits(const std::string& doc_id) const {
    auto it = hit_counts.find(doc_id);
    return it == hit_counts.end() ? 0.0 : it->second;
  }
};

/// Affine map of the store's match range onto [-1, 1].
struct ScoreScale {
  double lo = 0.0;
  double hi = 0.0;

  static ScoreScale of(const rank::RankedStore& store) {
    return {store.at(store.size() - 1).match, store.at(0).match};
  }

  double normalize(double x) const { return hi == lo ? 0.0 : 2.0 * (x - lo) / (hi - lo) - 1.0; }
  double denormalize(double s) const { return lo + (s + 1.0) * (hi - lo) / 2.0; }
};

/// Doc ids ordered by decayed hits descending, doc_id ascending on ties.
inline std::vector<std::string> popularity_order(const rank::RankedStore& store,
                                                 const PopularityState& pop) {
  std::vector<std::string> ids;
  ids.reserve(store.size());
  for (const auto& e : store.entries()) ids.push_back(e.doc_id);
  std::sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) {
    const double ha = pop.hits(a), hb = pop.hits(b);
    if (ha != hb) return ha > hb;
    return a < b;
  });
  return ids;
}

/// Records one round of feedback. Popularity target of the doc at
/// popularity rank r is 1 - 2r/(D-1); residual = eta * (target - normalized
/// match) for every stored doc; rank floats for the returned docs.
inline UpdateTarget san_observe(const rank::RankedStore& store, const FeedbackRecord& fb,
                                PopularityState& pop) {
  pop.validate();
  require(fb.store_version == store.version(), Errc::stale_feedback,
          "feedback for store version " + std::to_string(fb.store_version) +
              " but store is at " + std::to_string(store.version()));
  UpdateTarget target;
  target.round = fb.round;
  target.eta = pop.eta;
  if (fb.result.hits.empty()) return target;

  if (pop.decay != 1.0)
    for (auto& [id, c] : pop.hit_counts) c *= pop.decay;
  for (const auto& h : fb.result.hits) {
    store.rank_of(h.doc_id);
    pop.hit_counts[h.doc_id] += 1.0;
  }

  const auto order = popularity_order(store, pop);
  const double d = static_cast<double>(store.size());
  const auto scale = ScoreScale::of(store);
  std::map<std::string, std::size_t> pop_rank;
  for (std::size_t r = 0; r < order.size(); ++r) {
    pop_rank[order[r]] = r;
    const double p = store.size() == 1 ? 0.0 : 1.0 - 2.0 * static_cast<double>(r) / (d - 1.0);
    target.popularity[order[r]] = p;
    target.residuals[order[r]] = pop.eta * (p - scale.normalize(store.entry(order[r]).match));
  }
  for (const auto& [id, rank] : fb.store_ranks_at_query)
    target.rank_floats[id] = static_cast<long>(rank) - static_cast<long>(pop_rank[id]);
  return target;
}

// ---------------------------------------------------------------------------
// Adversarial value over rank buckets

struct AdversaryState {
  std::vector<double> discriminator;  // A(bucket), in (0, 1)
  std::vector<double> index_dist;     // p_i
  std::vector<double> query_dist;     // p_q
};

inline constexpr double kClampLow = 1e-6;
inline constexpr double kClampHigh = 1.0 - 1e-6;

/// sum p_i ln A + sum p_q ln(1 - A), with A clamped to [1e-6, 1 - 1e-6].
inline double adversarial_value(const AdversaryState& adv) {
  const auto n = adv.discriminator.size();
  require(n >= 1 && adv.index_dist.size() == n && adv.query_dist.size() == n,
          Errc::dimension_mismatch, "adversary vectors must share one non-zero length");
  double si = 0.0, sq = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    require(adv.index_dist[b] >= 0.0 && adv.query_dist[b] >= 0.0, Errc::invalid_argument,
            "distributions must be non-negative");
    si += adv.index_dist[b];
    sq += adv.query_dist[b];
  }
  require(std::abs(si - 1.0) <= 1e-9 && std::abs(sq - 1.0) <= 1e-9, Errc::invalid_argument,
          "distributions must sum to 1");
  double v = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const double a = adv.discriminator[b];
    require(a > 0.0 && a < 1.0, Errc::domain_error, "discriminator value outside (0, 1)");
    const double c = std::clamp(a, kClampLow, kClampHigh);
    v += adv.index_dist[b] * std::log(c) + adv.query_dist[b] * std::log(1.0 - c);
  }
  return v;
}

/// Per-bucket maximizer p_i / (p_i + p_q); 1/2 where both are zero.
inline std::vector<double> optimal_discriminator(const std::vector<double>& p_i,
                                                 const std::vector<double>& p_q) {
  require(p_i.size() == p_q.size(), Errc::dimension_mismatch, "distribution lengths differ");
  std::vector<double> a(p_i.size());
  for (std::size_t b = 0; b < a.size(); ++b) {
    const double s = p_i[b] + p_q[b];
    a[b] = s > 0.0 ? std::clamp(p_i[b] / s, kClampLow, kClampHigh) : 0.5;
  }
  return a;
}

/// Rank-bucket diagnostic: p_i is the shifted normalized match mass per
/// bucket of learned ranks, p_q the hit mass per bucket; A is optimal.
inline AdversaryState rank_bucket_adversary(const rank::RankedStore& store,
                                            const PopularityState& pop, std::size_t buckets) {
  require(buckets >= 1 && buckets <= store.size(), Errc::invalid_argument,
          "bucket count must lie in [1, D]");
  std::vector<double> p_i(buckets, 0.0), p_q(buckets, 0.0);
  const auto scale = ScoreScale::of(store);
  for (const auto& e : store.entries()) {
    const auto b = e.rank * buckets / store.size();
    p_i[b] += (scale.normalize(e.match) + 1.0) / 2.0;
    p_q[b] += pop.hits(e.doc_id);
  }
  auto normalize = [buckets](std::vector<double>& p) {
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& x : p) x = s > 0.0 ? x / s : 1.0 / static_cast<double>(buckets);
  };
  normalize(p_i);
  normalize(p_q);
  auto a = optimal_discriminator(p_i, p_q);
  return {std::move(a), std::move(p_i), std::move(p_q)};
}

// ---------------------------------------------------------------------------
// Weight update

inline double sgn(double x) noexcept { return x < 0.0 ? -1.0 : 1.0; }

inline double satlins(double x) noexcept { return x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x); }

enum class Activation { sgn, satlins };
enum class WorkMode { async, sync };

inline double activate(Activation a, double x) { return a == Activation::sgn ? sgn(x) : satlins(x); }

inline Activation parse_activation(const std::string& s) {
  if (s == "sgn") return Activation::sgn;
  if (s == "satlins") return Activation::satlins;
  fail(Errc::invalid_argument, "unknown activation '" + s + "'");
}

inline WorkMode parse_work_mode(const std::string& s) {
  if (s == "async") return WorkMode::async;
  if (s == "sync") return WorkMode::sync;
  fail(Errc::invalid_argument, "unknown work mode '" + s + "'");
}

struct WunConfig {
  WorkMode mode = WorkMode::async;
  Activation activation = Activation::satlins;
  double eta = 1.0;
  std::size_t max_sweeps = 100;
  double stability_tol = 1e-4;

  void validate() const {
    require(eta > 0.0, Errc::invalid_argument, "wun eta must be > 0");
    require(max_sweeps >= 1, Errc::invalid_argument, "max_sweeps must be >= 1");
    require(stability_tol >= 0.0, Errc::invalid_argument, "stability_tol must be >= 0");
  }
};

/// Updates one document: net = s + eta * residual, s' = activation(net),
/// mapped back through the current store scale; then re-sorted. Returns
/// whether the score changed.
inline bool wun_async_step(rank::RankedStore& store, const UpdateTarget& target,
                           const std::string& doc_id, const WunConfig& cfg) {
  cfg.validate();
  auto it = target.residuals.find(doc_id);
  require(it != target.residuals.end(), Errc::unknown_document,
          "document '" + doc_id + "' is not in the update target");
  const auto scale = ScoreScale::of(store);
  const double old_match = store.entry(doc_id).match;
  const double s = scale.normalize(old_match);
  const double next = activate(cfg.activation, s + cfg.eta * it->second);
  if (next == s) return false;
  const double new_match = scale.denormalize(next);
  if (new_match == old_match) return false;
  store.reposition(doc_id, new_match);
  return true;
}

struct SyncReport {
  bool stabilized = false;
  std::size_t sweeps = 0;
  double last_change = 0.0;
};

/// Whole-store parallel updates. Sweep 1 uses the target's residuals; later
/// sweeps recompute eta * (popularity - s) from the pre-sweep state. Stops
/// when the largest normalized change is below stability_tol.
inline SyncReport wun_sync_step(rank::RankedStore& store, const UpdateTarget& target,
                                const WunConfig& cfg) {
  cfg.validate();
  SyncReport report;
  if (target.empty()) {
    report.stabilized = true;
    report.sweeps = 1;
    return report;
  }
  for (std::size_t sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    const auto scale = ScoreScale::of(store);
    std::map<std::string, double> updates;
    double change = 0.0;
    for (const auto& [id, residual0] : target.residuals) {
      const double match = store.entry(id).match;
      const double s = scale.normalize(match);
      double residual = residual0;
      if (sweep > 0) {
        auto p = target.popularity.find(id);
        residual = p == target.popularity.end() ? 0.0 : target.eta * (p->second - s);
      }
      const double next = activate(cfg.activation, s + cfg.eta * residual);
      change = std::max(change, std::abs(next - s));
      if (next != s) {
        const double nm = scale.denormalize(next);
        if (nm != match) updates[id] = nm;
      }
    }
    if (!updates.empty()) store.assign_matches(updates);
    report.sweeps = sweep + 1;
    report.last_change = change;
    if (change < cfg.stability_tol) {
      report.stabilized = true;
      break;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Commit

enum class CommitChannel { cloud_raw, owner_exact, traditional };

inline const char* to_string(CommitChannel c) {
  switch (c) {
    case CommitChannel::cloud_raw: return "cloud-raw";
    case CommitChannel::owner_exact: return "owner-exact";
    case CommitChannel::traditional: return "traditional";
  }
  return "?";
}

inline CommitChannel parse_commit_channel(const std::string& s) {
  if (s == "cloud-raw") return CommitChannel::cloud_raw;
  if (s == "owner-exact") return CommitChannel::owner_exact;
  if (s == "traditional") return CommitChannel::traditional;
  fail(Errc::invalid_argument, "unknown commit channel '" + s + "'");
}

/// The data owner as seen from the cloud during a commit.
class OwnerEndpoint {
 public:
  virtual ~OwnerEndpoint() = default;

  /// Encrypted increment that scales the owner's current index of doc_id.
  virtual aspe::EncryptedIncrement scaling_increment(const std::string& doc_id, double factor) = 0;

  /// Decrypts a downloaded ciphertext, scales it and encrypts it afresh.
  virtual aspe::EncryptedIndex reencrypt_scaled(const aspe::EncryptedIndex& downloaded,
                                                double factor) = 0;
};

struct CommitReport {
  CommitChannel channel = CommitChannel::cloud_raw;
  std::vector<std::string> touched;
  std::vector<std::string> skipped;  // non-positive scores cannot be scaled
  std::uint64_t bytes_up = 0;
  std::uint64_t bytes_down = 0;
};

inline std::uint64_t wire_size(const aspe::EncryptedIncrement& inc, const std::string& doc_id) {
  io::Writer w;
  w.str(doc_id);
  aspe::write_increment(w, inc);
  return w.data().size();
}

inline std::uint64_t wire_size(const aspe::EncryptedIndex& e) {
  io::Writer w;
  aspe::write_index(w, e);
  return w.data().size();
}

/// Makes the ciphertexts of `doc_ids` realize their current match scores.
/// Each ciphertext is scaled by match / committed_match:
///   cloud-raw    the cloud adds (f - 1) * c itself; nothing crosses the boundary
///   owner-exact  the owner uploads an encrypted increment
///   traditional  the cloud sends the ciphertext down, the owner re-uploads it
inline CommitReport wun_commit(rank::RankedStore& store, const std::vector<std::string>& doc_ids,
                               CommitChannel channel, Counters& counters,
                               OwnerEndpoint* owner = nullptr) {
  CommitReport report;
  report.channel = channel;
  if (channel != CommitChannel::cloud_raw)
    require(owner != nullptr, Errc::channel_error,
            std::string(to_string(channel)) + " commit needs an owner channel");
  for (const auto& id : doc_ids) {
    const auto& e = store.entry(id);
    if (e.match == e.committed_match) continue;
    if (!(e.match > 0.0 && e.committed_match > 0.0)) {
      report.skipped.push_back(id);
      continue;
    }
    const double factor = e.match / e.committed_match;
    const double match = e.match;
    switch (channel) {
      case CommitChannel::cloud_raw: {
        auto inc = aspe::scaling_increment(e.index, factor);
        store.replace_index(id, aspe::apply_increment(e.index, inc, aspe::IncrementMode::cloud_raw),
                            match);
        break;
      }
      case CommitChannel::owner_exact: {
        auto inc = owner->scaling_increment(id, factor);
        const auto up = wire_size(inc, id);
        counters.bytes_up += up;
        report.bytes_up += up;
        store.replace_index(id,
                            aspe::apply_increment(e.index, inc, aspe::IncrementMode::owner_exact),
                            match);
        break;
      }
      case CommitChannel::traditional: {
        const auto down = wire_size(e.index);
        counters.bytes_down += down;
        counters.bytes_down_index += down;
        report.bytes_down += down;
        auto fresh = owner->reencrypt_scaled(e.index, factor);
        const auto up = wire_size(fresh);
        counters.bytes_up += up;
        report.bytes_up += up;
        store.replace_index(id, std::move(fresh), match);
        break;
      }
    }
    report.touched.push_back(id);
  }
  return report;
}

/// Every document whose ciphertext lags its match score.
inline std::vector<std::string> pending_commits(const rank::RankedStore& store) {
  std::vector<std::string> ids;
  for (const auto& e : store.entries())
    if (e.match != e.committed_match) ids.push_back(e.doc_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Rank agreement

/// Kendall tau-b between two paired sequences. O(n^2).
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), Errc::dimension_mismatch, "kendall_tau: lengths differ");
  const auto n = x.size();
  if (n < 2) return 1.0;
  double concordant = 0.0, discordant = 0.0, tie_x = 0.0, tie_y = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) {
        tie_x += 1.0;
      } else if (dy == 0.0) {
        tie_y += 1.0;
      } else if ((dx > 0.0) == (dy > 0.0)) {
        concordant += 1.0;
      } else {
        discordant += 1.0;
      }
    }
  const double denom =
      std::sqrt((concordant + discordant + tie_x) * (concordant + discordant + tie_y));
  return denom == 0.0 ? 0.0 : (concordant - discordant) / denom;
}

/// Tau between learned store rank and popularity rank, over all stored docs.
inline double rank_agreement(const rank::RankedStore& store, const PopularityState& pop) {
  const auto order = popularity_order(store, pop);
  std::vector<double> store_rank, pop_rank;
  for (std::size_t r = 0; r < order.size(); ++r) {
    store_rank.push_back(static_cast<double>(store.rank_of(order[r])));
    pop_rank.push_back(static_cast<double>(r));
  }
  return kendall_tau(store_rank, pop_rank);
}

}  // namespace iesnn::feedback
