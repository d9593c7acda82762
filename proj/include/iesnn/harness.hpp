#pragma once

// In-process owner / user / cloud agents with a serialized message boundary,
// traffic accounting, the feedback loop and the query-efficiency benchmark.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "iesnn/aspe.hpp"
#include "iesnn/binary_io.hpp"
#include "iesnn/corpus.hpp"
#include "iesnn/counters.hpp"
#include "iesnn/error.hpp"
#include "iesnn/feedback.hpp"
#include "iesnn/query_engine.hpp"
#include "iesnn/random.hpp"
#include "iesnn/rank_learn.hpp"

namespace iesnn::harness {

// ---------------------------------------------------------------------------
// Cloud-facing messages. The cloud agent accepts nothing else, and every
// message is built only from ciphertexts, trapdoors, scores and ranks.

namespace wire {

template <class T>
concept CloudPayload =
    std::same_as<T, aspe::EncryptedIndex> || std::same_as<T, aspe::Trapdoor> ||
    std::same_as<T, aspe::EncryptedIncrement> || std::same_as<T, rank::TrapdoorSum> ||
    std::same_as<T, query::Hit>;

template <class M>
concept CloudMessage = M::kCloudFacing && requires(const M& m, io::Writer& w) { m.encode(w); };

struct IndexUpload {
  static constexpr bool kCloudFacing = true;
  std::vector<aspe::EncryptedIndex> indexes;
  static_assert(CloudPayload<decltype(indexes)::value_type>);

  void encode(io::Writer& w) const {
    w.u64(indexes.size());
    for (const auto& e : indexes) aspe::write_index(w, e);
  }
};

/// Training trapdoors in aggregated form: their coordinate-wise sum.
struct TrainingUpload {
  static constexpr bool kCloudFacing = true;
  rank::TrapdoorSum sum;
  rank::TrainConfig config;
  static_assert(CloudPayload<decltype(sum)>);

  void encode(io::Writer& w) const {
    w.u64(sum.count);
    w.vec(sum.t1);
    w.vec(sum.t2);
  }
};

struct QueryRequest {
  static constexpr bool kCloudFacing = true;
  aspe::Trapdoor trapdoor;
  query::Strategy strategy = query::Strategy::lt_ci;
  static_assert(CloudPayload<decltype(trapdoor)>);

  void encode(io::Writer& w) const {
    w.u8(static_cast<std::uint8_t>(strategy));
    aspe::write_trapdoor(w, trapdoor);
  }
};

struct QueryResponse {
  static constexpr bool kCloudFacing = true;
  std::vector<query::Hit> hits;
  std::size_t retrieved_index_count = 0;
  static_assert(CloudPayload<decltype(hits)::value_type>);

  void encode(io::Writer& w) const {
    w.u64(retrieved_index_count);
    w.u64(hits.size());
    for (const auto& h : hits) {
      w.str(h.doc_id);
      w.f64(h.score);
    }
  }
};

template <CloudMessage M>
std::uint64_t wire_bytes(const M& m) {
  io::Writer w;
  m.encode(w);
  return w.data().size();
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Scenario configuration

struct CorpusConfig {
  std::size_t docs = 400;
  std::size_t vocab = 2500;
  double zipf_s = 1.1;
  std::size_t dictionary_size = 2000;
  std::size_t pseudo_slots = 100;
  double pseudo_mu = 0.0;
  double pseudo_sigma = 0.01;
  std::string manifest;  // non-empty: load documents instead of synthesizing
};

struct QueryConfig {
  double beta = 0.4;
  double prune_margin = 1.0;
  corpus::PseudoPolicy pseudo_policy = corpus::PseudoPolicy::random_subset_one;
  std::size_t max_keywords = 3;
};

struct BenchConfig {
  std::vector<query::Strategy> strategies{std::begin(query::kAllStrategies),
                                          std::end(query::kAllStrategies)};
  std::vector<std::size_t> k_values{1, 2, 4, 5, 8, 10, 16, 20, 25, 40, 50, 80, 100, 200};
  std::size_t repetitions = 100;
  bool record_wall_time = false;
  std::string per_query_csv;
};

struct FeedbackWorkload {
  double zipf_s = 1.2;
  std::size_t rounds = 500;
  std::size_t k = 5;
  std::size_t query_keywords = 3;
  query::Strategy strategy = query::Strategy::lt_ci;
  feedback::CommitChannel channel = feedback::CommitChannel::cloud_raw;
  double decay = 1.0;
  double eta = 0.1;
  std::size_t tau_every = 10;
  std::string feedback_log;
  std::string audit_log;
};

struct ScenarioConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  rank::TrainConfig train;
  QueryConfig query;
  BenchConfig bench;
  FeedbackWorkload feedback;
  feedback::WunConfig wun;
  std::string output = "bench.csv";

  std::uint64_t stream(std::uint64_t id) const { return derive_seed(seed, id); }
  std::uint64_t corpus_seed() const { return stream(1); }
  std::uint64_t key_seed() const { return stream(2); }
  std::uint64_t pad_seed() const { return stream(3); }
  std::uint64_t encrypt_seed() const { return stream(4); }
  std::uint64_t tree_seed() const { return stream(5); }
  std::uint64_t bench_seed() const { return stream(6); }
  std::uint64_t workload_seed() const { return stream(7); }

  /// Training seed follows the master seed unless set explicitly.
  rank::TrainConfig resolved_train() const {
    auto t = train;
    if (!train_seed_set) t.seed = stream(8);
    return t;
  }

  bool train_seed_set = false;

  void validate() const {
    require(corpus.docs >= 1 && corpus.vocab >= 1 && corpus.dictionary_size >= 1,
            Errc::invalid_argument, "corpus sizes must be >= 1");
    resolved_train().validate();
    require(query.beta > 0.0, Errc::invalid_argument, "beta must be > 0");
    require(query.prune_margin >= 0.0, Errc::invalid_argument, "prune_margin must be >= 0");
    require(query.max_keywords >= 1, Errc::invalid_argument, "max_keywords must be >= 1");
    require(bench.repetitions >= 1, Errc::invalid_argument, "repetitions must be >= 1");
    if (corpus.manifest.empty())
      for (auto k : bench.k_values)
        require(k >= 1 && k <= corpus.docs, Errc::invalid_k,
                "k = " + std::to_string(k) + " outside [1, D]");
    require(feedback.k >= 1, Errc::invalid_k, "feedback k must be >= 1");
    require(feedback.query_keywords >= 1, Errc::invalid_argument,
            "feedback query_keywords must be >= 1");
    require(feedback.tau_every >= 1, Errc::invalid_argument, "tau_every must be >= 1");
    wun.validate();
  }
};

namespace detail {
template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

/// Unknown keys are rejected so typos do not silently fall back to defaults.
inline ScenarioConfig parse_scenario(const nlohmann::json& j) {
  using detail::read_opt;
  auto check_keys = [](const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
    require(obj.is_object(), Errc::format_error, where + " must be an object");
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (auto a : allowed) ok = ok || key == a;
      require(ok, Errc::format_error, "unknown key '" + key + "' in " + where);
    }
  };
  ScenarioConfig c;
  try {
    check_keys(j, {"seed", "corpus", "train", "query", "bench", "feedback", "wun", "output"},
               "scenario");
    read_opt(j, "seed", c.seed);
    read_opt(j, "output", c.output);
    if (j.contains("corpus")) {
      const auto& s = j["corpus"];
      check_keys(s,
                 {"docs", "vocab", "zipf_s", "dictionary_size", "pseudo_slots", "pseudo_mu",
                  "pseudo_sigma", "manifest"},
                 "corpus");
      read_opt(s, "docs", c.corpus.docs);
      read_opt(s, "vocab", c.corpus.vocab);
      read_opt(s, "zipf_s", c.corpus.zipf_s);
      read_opt(s, "dictionary_size", c.corpus.dictionary_size);
      read_opt(s, "pseudo_slots", c.corpus.pseudo_slots);
      read_opt(s, "pseudo_mu", c.corpus.pseudo_mu);
      read_opt(s, "pseudo_sigma", c.corpus.pseudo_sigma);
      read_opt(s, "manifest", c.corpus.manifest);
    }
    if (j.contains("train")) {
      const auto& s = j["train"];
      check_keys(s, {"m", "sigma", "distribution", "sparsity", "seed"}, "train");
      read_opt(s, "m", c.train.m);
      read_opt(s, "sigma", c.train.sigma);
      read_opt(s, "sparsity", c.train.sparsity);
      if (s.contains("distribution"))
        c.train.distribution = rank::parse_distribution(s["distribution"].get<std::string>());
      if (s.contains("seed")) {
        c.train.seed = s["seed"].get<std::uint64_t>();
        c.train_seed_set = true;
      }
    }
    if (j.contains("query")) {
      const auto& s = j["query"];
      check_keys(s, {"beta", "prune_margin", "pseudo_policy", "max_keywords"}, "query");
      read_opt(s, "beta", c.query.beta);
      read_opt(s, "prune_margin", c.query.prune_margin);
      read_opt(s, "max_keywords", c.query.max_keywords);
      if (s.contains("pseudo_policy"))
        c.query.pseudo_policy = corpus::parse_pseudo_policy(s["pseudo_policy"].get<std::string>());
    }
    if (j.contains("bench")) {
      const auto& s = j["bench"];
      check_keys(s, {"strategies", "k_values", "repetitions", "record_wall_time", "per_query_csv"},
                 "bench");
      if (s.contains("strategies")) {
        c.bench.strategies.clear();
        for (const auto& name : s["strategies"])
          c.bench.strategies.push_back(query::parse_strategy(name.get<std::string>()));
      }
      read_opt(s, "k_values", c.bench.k_values);
      read_opt(s, "repetitions", c.bench.repetitions);
      read_opt(s, "record_wall_time", c.bench.record_wall_time);
      read_opt(s, "per_query_csv", c.bench.per_query_csv);
    }
    if (j.contains("feedback")) {
      const auto& s = j["feedback"];
      check_keys(s,
                 {"zipf_s", "rounds", "k", "query_keywords", "strategy", "channel", "decay",
                  "eta", "tau_every", "feedback_log", "audit_log"},
                 "feedback");
      read_opt(s, "zipf_s", c.feedback.zipf_s);
      read_opt(s, "rounds", c.feedback.rounds);
      read_opt(s, "k", c.feedback.k);
      read_opt(s, "query_keywords", c.feedback.query_keywords);
      read_opt(s, "decay", c.feedback.decay);
      read_opt(s, "eta", c.feedback.eta);
      read_opt(s, "tau_every", c.feedback.tau_every);
      read_opt(s, "feedback_log", c.feedback.feedback_log);
      read_opt(s, "audit_log", c.feedback.audit_log);
      if (s.contains("strategy"))
        c.feedback.strategy = query::parse_strategy(s["strategy"].get<std::string>());
      if (s.contains("channel"))
        c.feedback.channel = feedback::parse_commit_channel(s["channel"].get<std::string>());
    }
    if (j.contains("wun")) {
      const auto& s = j["wun"];
      check_keys(s, {"mode", "activation", "eta", "max_sweeps", "stability_tol"}, "wun");
      if (s.contains("mode")) c.wun.mode = feedback::parse_work_mode(s["mode"].get<std::string>());
      if (s.contains("activation"))
        c.wun.activation = feedback::parse_activation(s["activation"].get<std::string>());
      read_opt(s, "eta", c.wun.eta);
      read_opt(s, "max_sweeps", c.wun.max_sweeps);
      read_opt(s, "stability_tol", c.wun.stability_tol);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format_error, std::string("scenario config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  try {
    return parse_scenario(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::format_error, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Agents

/// Holds the dictionary, key and plaintext indexes. Key material never
/// leaves this class; it hands out ciphertexts, trapdoors and increments.
class OwnerAgent : public feedback::OwnerEndpoint {
 public:
  OwnerAgent(corpus::Dictionary dict, aspe::SecretKey sk, std::vector<corpus::Document> docs,
             double pad_mu, double pad_sigma, std::uint64_t pad_seed, std::uint64_t encrypt_seed)
      : dict_(std::move(dict)),
        sk_(std::move(sk)),
        docs_(std::move(docs)),
        encrypt_seed_(encrypt_seed) {
    require(dict_.V() == sk_.dim(), Errc::dimension_mismatch,
            "dictionary V does not match key dimension");
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      auto v = corpus::tfidf_index(docs_[i], dict_);
      auto padded = corpus::pad_pseudo(std::move(v), dict_, pad_mu, pad_sigma,
                                       derive_seed(pad_seed, i));
      plain_.emplace(docs_[i].doc_id, std::move(padded.vector));
    }
  }

  const corpus::Dictionary& dictionary() const noexcept { return dict_; }
  const std::vector<corpus::Document>& documents() const noexcept { return docs_; }
  const aspe::PlainVector& plain_index(const std::string& doc_id) const {
    auto it = plain_.find(doc_id);
    require(it != plain_.end(), Errc::unknown_document, "unknown document '" + doc_id + "'");
    return it->second;
  }

  wire::IndexUpload build_indexes() const {
    std::vector<aspe::PlainVector> vecs;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      vecs.push_back(plain_.at(docs_[i].doc_id));
      seeds.push_back(derive_seed(encrypt_seed_, i));
    }
    return wire::IndexUpload{aspe::encrypt_indexes(vecs, sk_, seeds)};
  }

  wire::TrainingUpload training_trapdoors(const rank::TrainConfig& cfg) const {
    return wire::TrainingUpload{rank::random_trapdoor_sum(cfg, sk_), cfg};
  }

  /// Trapdoor for an authorized user; the plaintext query stays user-side.
  aspe::Trapdoor trapdoor(const aspe::PlainVector& q, std::size_t k, std::uint64_t seed) const {
    return aspe::make_trapdoor(q, k, sk_, seed);
  }

  aspe::EncryptedIncrement scaling_increment(const std::string& doc_id, double factor) override {
    auto& current = plain_.at(doc_id);
    const Vector delta = (factor - 1.0) * current.values;
    current.values += delta;
    return aspe::encrypt_increment(delta, sk_, next_update_seed());
  }

  aspe::EncryptedIndex reencrypt_scaled(const aspe::EncryptedIndex& downloaded,
                                        double factor) override {
    aspe::PlainVector v{factor * aspe::recover_index(downloaded, sk_), aspe::VectorRole::index,
                        downloaded.doc_id};
    if (auto it = plain_.find(downloaded.doc_id); it != plain_.end()) it->second.values = v.values;
    return aspe::encrypt_index(v, sk_, next_update_seed());
  }

  /// True when no stored ciphertext half coincides with its plaintext.
  bool ciphertexts_hide_plaintexts(const rank::RankedStore& store, double tol = 1e-6) const {
    for (const auto& e : store.entries()) {
      const auto& p = plain_index(e.doc_id).values;
      if ((e.index.c1 - p).cwiseAbs().maxCoeff() <= tol) return false;
      if ((e.index.c2 - p).cwiseAbs().maxCoeff() <= tol) return false;
    }
    return true;
  }

  /// Key-holder diagnostic; see aspe::increment_approximation_error.
  double approximation_error(const aspe::EncryptedIncrement& inc, const aspe::Trapdoor& t,
                             const Vector& q) const {
    return aspe::increment_approximation_error(inc, sk_, t, q);
  }

  const aspe::SecretKey& key_for_persistence() const noexcept { return sk_; }

 private:
  std::uint64_t next_update_seed() { return derive_seed(encrypt_seed_ ^ 0x5a5a5a5aULL, updates_++); }

  corpus::Dictionary dict_;
  aspe::SecretKey sk_;
  std::vector<corpus::Document> docs_;
  std::map<std::string, aspe::PlainVector> plain_;
  std::uint64_t encrypt_seed_;
  std::uint64_t updates_ = 0;
};

/// Holds ciphertexts, the learned ranking, tree caches and popularity.
class CloudAgent {
 public:
  CloudAgent(double beta, double prune_margin, std::uint64_t tree_seed)
      : beta_(beta), margin_(prune_margin), tree_seed_(tree_seed) {}

  void receive(const wire::IndexUpload& m, Counters& c) {
    c.bytes_up += wire::wire_bytes(m);
    pending_ = m.indexes;
  }

  void receive(const wire::TrainingUpload& m, Counters& c) {
    c.bytes_up += wire::wire_bytes(m);
    require(!pending_.empty(), Errc::empty_store, "training before any index upload");
    store_ = rank::train_ranking(pending_, m.sum, m.config);
    pending_.clear();
    invalidate_trees();
  }

  wire::QueryResponse handle(const wire::QueryRequest& m, Counters& c) {
    require(!query::plaintext_strategy(m.strategy), Errc::misuse,
            "plaintext strategies cannot run in the cloud");
    c.bytes_up += wire::wire_bytes(m);
    ++c.trapdoors_sent;
    ++c.queries_run;
    auto scorer = query::ciphertext_scorer(m.trapdoor);
    auto outcome = run(m.strategy, scorer, m.trapdoor.k);
    wire::QueryResponse resp{std::move(outcome.result.hits), outcome.stats.retrieved_index_count};
    c.bytes_down += wire::wire_bytes(resp);
    return resp;
  }

  /// Runs a strategy over the current store with an arbitrary scorer.
  query::QueryOutcome run(query::Strategy s, const query::Scorer& scorer, std::size_t k) {
    const auto& st = store();
    switch (s) {
      case query::Strategy::lt_ci: return query::query_lt(st, scorer, k);
      case query::Strategy::pr_ci: return query::query_pr(st, scorer, k, beta_);
      case query::Strategy::po_tree_ci:
      case query::Strategy::po_tree_pi:
        return query::query_gdfs(tree(query::LeafOrder::probabilistic), st, scorer, k, margin_);
      case query::Strategy::ru_tree_pi:
        return query::query_gdfs(tree(query::LeafOrder::random), st, scorer, k, margin_);
    }
    fail(Errc::invalid_argument, "unknown strategy");
  }

  const rank::RankedStore& store() const {
    require(store_.has_value(), Errc::empty_store, "cloud has no trained store");
    return *store_;
  }

  rank::RankedStore& mutable_store() {
    require(store_.has_value(), Errc::empty_store, "cloud has no trained store");
    return *store_;
  }

  void set_store(rank::RankedStore s) {
    store_ = std::move(s);
    invalidate_trees();
  }

  const query::IndexTree& tree(query::LeafOrder order) {
    auto& slot = order == query::LeafOrder::probabilistic ? po_tree_ : ru_tree_;
    if (!slot || slot->store_version() != store().version())
      slot = query::build_tree(store(), order, tree_seed_);
    return *slot;
  }

  feedback::PopularityState& popularity() noexcept { return pop_; }
  std::vector<std::string>& audit_log() noexcept { return audit_; }
  double beta() const noexcept { return beta_; }
  double prune_margin() const noexcept { return margin_; }

 private:
  void invalidate_trees() {
    po_tree_.reset();
    ru_tree_.reset();
  }

  double beta_, margin_;
  std::uint64_t tree_seed_;
  std::vector<aspe::EncryptedIndex> pending_;
  std::optional<rank::RankedStore> store_;
  std::optional<query::IndexTree> po_tree_, ru_tree_;
  feedback::PopularityState pop_;
  std::vector<std::string> audit_;
};

struct Scenario {
  ScenarioConfig config;
  OwnerAgent owner;
  CloudAgent cloud;
  Counters counters;
};

inline std::vector<corpus::Document> scenario_documents(const ScenarioConfig& cfg) {
  if (!cfg.corpus.manifest.empty()) return corpus::load_manifest(cfg.corpus.manifest);
  return corpus::synth_corpus(cfg.corpus.docs, cfg.corpus.vocab, cfg.corpus.zipf_s,
                              cfg.corpus_seed());
}

/// Owner builds the dictionary and padded TF-IDF indexes, encrypts and ships
/// them; the cloud trains the ranking from the owner's training trapdoors.
inline Scenario run_setup(const ScenarioConfig& cfg) {
  cfg.validate();
  auto docs = scenario_documents(cfg);
  auto dict = corpus::build_dictionary(docs, cfg.corpus.dictionary_size, cfg.corpus.pseudo_slots);
  for (auto k : cfg.bench.k_values)
    require(k <= docs.size(), Errc::invalid_k, "bench k exceeds the corpus size");
  auto sk = aspe::keygen(dict.V(), cfg.key_seed());
  Scenario sc{cfg,
              OwnerAgent(std::move(dict), std::move(sk), std::move(docs), cfg.corpus.pseudo_mu,
                         cfg.corpus.pseudo_sigma, cfg.pad_seed(), cfg.encrypt_seed()),
              CloudAgent(cfg.query.beta, cfg.query.prune_margin, cfg.tree_seed()),
              Counters{}};
  sc.cloud.receive(sc.owner.build_indexes(), sc.counters);
  sc.cloud.receive(sc.owner.training_trapdoors(cfg.resolved_train()), sc.counters);
  sc.cloud.popularity().decay = cfg.feedback.decay;
  sc.cloud.popularity().eta = cfg.feedback.eta;
  return sc;
}

// ---------------------------------------------------------------------------
// Query rounds

/// Plain scores of every stored entry, indexed by store rank.
inline std::vector<double> plaintext_scores(const Scenario& sc, const Vector& q) {
  const auto& store = sc.cloud.store();
  std::vector<double> out(store.size());
  for (std::size_t r = 0; r < store.size(); ++r)
    out[r] = sc.owner.plain_index(store.at(r).doc_id).values.dot(q);
  return out;
}

inline std::vector<double> ciphertext_scores(const Scenario& sc, const aspe::Trapdoor& t) {
  const auto& store = sc.cloud.store();
  std::vector<double> out(store.size());
  for (std::size_t r = 0; r < store.size(); ++r) out[r] = aspe::score(store.at(r).index, t);
  return out;
}

inline query::Scorer cached_scorer(const std::vector<double>& by_rank) {
  return [&by_rank](const rank::StoreEntry& e) { return by_rank[e.rank]; };
}

/// One user query: trapdoor from the owner, strategy in the cloud (or over
/// owner plaintext for PI strategies), precision against linear traversal.
inline query::QueryOutcome run_query_round(Scenario& sc, const corpus::QuerySpec& spec,
                                           query::Strategy strategy, std::uint64_t seed) {
  const auto& dict = sc.owner.dictionary();
  auto q = corpus::build_query(spec, dict, sc.config.query.pseudo_policy, derive_seed(seed, 1));
  auto t = sc.owner.trapdoor(q, spec.k, derive_seed(seed, 2));
  const auto truth = query::query_lt(sc.cloud.store(), query::ciphertext_scorer(t), spec.k);
  query::QueryOutcome out;
  if (query::plaintext_strategy(strategy)) {
    const auto plain = plaintext_scores(sc, q.values);
    out = sc.cloud.run(strategy, cached_scorer(plain), spec.k);
  } else {
    auto resp = sc.cloud.handle(wire::QueryRequest{t, strategy}, sc.counters);
    out.result.hits = std::move(resp.hits);
    out.stats.retrieved_index_count = resp.retrieved_index_count;
    out.stats.k_clamped = spec.k > sc.cloud.store().size();
  }
  out.stats.precision = query::precision(out.result, truth.result, truth.result.hits.size());
  return out;
}

// ---------------------------------------------------------------------------
// Feedback loop

struct FeedbackReport {
  std::size_t rounds = 0;
  std::vector<std::pair<std::size_t, double>> tau_trajectory;  // (round, tau)
  double final_tau = 0.0;
  Counters counters;
  std::size_t commits = 0;
  std::size_t skipped_commits = 0;
  std::size_t sync_unstabilized = 0;
  std::size_t max_sync_sweeps = 0;
};

/// Up to `count` real keywords with the largest weights (slot order on ties).
inline std::vector<std::string> top_keywords(const corpus::Dictionary& dict,
                                             const aspe::PlainVector& index, std::size_t count) {
  std::vector<std::size_t> slots;
  for (std::size_t s = 0; s < dict.N(); ++s)
    if (index.values[static_cast<Eigen::Index>(s)] > 0.0) slots.push_back(s);
  std::stable_sort(slots.begin(), slots.end(), [&](std::size_t a, std::size_t b) {
    return index.values[static_cast<Eigen::Index>(a)] > index.values[static_cast<Eigen::Index>(b)];
  });
  if (slots.size() > count) slots.resize(count);
  if (slots.empty()) slots.push_back(0);
  std::vector<std::string> out;
  for (auto s : slots) out.push_back(dict.keywords()[s]);
  return out;
}

class JsonlLog {
 public:
  explicit JsonlLog(const std::string& path) : path_(path) {}
  void add(const nlohmann::json& j) {
    if (!path_.empty()) buf_ += j.dump() + "\n";
  }
  void flush() const {
    if (!path_.empty()) io::write_file(path_, buf_);
  }

 private:
  std::string path_;
  std::string buf_;
};

/// query -> observe -> update -> commit, `workload.rounds` times. Queries
/// target documents drawn from Zipf(workload.zipf_s) over a seeded
/// permutation of the corpus; each query is the target's top keywords.
inline FeedbackReport run_feedback_loop(Scenario& sc, const FeedbackWorkload& workload,
                                        const feedback::WunConfig& wun) {
  wun.validate();
  FeedbackReport report;
  auto& pop = sc.cloud.popularity();
  pop.decay = workload.decay;
  pop.eta = workload.eta;
  pop.validate();

  const auto& docs = sc.owner.documents();
  Rng rng(sc.config.workload_seed());
  std::vector<std::size_t> perm(docs.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  ZipfSampler zipf(docs.size(), workload.zipf_s);
  JsonlLog fb_log(workload.feedback_log), audit_log(workload.audit_log);

  for (std::size_t round = 0; round < workload.rounds; ++round) {
    const auto& target_doc = docs[perm[zipf(rng)]];
    const auto& dict = sc.owner.dictionary();
    const auto spec = corpus::make_query_spec(
        top_keywords(dict, sc.owner.plain_index(target_doc.doc_id), workload.query_keywords),
        workload.k, dict);
    const auto seed = derive_seed(sc.config.workload_seed(), 1000 + round);
    auto q = corpus::build_query(spec, dict, sc.config.query.pseudo_policy, derive_seed(seed, 1));
    auto t = sc.owner.trapdoor(q, spec.k, derive_seed(seed, 2));

    query::ResultList result;
    if (query::plaintext_strategy(workload.strategy)) {
      const auto plain = plaintext_scores(sc, q.values);
      result = sc.cloud.run(workload.strategy, cached_scorer(plain), spec.k).result;
    } else {
      result.hits = sc.cloud.handle(wire::QueryRequest{t, workload.strategy}, sc.counters).hits;
    }

    auto& store = sc.cloud.mutable_store();
    auto record = feedback::make_record(store, result, round);
    {
      nlohmann::json j;
      j["round"] = round;
      j["store_version"] = record.store_version;
      std::vector<std::string> ids;
      std::vector<double> scores;
      for (const auto& h : result.hits) {
        ids.push_back(h.doc_id);
        scores.push_back(h.score);
      }
      j["doc_ids"] = ids;
      j["scores"] = scores;
      fb_log.add(j);
    }
    const auto target = feedback::san_observe(store, record, pop);
    if (wun.mode == feedback::WorkMode::async) {
      for (const auto& [id, residual] : target.residuals)
        feedback::wun_async_step(store, target, id, wun);
    } else {
      const auto sync = feedback::wun_sync_step(store, target, wun);
      report.max_sync_sweeps = std::max(report.max_sync_sweeps, sync.sweeps);
      if (!sync.stabilized) ++report.sync_unstabilized;
    }

    std::vector<std::string> touched;
    for (const auto& h : result.hits) touched.push_back(h.doc_id);
    std::sort(touched.begin(), touched.end());
    auto commit = feedback::wun_commit(store, touched, workload.channel, sc.counters, &sc.owner);
    report.commits += commit.touched.size();
    report.skipped_commits += commit.skipped.size();
    {
      nlohmann::json j;
      j["round"] = round;
      j["mode"] = feedback::to_string(commit.channel);
      j["docs"] = commit.touched;
      j["bytes_up"] = commit.bytes_up;
      j["bytes_down"] = commit.bytes_down;
      audit_log.add(j);
      sc.cloud.audit_log().push_back(j.dump());
    }
    if (workload.channel == feedback::CommitChannel::cloud_raw)
      require(sc.counters.bytes_down_index == 0, Errc::misuse,
              "cloud-raw commit downloaded index bytes");

    report.rounds = round + 1;
    if ((round + 1) % workload.tau_every == 0 || round + 1 == workload.rounds)
      report.tau_trajectory.emplace_back(round + 1, feedback::rank_agreement(store, pop));
  }
  fb_log.flush();
  audit_log.flush();
  report.final_tau = report.rounds == 0 ? feedback::rank_agreement(sc.cloud.store(), pop)
                                        : report.tau_trajectory.back().second;
  report.counters = sc.counters;
  return report;
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
  query::Strategy strategy;
  std::size_t d = 0;
  std::size_t n_dict = 0;
  std::size_t k = 0;
  double beta = 0.0;
  double retrieved = 0.0;  // mean over repetitions
  double precision = 0.0;  // mean over repetitions
  double elapsed_us = 0.0; // mean, 0 unless wall time is recorded
  std::uint64_t seed = 0;
};

struct BenchQuery {
  std::vector<std::string> keywords;
  std::uint64_t seed = 0;
};

/// Uniformly 1..max_keywords distinct dictionary keywords per query.
inline std::vector<BenchQuery> bench_queries(const ScenarioConfig& cfg,
                                             const corpus::Dictionary& dict) {
  Rng rng(cfg.bench_seed());
  std::vector<BenchQuery> out(cfg.bench.repetitions);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto n = static_cast<std::size_t>(
        rng.between(1, static_cast<std::int64_t>(std::min(cfg.query.max_keywords, dict.N()))));
    for (auto s : rng.sample_without_replacement(dict.N(), n))
      out[i].keywords.push_back(dict.keywords()[s]);
    out[i].seed = derive_seed(cfg.bench_seed(), 100 + i);
  }
  return out;
}

struct PerQueryRow {
  query::Strategy strategy;
  std::size_t k = 0;
  std::size_t query = 0;
  std::size_t retrieved = 0;
  double precision = 0.0;
  std::vector<std::string> hit_ids;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<PerQueryRow> per_query;
};

/// Every strategy at every k over the same seeded queries. Truth is the
/// top-k by ciphertext score over all documents.
inline BenchResult bench_grid(Scenario& sc, bool keep_per_query = false) {
  const auto& cfg = sc.config;
  const auto& dict = sc.owner.dictionary();
  const auto queries = bench_queries(cfg, dict);
  const auto d = sc.cloud.store().size();

  struct Acc {
    double retrieved = 0.0, precision = 0.0, elapsed_us = 0.0;
  };
  std::map<std::pair<std::size_t, std::size_t>, Acc> acc;  // (strategy idx, k idx)
  BenchResult out;

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto spec = corpus::make_query_spec(queries[qi].keywords, 1, dict);
    auto q = corpus::build_query(spec, dict, cfg.query.pseudo_policy,
                                 derive_seed(queries[qi].seed, 1));
    auto t = sc.owner.trapdoor(q, 1, derive_seed(queries[qi].seed, 2));
    const auto ci = ciphertext_scores(sc, t);
    const auto pi = plaintext_scores(sc, q.values);
    sc.counters.bytes_up += [&] {
      io::Writer w;
      aspe::write_trapdoor(w, t);
      return w.data().size();
    }();
    ++sc.counters.trapdoors_sent;
    for (std::size_t ki = 0; ki < cfg.bench.k_values.size(); ++ki) {
      const auto k = std::min(cfg.bench.k_values[ki], d);
      const auto truth = query::query_lt(sc.cloud.store(), cached_scorer(ci), k);
      for (std::size_t si = 0; si < cfg.bench.strategies.size(); ++si) {
        const auto s = cfg.bench.strategies[si];
        auto res = sc.cloud.run(s, cached_scorer(query::plaintext_strategy(s) ? pi : ci), k);
        ++sc.counters.queries_run;
        const double p = query::precision(res.result, truth.result, k);
        auto& a = acc[{si, ki}];
        a.retrieved += static_cast<double>(res.stats.retrieved_index_count);
        a.precision += p;
        a.elapsed_us += std::chrono::duration<double, std::micro>(res.stats.elapsed).count();
        if (keep_per_query) {
          PerQueryRow row{s, k, qi, res.stats.retrieved_index_count, p, {}};
          for (const auto& h : res.result.hits) row.hit_ids.push_back(h.doc_id);
          out.per_query.push_back(std::move(row));
        }
      }
    }
  }

  const double n = static_cast<double>(queries.size());
  for (std::size_t si = 0; si < cfg.bench.strategies.size(); ++si)
    for (std::size_t ki = 0; ki < cfg.bench.k_values.size(); ++ki) {
      const auto& a = acc[{si, ki}];
      out.rows.push_back(BenchRow{cfg.bench.strategies[si], d, dict.N(),
                                  std::min(cfg.bench.k_values[ki], d), cfg.query.beta,
                                  a.retrieved / n, a.precision / n,
                                  cfg.bench.record_wall_time ? a.elapsed_us / n : 0.0, cfg.seed});
    }
  return out;
}

inline std::string format_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out =
      "strategy,D,N_dict,k,beta,retrieved_index_count,precision,elapsed_microseconds,seed\n";
  for (const auto& r : rows) {
    out += query::to_string(r.strategy);
    out += "," + std::to_string(r.d) + "," + std::to_string(r.n_dict) + "," + std::to_string(r.k);
    out += "," + format_double("%.4g", r.beta);
    out += "," + format_double("%.4f", r.retrieved);
    out += "," + format_double("%.6f", r.precision);
    out += "," + format_double("%.3f", r.elapsed_us);
    out += "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

inline std::string per_query_csv(const std::vector<PerQueryRow>& rows) {
  std::string out = "strategy,k,query,retrieved_index_count,precision,hits\n";
  for (const auto& r : rows) {
    std::string hits;
    for (std::size_t i = 0; i < r.hit_ids.size(); ++i) hits += (i ? ";" : "") + r.hit_ids[i];
    out += std::string(query::to_string(r.strategy)) + "," + std::to_string(r.k) + "," +
           std::to_string(r.query) + "," + std::to_string(r.retrieved) + "," +
           format_double("%.6f", r.precision) + "," + hits + "\n";
  }
  return out;
}

}  // namespace iesnn::harness
