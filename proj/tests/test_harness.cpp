#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "iesnn/harness.hpp"

using namespace iesnn;
using namespace iesnn::harness;

static_assert(wire::CloudMessage<wire::IndexUpload>);
static_assert(wire::CloudMessage<wire::TrainingUpload>);
static_assert(wire::CloudMessage<wire::QueryRequest>);
static_assert(wire::CloudMessage<wire::QueryResponse>);
static_assert(!wire::CloudPayload<aspe::PlainVector>);
static_assert(!wire::CloudPayload<aspe::SecretKey>);

namespace {

ScenarioConfig small(std::uint64_t seed = 0) {
  ScenarioConfig c;
  c.seed = seed;
  c.corpus.docs = 60;
  c.corpus.vocab = 400;
  c.corpus.dictionary_size = 200;
  c.corpus.pseudo_slots = 10;
  c.train.m = 2000;
  c.bench.k_values = {1, 2, 5, 10};
  c.bench.repetitions = 5;
  c.feedback.rounds = 40;
  return c;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Setup, CloudHoldsEveryCiphertext) {
  auto sc = run_setup(small());
  const auto& store = sc.cloud.store();
  EXPECT_EQ(store.size(), 60u);
  EXPECT_EQ(store.dim(), 210u);
  EXPECT_EQ(sc.owner.dictionary().V(), 210u);
  EXPECT_GT(sc.counters.bytes_up, 0u);
  EXPECT_EQ(sc.counters.bytes_down, 0u);
}

TEST(Setup, SameSeedsGiveIdenticalStoreBytes) {
  auto a = run_setup(small(3));
  auto b = run_setup(small(3));
  auto c = run_setup(small(4));
  EXPECT_EQ(rank::save_store(a.cloud.store()), rank::save_store(b.cloud.store()));
  EXPECT_NE(rank::save_store(a.cloud.store()), rank::save_store(c.cloud.store()));
}

TEST(Setup, CloudSeesNoPlaintext) {
  auto sc = run_setup(small());
  EXPECT_TRUE(sc.owner.ciphertexts_hide_plaintexts(sc.cloud.store()));
}

TEST(Setup, TrainSeedFollowsMasterUnlessSet) {
  auto c = small(9);
  EXPECT_EQ(c.resolved_train().seed, derive_seed(9, 8));
  auto j = nlohmann::json::parse(R"({"seed": 9, "train": {"seed": 77}})");
  EXPECT_EQ(parse_scenario(j).resolved_train().seed, 77u);
}

TEST(QueryRound, LinearTraversalIsExact) {
  auto sc = run_setup(small());
  const auto& dict = sc.owner.dictionary();
  auto spec = corpus::make_query_spec({dict.keywords()[0], dict.keywords()[5]}, 5, dict);
  auto out = run_query_round(sc, spec, query::Strategy::lt_ci, 11);
  EXPECT_EQ(out.stats.precision, 1.0);
  EXPECT_EQ(out.stats.retrieved_index_count, 60u);
  EXPECT_EQ(out.result.hits.size(), 5u);
  for (std::size_t i = 1; i < out.result.hits.size(); ++i)
    EXPECT_GE(out.result.hits[i - 1].score, out.result.hits[i].score);
  EXPECT_EQ(sc.counters.trapdoors_sent, 1u);
  EXPECT_EQ(sc.counters.queries_run, 1u);
}

TEST(QueryRound, PrefixScanAtFullKIsExact) {
  auto sc = run_setup(small());
  const auto& dict = sc.owner.dictionary();
  auto spec = corpus::make_query_spec({dict.keywords()[2]}, 60, dict);
  auto out = run_query_round(sc, spec, query::Strategy::pr_ci, 12);
  EXPECT_EQ(out.stats.precision, 1.0);
  EXPECT_EQ(out.stats.retrieved_index_count, 60u);
}

TEST(QueryRound, PopularPrefixQueryNeedsOnlyTheWindow) {
  // Constructed case: a single keyword of a prefix document whose exact
  // top-1 answer lies inside the learned-rank window.
  auto sc = run_setup(small());
  const auto& dict = sc.owner.dictionary();
  const auto& store = sc.cloud.store();
  const auto w = query::pr_window(store.size(), 1, sc.config.query.beta);
  bool found = false;
  for (std::size_t r = 0; r < w && !found; ++r) {
    for (const auto& kw : top_keywords(dict, sc.owner.plain_index(store.at(r).doc_id), 3)) {
      auto spec = corpus::make_query_spec({kw}, 1, dict);
      auto truth = run_query_round(sc, spec, query::Strategy::lt_ci, 13);
      if (store.rank_of(truth.result.hits.at(0).doc_id) >= w) continue;
      auto out = run_query_round(sc, spec, query::Strategy::pr_ci, 13);
      EXPECT_EQ(out.stats.precision, 1.0);
      EXPECT_EQ(out.stats.retrieved_index_count, w);
      EXPECT_LT(out.stats.retrieved_index_count, store.size());
      found = true;
      break;
    }
  }
  EXPECT_TRUE(found);
}

TEST(QueryRound, PlaintextStrategiesStayOwnerSide) {
  auto sc = run_setup(small());
  const auto& dict = sc.owner.dictionary();
  auto spec = corpus::make_query_spec({dict.keywords()[1]}, 3, dict);
  auto out = run_query_round(sc, spec, query::Strategy::po_tree_pi, 14);
  EXPECT_EQ(out.result.hits.size(), 3u);
  EXPECT_EQ(sc.counters.queries_run, 0u);
  auto q = corpus::build_query(spec, dict, corpus::PseudoPolicy::zeros, 1);
  wire::QueryRequest req{sc.owner.trapdoor(q, 3, 2), query::Strategy::ru_tree_pi};
  try {
    sc.cloud.handle(req, sc.counters);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::misuse);
  }
}

TEST(QueryRound, UnknownKeywordPropagates) {
  auto sc = run_setup(small());
  EXPECT_THROW(corpus::make_query_spec({"no-such-word"}, 1, sc.owner.dictionary()), Error);
}

TEST(FeedbackLoop, ZeroRoundsIsIdentity) {
  auto sc = run_setup(small());
  const auto before = rank::save_store(sc.cloud.store());
  const auto counters = sc.counters;
  auto wl = sc.config.feedback;
  wl.rounds = 0;
  auto rep = run_feedback_loop(sc, wl, sc.config.wun);
  EXPECT_EQ(rep.rounds, 0u);
  EXPECT_TRUE(rep.tau_trajectory.empty());
  EXPECT_EQ(rep.commits, 0u);
  EXPECT_EQ(rep.counters, counters);
  EXPECT_EQ(rank::save_store(sc.cloud.store()), before);
}

TEST(FeedbackLoop, CloudRawNeverDownloadsIndexes) {
  auto sc = run_setup(small());
  auto rep = run_feedback_loop(sc, sc.config.feedback, sc.config.wun);
  EXPECT_EQ(rep.rounds, 40u);
  EXPECT_EQ(rep.counters.bytes_down_index, 0u);
  EXPECT_GT(rep.commits, 0u);
  EXPECT_EQ(rep.tau_trajectory.size(), 4u);
}

TEST(FeedbackLoop, TraditionalBaselineDownloads) {
  auto sc = run_setup(small());
  auto wl = sc.config.feedback;
  wl.channel = feedback::CommitChannel::traditional;
  auto rep = run_feedback_loop(sc, wl, sc.config.wun);
  EXPECT_GT(rep.counters.bytes_down_index, 0u);
  EXPECT_GE(rep.counters.bytes_down_index,
            rep.commits * feedback::wire_size(sc.cloud.store().at(0).index));
}

TEST(FeedbackLoop, OwnerExactUploadsOnly) {
  auto sc = run_setup(small());
  auto wl = sc.config.feedback;
  wl.channel = feedback::CommitChannel::owner_exact;
  const auto down = sc.counters.bytes_down;
  auto rep = run_feedback_loop(sc, wl, sc.config.wun);
  EXPECT_EQ(rep.counters.bytes_down_index, 0u);
  EXPECT_GT(rep.counters.bytes_up, 0u);
  EXPECT_GE(rep.counters.bytes_down, down);
}

TEST(FeedbackLoop, WritesLogs) {
  auto dir = std::filesystem::temp_directory_path() / "iesnn_harness_logs";
  std::filesystem::create_directories(dir);
  auto sc = run_setup(small());
  auto wl = sc.config.feedback;
  wl.rounds = 7;
  wl.feedback_log = (dir / "fb.jsonl").string();
  wl.audit_log = (dir / "audit.jsonl").string();
  run_feedback_loop(sc, wl, sc.config.wun);
  EXPECT_EQ(count_lines(io::read_file(wl.feedback_log)), 7u);
  auto audit = io::read_file(wl.audit_log);
  EXPECT_EQ(count_lines(audit), 7u);
  EXPECT_NE(audit.find("\"mode\":\"cloud-raw\""), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Config, UnknownKeysRejected) {
  for (const char* text : {R"({"seeds": 1})", R"({"corpus": {"doc": 5}})",
                           R"({"bench": {"k": [1]}})"}) {
    try {
      parse_scenario(nlohmann::json::parse(text));
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::format_error) << text;
    }
  }
}

TEST(Config, ParsesAllSections) {
  auto c = parse_scenario(nlohmann::json::parse(R"({
    "seed": 5, "output": "x.csv",
    "corpus": {"docs": 100, "pseudo_slots": 4},
    "train": {"m": 50, "distribution": "symmetric-uniform"},
    "query": {"beta": 0.7, "pseudo_policy": "zeros"},
    "bench": {"strategies": ["pr-ci", "LT-CI"], "k_values": [1, 3], "repetitions": 2},
    "feedback": {"rounds": 3, "channel": "traditional", "strategy": "po-tree-ci"},
    "wun": {"mode": "sync", "activation": "sgn", "max_sweeps": 9}
  })"));
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.corpus.docs, 100u);
  EXPECT_EQ(c.train.distribution, rank::Distribution::symmetric_uniform);
  EXPECT_EQ(c.query.pseudo_policy, corpus::PseudoPolicy::zeros);
  EXPECT_EQ(c.bench.strategies.size(), 2u);
  EXPECT_EQ(c.feedback.channel, feedback::CommitChannel::traditional);
  EXPECT_EQ(c.wun.mode, feedback::WorkMode::sync);
  EXPECT_EQ(c.wun.max_sweeps, 9u);
}

TEST(Config, KAboveCorpusRejected) {
  try {
    parse_scenario(nlohmann::json::parse(R"({"corpus": {"docs": 10}, "bench": {"k_values": [11]}})"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_k);
  }
}

TEST(Bench, GridShapeAndLinearRows) {
  auto sc = run_setup(small());
  auto res = bench_grid(sc, true);
  EXPECT_EQ(res.rows.size(), 5u * 4u);
  EXPECT_EQ(res.per_query.size(), 5u * 4u * 5u);
  for (const auto& r : res.rows) {
    if (r.strategy == query::Strategy::lt_ci) {
      EXPECT_EQ(r.retrieved, 60.0);
      EXPECT_EQ(r.precision, 1.0);
    }
    if (r.strategy == query::Strategy::pr_ci)
      EXPECT_EQ(r.retrieved, static_cast<double>(query::pr_window(60, r.k, 0.4)));
    EXPECT_EQ(r.elapsed_us, 0.0);
  }
  const auto csv = bench_csv(res.rows);
  EXPECT_EQ(count_lines(csv), 21u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "strategy,D,N_dict,k,beta,retrieved_index_count,precision,elapsed_microseconds,seed");
}

TEST(Bench, FullGridHasSeventyRows) {
  auto c = small();
  c.corpus.docs = 200;
  c.bench = BenchConfig{};
  c.bench.repetitions = 2;
  auto sc = run_setup(c);
  auto csv = bench_csv(bench_grid(sc).rows);
  EXPECT_EQ(count_lines(csv), 71u);
}

TEST(Bench, DeterministicCsv) {
  auto a = run_setup(small(2));
  auto b = run_setup(small(2));
  EXPECT_EQ(bench_csv(bench_grid(a).rows), bench_csv(bench_grid(b).rows));
}

TEST(Bench, CsvNumberFormats) {
  BenchRow r{query::Strategy::pr_ci, 400, 2000, 10, 0.4, 26.0, 0.5, 0.0, 7};
  EXPECT_EQ(bench_csv({r}).substr(bench_csv({r}).find('\n') + 1),
            "PR-CI,400,2000,10,0.4,26.0000,0.500000,0.000,7\n");
}
