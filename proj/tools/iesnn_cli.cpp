// iesnn command-line front end.
//
// Exit status: 0 success, 1 data error, 2 usage error. Failures print one
// line to stderr: "error: <code>: <message>".

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "iesnn/harness.hpp"

using namespace iesnn;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

/// Relative outputs land under $IESNN_OUT_DIR when it is set.
std::string output_path(const std::string& path) {
  fs::path p(path);
  if (const char* dir = std::getenv("IESNN_OUT_DIR"); dir && *dir && p.is_relative())
    p = fs::path(dir) / p;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p.string();
}

std::string out_or(const Globals& g, const std::string& fallback) {
  return output_path(g.out.empty() ? fallback : g.out);
}

harness::ScenarioConfig scenario(const Globals& g) {
  harness::ScenarioConfig cfg;
  if (!g.config.empty()) cfg = harness::load_scenario(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
  }
  return out;
}

aspe::SecretKey read_key(const std::string& path) { return aspe::load_key(io::read_file(path)); }
rank::RankedStore read_store(const std::string& path) {
  return rank::load_store(io::read_file(path));
}

/// Owner channel for stand-alone updates: the current plaintext is recovered
/// from the stored ciphertext with the key.
class KeyFileOwner : public feedback::OwnerEndpoint {
 public:
  KeyFileOwner(const aspe::SecretKey& sk, const rank::RankedStore& store, std::uint64_t seed)
      : sk_(sk), store_(store), seed_(seed) {}

  aspe::EncryptedIncrement scaling_increment(const std::string& doc_id, double factor) override {
    const Vector current = aspe::recover_index(store_.entry(doc_id).index, sk_);
    return aspe::encrypt_increment((factor - 1.0) * current, sk_, derive_seed(seed_, n_++));
  }

  aspe::EncryptedIndex reencrypt_scaled(const aspe::EncryptedIndex& downloaded,
                                        double factor) override {
    aspe::PlainVector v{factor * aspe::recover_index(downloaded, sk_), aspe::VectorRole::index,
                        downloaded.doc_id};
    return aspe::encrypt_index(v, sk_, derive_seed(seed_, n_++));
  }

 private:
  const aspe::SecretKey& sk_;
  const rank::RankedStore& store_;
  std::uint64_t seed_;
  std::uint64_t n_ = 0;
};

void print_counters(const Counters& c) {
  std::printf("bytes_up=%llu bytes_down=%llu bytes_down_index=%llu trapdoors=%llu queries=%llu\n",
              static_cast<unsigned long long>(c.bytes_up),
              static_cast<unsigned long long>(c.bytes_down),
              static_cast<unsigned long long>(c.bytes_down_index),
              static_cast<unsigned long long>(c.trapdoors_sent),
              static_cast<unsigned long long>(c.queries_run));
}

// ---------------------------------------------------------------------------
// Commands

struct KeygenArgs {
  std::size_t dim = 0;
  std::string dict;
};

void cmd_keygen(const Globals& g, const KeygenArgs& a) {
  const auto cfg = scenario(g);
  std::size_t dim = a.dim;
  if (!a.dict.empty()) {
    const auto v = corpus::load_dictionary(a.dict).V();
    require(dim == 0 || dim == v, Errc::dimension_mismatch,
            "--dim " + std::to_string(dim) + " disagrees with dictionary V " + std::to_string(v));
    dim = v;
  }
  require(dim >= 1, Errc::invalid_dimension, "keygen needs --dim or --dict");
  // An explicit seed keys the generator directly; otherwise the scenario stream.
  const auto seed = g.seed ? *g.seed : cfg.key_seed();
  auto sk = aspe::keygen(dim, seed);
  const auto path = out_or(g, "key.bin");
  io::write_file(path, aspe::save_key(sk));
  std::printf("key V=%zu seed=%llu cond1(M1)=%.1f cond1(M2)=%.1f -> %s\n", sk.dim(),
              static_cast<unsigned long long>(seed), sk.condition_m1(), sk.condition_m2(),
              path.c_str());
}

struct IngestArgs {
  std::string corpus_dir;
  std::string manifest;
  std::optional<std::size_t> dictionary_size;
  std::optional<std::size_t> pseudo_slots;
};

void cmd_ingest(const Globals& g, const IngestArgs& a) {
  auto cfg = scenario(g);
  if (a.dictionary_size) cfg.corpus.dictionary_size = *a.dictionary_size;
  if (a.pseudo_slots) cfg.corpus.pseudo_slots = *a.pseudo_slots;
  require(a.corpus_dir.empty() || a.manifest.empty(), Errc::invalid_argument,
          "give at most one of --corpus-dir and --manifest");
  std::vector<corpus::Document> docs;
  if (!a.corpus_dir.empty())
    docs = corpus::load_corpus_dir(a.corpus_dir);
  else if (!a.manifest.empty())
    docs = corpus::load_manifest(a.manifest);
  else
    docs = harness::scenario_documents(cfg);
  auto dict = corpus::build_dictionary(docs, cfg.corpus.dictionary_size, cfg.corpus.pseudo_slots);
  const fs::path dir = out_or(g, "corpus");
  fs::create_directories(dir);
  corpus::save_dictionary(dict, (dir / "dictionary.json").string());
  corpus::save_manifest(docs, (dir / "corpus.jsonl").string());
  std::printf("documents=%zu N=%zu U=%zu V=%zu -> %s\n", docs.size(), dict.N(), dict.U(), dict.V(),
              dir.string().c_str());
}

struct EncryptArgs {
  std::string key, dict, docs;
};

void cmd_encrypt(const Globals& g, const EncryptArgs& a) {
  const auto cfg = scenario(g);
  auto dict = corpus::load_dictionary(a.dict);
  auto docs = corpus::load_manifest(a.docs);
  harness::OwnerAgent owner(std::move(dict), read_key(a.key), std::move(docs), cfg.corpus.pseudo_mu,
                            cfg.corpus.pseudo_sigma, cfg.pad_seed(), cfg.encrypt_seed());
  auto upload = owner.build_indexes();
  const auto path = out_or(g, "indexes.bin");
  io::write_file(path, aspe::save_indexes(upload.indexes));
  std::printf("encrypted %zu indexes, V=%zu -> %s\n", upload.indexes.size(),
              owner.dictionary().V(), path.c_str());
}

struct TrainArgs {
  std::string key, indexes;
  std::optional<std::size_t> m;
  std::optional<double> sigma, sparsity;
  std::string distribution;
};

void cmd_train(const Globals& g, const TrainArgs& a) {
  const auto cfg = scenario(g);
  auto train = cfg.resolved_train();
  if (a.m) train.m = *a.m;
  if (a.sigma) train.sigma = *a.sigma;
  if (a.sparsity) train.sparsity = *a.sparsity;
  if (!a.distribution.empty()) train.distribution = rank::parse_distribution(a.distribution);
  train.validate();
  const auto sk = read_key(a.key);
  const auto indexes = aspe::load_indexes(io::read_file(a.indexes));
  auto store = rank::train_ranking(indexes, rank::random_trapdoor_sum(train, sk), train);
  const auto path = out_or(g, "store.bin");
  io::write_file(path, rank::save_store(store));
  std::printf("store D=%zu V=%zu m=%zu top=%s bottom=%s -> %s\n", store.size(), store.dim(),
              train.m, store.at(0).doc_id.c_str(), store.at(store.size() - 1).doc_id.c_str(),
              path.c_str());
}

struct QueryArgs {
  std::string store, key, dict, keywords, weights, strategy = "lt-ci";
  std::size_t k = 10;
};

void cmd_query(const Globals& g, const QueryArgs& a) {
  const auto cfg = scenario(g);
  const auto strategy = query::parse_strategy(a.strategy);
  require(!query::plaintext_strategy(strategy), Errc::misuse,
          "plaintext strategies need owner plaintext; use bench");
  auto dict = corpus::load_dictionary(a.dict);
  std::vector<double> weights;
  for (const auto& w : split_list(a.weights)) weights.push_back(std::stod(w));
  auto spec = corpus::make_query_spec(split_list(a.keywords), a.k, dict, weights);
  const auto sk = read_key(a.key);
  require(sk.dim() == dict.V(), Errc::dimension_mismatch, "key and dictionary disagree on V");
  const auto seed = cfg.stream(9);
  auto q = corpus::build_query(spec, dict, cfg.query.pseudo_policy, derive_seed(seed, 1));
  auto t = aspe::make_trapdoor(q, spec.k, sk, derive_seed(seed, 2));

  harness::CloudAgent cloud(cfg.query.beta, cfg.query.prune_margin, cfg.tree_seed());
  cloud.set_store(read_store(a.store));
  Counters counters;
  auto resp = cloud.handle(harness::wire::QueryRequest{t, strategy}, counters);
  const auto truth = query::query_lt(cloud.store(), query::ciphertext_scorer(t), spec.k);
  query::ResultList got{resp.hits};
  const double prec = query::precision(got, truth.result, truth.result.hits.size());

  std::string csv = "rank,doc_id,score\n";
  for (std::size_t i = 0; i < resp.hits.size(); ++i)
    csv += std::to_string(i + 1) + "," + resp.hits[i].doc_id + "," +
           harness::format_double("%.10g", resp.hits[i].score) + "\n";
  if (g.out.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    const auto path = output_path(g.out);
    io::write_file(path, csv);
    std::printf("%s k=%zu hits=%zu retrieved=%zu precision=%.4f -> %s\n",
                query::to_string(strategy), spec.k, resp.hits.size(), resp.retrieved_index_count,
                prec, path.c_str());
  }
}

struct UpdateArgs {
  std::string store, key, doc_id, channel = "cloud-raw";
  std::optional<double> match, factor;
};

void cmd_update(const Globals& g, const UpdateArgs& a) {
  const auto cfg = scenario(g);
  require(a.match.has_value() != a.factor.has_value(), Errc::invalid_argument,
          "give exactly one of --match and --factor");
  auto store = read_store(a.store);
  const auto channel = feedback::parse_commit_channel(a.channel);
  const double old = store.entry(a.doc_id).match;
  store.reposition(a.doc_id, a.match ? *a.match : old * *a.factor);
  std::optional<aspe::SecretKey> sk;
  std::optional<KeyFileOwner> owner;
  if (!a.key.empty()) {
    sk.emplace(read_key(a.key));
    require(sk->dim() == store.dim(), Errc::dimension_mismatch, "key and store disagree on V");
    owner.emplace(*sk, store, cfg.stream(10));
  }
  Counters counters;
  auto rep = feedback::wun_commit(store, {a.doc_id}, channel, counters, owner ? &*owner : nullptr);
  const auto path = out_or(g, "store.bin");
  io::write_file(path, rank::save_store(store));
  std::printf("%s %s match %.6g -> %.6g rank=%zu committed=%zu skipped=%zu -> %s\n",
              feedback::to_string(channel), a.doc_id.c_str(), old, store.entry(a.doc_id).match,
              store.rank_of(a.doc_id), rep.touched.size(), rep.skipped.size(), path.c_str());
  print_counters(counters);
}

struct LoopArgs {
  std::optional<std::size_t> rounds;
  std::string channel, mode, activation, strategy;
};

void cmd_feedback_loop(const Globals& g, const LoopArgs& a) {
  auto cfg = scenario(g);
  auto wl = cfg.feedback;
  auto wun = cfg.wun;
  if (a.rounds) wl.rounds = *a.rounds;
  if (!a.channel.empty()) wl.channel = feedback::parse_commit_channel(a.channel);
  if (!a.strategy.empty()) wl.strategy = query::parse_strategy(a.strategy);
  if (!a.mode.empty()) wun.mode = feedback::parse_work_mode(a.mode);
  if (!a.activation.empty()) wun.activation = feedback::parse_activation(a.activation);
  const fs::path dir = out_or(g, "feedback");
  fs::create_directories(dir);
  if (wl.feedback_log.empty()) wl.feedback_log = (dir / "feedback.jsonl").string();
  if (wl.audit_log.empty()) wl.audit_log = (dir / "audit.jsonl").string();

  auto sc = harness::run_setup(cfg);
  auto rep = harness::run_feedback_loop(sc, wl, wun);
  std::string tau = "round,kendall_tau\n";
  for (const auto& [round, t] : rep.tau_trajectory)
    tau += std::to_string(round) + "," + harness::format_double("%.6f", t) + "\n";
  io::write_file((dir / "tau.csv").string(), tau);
  io::write_file((dir / "store.bin").string(), rank::save_store(sc.cloud.store()));
  std::printf("rounds=%zu final_tau=%.4f commits=%zu skipped=%zu channel=%s -> %s\n", rep.rounds,
              rep.final_tau, rep.commits, rep.skipped_commits, feedback::to_string(wl.channel),
              dir.string().c_str());
  print_counters(rep.counters);
}

struct BenchArgs {
  std::optional<std::size_t> repetitions;
  std::string per_query;
  bool wall_time = false;
};

void cmd_bench(const Globals& g, const BenchArgs& a) {
  auto cfg = scenario(g);
  if (a.repetitions) cfg.bench.repetitions = *a.repetitions;
  if (a.wall_time) cfg.bench.record_wall_time = true;
  if (!a.per_query.empty()) cfg.bench.per_query_csv = a.per_query;
  cfg.validate();
  auto sc = harness::run_setup(cfg);
  auto res = harness::bench_grid(sc, !cfg.bench.per_query_csv.empty());
  const auto path = out_or(g, cfg.output);
  io::write_file(path, harness::bench_csv(res.rows));
  if (!cfg.bench.per_query_csv.empty())
    io::write_file(output_path(cfg.bench.per_query_csv), harness::per_query_csv(res.per_query));
  std::printf("bench D=%zu N=%zu rows=%zu repetitions=%zu -> %s\n", sc.cloud.store().size(),
              sc.owner.dictionary().N(), res.rows.size(), cfg.bench.repetitions, path.c_str());
}

struct ReportArgs {
  std::string store, bench;
  std::size_t top = 10;
};

void report_store(const std::string& path, std::size_t top) {
  const auto store = read_store(path);
  const auto& t = store.config();
  std::printf("store %s\n  D=%zu V=%zu version=%llu\n", path.c_str(), store.size(), store.dim(),
              static_cast<unsigned long long>(store.version()));
  std::printf("  training m=%zu sigma=%g distribution=%s sparsity=%g seed=%llu\n", t.m, t.sigma,
              rank::to_string(t.distribution), t.sparsity,
              static_cast<unsigned long long>(t.seed));
  std::printf("  pending commits=%zu\n", feedback::pending_commits(store).size());
  for (std::size_t r = 0; r < std::min(top, store.size()); ++r)
    std::printf("  %4zu  %-12s %.6g\n", r, store.at(r).doc_id.c_str(), store.at(r).match);
}

void report_bench(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::format_error, path + ": empty CSV");
  require(line.rfind("strategy,D,N_dict,k,", 0) == 0, Errc::format_error,
          path + ": not a bench CSV");
  struct Agg {
    double retrieved = 0, precision = 0;
    std::size_t rows = 0;
  };
  std::map<std::string, Agg> by;
  std::vector<std::string> order;
  while (std::getline(in, line)) {
    auto f = split_list(line);
    require(f.size() == 9, Errc::format_error, path + ": bad row '" + line + "'");
    if (!by.contains(f[0])) order.push_back(f[0]);
    auto& a = by[f[0]];
    a.retrieved += std::stod(f[5]);
    a.precision += std::stod(f[6]);
    ++a.rows;
  }
  std::printf("%-12s %6s %14s %14s\n", "strategy", "rows", "mean_retrieved", "mean_precision");
  for (const auto& s : order) {
    const auto& a = by[s];
    std::printf("%-12s %6zu %14.2f %14.4f\n", s.c_str(), a.rows, a.retrieved / a.rows,
                a.precision / a.rows);
  }
}

void cmd_report(const ReportArgs& a) {
  require(!a.store.empty() || !a.bench.empty(), Errc::invalid_argument,
          "report needs --store or --bench");
  if (!a.store.empty()) report_store(a.store, a.top);
  if (!a.bench.empty()) report_bench(a.bench);
}

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Encrypted ranked keyword search with learned index ordering"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "master seed")->envname("IESNN_SEED");
  app.add_option("--config", g.config, "scenario JSON file");
  app.add_option("--out", g.out, "output file or directory ($IESNN_OUT_DIR prefixes relative paths)");

  KeygenArgs kg;
  auto* keygen = app.add_subcommand("keygen", "generate a secret key");
  keygen->add_option("--dim", kg.dim, "vector dimension V");
  keygen->add_option("--dict", kg.dict, "take V from a dictionary file");

  IngestArgs ing;
  auto* ingest = app.add_subcommand("ingest", "build the dictionary; writes dictionary.json and corpus.jsonl");
  ingest->add_option("--corpus-dir", ing.corpus_dir, "directory of .txt documents");
  ingest->add_option("--manifest", ing.manifest, "JSONL manifest");
  ingest->add_option("--dictionary-size", ing.dictionary_size, "keywords kept (N)");
  ingest->add_option("--pseudo-slots", ing.pseudo_slots, "pseudo-keyword slots (U)");

  EncryptArgs enc;
  auto* encrypt = app.add_subcommand("encrypt", "pad and encrypt document indexes");
  encrypt->add_option("--key", enc.key)->required();
  encrypt->add_option("--dict", enc.dict)->required();
  encrypt->add_option("--docs", enc.docs, "corpus manifest")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train-rank", "learn the index ordering from random trapdoors");
  train->add_option("--key", tr.key)->required();
  train->add_option("--indexes", tr.indexes)->required();
  train->add_option("--m", tr.m, "training trapdoors");
  train->add_option("--sigma", tr.sigma);
  train->add_option("--sparsity", tr.sparsity);
  train->add_option("--distribution", tr.distribution, "nonneg-uniform or symmetric-uniform");

  QueryArgs qa;
  auto* querycmd = app.add_subcommand("query", "run one top-k query against a store");
  querycmd->add_option("--store", qa.store)->required();
  querycmd->add_option("--key", qa.key)->required();
  querycmd->add_option("--dict", qa.dict)->required();
  querycmd->add_option("--keywords", qa.keywords, "comma-separated")->required();
  querycmd->add_option("--weights", qa.weights, "comma-separated, one per keyword");
  querycmd->add_option("--k", qa.k);
  querycmd->add_option("--strategy", qa.strategy, "lt-ci, pr-ci or po-tree-ci");

  UpdateArgs up;
  auto* update = app.add_subcommand("update", "set one learned score and commit it to the ciphertext");
  update->add_option("--store", up.store)->required();
  update->add_option("--doc-id", up.doc_id)->required();
  update->add_option("--match", up.match, "new learned score");
  update->add_option("--factor", up.factor, "multiply the learned score");
  update->add_option("--channel", up.channel, "cloud-raw, owner-exact or traditional");
  update->add_option("--key", up.key, "owner key for owner channels");

  LoopArgs lp;
  auto* loop = app.add_subcommand("feedback-loop", "query, observe, update and commit for N rounds");
  loop->add_option("--rounds", lp.rounds);
  loop->add_option("--channel", lp.channel);
  loop->add_option("--mode", lp.mode, "async or sync");
  loop->add_option("--activation", lp.activation, "sgn or satlins");
  loop->add_option("--strategy", lp.strategy);

  BenchArgs bn;
  auto* bench = app.add_subcommand("bench", "strategy x k grid; writes the CSV");
  bench->add_option("--repetitions", bn.repetitions);
  bench->add_option("--per-query", bn.per_query, "also write per-query rows");
  bench->add_flag("--record-wall-time", bn.wall_time, "fill elapsed_microseconds");

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "summarize a store or a bench CSV");
  report->add_option("--store", rp.store);
  report->add_option("--bench", rp.bench);
  report->add_option("--top", rp.top);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  }
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (*keygen) cmd_keygen(g, kg);
    if (*ingest) cmd_ingest(g, ing);
    if (*encrypt) cmd_encrypt(g, enc);
    if (*train) cmd_train(g, tr);
    if (*querycmd) cmd_query(g, qa);
    if (*update) cmd_update(g, up);
    if (*loop) cmd_feedback_loop(g, lp);
    if (*bench) cmd_bench(g, bn);
    if (*report) cmd_report(rp);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", to_string(e.code()), one_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
