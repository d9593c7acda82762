// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--cli PATH] [--work DIR] [--expect-fail 4,...]
//
// Exit status is 0 when the set of failing criteria equals --expect-fail
// (empty by default). FAIL lines are printed either way.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "iesnn/harness.hpp"

using namespace iesnn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) { return harness::format_double(f, v); }

aspe::PlainVector random_plain(std::size_t v, Rng& r, aspe::VectorRole role) {
  aspe::PlainVector p{Vector(static_cast<Eigen::Index>(v)), role, std::nullopt};
  for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values[i] = r.uniform(-1, 1);
  return p;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::size_t v : {8u, 64u, 512u, 2100u}) {
    auto sk = aspe::keygen(v, 1000 + v);
    Rng r(v);
    std::vector<aspe::PlainVector> is, qs;
    std::vector<std::uint64_t> is_seeds, qs_seeds;
    for (std::size_t n = 0; n < 1000; ++n) {
      is.push_back(random_plain(v, r, aspe::VectorRole::index));
      qs.push_back(random_plain(v, r, aspe::VectorRole::query));
      is_seeds.push_back(2 * n);
      qs_seeds.push_back(2 * n + 1);
    }
    auto enc = aspe::encrypt_indexes(is, sk, is_seeds);
    auto trap = aspe::make_trapdoors(qs, 1, sk, qs_seeds);
    for (std::size_t n = 0; n < 1000; ++n) {
      const double plain = is[n].values.dot(qs[n].values);
      const double err = std::abs(aspe::score(enc[n], trap[n]) - plain) / (1.0 + std::abs(plain));
      worst = std::max(worst, err);
    }
  }
  const double secs = seconds_since(t0);
  o.check(worst <= 1e-6, "max relative error " + fmt("%.3e", worst));
  o.check(secs < 10.0, "runtime " + fmt("%.2f", secs) + " s");
  o.detail = "4000 pairs over V in {8,64,512,2100}, max rel err " + fmt("%.2e", worst) + ", " +
             fmt("%.2f", secs) + " s" + (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion2() {
  Outcome o;
  Rng r(2);
  std::size_t violations = 0;
  double worst_score_gap = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto v = static_cast<std::size_t>(r.between(2, 32));
    auto sk = aspe::keygen(v, 5000 + trial);
    auto idx = random_plain(v, r, aspe::VectorRole::index);
    auto q = random_plain(v, r, aspe::VectorRole::query);
    auto is = aspe::split_index(idx, sk, 3 * trial);
    auto qs = aspe::split_query(q, sk, 3 * trial + 1);
    for (std::size_t t = 0; t < v; ++t) {
      const auto i = static_cast<Eigen::Index>(t);
      const double tol = 1e-12 * (1.0 + std::abs(idx.values[i]) + std::abs(q.values[i]));
      if (sk.split_indicator()[t] == 0) {
        violations += is.first[i] != idx.values[i] || is.second[i] != idx.values[i];
        violations += std::abs(qs.first[i] + qs.second[i] - q.values[i]) > tol;
      } else {
        violations += std::abs(is.first[i] + is.second[i] - idx.values[i]) > tol;
        violations += qs.first[i] != q.values[i] || qs.second[i] != q.values[i];
      }
    }
    auto a = aspe::encrypt_index(idx, sk, 10 * trial + 7);
    auto b = aspe::encrypt_index(idx, sk, 10 * trial + 8);
    const bool has_random_slot =
        std::find(sk.split_indicator().begin(), sk.split_indicator().end(), 1) !=
        sk.split_indicator().end();
    if (has_random_slot && a.c1 == b.c1 && a.c2 == b.c2) ++violations;
    auto t = aspe::make_trapdoor(q, 1, sk, 10 * trial + 9);
    worst_score_gap = std::max(worst_score_gap, std::abs(aspe::score(a, t) - aspe::score(b, t)));
  }
  o.check(violations == 0, std::to_string(violations) + " split/ciphertext violations");
  o.check(worst_score_gap <= 1e-9, "score gap " + fmt("%.3e", worst_score_gap));
  o.detail = "1000 trials, " + std::to_string(violations) + " violations, max re-encryption gap " +
             fmt("%.2e", worst_score_gap) + (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion3() {
  Outcome o;
  Rng r(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = static_cast<std::size_t>(r.between(2, 40));
    const auto added = static_cast<std::size_t>(r.between(1, 20));
    auto sk = aspe::keygen(v, 7000 + trial);
    auto ext = aspe::extended_keygen(sk, added, 8000 + trial);
    auto idx = random_plain(v, r, aspe::VectorRole::index);
    auto q = random_plain(v, r, aspe::VectorRole::query);
    const double before =
        aspe::score(aspe::encrypt_index(idx, sk, 1), aspe::make_trapdoor(q, 1, sk, 2));
    aspe::PlainVector idx2{Vector::Zero(static_cast<Eigen::Index>(v + added)), idx.role, {}};
    aspe::PlainVector q2{Vector::Zero(static_cast<Eigen::Index>(v + added)), q.role, {}};
    idx2.values.head(static_cast<Eigen::Index>(v)) = idx.values;
    q2.values.head(static_cast<Eigen::Index>(v)) = q.values;
    const double after =
        aspe::score(aspe::encrypt_index(idx2, ext, 3), aspe::make_trapdoor(q2, 1, ext, 4));
    worst = std::max(worst, std::abs(after - before));
  }
  o.check(worst <= 1e-9, "drift " + fmt("%.3e", worst));
  o.detail = "100 trials, max drift " + fmt("%.2e", worst) + (o.pass ? "" : " :: " + o.detail);
  return o;
}

struct GridRun {
  std::vector<harness::BenchRow> rows;
  std::string csv;
  double seconds = 0.0;
  std::size_t d = 0;
  std::size_t n_dict = 0;
  std::optional<harness::Scenario> scenario;  // state after the bench
};

GridRun run_grid(const harness::ScenarioConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  auto sc = harness::run_setup(cfg);
  auto res = harness::bench_grid(sc);
  GridRun run{res.rows, harness::bench_csv(res.rows), seconds_since(t0), sc.cloud.store().size(),
              sc.owner.dictionary().N(), std::nullopt};
  run.scenario.emplace(std::move(sc));
  return run;
}

const harness::BenchRow& row(const GridRun& run, query::Strategy s, std::size_t k) {
  for (const auto& r : run.rows)
    if (r.strategy == s && r.k == k) return r;
  fail(Errc::invalid_argument, "missing bench row");
}

Outcome criterion4(const GridRun& run, harness::Scenario& sc) {
  using query::Strategy;
  Outcome o;
  const auto& ks = sc.config.bench.k_values;
  std::string a, b, c, d;

  bool ok_a = run.d == 400 && run.n_dict == 2000;
  for (auto k : ks) ok_a = ok_a && row(run, Strategy::lt_ci, k).retrieved == 400.0;

  bool ok_b = true;
  for (auto k : ks) {
    if (k > 25) continue;
    const double pr = row(run, Strategy::pr_ci, k).retrieved;
    const double po = row(run, Strategy::po_tree_ci, k).retrieved;
    const double lt = row(run, Strategy::lt_ci, k).retrieved;
    if (!(pr < po && po < lt)) {
      ok_b = false;
      b += " k=" + std::to_string(k) + "(" + fmt("%.1f", pr) + "," + fmt("%.1f", po) + ")";
    }
  }

  // (c) same queries, hit ids compared per query.
  bool ok_c = true;
  {
    const auto& dict = sc.owner.dictionary();
    const auto queries = harness::bench_queries(sc.config, dict);
    for (std::size_t qi = 0; qi < queries.size() && ok_c; ++qi) {
      const auto spec = corpus::make_query_spec(queries[qi].keywords, 1, dict);
      auto q = corpus::build_query(spec, dict, sc.config.query.pseudo_policy,
                                   derive_seed(queries[qi].seed, 1));
      auto t = sc.owner.trapdoor(q, 1, derive_seed(queries[qi].seed, 2));
      const auto ci = harness::ciphertext_scores(sc, t);
      const auto pi = harness::plaintext_scores(sc, q.values);
      for (auto k : ks) {
        auto rc = sc.cloud.run(Strategy::po_tree_ci, harness::cached_scorer(ci), k).result;
        auto rp = sc.cloud.run(Strategy::po_tree_pi, harness::cached_scorer(pi), k).result;
        std::set<std::string> sc_ids, sp_ids;
        for (const auto& h : rc.hits) sc_ids.insert(h.doc_id);
        for (const auto& h : rp.hits) sp_ids.insert(h.doc_id);
        if (sc_ids != sp_ids) {
          ok_c = false;
          c = " query " + std::to_string(qi) + " k=" + std::to_string(k);
          break;
        }
      }
    }
  }

  bool ok_d = true;
  for (auto k : ks) {
    const double po = row(run, Strategy::po_tree_pi, k).precision;
    const double ru = row(run, Strategy::ru_tree_pi, k).precision;
    if (po < ru) {
      ok_d = false;
      d += " k=" + std::to_string(k) + "(" + fmt("%.3f", po) + "<" + fmt("%.3f", ru) + ")";
    }
  }

  o.check(ok_a, "(a) LT-CI not 400 everywhere");
  o.check(ok_b, "(b) PR<PO<LT broken at" + b);
  o.check(ok_c, "(c) PO-Tree CI/PI hit sets differ at" + c);
  o.check(ok_d, "(d) PO-Tree-PI precision below RU-Tree-PI at" + d);
  o.check(run.seconds < 60.0, "runtime " + fmt("%.1f", run.seconds) + " s");
  auto tag = [](bool x) { return x ? "pass" : "fail"; };
  std::string summary = std::string("a=") + tag(ok_a) + " b=" + tag(ok_b) + " c=" + tag(ok_c) +
                        " d=" + tag(ok_d) + ", " + fmt("%.1f", run.seconds) + " s";
  o.detail = summary + (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion5(const GridRun& run, harness::Scenario& sc) {
  Outcome o;
  std::size_t mismatches = 0;
  for (const auto& r : run.rows)
    if (r.strategy == query::Strategy::pr_ci &&
        r.retrieved != static_cast<double>(query::pr_window(r.d, r.k, r.beta)))
      ++mismatches;
  const auto d = sc.cloud.store().size();
  for (std::size_t k = 1; k <= d; ++k) {
    auto out = query::query_pr(sc.cloud.store(), [](const rank::StoreEntry&) { return 0.0; }, k,
                               sc.config.query.beta);
    mismatches += out.stats.retrieved_index_count != query::pr_window(d, k, sc.config.query.beta);
  }
  const auto& dict = sc.owner.dictionary();
  double worst = 1.0;
  for (const auto& bq : harness::bench_queries(sc.config, dict)) {
    auto spec = corpus::make_query_spec(bq.keywords, d, dict);
    auto out = harness::run_query_round(sc, spec, query::Strategy::pr_ci, bq.seed);
    worst = std::min(worst, out.stats.precision);
  }
  o.check(mismatches == 0, std::to_string(mismatches) + " window mismatches");
  o.check(worst == 1.0, "precision at k=D " + fmt("%.4f", worst));
  o.detail = "W exact on bench grid and k=1..D, min precision at k=D " + fmt("%.3f", worst) +
             (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion6(const harness::Scenario& base) {
  Outcome o;
  auto raw = base;
  auto raw_rep = harness::run_feedback_loop(raw, raw.config.feedback, raw.config.wun);

  auto trad = base;
  auto wl = trad.config.feedback;
  wl.channel = feedback::CommitChannel::traditional;
  auto trad_rep = harness::run_feedback_loop(trad, wl, trad.config.wun);
  const auto ct_size = feedback::wire_size(base.cloud.store().at(0).index);
  const auto need = static_cast<std::uint64_t>(wl.rounds) * ct_size;

  // Owner-exact increments against the scenario key.
  const auto& sk = base.owner.key_for_persistence();
  Rng r(6);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto& e = base.cloud.store().at(static_cast<std::size_t>(trial)).index;
    Vector delta(static_cast<Eigen::Index>(sk.dim()));
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = r.uniform(-0.1, 0.1);
    auto q = random_plain(sk.dim(), r, aspe::VectorRole::query);
    auto t = aspe::make_trapdoor(q, 1, sk, 900 + trial);
    auto inc = aspe::encrypt_increment(delta, sk, 950 + trial);
    auto moved = aspe::apply_increment(e, inc, aspe::IncrementMode::owner_exact);
    worst = std::max(worst,
                     std::abs(aspe::score(moved, t) - aspe::score(e, t) - delta.dot(q.values)));
  }

  o.check(raw_rep.rounds == 500 && raw_rep.counters.bytes_down_index == 0,
          "cloud-raw bytes_down_index " + std::to_string(raw_rep.counters.bytes_down_index));
  o.check(trad_rep.counters.bytes_down_index >= need,
          "traditional bytes_down_index " + std::to_string(trad_rep.counters.bytes_down_index) +
              " < " + std::to_string(need));
  o.check(worst <= 1e-6, "owner-exact shift error " + fmt("%.3e", worst));
  o.detail = "cloud-raw down_index=" + std::to_string(raw_rep.counters.bytes_down_index) +
             ", traditional down_index=" + std::to_string(trad_rep.counters.bytes_down_index) +
             " (need >= " + std::to_string(need) + "), owner-exact err " + fmt("%.2e", worst) +
             (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion7(const harness::Scenario& base) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  auto async_sc = base;
  auto wl = async_sc.config.feedback;
  wl.zipf_s = 1.2;
  wl.rounds = 500;
  wl.eta = 0.1;
  feedback::WunConfig wun;
  wun.mode = feedback::WorkMode::async;
  wun.activation = feedback::Activation::satlins;
  auto rep = harness::run_feedback_loop(async_sc, wl, wun);

  auto sync_sc = base;
  wun.mode = feedback::WorkMode::sync;
  wun.max_sweeps = 100;
  wun.stability_tol = 1e-4;
  auto sync_rep = harness::run_feedback_loop(sync_sc, wl, wun);
  const double secs = seconds_since(t0);

  o.check(rep.final_tau >= 0.8, "async tau " + fmt("%.4f", rep.final_tau));
  o.check(sync_rep.sync_unstabilized == 0,
          std::to_string(sync_rep.sync_unstabilized) + " sync rounds did not stabilize");
  o.check(secs < 30.0, "runtime " + fmt("%.1f", secs) + " s");
  o.detail = "async tau=" + fmt("%.4f", rep.final_tau) + ", sync max sweeps " +
             std::to_string(sync_rep.max_sync_sweeps) + ", sync tau=" +
             fmt("%.4f", sync_rep.final_tau) + ", " + fmt("%.1f", secs) + " s" +
             (o.pass ? "" : " :: " + o.detail);
  return o;
}

Outcome criterion8() {
  Outcome o;
  feedback::AdversaryState half{{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}};
  const double v = feedback::adversarial_value(half);
  o.check(std::abs(v + 2.0 * std::log(2.0)) <= 1e-9, "V(0.5) = " + fmt("%.12f", v));
  Rng r(8);
  std::size_t beaten = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pi(3), pq(3);
    double si = 0, sq = 0;
    for (int b = 0; b < 3; ++b) {
      si += pi[b] = r.uniform(0.01, 1.0);
      sq += pq[b] = r.uniform(0.01, 1.0);
    }
    for (int b = 0; b < 3; ++b) {
      pi[b] /= si;
      pq[b] /= sq;
    }
    const auto star = feedback::optimal_discriminator(pi, pq);
    const double best = feedback::adversarial_value({star, pi, pq});
    // Full 3-D grid over A in (0, 1)^3, step 0.02.
    for (double a0 = 0.01; a0 < 1.0; a0 += 0.02)
      for (double a1 = 0.01; a1 < 1.0; a1 += 0.02)
        for (double a2 = 0.01; a2 < 1.0; a2 += 0.02)
          beaten += feedback::adversarial_value({{a0, a1, a2}, pi, pq}) > best + 1e-12;
  }
  o.check(beaten == 0, std::to_string(beaten) + " grid points beat A*");
  o.detail = "V(0.5) + 2 ln 2 = " + fmt("%.1e", v + 2.0 * std::log(2.0)) +
             ", A* unbeaten on 20 x 50^3 grid" + (o.pass ? "" : " :: " + o.detail);
  return o;
}

int run_command(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return rc;
}

Outcome criterion9(const harness::ScenarioConfig& cfg, const std::string& first_csv,
                   const std::string& cli, const fs::path& work) {
  Outcome o;
  auto again = run_grid(cfg);
  o.check(again.csv == first_csv, "in-process bench CSVs differ");
  std::string how = "in-process bench x2";
  if (!cli.empty()) {
    fs::create_directories(work);
    const auto a = (work / "bench_a.csv").string(), b = (work / "bench_b.csv").string();
    const std::string base = "\"" + cli + "\" bench --seed 0 --out ";
    const int ra = run_command(base + "\"" + a + "\"");
    const int rb = run_command(base + "\"" + b + "\"");
    o.check(ra == 0 && rb == 0, "cli bench exit status");
    if (ra == 0 && rb == 0) {
      const auto ca = io::read_file(a), cb = io::read_file(b);
      o.check(ca == cb, "cli bench CSVs differ");
      o.check(ca == first_csv, "cli CSV differs from in-process CSV");
    }
    how += " + cli bench x2";
  }
  o.detail = how + (o.pass ? ", byte-identical" : " :: " + o.detail);
  return o;
}

std::set<int> parse_ids(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.insert(std::stoi(tok));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli, work = (fs::temp_directory_path() / "iesnn_acceptance").string(), expect;
  app.add_option("--cli", cli, "iesnn executable for the CLI determinism check");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--expect-fail", expect, "comma-separated criteria known to fail");
  CLI11_PARSE(app, argc, argv);

  std::set<int> failed;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) failed.insert(id);
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };

  const auto t0 = std::chrono::steady_clock::now();
  report(1, "score correctness", criterion1);
  report(2, "split and randomization invariants", criterion2);
  report(3, "extended key compatibility", criterion3);

  harness::ScenarioConfig cfg;  // defaults: D=400, N=2000, 100 repetitions, full k grid
  GridRun grid;
  try {
    grid = run_grid(cfg);
  } catch (const std::exception& e) {
    std::printf("setup failed: %s\n", e.what());
  }
  harness::Scenario* sc = grid.scenario ? &*grid.scenario : nullptr;
  report(4, "query efficiency ordering", [&] {
    require(sc != nullptr, Errc::misuse, "no scenario");
    return criterion4(grid, *sc);
  });
  report(5, "prefix-scan window law", [&] {
    require(sc != nullptr, Errc::misuse, "no scenario");
    return criterion5(grid, *sc);
  });
  // Criteria 6 and 7 start from the freshly trained store.
  std::optional<harness::Scenario> fresh;
  try {
    fresh.emplace(harness::run_setup(cfg));
  } catch (const std::exception&) {
  }
  report(6, "update-in-cloud traffic", [&] {
    require(fresh.has_value(), Errc::misuse, "no scenario");
    return criterion6(*fresh);
  });
  report(7, "feedback convergence", [&] {
    require(fresh.has_value(), Errc::misuse, "no scenario");
    return criterion7(*fresh);
  });
  report(8, "adversarial value diagnostic", criterion8);
  report(9, "bench determinism", [&] { return criterion9(cfg, grid.csv, cli, work); });

  const auto expected = parse_ids(expect);
  std::string list;
  for (int id : failed) list += (list.empty() ? "" : ",") + std::to_string(id);
  std::printf("%zu/9 criteria pass; failing: %s; total %.1f s\n", 9 - failed.size(),
              list.empty() ? "none" : list.c_str(), seconds_since(t0));
  if (failed != expected) {
    if (!expected.empty()) std::printf("failing set differs from --expect-fail %s\n", expect.c_str());
    return 1;
  }
  return 0;
}
