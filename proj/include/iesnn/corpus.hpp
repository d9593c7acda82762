#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "iesnn/aspe.hpp"
#include "iesnn/binary_io.hpp"
#include "iesnn/error.hpp"
#include "iesnn/random.hpp"

namespace iesnn::corpus {

struct Document {
  std::string doc_id;
  std::vector<std::string> tokens;
};

/// Ordered keyword list plus the document frequencies needed for IDF.
/// Slots [0, N) are real keywords, [N, N+U) are pseudo-keywords.
class Dictionary {
 public:
  Dictionary() = default;

  Dictionary(std::vector<std::string> keywords, std::vector<std::size_t> df,
             std::size_t num_docs, std::size_t pseudo)
      : keywords_(std::move(keywords)), df_(std::move(df)), num_docs_(num_docs), pseudo_(pseudo) {
    require(keywords_.size() == df_.size(), Errc::invalid_argument,
            "dictionary: keyword and df lists differ in length");
    for (std::size_t i = 0; i < keywords_.size(); ++i) {
      require(df_[i] >= 1, Errc::invalid_argument, "dictionary: df must be >= 1");
      const bool inserted = pos_.emplace(keywords_[i], i).second;
      require(inserted, Errc::invalid_argument, "dictionary: duplicate keyword " + keywords_[i]);
    }
  }

  std::size_t N() const noexcept { return keywords_.size(); }
  std::size_t U() const noexcept { return pseudo_; }
  std::size_t V() const noexcept { return keywords_.size() + pseudo_; }
  std::size_t num_docs() const noexcept { return num_docs_; }
  const std::vector<std::string>& keywords() const noexcept { return keywords_; }
  std::size_t df(std::size_t slot) const { return df_.at(slot); }

  std::optional<std::size_t> slot(const std::string& keyword) const {
    auto it = pos_.find(keyword);
    if (it == pos_.end()) return std::nullopt;
    return it->second;
  }

  double idf(std::size_t slot) const {
    return std::log(1.0 + static_cast<double>(num_docs_) / static_cast<double>(df_.at(slot)));
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "iesnn-dictionary";
    j["version"] = 1;
    j["N"] = N();
    j["U"] = U();
    j["num_docs"] = num_docs_;
    j["keywords"] = keywords_;
    j["df"] = df_;
    return j;
  }

  static Dictionary from_json(const nlohmann::json& j) {
    try {
      require(j.at("format") == "iesnn-dictionary", Errc::format_error, "not a dictionary file");
      Dictionary d(j.at("keywords").get<std::vector<std::string>>(),
                   j.at("df").get<std::vector<std::size_t>>(), j.at("num_docs").get<std::size_t>(),
                   j.at("U").get<std::size_t>());
      require(d.N() == j.at("N").get<std::size_t>(), Errc::format_error,
              "dictionary N does not match keyword count");
      return d;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::format_error, std::string("dictionary: ") + e.what());
    }
  }

 private:
  std::vector<std::string> keywords_;
  std::vector<std::size_t> df_;
  std::unordered_map<std::string, std::size_t> pos_;
  std::size_t num_docs_ = 0;
  std::size_t pseudo_ = 0;
};

/// Keeps the N tokens with the highest document frequency; ties go to the
/// lexicographically smaller token. Fewer than N distinct tokens keeps all.
inline Dictionary build_dictionary(const std::vector<Document>& docs, std::size_t n,
                                   std::size_t pseudo) {
  require(!docs.empty(), Errc::empty_corpus, "build_dictionary: corpus is empty");
  require(n >= 1, Errc::invalid_argument, "build_dictionary: N must be >= 1");
  std::map<std::string, std::size_t> df;
  for (const auto& doc : docs) {
    std::set<std::string> seen(doc.tokens.begin(), doc.tokens.end());
    for (const auto& t : seen) ++df[t];
  }
  require(!df.empty(), Errc::empty_corpus, "build_dictionary: corpus has no tokens");
  std::vector<std::pair<std::string, std::size_t>> ranked(df.begin(), df.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  ranked.resize(std::min(n, ranked.size()));
  std::vector<std::string> keywords;
  std::vector<std::size_t> counts;
  for (auto& [kw, c] : ranked) {
    keywords.push_back(kw);
    counts.push_back(c);
  }
  return Dictionary(std::move(keywords), std::move(counts), docs.size(), pseudo);
}

/// tf * idf with tf = count / |tokens| and idf = ln(1 + D / df), L2-normalized
/// over the real slots. Pseudo slots are zero.
inline aspe::PlainVector tfidf_index(const Document& doc, const Dictionary& dict) {
  aspe::PlainVector out{Vector::Zero(static_cast<Eigen::Index>(dict.V())),
                        aspe::VectorRole::index, doc.doc_id};
  if (doc.tokens.empty()) return out;
  std::unordered_map<std::size_t, std::size_t> counts;
  for (const auto& t : doc.tokens)
    if (auto s = dict.slot(t)) ++counts[*s];
  const double len = static_cast<double>(doc.tokens.size());
  for (auto [slot, c] : counts)
    out.values[static_cast<Eigen::Index>(slot)] = (static_cast<double>(c) / len) * dict.idf(slot);
  const double norm = out.values.head(static_cast<Eigen::Index>(dict.N())).norm();
  if (norm > 0.0) out.values.head(static_cast<Eigen::Index>(dict.N())) /= norm;
  return out;
}

struct Padded {
  aspe::PlainVector vector;
  bool no_pseudo_slots = false;  // U = 0: nothing was padded
};

/// Fills the pseudo slots with Normal(mu, sigma^2) draws.
inline Padded pad_pseudo(aspe::PlainVector v, const Dictionary& dict, double mu, double sigma,
                         std::uint64_t seed) {
  require(v.dim() == dict.V(), Errc::dimension_mismatch, "pad_pseudo: vector length != V");
  require(sigma >= 0.0, Errc::invalid_argument, "pad_pseudo: sigma must be >= 0");
  if (dict.U() == 0) return {std::move(v), true};
  Rng rng(seed);
  for (std::size_t t = dict.N(); t < dict.V(); ++t)
    v.values[static_cast<Eigen::Index>(t)] = sigma == 0.0 ? mu : rng.normal(mu, sigma);
  return {std::move(v), false};
}

struct QuerySpec {
  std::vector<std::string> keywords;
  std::vector<double> weights;  // empty means 1.0 for every keyword
  std::size_t k = 1;
};

/// Validated constructor: rejects empty keyword lists and unknown keywords.
inline QuerySpec make_query_spec(std::vector<std::string> keywords, std::size_t k,
                                 const Dictionary& dict, std::vector<double> weights = {}) {
  require(!keywords.empty(), Errc::invalid_argument, "query needs at least one keyword");
  require(weights.empty() || weights.size() == keywords.size(), Errc::invalid_argument,
          "query weights must match keywords");
  require(k >= 1, Errc::invalid_k, "query k must be >= 1");
  for (const auto& kw : keywords)
    require(dict.slot(kw).has_value(), Errc::unknown_keyword, "unknown keyword '" + kw + "'");
  return QuerySpec{std::move(keywords), std::move(weights), k};
}

enum class PseudoPolicy { zeros, random_subset_one };

inline const char* to_string(PseudoPolicy p) {
  return p == PseudoPolicy::zeros ? "zeros" : "random-subset-one";
}

inline PseudoPolicy parse_pseudo_policy(const std::string& s) {
  if (s == "zeros") return PseudoPolicy::zeros;
  if (s == "random-subset-one") return PseudoPolicy::random_subset_one;
  fail(Errc::invalid_argument, "unknown pseudo policy '" + s + "'");
}

/// Queried slots get their weight (default 1). Under random-subset-one a
/// seeded subset of ceil(U/2) pseudo slots is set to 1.
inline aspe::PlainVector build_query(const QuerySpec& spec, const Dictionary& dict,
                                     PseudoPolicy policy, std::uint64_t seed) {
  aspe::PlainVector q{Vector::Zero(static_cast<Eigen::Index>(dict.V())), aspe::VectorRole::query,
                      std::nullopt};
  for (std::size_t i = 0; i < spec.keywords.size(); ++i) {
    const auto slot = dict.slot(spec.keywords[i]);
    require(slot.has_value(), Errc::unknown_keyword,
            "unknown keyword '" + spec.keywords[i] + "'");
    q.values[static_cast<Eigen::Index>(*slot)] = spec.weights.empty() ? 1.0 : spec.weights[i];
  }
  if (policy == PseudoPolicy::random_subset_one && dict.U() > 0) {
    Rng rng(seed);
    for (auto s : rng.sample_without_replacement(dict.U(), (dict.U() + 1) / 2))
      q.values[static_cast<Eigen::Index>(dict.N() + s)] = 1.0;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Corpus sources

inline std::string padded_number(std::size_t value, std::size_t width) {
  std::string s = std::to_string(value);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

inline std::size_t digits(std::size_t n) { return std::to_string(n).size(); }

/// D documents with lengths uniform in [50, 500]; tokens "w<rank>" drawn from
/// Zipf(zipf_s) over the vocabulary, rank 1 most frequent.
inline std::vector<Document> synth_corpus(std::size_t num_docs, std::size_t vocab, double zipf_s,
                                          std::uint64_t seed) {
  require(num_docs >= 1 && vocab >= 1, Errc::invalid_argument,
          "synth_corpus: D and vocab must be >= 1");
  Rng rng(seed);
  ZipfSampler zipf(vocab, zipf_s);
  const auto token_width = std::max<std::size_t>(4, digits(vocab));
  const auto doc_width = std::max<std::size_t>(4, digits(num_docs - 1));
  std::vector<std::string> names(vocab);
  for (std::size_t r = 0; r < vocab; ++r) names[r] = "w" + padded_number(r + 1, token_width);
  std::vector<Document> docs(num_docs);
  for (std::size_t d = 0; d < num_docs; ++d) {
    docs[d].doc_id = "doc" + padded_number(d, doc_width);
    const auto len = static_cast<std::size_t>(rng.between(50, 500));
    docs[d].tokens.reserve(len);
    for (std::size_t i = 0; i < len; ++i) docs[d].tokens.push_back(names[zipf(rng)]);
  }
  return docs;
}

inline bool is_stopword(const std::string& w) {
  static const std::set<std::string> kStop = {"a",  "an", "and", "are", "as",  "at", "be",
                                              "by", "for", "in", "is",  "it",  "of", "on",
                                              "or", "the", "to", "was", "with"};
  return kStop.contains(w);
}

/// Lowercased alphanumeric runs, minus a small stop-word list.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && !is_stopword(cur)) out.push_back(cur);
    cur.clear();
  };
  for (unsigned char ch : text) {
    if (std::isalnum(ch))
      cur.push_back(static_cast<char>(std::tolower(ch)));
    else
      flush();
  }
  flush();
  return out;
}

/// One document per regular file; doc_id is the file name. Sorted by name.
inline std::vector<Document> load_corpus_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), Errc::io_error, "not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const auto& f : files)
    docs.push_back({f.filename().string(), tokenize(io::read_file(f.string()))});
  require(!docs.empty(), Errc::empty_corpus, "no documents in " + dir);
  return docs;
}

/// Line-delimited JSON: {"doc_id": ..., "text": ...} or {"doc_id": ..., "tokens": [...]}.
inline std::vector<Document> load_manifest(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<Document> docs;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Document d;
      d.doc_id = j.at("doc_id").get<std::string>();
      if (j.contains("tokens"))
        d.tokens = j["tokens"].get<std::vector<std::string>>();
      else
        d.tokens = tokenize(j.at("text").get<std::string>());
      require(ids.insert(d.doc_id).second, Errc::format_error,
              "duplicate doc_id '" + d.doc_id + "'");
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::format_error, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  require(!docs.empty(), Errc::empty_corpus, "manifest " + path + " has no documents");
  return docs;
}

inline void save_manifest(const std::vector<Document>& docs, const std::string& path) {
  std::string out;
  for (const auto& d : docs) {
    nlohmann::json j;
    j["doc_id"] = d.doc_id;
    j["tokens"] = d.tokens;
    out += j.dump();
    out += '\n';
  }
  io::write_file(path, out);
}

inline void save_dictionary(const Dictionary& dict, const std::string& path) {
  io::write_file(path, dict.to_json().dump(1) + "\n");
}

inline Dictionary load_dictionary(const std::string& path) {
  try {
    return Dictionary::from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format_error, path + ": " + e.what());
  }
}

}  // namespace iesnn::corpus
