#pragma once

#include <stdexcept>
#include <string>

namespace iesnn {

enum class Errc {
  invalid_dimension,
  generation_failure,
  dimension_mismatch,
  invalid_k,
  misuse,
  empty_corpus,
  unknown_keyword,
  empty_store,
  unknown_document,
  stale_feedback,
  domain_error,
  channel_error,
  invalid_argument,
  io_error,
  format_error,
};

inline const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_dimension: return "invalid-dimension";
    case Errc::generation_failure: return "generation-failure";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::invalid_k: return "invalid-k";
    case Errc::misuse: return "misuse";
    case Errc::empty_corpus: return "empty-corpus";
    case Errc::unknown_keyword: return "unknown-keyword";
    case Errc::empty_store: return "empty-store";
    case Errc::unknown_document: return "unknown-document";
    case Errc::stale_feedback: return "stale-feedback";
    case Errc::domain_error: return "domain-error";
    case Errc::channel_error: return "channel-error";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::io_error: return "io-error";
    case Errc::format_error: return "format-error";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto a single machine-parsable line.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace iesnn
