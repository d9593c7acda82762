#pragma once

// Asymmetric scalar-product-preserving encryption: secret keys, randomized
// vector splitting, index/trapdoor encryption, ciphertext scoring and
// ciphertext increments.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iesnn/binary_io.hpp"
#include "iesnn/error.hpp"
#include "iesnn/linalg.hpp"
#include "iesnn/random.hpp"

namespace iesnn::aspe {

enum class VectorRole { index, query };

struct PlainVector {
  Vector values;
  VectorRole role = VectorRole::index;
  std::optional<std::string> doc_id;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(values.size()); }
};

struct KeygenOptions {
  double max_condition = 1e4;
  int max_attempts = 100;
};

inline constexpr double kInverseTolerance = 1e-9;

class SecretKey {
 public:
  /// Validates the parts and caches both inverses. Throws invalid-dimension,
  /// invalid-argument (bad indicator bits) or generation-failure (singular or
  /// ill-conditioned matrix).
  static SecretKey from_parts(std::vector<std::uint8_t> split, Matrix m1, Matrix m2,
                              std::uint64_t seed, double max_condition = 1e4) {
    const auto v = split.size();
    require(v >= 1, Errc::invalid_dimension, "secret key dimension must be >= 1");
    for (auto bit : split)
      require(bit <= 1, Errc::invalid_argument, "split indicator entries must be 0 or 1");
    const auto n = static_cast<Eigen::Index>(v);
    require(m1.rows() == n && m1.cols() == n && m2.rows() == n && m2.cols() == n,
            Errc::dimension_mismatch, "key matrices must be V x V");
    SecretKey sk;
    sk.split_ = std::move(split);
    sk.seed_ = seed;
    sk.m1_ = std::move(m1);
    sk.m2_ = std::move(m2);
    auto inv1 = checked_inverse(sk.m1_, max_condition);
    auto inv2 = checked_inverse(sk.m2_, max_condition);
    require(inv1.has_value() && inv2.has_value(), Errc::generation_failure,
            "key matrix is singular or exceeds the condition bound");
    sk.m1_inv_ = std::move(inv1->inverse);
    sk.m2_inv_ = std::move(inv2->inverse);
    sk.cond1_ = inv1->condition_1;
    sk.cond2_ = inv2->condition_1;
    return sk;
  }

  /// Assembles a key from matrices whose inverses were already checked by
  /// checked_inverse; skips the second inversion.
  static SecretKey from_checked(std::vector<std::uint8_t> split, Matrix m1, Inversion inv1,
                                Matrix m2, Inversion inv2, std::uint64_t seed) {
    SecretKey sk;
    sk.split_ = std::move(split);
    sk.seed_ = seed;
    sk.m1_ = std::move(m1);
    sk.m2_ = std::move(m2);
    sk.m1_inv_ = std::move(inv1.inverse);
    sk.m2_inv_ = std::move(inv2.inverse);
    sk.cond1_ = inv1.condition_1;
    sk.cond2_ = inv2.condition_1;
    return sk;
  }

  /// Test hook: both matrices are the identity, so ciphertexts equal the
  /// split shares and scoring reduces to the plain dot product.
  static SecretKey identity(std::vector<std::uint8_t> split, std::uint64_t seed = 0) {
    const auto n = static_cast<Eigen::Index>(split.size());
    require(n >= 1, Errc::invalid_dimension, "secret key dimension must be >= 1");
    return from_parts(std::move(split), Matrix::Identity(n, n), Matrix::Identity(n, n), seed);
  }

  std::size_t dim() const noexcept { return split_.size(); }
  std::span<const std::uint8_t> split_indicator() const noexcept { return split_; }
  const Matrix& m1() const noexcept { return m1_; }
  const Matrix& m2() const noexcept { return m2_; }
  const Matrix& m1_inv() const noexcept { return m1_inv_; }
  const Matrix& m2_inv() const noexcept { return m2_inv_; }
  std::uint64_t seed() const noexcept { return seed_; }
  double condition_m1() const noexcept { return cond1_; }
  double condition_m2() const noexcept { return cond2_; }

  friend bool operator==(const SecretKey& a, const SecretKey& b) {
    return a.seed_ == b.seed_ && a.split_ == b.split_ && a.m1_ == b.m1_ && a.m2_ == b.m2_;
  }

  static std::optional<Inversion> checked_inverse(const Matrix& m, double max_condition) {
    auto inv = invert(m);
    if (!inv || inv->condition_1 > max_condition) return std::nullopt;
    if (identity_residual(m, inv->inverse) > kInverseTolerance) return std::nullopt;
    return inv;
  }

 private:
  SecretKey() = default;

  std::vector<std::uint8_t> split_;
  Matrix m1_, m2_, m1_inv_, m2_inv_;
  std::uint64_t seed_ = 0;
  double cond1_ = 0.0, cond2_ = 0.0;
};

namespace detail {

// Entries U(-1, 1) plus a random-sign sqrt(n) diagonal shift. Without the
// shift the 1-norm condition number of a dense uniform matrix grows past 1e4
// by n ~ 64.
inline Matrix random_key_matrix(std::size_t n, Rng& rng) {
  const auto dim = static_cast<Eigen::Index>(n);
  Matrix m(dim, dim);
  for (Eigen::Index r = 0; r < dim; ++r)
    for (Eigen::Index c = 0; c < dim; ++c) m(r, c) = rng.uniform(-1.0, 1.0);
  const double shift = std::sqrt(static_cast<double>(n));
  for (Eigen::Index i = 0; i < dim; ++i) m(i, i) += rng.fair_bit() ? shift : -shift;
  return m;
}

inline std::pair<Matrix, Inversion> well_conditioned_matrix(std::size_t n, Rng& rng,
                                                            const KeygenOptions& opts) {
  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    Matrix m = random_key_matrix(n, rng);
    if (auto inv = SecretKey::checked_inverse(m, opts.max_condition))
      return {std::move(m), std::move(*inv)};
  }
  fail(Errc::generation_failure, "no well-conditioned " + std::to_string(n) + "x" +
                                     std::to_string(n) + " matrix within " +
                                     std::to_string(opts.max_attempts) + " attempts");
}

inline std::vector<std::uint8_t> random_bits(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> bits(n);
  for (auto& b : bits) b = rng.fair_bit() ? 1 : 0;
  return bits;
}

inline Matrix block_diagonal(const Matrix& top, const Matrix& bottom) {
  const auto a = top.rows(), b = bottom.rows();
  Matrix out = Matrix::Zero(a + b, a + b);
  out.topLeftCorner(a, a) = top;
  out.bottomRightCorner(b, b) = bottom;
  return out;
}

}  // namespace detail

inline SecretKey keygen(std::size_t dim, std::uint64_t seed, const KeygenOptions& opts = {}) {
  require(dim >= 1, Errc::invalid_dimension, "keygen: dimension must be >= 1");
  Rng rng(seed);
  auto split = detail::random_bits(dim, rng);
  auto [m1, inv1] = detail::well_conditioned_matrix(dim, rng, opts);
  auto [m2, inv2] = detail::well_conditioned_matrix(dim, rng, opts);
  return SecretKey::from_checked(std::move(split), std::move(m1), std::move(inv1),
                                std::move(m2), std::move(inv2), seed);
}

/// Block-diagonal extension by `added` fresh dimensions. Old ciphertexts and
/// trapdoors stay valid after zero-padding because the old blocks are kept.
inline SecretKey extended_keygen(const SecretKey& sk, std::size_t added, std::uint64_t seed,
                                 const KeygenOptions& opts = {}) {
  if (added == 0) return sk;
  Rng rng(seed);
  std::vector<std::uint8_t> split(sk.split_indicator().begin(), sk.split_indicator().end());
  const auto fresh = detail::random_bits(added, rng);
  split.insert(split.end(), fresh.begin(), fresh.end());
  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    auto [b1, inv1] = detail::well_conditioned_matrix(added, rng, opts);
    auto [b2, inv2] = detail::well_conditioned_matrix(added, rng, opts);
    Matrix m1 = detail::block_diagonal(sk.m1(), b1);
    Matrix m2 = detail::block_diagonal(sk.m2(), b2);
    Inversion full1{detail::block_diagonal(sk.m1_inv(), inv1.inverse), 0.0};
    Inversion full2{detail::block_diagonal(sk.m2_inv(), inv2.inverse), 0.0};
    full1.condition_1 = norm_1(m1) * norm_1(full1.inverse);
    full2.condition_1 = norm_1(m2) * norm_1(full2.inverse);
    if (full1.condition_1 <= opts.max_condition && full2.condition_1 <= opts.max_condition)
      return SecretKey::from_checked(std::move(split), std::move(m1), std::move(full1),
                                     std::move(m2), std::move(full2), seed);
  }
  fail(Errc::generation_failure, "extended_keygen: no well-conditioned extension found");
}

// ---------------------------------------------------------------------------
// Splitting

struct Shares {
  Vector first;
  Vector second;
};

/// Index vectors are randomized where S[t] = 1, query vectors where S[t] = 0.
/// `draw(bound)` must return a value in [-bound, bound].
template <class Draw>
Shares split_with(const Vector& v, std::span<const std::uint8_t> split, VectorRole role,
                  Draw&& draw) {
  require(static_cast<std::size_t>(v.size()) == split.size(), Errc::dimension_mismatch,
          "vector length " + std::to_string(v.size()) + " != key dimension " +
              std::to_string(split.size()));
  const double bound = norm_inf(v);
  const std::uint8_t randomized_bit = role == VectorRole::index ? 1 : 0;
  Shares out{Vector(v.size()), Vector(v.size())};
  for (Eigen::Index t = 0; t < v.size(); ++t) {
    if (split[static_cast<std::size_t>(t)] == randomized_bit) {
      const double r = draw(bound);
      out.first[t] = r;
      out.second[t] = v[t] - r;
    } else {
      out.first[t] = v[t];
      out.second[t] = v[t];
    }
  }
  return out;
}

inline Shares split_seeded(const Vector& v, std::span<const std::uint8_t> split, VectorRole role,
                           std::uint64_t seed) {
  Rng rng(seed);
  return split_with(v, split, role, [&](double bound) { return rng.uniform(-bound, bound); });
}

namespace detail {
inline void check_plain(const PlainVector& p, VectorRole expected, const SecretKey& sk) {
  require(p.role == expected, Errc::misuse,
          expected == VectorRole::index ? "expected an index-role vector"
                                        : "expected a query-role vector");
  require(p.dim() == sk.dim(), Errc::dimension_mismatch,
          "vector length " + std::to_string(p.dim()) + " != key dimension " +
              std::to_string(sk.dim()));
  require(p.values.allFinite(), Errc::invalid_argument, "vector entries must be finite");
}
}  // namespace detail

inline Shares split_index(const PlainVector& index, const SecretKey& sk, std::uint64_t seed) {
  detail::check_plain(index, VectorRole::index, sk);
  return split_seeded(index.values, sk.split_indicator(), VectorRole::index, seed);
}

inline Shares split_query(const PlainVector& query, const SecretKey& sk, std::uint64_t seed) {
  detail::check_plain(query, VectorRole::query, sk);
  return split_seeded(query.values, sk.split_indicator(), VectorRole::query, seed);
}

// ---------------------------------------------------------------------------
// Ciphertexts

struct EncryptedIndex {
  Vector c1;  // m1^T * I1
  Vector c2;  // m2^T * I2
  std::string doc_id;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(c1.size()); }
};

struct Trapdoor {
  Vector t1;  // m1^-1 * Q1
  Vector t2;  // m2^-1 * Q2
  std::size_t k = 1;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(t1.size()); }
};

enum class IncrementMode { owner_exact, cloud_raw };

struct EncryptedIncrement {
  Vector d1;
  Vector d2;
  IncrementMode mode = IncrementMode::owner_exact;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(d1.size()); }
};

inline EncryptedIndex encrypt_index(const PlainVector& index, const SecretKey& sk,
                                    std::uint64_t seed) {
  auto shares = split_index(index, sk, seed);
  EncryptedIndex out;
  out.c1.noalias() = sk.m1().transpose() * shares.first;
  out.c2.noalias() = sk.m2().transpose() * shares.second;
  out.doc_id = index.doc_id.value_or("");
  return out;
}

inline Trapdoor make_trapdoor(const PlainVector& query, std::size_t k, const SecretKey& sk,
                              std::uint64_t seed) {
  require(k >= 1, Errc::invalid_k, "trapdoor k must be >= 1");
  auto shares = split_query(query, sk, seed);
  Trapdoor out;
  out.t1.noalias() = sk.m1_inv() * shares.first;
  out.t2.noalias() = sk.m2_inv() * shares.second;
  out.k = k;
  return out;
}

/// Encrypts many indexes with one matrix product per key half. Vector i is
/// split with seeds[i], exactly as encrypt_index would.
inline std::vector<EncryptedIndex> encrypt_indexes(std::span<const PlainVector> indexes,
                                                   const SecretKey& sk,
                                                   std::span<const std::uint64_t> seeds) {
  require(indexes.size() == seeds.size(), Errc::invalid_argument,
          "encrypt_indexes: one seed per index required");
  const auto v = static_cast<Eigen::Index>(sk.dim());
  const auto n = static_cast<Eigen::Index>(indexes.size());
  Matrix first(v, n), second(v, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto shares = split_index(indexes[static_cast<std::size_t>(i)], sk,
                              seeds[static_cast<std::size_t>(i)]);
    first.col(i) = shares.first;
    second.col(i) = shares.second;
  }
  const Matrix c1 = sk.m1().transpose() * first;
  const Matrix c2 = sk.m2().transpose() * second;
  std::vector<EncryptedIndex> out(indexes.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& e = out[static_cast<std::size_t>(i)];
    e.c1 = c1.col(i);
    e.c2 = c2.col(i);
    e.doc_id = indexes[static_cast<std::size_t>(i)].doc_id.value_or("");
  }
  return out;
}

/// Batched make_trapdoor; query i is split with seeds[i].
inline std::vector<Trapdoor> make_trapdoors(std::span<const PlainVector> queries, std::size_t k,
                                            const SecretKey& sk,
                                            std::span<const std::uint64_t> seeds) {
  require(k >= 1, Errc::invalid_k, "trapdoor k must be >= 1");
  require(queries.size() == seeds.size(), Errc::invalid_argument,
          "make_trapdoors: one seed per query required");
  const auto v = static_cast<Eigen::Index>(sk.dim());
  const auto n = static_cast<Eigen::Index>(queries.size());
  Matrix first(v, n), second(v, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto shares = split_query(queries[static_cast<std::size_t>(i)], sk,
                              seeds[static_cast<std::size_t>(i)]);
    first.col(i) = shares.first;
    second.col(i) = shares.second;
  }
  const Matrix t1 = sk.m1_inv() * first;
  const Matrix t2 = sk.m2_inv() * second;
  std::vector<Trapdoor> out(queries.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    auto& t = out[static_cast<std::size_t>(i)];
    t.t1 = t1.col(i);
    t.t2 = t2.col(i);
    t.k = k;
  }
  return out;
}

/// Secure inner product: c1 . t1 + c2 . t2 equals dot(I, Q).
inline double score(const EncryptedIndex& e, const Trapdoor& t) {
  require(e.dim() == t.dim() && e.c2.size() == t.t2.size(), Errc::dimension_mismatch,
          "index dimension " + std::to_string(e.dim()) + " != trapdoor dimension " +
              std::to_string(t.dim()));
  return e.c1.dot(t.t1) + e.c2.dot(t.t2);
}

inline EncryptedIncrement encrypt_increment(const Vector& delta, const SecretKey& sk,
                                            std::uint64_t seed) {
  require(static_cast<std::size_t>(delta.size()) == sk.dim(), Errc::dimension_mismatch,
          "increment length must equal key dimension");
  require(delta.allFinite(), Errc::invalid_argument, "increment entries must be finite");
  auto shares = split_seeded(delta, sk.split_indicator(), VectorRole::index, seed);
  EncryptedIncrement out;
  out.d1.noalias() = sk.m1().transpose() * shares.first;
  out.d2.noalias() = sk.m2().transpose() * shares.second;
  out.mode = IncrementMode::owner_exact;
  return out;
}

/// Key-free increment assembled by the cloud from raw ciphertext-space deltas.
inline EncryptedIncrement raw_increment(Vector d1, Vector d2) {
  require(d1.size() == d2.size(), Errc::dimension_mismatch, "raw increment halves differ");
  return EncryptedIncrement{std::move(d1), std::move(d2), IncrementMode::cloud_raw};
}

/// Cloud-raw increment along the ciphertext's own direction: applying it
/// multiplies every score of `e` by `factor`.
inline EncryptedIncrement scaling_increment(const EncryptedIndex& e, double factor) {
  return raw_increment((factor - 1.0) * e.c1, (factor - 1.0) * e.c2);
}

inline EncryptedIndex apply_increment(const EncryptedIndex& e, const EncryptedIncrement& inc,
                                      IncrementMode declared) {
  require(inc.mode == declared, Errc::misuse,
          "increment mode does not match the caller's declared channel");
  require(e.dim() == inc.dim() && e.c2.size() == inc.d2.size(), Errc::dimension_mismatch,
          "increment dimension does not match index");
  EncryptedIndex out;
  out.c1 = e.c1 + inc.d1;
  out.c2 = e.c2 + inc.d2;
  out.doc_id = e.doc_id;
  return out;
}

// ---------------------------------------------------------------------------
// Key-holder diagnostics

/// Recovers the plaintext index from a ciphertext. S=1 slots are the share
/// sum; S=0 slots average the two (equal) shares.
inline Vector recover_index(const EncryptedIndex& e, const SecretKey& sk) {
  require(e.dim() == sk.dim(), Errc::dimension_mismatch, "index/key dimension mismatch");
  const Vector first = sk.m1_inv().transpose() * e.c1;
  const Vector second = sk.m2_inv().transpose() * e.c2;
  Vector out(first.size());
  const auto split = sk.split_indicator();
  for (Eigen::Index t = 0; t < out.size(); ++t)
    out[t] = split[static_cast<std::size_t>(t)] == 1 ? first[t] + second[t]
                                                     : 0.5 * (first[t] + second[t]);
  return out;
}

/// Plaintext vector an increment stands for. Raw increments need not respect
/// the split structure (shares may disagree at S=0 slots); the estimate
/// averages them there.
inline Vector increment_plaintext_estimate(const EncryptedIncrement& inc, const SecretKey& sk) {
  EncryptedIndex as_index{inc.d1, inc.d2, {}};
  return recover_index(as_index, sk);
}

/// |(score change under t) - estimate . q|: how far a raw increment is from
/// behaving like a plaintext update for this query.
inline double increment_approximation_error(const EncryptedIncrement& inc, const SecretKey& sk,
                                            const Trapdoor& t, const Vector& plain_query) {
  const double change = inc.d1.dot(t.t1) + inc.d2.dot(t.t2);
  return std::abs(change - increment_plaintext_estimate(inc, sk).dot(plain_query));
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::string_view kKeyMagic = "IESNNKEY";
inline constexpr std::uint32_t kKeyVersion = 1;

/// Key file, little-endian:
///   "IESNNKEY" | u32 version | u64 V | u64 seed | ceil(V/8) bytes of S
///   (bit t in byte t/8, LSB first) | m1 row-major f64 | m2 row-major f64
inline std::string save_key(const SecretKey& sk) {
  io::Writer w;
  w.bytes(kKeyMagic);
  w.u32(kKeyVersion);
  w.u64(sk.dim());
  w.u64(sk.seed());
  std::vector<std::uint8_t> packed((sk.dim() + 7) / 8, 0);
  const auto split = sk.split_indicator();
  for (std::size_t t = 0; t < split.size(); ++t)
    if (split[t]) packed[t / 8] |= static_cast<std::uint8_t>(1u << (t % 8));
  for (auto b : packed) w.u8(b);
  w.mat(sk.m1());
  w.mat(sk.m2());
  return w.take();
}

inline SecretKey load_key(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kKeyMagic);
  const auto version = r.u32();
  require(version == kKeyVersion, Errc::format_error,
          "unsupported key file version " + std::to_string(version));
  const auto dim = r.u64();
  require(dim >= 1 && dim <= (1u << 16), Errc::format_error, "implausible key dimension");
  const auto seed = r.u64();
  std::vector<std::uint8_t> split(dim);
  for (std::size_t byte = 0; byte < (dim + 7) / 8; ++byte) {
    const auto b = r.u8();
    for (std::size_t bit = 0; bit < 8 && byte * 8 + bit < dim; ++bit)
      split[byte * 8 + bit] = (b >> bit) & 1u;
  }
  Matrix m1 = r.mat(dim, dim);
  Matrix m2 = r.mat(dim, dim);
  require(r.at_end(), Errc::format_error, "trailing bytes in key file");
  return SecretKey::from_parts(std::move(split), std::move(m1), std::move(m2), seed);
}

inline void write_index(io::Writer& w, const EncryptedIndex& e) {
  w.str(e.doc_id);
  w.vec(e.c1);
  w.vec(e.c2);
}

inline EncryptedIndex read_index(io::Reader& r, std::size_t dim) {
  EncryptedIndex e;
  e.doc_id = r.str();
  e.c1 = r.vec(dim);
  e.c2 = r.vec(dim);
  return e;
}

inline void write_trapdoor(io::Writer& w, const Trapdoor& t) {
  w.u64(t.k);
  w.vec(t.t1);
  w.vec(t.t2);
}

inline Trapdoor read_trapdoor(io::Reader& r, std::size_t dim) {
  Trapdoor t;
  t.k = r.u64();
  t.t1 = r.vec(dim);
  t.t2 = r.vec(dim);
  return t;
}

inline void write_increment(io::Writer& w, const EncryptedIncrement& inc) {
  w.u8(inc.mode == IncrementMode::owner_exact ? 0 : 1);
  w.vec(inc.d1);
  w.vec(inc.d2);
}

inline EncryptedIncrement read_increment(io::Reader& r, std::size_t dim) {
  EncryptedIncrement inc;
  const auto mode = r.u8();
  require(mode <= 1, Errc::format_error, "bad increment mode");
  inc.mode = mode == 0 ? IncrementMode::owner_exact : IncrementMode::cloud_raw;
  inc.d1 = r.vec(dim);
  inc.d2 = r.vec(dim);
  return inc;
}

inline constexpr std::string_view kIndexMagic = "IESNNIDX";
inline constexpr std::uint32_t kIndexVersion = 1;

/// Index file: "IESNNIDX" | u32 version | u64 count | u64 V | count x index.
inline std::string save_indexes(std::span<const EncryptedIndex> indexes) {
  require(!indexes.empty(), Errc::empty_store, "no indexes to save");
  io::Writer w;
  w.bytes(kIndexMagic);
  w.u32(kIndexVersion);
  w.u64(indexes.size());
  w.u64(indexes.front().dim());
  for (const auto& e : indexes) {
    require(e.dim() == indexes.front().dim(), Errc::dimension_mismatch, "indexes differ in V");
    write_index(w, e);
  }
  return w.take();
}

inline std::vector<EncryptedIndex> load_indexes(std::string_view bytes) {
  io::Reader r(bytes);
  r.expect_magic(kIndexMagic);
  const auto version = r.u32();
  require(version == kIndexVersion, Errc::format_error,
          "unsupported index file version " + std::to_string(version));
  const auto n = r.u64();
  const auto dim = r.u64();
  require(n >= 1 && dim >= 1 && dim <= (1u << 16), Errc::format_error, "implausible index file");
  std::vector<EncryptedIndex> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(read_index(r, dim));
  require(r.at_end(), Errc::format_error, "trailing bytes in index file");
  return out;
}

}  // namespace iesnn::aspe
