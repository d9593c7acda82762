#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>

namespace iesnn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double norm_inf(const Vector& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

/// Induced 1-norm (maximum absolute column sum).
inline double norm_1(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().colwise().sum().maxCoeff();
}

/// ||m * m_inv - I||_inf entrywise.
inline double identity_residual(const Matrix& m, const Matrix& m_inv) {
  Matrix prod = m * m_inv;
  prod.diagonal().array() -= 1.0;
  return prod.size() == 0 ? 0.0 : prod.cwiseAbs().maxCoeff();
}

struct Inversion {
  Matrix inverse;
  double condition_1 = 0.0;  // ||m||_1 * ||m^-1||_1
};

/// LU inverse with the exact 1-norm condition number. Empty when the matrix
/// is numerically singular.
inline std::optional<Inversion> invert(const Matrix& m) {
  Eigen::PartialPivLU<Matrix> lu(m);
  if (!(lu.rcond() > 1e-14)) return std::nullopt;
  Inversion out{lu.inverse(), 0.0};
  out.condition_1 = norm_1(m) * norm_1(out.inverse);
  if (!std::isfinite(out.condition_1)) return std::nullopt;
  return out;
}

/// Neumaier-compensated running sum. Accumulating the same terms in any
/// order agrees to well below 1e-9 relative for the magnitudes used here.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }

  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline Vector to_vector(std::span<const double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i];
  return v;
}

}  // namespace iesnn
