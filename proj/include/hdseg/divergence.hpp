#pragma once
// Hölder pseudo-divergence and the comparison f-divergence family over
// discrete class distributions.
//
// All functions are pure. Inputs are floored at kFloor and renormalised
// before any power or log is taken, so one-hot targets are admissible.
// Hölder terms are evaluated in log space (log-sum-exp) because the
// conjugate exponent beta = alpha/(alpha-1) reaches 21 at alpha = 1.05.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hdseg/grid.hpp"

namespace hdseg::divergence {

inline constexpr double kFloor = 1e-12;

/// Validated probability vector: entries >= 0, sum 1 within 1e-9, length >= 2.
class DiscreteDistribution {
 public:
  explicit DiscreteDistribution(std::vector<double> weights);

  std::span<const double> weights() const noexcept { return weights_; }
  std::size_t size() const noexcept { return weights_.size(); }

 private:
  std::vector<double> weights_;
};

/// Conjugate pair (alpha, beta) with alpha > 1. The reverse-Hölder regime
/// 0 < alpha < 1 is rejected.
class HolderExponent {
 public:
  explicit HolderExponent(double alpha);

  double alpha() const noexcept { return alpha_; }
  double beta() const noexcept { return beta_; }

 private:
  double alpha_;
  double beta_;
};

enum class DivergenceTag {
  holder,
  total_variation,
  squared_hellinger,
  kullback_leibler,
  neyman_chi2,
  jensen_shannon,
  // Not divergences; pointwise training losses used as comparison rows.
  mse,
  bce,
};

struct DivergenceKind {
  DivergenceTag tag = DivergenceTag::kullback_leibler;
  std::optional<HolderExponent> exponent;  // set iff tag == holder

  static DivergenceKind holder(double alpha) { return {DivergenceTag::holder, HolderExponent(alpha)}; }
  static DivergenceKind of(DivergenceTag tag);

  /// "holder:1.1", "kl", "tv", "hellinger", "neyman", "js", "mse", "bce".
  static DivergenceKind parse(std::string_view text);
  std::string name() const;
  bool is_f_divergence() const noexcept;
};

/// -log( <p,q> / (||p||_alpha ||q||_beta) ). Throws DimensionError on
/// length mismatch, DegenerateInputError when either side has no mass.
double holder_divergence(std::span<const double> p, std::span<const double> q, const HolderExponent& exp);
double holder_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q, const HolderExponent& exp);

/// TV, squared Hellinger (1 - sum sqrt(pq)), KL(p||q) in nats,
/// Neyman chi^2 = sum (p-q)^2/p, Jensen-Shannon. Other tags throw ConfigError.
double f_divergence(const DivergenceKind& kind, std::span<const double> p, std::span<const double> q);
double f_divergence(const DivergenceKind& kind, const DiscreteDistribution& p, const DiscreteDistribution& q);

/// Any kind, including Hölder and the mse/bce loss rows. When grad_p is
/// non-empty it receives d value / d p (raw, pre-flooring coordinates).
double pointwise(const DivergenceKind& kind, std::span<const double> p, std::span<const double> q,
                 std::span<double> grad_p = {});

/// Voxel mean of pointwise(kind, pred_v, target_v). If grad is non-null it is
/// resized to pred's layout and filled with d mean / d pred.
double batched_divergence(const ProbabilityField& predicted, const ProbabilityField& target,
                          const DivergenceKind& kind, ProbabilityField* grad = nullptr);

}  // namespace hdseg::divergence
