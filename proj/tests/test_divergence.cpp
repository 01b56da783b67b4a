#include <cmath>
#include <numeric>

#include "doctest.h"
#include "hdseg/divergence.hpp"
#include "support.hpp"

using namespace hdseg;
using namespace hdseg::divergence;

namespace {

// Direct power-form evaluation used as an independent oracle (no log-space
// tricks, long double).
double holder_direct(const std::vector<double>& p, const std::vector<double>& q, double alpha) {
  const long double beta = alpha / (alpha - 1.0L);
  long double dot = 0, sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += static_cast<long double>(p[i]) * q[i];
    sp += std::pow(static_cast<long double>(p[i]), static_cast<long double>(alpha));
    sq += std::pow(static_cast<long double>(q[i]), beta);
  }
  return static_cast<double>(-std::log(dot / (std::pow(sp, 1.0L / alpha) * std::pow(sq, 1.0L / beta))));
}

double cauchy_schwarz(const std::vector<double>& p, const std::vector<double>& q) {
  double dot = 0, pp = 0, qq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * q[i];
    pp += p[i] * p[i];
    qq += q[i] * q[i];
  }
  return -std::log(dot / std::sqrt(pp * qq));
}

}  // namespace

TEST_CASE("holder exponent conjugacy and domain") {
  for (double a : {1.05, 1.08, 1.1, 1.15, 1.2, 2.0, 3.5}) {
    HolderExponent e(a);
    CHECK(std::abs(1.0 / e.alpha() + 1.0 / e.beta() - 1.0) <= 1e-12);
  }
  CHECK(HolderExponent(1.05).beta() == doctest::Approx(21.0).epsilon(1e-12));
  CHECK_THROWS_AS(HolderExponent(1.0), ConfigError);
  CHECK_THROWS_AS(HolderExponent(0.5), ConfigError);
  CHECK_THROWS_AS(HolderExponent(std::nan("")), ConfigError);
}

TEST_CASE("discrete distribution validation") {
  CHECK_NOTHROW(DiscreteDistribution({0.25, 0.75}));
  CHECK_THROWS_AS(DiscreteDistribution({1.0}), DimensionError);
  CHECK_THROWS_AS(DiscreteDistribution({0.5, 0.6}), DegenerateInputError);
  CHECK_THROWS_AS(DiscreteDistribution({-0.1, 1.1}), DegenerateInputError);
}

TEST_CASE("holder divergence reference values") {
  const HolderExponent a11(1.1), a2(2.0);
  CHECK(std::abs(holder_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, a11)) <= 1e-9);
  // -ln(0.8 / sqrt(0.68)), 40-digit reference.
  CHECK(std::abs(holder_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.8, 0.2}, a2) -
                 0.03031231090821742) <= 1e-9);
  // p = q is not a zero of the pseudo-divergence.
  CHECK(std::abs(holder_divergence(std::vector<double>{0.9, 0.1}, std::vector<double>{0.9, 0.1}, a11) -
                 0.06540038051768236) <= 1e-9);
}

TEST_CASE("holder divergence errors") {
  const HolderExponent e(1.1);
  CHECK_THROWS_AS(holder_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.2, 0.3, 0.5}, e), DimensionError);
  CHECK_THROWS_AS(holder_divergence(std::vector<double>{0.0, 0.0}, std::vector<double>{0.5, 0.5}, e), DegenerateInputError);
}

TEST_CASE("holder divergence properties on seeded random pairs") {
  testing::Rng rng(11);
  const double alphas[] = {1.05, 1.1, 1.2, 2.0};
  double worst_neg = 0.0, worst_cs = 0.0, worst_eq = 0.0, worst_direct = 0.0;
  for (int t = 0; t < 4000; ++t) {
    const int j = 2 + t % 7;
    const double a = alphas[t % 4];
    const auto p = testing::random_distribution(rng, j, 0.01);
    const auto q = testing::random_distribution(rng, j, 0.01);
    const double d = holder_divergence(p, q, HolderExponent(a));
    worst_neg = std::min(worst_neg, d);
    worst_direct = std::max(worst_direct, std::abs(d - holder_direct(p, q, a)));
    if (a == 2.0) worst_cs = std::max(worst_cs, std::abs(d - cauchy_schwarz(p, q)));
    // q proportional to p^(alpha-1) attains equality.
    std::vector<double> qe(j);
    for (int i = 0; i < j; ++i) qe[i] = std::pow(p[i], a - 1.0);
    const double s = std::accumulate(qe.begin(), qe.end(), 0.0);
    for (double& v : qe) v /= s;
    worst_eq = std::max(worst_eq, std::abs(holder_divergence(p, qe, HolderExponent(a))));
  }
  CHECK(worst_neg >= -1e-9);
  CHECK(worst_cs <= 1e-12);
  CHECK(worst_eq <= 1e-9);
  CHECK(worst_direct <= 1e-10);
}

TEST_CASE("holder divergence is asymmetric") {
  const std::vector<double> p{0.7, 0.2, 0.1}, q{0.3, 0.3, 0.4};
  const HolderExponent e(1.1);
  CHECK(std::abs(holder_divergence(p, q, e) - holder_divergence(q, p, e)) > 1e-3);
}

TEST_CASE("f-divergences reference values") {
  const auto kl = DivergenceKind::of(DivergenceTag::kullback_leibler);
  CHECK(std::abs(f_divergence(kl, std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}) -
                 0.14384103622589046) <= 1e-9);
  const std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(std::abs(f_divergence(kl, p, p)) <= 1e-12);
  CHECK(f_divergence(DivergenceKind::of(DivergenceTag::total_variation), std::vector<double>{1, 0},
                     std::vector<double>{0, 1}) == doctest::Approx(1.0).epsilon(1e-9));
  // Closed forms on a fixed pair.
  const std::vector<double> a{0.6, 0.4}, b{0.3, 0.7};
  const double hell = 1.0 - std::sqrt(0.18) - std::sqrt(0.28);
  const double chi = 0.09 / 0.6 + 0.09 / 0.4;
  const double m0 = 0.45, m1 = 0.55;
  const double js = 0.5 * (0.6 * std::log(0.6 / m0) + 0.4 * std::log(0.4 / m1)) +
                    0.5 * (0.3 * std::log(0.3 / m0) + 0.7 * std::log(0.7 / m1));
  CHECK(f_divergence(DivergenceKind::of(DivergenceTag::squared_hellinger), a, b) == doctest::Approx(hell).epsilon(1e-12));
  CHECK(f_divergence(DivergenceKind::of(DivergenceTag::neyman_chi2), a, b) == doctest::Approx(chi).epsilon(1e-12));
  CHECK(f_divergence(DivergenceKind::of(DivergenceTag::jensen_shannon), a, b) == doctest::Approx(js).epsilon(1e-12));
  CHECK(f_divergence(DivergenceKind::of(DivergenceTag::total_variation), a, b) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(f_divergence(DivergenceKind::holder(1.1), a, b), ConfigError);
  CHECK_THROWS_AS(f_divergence(DivergenceKind::of(DivergenceTag::mse), a, b), ConfigError);
}

TEST_CASE("divergence kind parsing") {
  CHECK(DivergenceKind::parse("holder:1.1").exponent->alpha() == 1.1);
  CHECK(DivergenceKind::parse("kl").tag == DivergenceTag::kullback_leibler);
  CHECK(DivergenceKind::parse("tv").tag == DivergenceTag::total_variation);
  CHECK(DivergenceKind::parse("hellinger").tag == DivergenceTag::squared_hellinger);
  CHECK(DivergenceKind::parse("neyman").tag == DivergenceTag::neyman_chi2);
  CHECK(DivergenceKind::parse("js").tag == DivergenceTag::jensen_shannon);
  CHECK(DivergenceKind::parse("mse").tag == DivergenceTag::mse);
  CHECK(DivergenceKind::parse("bce").tag == DivergenceTag::bce);
  CHECK_THROWS_AS(DivergenceKind::parse("wasserstein"), ConfigError);
  CHECK_THROWS_AS(DivergenceKind::parse("holder:0.9"), ConfigError);
  for (const auto& k : {DivergenceKind::holder(1.2), DivergenceKind::of(DivergenceTag::jensen_shannon)}) {
    CHECK(DivergenceKind::parse(k.name()).tag == k.tag);
  }
}

TEST_CASE("batched divergence equals the voxel-loop mean") {
  testing::Rng rng(5);
  const Shape3 s{4, 4, 4};
  for (const auto& kind : {DivergenceKind::holder(1.1), DivergenceKind::holder(2.0),
                           DivergenceKind::of(DivergenceTag::kullback_leibler),
                           DivergenceKind::of(DivergenceTag::jensen_shannon)}) {
    const auto pred = testing::random_field(rng, 4, s);
    const auto tgt = testing::random_field(rng, 4, s);
    double loop = 0.0;
    for (std::size_t v = 0; v < s.voxels(); ++v) {
      std::vector<double> p(4), q(4);
      for (int c = 0; c < 4; ++c) {
        p[c] = pred.at(c, v);
        q[c] = tgt.at(c, v);
      }
      loop += pointwise(kind, p, q);
    }
    CHECK(std::abs(batched_divergence(pred, tgt, kind) - loop / 64.0) <= 1e-9);
  }
}

TEST_CASE("batched divergence small cases") {
  ProbabilityField u(2, {1, 1, 3}, 0.5);
  CHECK(std::abs(batched_divergence(u, u, DivergenceKind::holder(1.1))) <= 1e-9);

  ProbabilityField p(2, {1, 1, 2}), q(2, {1, 1, 2});
  p.at(0, 0) = 1.0; p.at(1, 0) = 0.0; q.at(0, 0) = 0.8; q.at(1, 0) = 0.2;
  p.at(0, 1) = 0.9; p.at(1, 1) = 0.1; q.at(0, 1) = 0.9; q.at(1, 1) = 0.1;
  const double expected = 0.5 * (holder_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.8, 0.2}, HolderExponent(1.1)) +
                                 0.06540038051768236);
  CHECK(batched_divergence(p, q, DivergenceKind::holder(1.1)) == doctest::Approx(expected).epsilon(1e-9));

  ProbabilityField other(2, {1, 2, 2});
  CHECK_THROWS_AS(batched_divergence(p, other, DivergenceKind::holder(1.1)), DimensionError);
}

TEST_CASE("pointwise gradients match central differences") {
  testing::Rng rng(17);
  const DivergenceKind kinds[] = {
      DivergenceKind::holder(1.05), DivergenceKind::holder(1.1), DivergenceKind::holder(2.0),
      DivergenceKind::of(DivergenceTag::total_variation), DivergenceKind::of(DivergenceTag::squared_hellinger),
      DivergenceKind::of(DivergenceTag::kullback_leibler), DivergenceKind::of(DivergenceTag::neyman_chi2),
      DivergenceKind::of(DivergenceTag::jensen_shannon), DivergenceKind::of(DivergenceTag::mse),
      DivergenceKind::of(DivergenceTag::bce)};
  for (const auto& kind : kinds) {
    CAPTURE(kind.name());
    for (int t = 0; t < 20; ++t) {
      const int j = 2 + t % 4;
      auto p = testing::random_distribution(rng, j, 0.05);
      const auto q = testing::random_distribution(rng, j, 0.05);
      std::vector<double> g(j);
      pointwise(kind, p, q, g);
      std::vector<double> fd(j);
      for (int i = 0; i < j; ++i) fd[i] = testing::central_diff([&] { return pointwise(kind, p, q); }, p[i]);
      CHECK(testing::vector_rel_err(g, fd) <= 1e-5);
    }
  }
}
