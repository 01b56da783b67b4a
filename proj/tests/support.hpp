#pragma once
// Seeded generators and finite-difference helpers shared by the tests.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hdseg/grid.hpp"

namespace testing {

using Rng = std::mt19937_64;

inline std::vector<double> random_distribution(Rng& rng, int j, double min_entry = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(j);
  double s = 0.0;
  for (double& v : p) {
    v = min_entry + u(rng);
    s += v;
  }
  for (double& v : p) v /= s;
  return p;
}

inline hdseg::ProbabilityField random_field(Rng& rng, int j, hdseg::Shape3 shape, double min_entry = 0.01) {
  hdseg::ProbabilityField f(j, shape);
  for (std::size_t v = 0; v < shape.voxels(); ++v) {
    const auto p = random_distribution(rng, j, min_entry);
    for (int c = 0; c < j; ++c) f.at(c, v) = p[c];
  }
  return f;
}

inline hdseg::LabelField random_label(Rng& rng, int j, hdseg::Shape3 shape) {
  hdseg::LabelField l(j, shape);
  std::uniform_int_distribution<int> d(0, j - 1);
  for (auto& v : l.values()) v = static_cast<std::uint8_t>(d(rng));
  return l;
}

inline hdseg::BasicTensor<double> random_tensor(Rng& rng, int c, hdseg::Shape3 shape, double scale = 1.0) {
  hdseg::BasicTensor<double> t(c, shape);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.values()) v = n(rng);
  return t;
}

/// Central difference of f at x[i] with step h.
inline double central_diff(const std::function<double()>& f, double& x, double h = 1e-5) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

/// |a - b| / max(|a|, |b|, floor): relative error with an absolute floor
/// so near-zero components do not blow up the ratio.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing

namespace testing {

/// ||a - b|| / max(||a||, ||b||, floor) over whole gradient vectors.
inline double vector_rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace testing
