#include "hdseg/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace hdseg::divergence {

namespace {

constexpr double kSumTolerance = 1e-9;

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// Floors at kFloor and renormalises. Keeps the pieces needed to pull a
// gradient back to raw coordinates.
struct Floored {
  std::vector<double> values;
  std::vector<bool> active;  // raw entry above the floor
  double total = 1.0;
};

void floor_into(std::span<const double> raw, Floored& out, const char* side) {
  const std::size_t n = raw.size();
  out.values.resize(n);
  out.active.resize(n);
  double mass = 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double x = raw[j];
    if (!std::isfinite(x)) throw DegenerateInputError(std::string(side) + " has a non-finite entry");
    if (x > 0.0) mass += x;
    out.active[j] = x > kFloor;
    out.values[j] = std::max(x, kFloor);
    total += out.values[j];
  }
  if (!(mass > 0.0)) throw DegenerateInputError(std::string(side) + " has no positive mass");
  for (double& v : out.values) v /= total;
  out.total = total;
}

// d/d raw from d/d renormalised.
void pull_back(const Floored& f, std::span<const double> g, std::span<double> out) {
  double dot = 0.0;
  for (std::size_t j = 0; j < g.size(); ++j) dot += g[j] * f.values[j];
  for (std::size_t j = 0; j < g.size(); ++j) out[j] = f.active[j] ? (g[j] - dot) / f.total : 0.0;
}

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DimensionError("distribution lengths differ: " + std::to_string(a) + " vs " + std::to_string(b));
  }
  if (a < 2) throw DimensionError("distributions need at least two classes");
}

// Value and d/dp on already-floored inputs.
double holder_core(const std::vector<double>& p, const std::vector<double>& q, const HolderExponent& exp,
                   std::vector<double>* grad) {
  const std::size_t n = p.size();
  const double a = exp.alpha();
  const double b = exp.beta();
  std::vector<double> lp(n), lq(n), buf(n);
  for (std::size_t j = 0; j < n; ++j) {
    lp[j] = std::log(p[j]);
    lq[j] = std::log(q[j]);
  }
  for (std::size_t j = 0; j < n; ++j) buf[j] = lp[j] + lq[j];
  const double log_inner = log_sum_exp(buf);
  for (std::size_t j = 0; j < n; ++j) buf[j] = a * lp[j];
  const double log_pa = log_sum_exp(buf);
  for (std::size_t j = 0; j < n; ++j) buf[j] = b * lq[j];
  const double log_qb = log_sum_exp(buf);
  if (grad) {
    grad->resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      (*grad)[j] = -std::exp(lq[j] - log_inner) + std::exp((a - 1.0) * lp[j] - log_pa);
    }
  }
  return -log_inner + log_pa / a + log_qb / b;
}

double f_core(DivergenceTag tag, const std::vector<double>& p, const std::vector<double>& q,
              std::vector<double>* grad) {
  const std::size_t n = p.size();
  if (grad) grad->assign(n, 0.0);
  double v = 0.0;
  switch (tag) {
    case DivergenceTag::total_variation:
      for (std::size_t j = 0; j < n; ++j) {
        const double d = p[j] - q[j];
        v += std::abs(d);
        if (grad) (*grad)[j] = d > 0.0 ? 0.5 : (d < 0.0 ? -0.5 : 0.0);
      }
      return 0.5 * v;
    case DivergenceTag::squared_hellinger:
      for (std::size_t j = 0; j < n; ++j) {
        v += std::sqrt(p[j] * q[j]);
        if (grad) (*grad)[j] = -0.5 * std::sqrt(q[j] / p[j]);
      }
      return std::max(0.0, 1.0 - v);
    case DivergenceTag::kullback_leibler:
      for (std::size_t j = 0; j < n; ++j) {
        const double r = std::log(p[j]) - std::log(q[j]);
        v += p[j] * r;
        if (grad) (*grad)[j] = r + 1.0;
      }
      return v;
    case DivergenceTag::neyman_chi2:
      for (std::size_t j = 0; j < n; ++j) {
        const double d = p[j] - q[j];
        v += d * d / p[j];
        if (grad) (*grad)[j] = 1.0 - (q[j] * q[j]) / (p[j] * p[j]);
      }
      return v;
    case DivergenceTag::jensen_shannon:
      for (std::size_t j = 0; j < n; ++j) {
        const double m = 0.5 * (p[j] + q[j]);
        const double lpm = std::log(p[j]) - std::log(m);
        v += 0.5 * p[j] * lpm + 0.5 * q[j] * (std::log(q[j]) - std::log(m));
        if (grad) (*grad)[j] = 0.5 * lpm;
      }
      return v;
    case DivergenceTag::mse:
      for (std::size_t j = 0; j < n; ++j) {
        const double d = p[j] - q[j];
        v += d * d;
        if (grad) (*grad)[j] = 2.0 * d / static_cast<double>(n);
      }
      return v / static_cast<double>(n);
    case DivergenceTag::bce:
      for (std::size_t j = 0; j < n; ++j) {
        const double not_p = std::max(1.0 - p[j], kFloor);
        v -= q[j] * std::log(p[j]) + (1.0 - q[j]) * std::log(not_p);
        if (grad) (*grad)[j] = -(q[j] / p[j] - (1.0 - q[j]) / not_p) / static_cast<double>(n);
      }
      return v / static_cast<double>(n);
    case DivergenceTag::holder:
      break;
  }
  throw ConfigError("unsupported divergence kind");
}

// Scratch reused across voxels of one batched call.
struct Workspace {
  Floored fp;
  Floored fq;
  std::vector<double> g;
};

double evaluate(const DivergenceKind& kind, std::span<const double> p, std::span<const double> q,
                std::span<double> grad_p, Workspace& ws) {
  check_lengths(p.size(), q.size());
  floor_into(p, ws.fp, "p");
  floor_into(q, ws.fq, "q");
  std::vector<double>* g = grad_p.empty() ? nullptr : &ws.g;
  double value;
  if (kind.tag == DivergenceTag::holder) {
    if (!kind.exponent) throw ConfigError("holder divergence requires an exponent");
    value = holder_core(ws.fp.values, ws.fq.values, *kind.exponent, g);
  } else {
    value = f_core(kind.tag, ws.fp.values, ws.fq.values, g);
  }
  if (g) {
    if (grad_p.size() != p.size()) throw DimensionError("gradient buffer length differs from p");
    pull_back(ws.fp, ws.g, grad_p);
  }
  return value;
}

}  // namespace

DiscreteDistribution::DiscreteDistribution(std::vector<double> weights) : weights_(std::move(weights)) {
  if (weights_.size() < 2) throw DimensionError("a distribution needs at least two classes");
  double s = 0.0;
  for (double w : weights_) {
    if (!std::isfinite(w) || w < 0.0) throw DegenerateInputError("distribution entries must be finite and >= 0");
    s += w;
  }
  if (std::abs(s - 1.0) > kSumTolerance) {
    std::ostringstream os;
    os.precision(17);
    os << "distribution sums to " << s << ", not 1";
    throw DegenerateInputError(os.str());
  }
}

HolderExponent::HolderExponent(double alpha) : alpha_(alpha), beta_(0.0) {
  if (!std::isfinite(alpha) || !(alpha > 1.0)) {
    throw ConfigError("Hölder exponent alpha must be finite and > 1, got " + std::to_string(alpha));
  }
  beta_ = alpha / (alpha - 1.0);
}

DivergenceKind DivergenceKind::of(DivergenceTag tag) {
  if (tag == DivergenceTag::holder) throw ConfigError("use DivergenceKind::holder(alpha) for the Hölder kind");
  return {tag, std::nullopt};
}

DivergenceKind DivergenceKind::parse(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s.rfind("holder", 0) == 0) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("holder kind needs an exponent, e.g. holder:1.1");
    double alpha = 0.0;
    try {
      std::size_t used = 0;
      alpha = std::stod(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("cannot parse Hölder exponent in '" + std::string(text) + "'");
    }
    return holder(alpha);
  }
  if (s == "tv" || s == "total_variation") return of(DivergenceTag::total_variation);
  if (s == "hellinger" || s == "squared_hellinger") return of(DivergenceTag::squared_hellinger);
  if (s == "kl" || s == "kullback_leibler") return of(DivergenceTag::kullback_leibler);
  if (s == "neyman" || s == "neyman_chi2") return of(DivergenceTag::neyman_chi2);
  if (s == "js" || s == "jensen_shannon") return of(DivergenceTag::jensen_shannon);
  if (s == "mse") return of(DivergenceTag::mse);
  if (s == "bce") return of(DivergenceTag::bce);
  throw ConfigError("unknown divergence kind '" + std::string(text) + "'");
}

std::string DivergenceKind::name() const {
  switch (tag) {
    case DivergenceTag::holder: {
      std::ostringstream os;
      os << "holder:" << (exponent ? exponent->alpha() : 0.0);
      return os.str();
    }
    case DivergenceTag::total_variation: return "tv";
    case DivergenceTag::squared_hellinger: return "hellinger";
    case DivergenceTag::kullback_leibler: return "kl";
    case DivergenceTag::neyman_chi2: return "neyman";
    case DivergenceTag::jensen_shannon: return "js";
    case DivergenceTag::mse: return "mse";
    case DivergenceTag::bce: return "bce";
  }
  return "?";
}

bool DivergenceKind::is_f_divergence() const noexcept {
  switch (tag) {
    case DivergenceTag::total_variation:
    case DivergenceTag::squared_hellinger:
    case DivergenceTag::kullback_leibler:
    case DivergenceTag::neyman_chi2:
    case DivergenceTag::jensen_shannon:
      return true;
    default:
      return false;
  }
}

double holder_divergence(std::span<const double> p, std::span<const double> q, const HolderExponent& exp) {
  Workspace ws;
  return evaluate(DivergenceKind{DivergenceTag::holder, exp}, p, q, {}, ws);
}

double holder_divergence(const DiscreteDistribution& p, const DiscreteDistribution& q, const HolderExponent& exp) {
  return holder_divergence(p.weights(), q.weights(), exp);
}

double f_divergence(const DivergenceKind& kind, std::span<const double> p, std::span<const double> q) {
  if (!kind.is_f_divergence()) throw ConfigError("'" + kind.name() + "' is not a supported f-divergence");
  Workspace ws;
  return evaluate(kind, p, q, {}, ws);
}

double f_divergence(const DivergenceKind& kind, const DiscreteDistribution& p, const DiscreteDistribution& q) {
  return f_divergence(kind, p.weights(), q.weights());
}

double pointwise(const DivergenceKind& kind, std::span<const double> p, std::span<const double> q,
                 std::span<double> grad_p) {
  Workspace ws;
  return evaluate(kind, p, q, grad_p, ws);
}

double batched_divergence(const ProbabilityField& predicted, const ProbabilityField& target,
                          const DivergenceKind& kind, ProbabilityField* grad) {
  if (!predicted.same_layout(target)) {
    throw DimensionError("batched divergence: predicted " + predicted.shape().str() + "x" +
                         std::to_string(predicted.n_classes()) + " vs target " + target.shape().str() + "x" +
                         std::to_string(target.n_classes()));
  }
  const int j_count = predicted.n_classes();
  const std::size_t n = predicted.voxels();
  if (n == 0) throw DegenerateInputError("batched divergence over an empty grid");
  if (grad) *grad = ProbabilityField(j_count, predicted.shape());
  Workspace ws;
  std::vector<double> p(j_count), q(j_count), g(grad ? j_count : 0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    for (int j = 0; j < j_count; ++j) {
      p[j] = predicted.at(j, v);
      q[j] = target.at(j, v);
    }
    total += evaluate(kind, p, q, g, ws);
    if (grad) {
      for (int j = 0; j < j_count; ++j) grad->at(j, v) = g[j] * inv_n;
    }
  }
  return total * inv_n;
}

}  // namespace hdseg::divergence
