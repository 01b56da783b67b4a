#include "hdseg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hdseg {

std::string Shape3::str() const {
  return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

double ProbabilityField::max_simplex_violation() const {
  double worst = 0.0;
  for (std::size_t v = 0; v < voxels(); ++v) {
    double s = 0.0;
    for (int j = 0; j < n_classes(); ++j) {
      const double p = at(j, v);
      if (!(p >= 0.0 && p <= 1.0)) return std::numeric_limits<double>::infinity();
      s += p;
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

void LabelField::validate() const {
  if (classes_.size() != shape_.voxels()) throw DimensionError("label storage does not match its shape");
  for (auto c : classes_) {
    if (c >= n_classes_) {
      throw DimensionError("label value " + std::to_string(c) + " outside 0.." + std::to_string(n_classes_ - 1));
    }
  }
}

ProbabilityField label_to_field(const LabelField& label, double eps) {
  label.validate();
  const int j_count = label.n_classes();
  ProbabilityField out(j_count, label.shape());
  const double total = 1.0 + eps * (j_count - 1);
  for (std::size_t v = 0; v < label.voxels(); ++v) {
    for (int j = 0; j < j_count; ++j) out.at(j, v) = (label[v] == j ? 1.0 : eps) / total;
  }
  return out;
}

LabelField argmax(const ProbabilityField& field) {
  LabelField out(field.n_classes(), field.shape());
  for (std::size_t v = 0; v < field.voxels(); ++v) {
    int best = 0;
    double best_p = field.at(0, v);
    for (int j = 1; j < field.n_classes(); ++j) {
      if (field.at(j, v) > best_p) {
        best_p = field.at(j, v);
        best = j;
      }
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace hdseg
