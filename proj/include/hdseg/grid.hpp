#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hdseg/errors.hpp"

namespace hdseg {

struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Shape3&) const = default;
  std::string str() const;
};

/// Channel-major dense block [C x D x H x W]. The network runs in float;
/// losses and feature-level objectives run in double.
template <class T>
class BasicTensor {
 public:
  BasicTensor() = default;
  BasicTensor(int channels, Shape3 shape, T fill = T{})
      : channels_(channels), shape_(shape), data_(static_cast<std::size_t>(channels) * shape.voxels(), fill) {}

  int channels() const noexcept { return channels_; }
  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t voxels() const noexcept { return shape_.voxels(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T* channel(int c) noexcept { return data_.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* channel(int c) const noexcept { return data_.data() + static_cast<std::size_t>(c) * voxels(); }

  T& at(int c, int z, int y, int x) noexcept { return data_[index(c, z, y, x)]; }
  const T& at(int c, int z, int y, int x) const noexcept { return data_[index(c, z, y, x)]; }

  bool same_layout(const BasicTensor& o) const noexcept { return channels_ == o.channels_ && shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(channels_, shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  std::size_t index(int c, int z, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(c) * shape_.d + z) * shape_.h + y) * shape_.w + x;
  }

  int channels_ = 0;
  Shape3 shape_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
/// Bottleneck features handed to the mutual-information objective.
using LatentFeature = BasicTensor<double>;

/// One modality's scalar volume.
using ModalityVolume = BasicTensor<float>;

/// Per-voxel class distribution, class-major [J x D x H x W].
class ProbabilityField {
 public:
  ProbabilityField() = default;
  ProbabilityField(int n_classes, Shape3 shape, double fill = 0.0) : t_(n_classes, shape, fill) {}

  int n_classes() const noexcept { return t_.channels(); }
  const Shape3& shape() const noexcept { return t_.shape(); }
  std::size_t voxels() const noexcept { return t_.voxels(); }

  double& at(int j, std::size_t voxel) noexcept { return t_.data()[static_cast<std::size_t>(j) * voxels() + voxel]; }
  double at(int j, std::size_t voxel) const noexcept { return t_.data()[static_cast<std::size_t>(j) * voxels() + voxel]; }

  BasicTensor<double>& tensor() noexcept { return t_; }
  const BasicTensor<double>& tensor() const noexcept { return t_; }

  bool same_layout(const ProbabilityField& o) const noexcept { return t_.same_layout(o.t_); }
  bool operator==(const ProbabilityField&) const = default;

  /// Largest |sum_j p_j - 1| over voxels; also reports any entry outside [0,1].
  double max_simplex_violation() const;

 private:
  BasicTensor<double> t_;
};

/// Integer class map with values in {0..n_classes-1}.
class LabelField {
 public:
  LabelField() = default;
  LabelField(int n_classes, Shape3 shape, std::uint8_t fill = 0)
      : n_classes_(n_classes), shape_(shape), classes_(shape.voxels(), fill) {}

  int n_classes() const noexcept { return n_classes_; }
  const Shape3& shape() const noexcept { return shape_; }
  std::size_t voxels() const noexcept { return classes_.size(); }
  std::uint8_t& operator[](std::size_t i) noexcept { return classes_[i]; }
  std::uint8_t operator[](std::size_t i) const noexcept { return classes_[i]; }
  std::vector<std::uint8_t>& values() noexcept { return classes_; }
  const std::vector<std::uint8_t>& values() const noexcept { return classes_; }

  /// Throws DimensionError if any entry is >= n_classes.
  void validate() const;
  bool operator==(const LabelField&) const = default;

 private:
  int n_classes_ = 0;
  Shape3 shape_{};
  std::vector<std::uint8_t> classes_;
};

/// One-hot label with every entry floored at eps and rows renormalised.
ProbabilityField label_to_field(const LabelField& label, double eps);

/// Lowest class index wins ties.
LabelField argmax(const ProbabilityField& field);

}  // namespace hdseg
