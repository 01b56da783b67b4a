#pragma once
// Minimal 3D convolutional building blocks with explicit backward passes.
// Parameters live in a ParamStore; layers hold indices into it so that one
// set of weights can be shared by any number of concurrent forward caches.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hdseg/grid.hpp"

namespace hdseg::nn {

struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value;
};

class ParamStore {
 public:
  /// Appends a parameter and returns its index.
  int add(std::string name, std::vector<int> dims, float fill = 0.0f);

  Param& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Param& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_values() const noexcept;
  int find(const std::string& name) const;  // -1 if absent

  std::vector<Param>& all() noexcept { return params_; }
  const std::vector<Param>& all() const noexcept { return params_; }

 private:
  std::vector<Param> params_;
};

/// Gradient buffers with the same layout as a ParamStore.
class GradStore {
 public:
  GradStore() = default;
  explicit GradStore(const ParamStore& params);

  std::vector<float>& operator[](int i) { return grads_.at(static_cast<std::size_t>(i)); }
  const std::vector<float>& operator[](int i) const { return grads_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const noexcept { return grads_.size(); }
  void zero();
  void add(const GradStore& other, float scale = 1.0f);
  void scale(float s);
  double squared_norm() const;

 private:
  std::vector<std::vector<float>> grads_;
};

void he_normal(Param& p, int fan_in, std::mt19937_64& rng);

class Conv3d {
 public:
  Conv3d() = default;
  /// Cubic kernel; weight dims [out, in, k, k, k].
  Conv3d(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
         int pad);

  Tensor forward(const ParamStore& p, const Tensor& x) const;
  /// Accumulates weight/bias gradients; returns d/dx when need_input_grad.
  Tensor backward(const ParamStore& p, const Tensor& x, const Tensor& grad_out, GradStore& g,
                  bool need_input_grad = true) const;

  Shape3 output_shape(const Shape3& in) const;
  int weight_index() const noexcept { return weight_; }
  int bias_index() const noexcept { return bias_; }
  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }

 private:
  int weight_ = -1;
  int bias_ = -1;
  int in_ = 0;
  int out_ = 0;
  int k_ = 1;
  int stride_ = 1;
  int pad_ = 0;
};

/// Kernel 2, stride 2 transposed convolution (exact 2x upsampling).
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(ParamStore& store, const std::string& name, int in_channels, int out_channels);

  Tensor forward(const ParamStore& p, const Tensor& x) const;
  Tensor backward(const ParamStore& p, const Tensor& x, const Tensor& grad_out, GradStore& g) const;
  int weight_index() const noexcept { return weight_; }
  int in_channels() const noexcept { return in_; }

 private:
  int weight_ = -1;  // [in, out, 2, 2, 2]
  int bias_ = -1;
  int in_ = 0;
  int out_ = 0;
};

class GroupNorm {
 public:
  struct Cache {
    Tensor normalized;
    std::vector<double> inv_std;  // per group
  };

  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& name, int channels, int groups);

  Tensor forward(const ParamStore& p, const Tensor& x, Cache* cache) const;
  Tensor backward(const ParamStore& p, const Cache& cache, const Tensor& grad_out, GradStore& g) const;

  static constexpr double kEps = 1e-5;

 private:
  int gamma_ = -1;
  int beta_ = -1;
  int channels_ = 0;
  int groups_ = 1;
};

void relu_inplace(Tensor& x);
/// Zeroes grad where the ReLU output was not positive.
void relu_backward_inplace(const Tensor& activated, Tensor& grad);

void add_inplace(Tensor& dst, const Tensor& src);

/// Pre-activation residual block: x + conv(relu(gn(conv(relu(gn(x)))))).
class ResBlock {
 public:
  struct Cache {
    GroupNorm::Cache n1;
    Tensor a1;
    GroupNorm::Cache n2;
    Tensor a2;
  };

  ResBlock() = default;
  ResBlock(ParamStore& store, const std::string& name, int channels, int groups);

  Tensor forward(const ParamStore& p, const Tensor& x, Cache* cache) const;
  Tensor backward(const ParamStore& p, const Cache& cache, const Tensor& grad_out, GradStore& g) const;

 private:
  GroupNorm n1_;
  Conv3d c1_;
  GroupNorm n2_;
  Conv3d c2_;
};

}  // namespace hdseg::nn
