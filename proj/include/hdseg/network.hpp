#pragma once
// Single-modality parallel segmentation network: one convolutional stem per
// modality feeding a shared residual 3D U-Net, with a dynamic-combination
// step that averages whatever modality branches are present.

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hdseg/grid.hpp"
#include "hdseg/nn.hpp"

namespace hdseg::net {

struct NetworkConfig {
  int n_modalities = 4;
  int n_classes = 4;
  int levels = 2;
  int base_channels = 8;
  int norm_groups = 4;
  Shape3 patch_shape{32, 32, 32};
  /// false selects the early-fusion ablation: one stem over all modality
  /// channels (absent ones zeroed) and a single backbone pass.
  bool parallel = true;

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  /// Spatial shape of encoder level `level` for an input of shape `s`.
  Shape3 level_shape(const Shape3& s, int level) const;
  bool operator==(const NetworkConfig&) const = default;
};

/// Non-empty set of modality indices, stored as a bitmask.
class ModalitySubset {
 public:
  ModalitySubset(int n_modalities, std::uint32_t bits);
  static ModalitySubset full(int n_modalities);
  static ModalitySubset of(int n_modalities, std::initializer_list<int> members);

  int n_modalities() const noexcept { return n_; }
  std::uint32_t bits() const noexcept { return bits_; }
  bool contains(int i) const noexcept { return (bits_ >> i) & 1u; }
  int size() const noexcept;
  std::vector<int> members() const;
  bool is_full() const noexcept { return size() == n_; }
  /// e.g. "t1+t2" given modality names.
  std::string label(std::span<const std::string> names) const;
  bool operator==(const ModalitySubset&) const = default;

 private:
  int n_;
  std::uint32_t bits_;
};

/// All 2^n - 1 subsets: decreasing size, lexicographic member order within a size.
std::vector<ModalitySubset> enumerate_subsets(int n);

/// Elementwise mean. Throws DegenerateInputError on an empty set and
/// DimensionError on layout disagreement.
LatentFeature fuse_features(std::span<const LatentFeature* const> deeps);
ProbabilityField fuse_predictions(std::span<const ProbabilityField* const> preds);

struct BackboneOutput {
  ProbabilityField pred;
  std::vector<LatentFeature> features;  // encoder output per level; back() is the bottleneck
  const LatentFeature& deep() const { return features.back(); }
};

/// Activations retained for one branch's backward pass.
struct BranchCache {
  Tensor input;
  Tensor encoded;
  std::vector<nn::ResBlock::Cache> enc;
  std::vector<Tensor> enc_out;
  std::vector<nn::ResBlock::Cache> dec;
  std::vector<Tensor> dec_out;
  nn::GroupNorm::Cache head_norm;
  Tensor head_act;
  ProbabilityField pred;
};

struct ForwardOutputs {
  std::map<int, ProbabilityField> per_modality_preds;
  std::map<int, LatentFeature> per_modality_deep;
  ProbabilityField fused_pred;
  std::optional<LatentFeature> full_deep;  // present when every modality was fed
  LatentFeature subset_deep;
};

class Network {
 public:
  Network(const NetworkConfig& cfg, std::uint64_t seed);
  /// Rebuilds the layer graph around existing parameter values.
  Network(const NetworkConfig& cfg, nn::ParamStore params);

  const NetworkConfig& config() const noexcept { return cfg_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  /// f_i(x): modality-specific stem. Parallel networks only.
  Tensor encode_modality(const ModalityVolume& x, int modality, BranchCache* cache = nullptr) const;
  /// Early-fusion stem over all channels; modalities outside `subset` are zeroed.
  Tensor encode_joint(std::span<const ModalityVolume* const> volumes, const ModalitySubset& subset,
                      BranchCache* cache = nullptr) const;

  /// T(.; theta): shared backbone. Counts as one backbone invocation.
  BackboneOutput backbone_forward(const Tensor& encoded, BranchCache* cache = nullptr) const;

  /// Backpropagates d/dpred and optional d/dfeature[level] through backbone and
  /// stem (`modality` selects the stem; ignored for early fusion).
  void backward(const BranchCache& cache, int modality, const ProbabilityField* grad_pred,
                std::span<const LatentFeature* const> grad_features, nn::GradStore& grads) const;

  /// Dynamic-combination forward over a subset. `volumes[i]` may be null for
  /// modalities outside the subset and is never read for them.
  ForwardOutputs forward(std::span<const ModalityVolume* const> volumes, const ModalitySubset& subset) const;

  std::size_t backbone_invocations() const noexcept { return invocations_.load(); }
  void reset_invocations() noexcept { invocations_.store(0); }

 private:
  void build();
  void initialise(std::uint64_t seed);

  NetworkConfig cfg_;
  nn::ParamStore params_;
  std::vector<nn::Conv3d> stems_;
  std::vector<nn::ResBlock> enc_;
  std::vector<nn::Conv3d> down_;
  std::vector<nn::ConvTranspose3d> up_;
  std::vector<nn::ResBlock> dec_;
  nn::GroupNorm head_norm_;
  nn::Conv3d head_;
  mutable std::atomic<std::size_t> invocations_{0};
};

}  // namespace hdseg::net
