#pragma once
// Training objectives: soft Dice, Hölder segmentation loss, the Gaussian
// variational mutual-information transfer loss, and their weighted total.
// Every loss can also return its gradient with respect to its inputs.

#include <span>
#include <vector>

#include "hdseg/divergence.hpp"
#include "hdseg/grid.hpp"

namespace hdseg::losses {

using divergence::DivergenceKind;
using divergence::HolderExponent;

/// Floor used when turning one-hot labels into target distributions.
inline constexpr double kLabelFloor = 1e-12;

struct LossWeights {
  double lambda1 = 0.5;  // mutual-information transfer
  double lambda2 = 1.0;  // divergence segmentation term
  void validate() const;
};

/// Row softmax over the class axis.
ProbabilityField softmax(const BasicTensor<double>& logits);
/// d/dlogits given d/dprobs and the softmax output.
BasicTensor<double> softmax_backward(const ProbabilityField& probs, const ProbabilityField& grad_probs);

/// 1 - (2/J) sum_j <p_j, y_j> / (|p_j|^2 + |y_j|^2). A class absent from
/// both prediction and label (zero denominator) counts as perfectly matched.
double dice_loss(const ProbabilityField& pred, const LabelField& label, ProbabilityField* grad = nullptr);

/// Voxel-mean divergence between pred and the floored one-hot label.
double seg_divergence_loss(const ProbabilityField& pred, const LabelField& label, const DivergenceKind& kind,
                           ProbabilityField* grad = nullptr);

inline double holder_seg_loss(const ProbabilityField& pred, const LabelField& label, const HolderExponent& exp,
                              ProbabilityField* grad = nullptr) {
  return seg_divergence_loss(pred, label, DivergenceKind{divergence::DivergenceTag::holder, exp}, grad);
}

enum class MIReduction {
  sum,   // literal sum over channels and voxels
  mean,  // divided by the element count of each level
};

/// Variational conditional q(d_f | d_m) = N(mu(d_m), diag(sigma_c^2)) per
/// feature level. mu is a 1x1x1 channel-mixing map; sigma_c = exp(log_sigma_c).
class MIHead {
 public:
  struct Level {
    int channels = 0;
    std::vector<double> weight;     // [C_out x C_in], row-major
    std::vector<double> bias;       // [C]
    std::vector<double> log_sigma;  // [C]
    double gamma = 1.0;
  };

  MIHead() = default;
  /// Identity mean map, zero bias, sigma = 1, gamma_k = k / K.
  explicit MIHead(std::vector<int> channels_per_level, MIReduction reduction = MIReduction::sum);

  std::size_t levels() const noexcept { return levels_.size(); }
  Level& level(std::size_t k) { return levels_.at(k); }
  const Level& level(std::size_t k) const { return levels_.at(k); }
  MIReduction reduction() const noexcept { return reduction_; }
  void set_reduction(MIReduction r) noexcept { reduction_ = r; }

  LatentFeature predict_mean(std::size_t k, const LatentFeature& sub) const;

  /// Throws ConfigError if gammas are not positive and non-decreasing.
  void validate() const;

 private:
  std::vector<Level> levels_;
  MIReduction reduction_ = MIReduction::sum;
};

struct MIGradients {
  std::vector<LatentFeature> full;  // d/d d_f
  std::vector<LatentFeature> sub;   // d/d d_m
  std::vector<MIHead::Level> head;  // same layout as the head; gamma unused
};

/// sum_k gamma_k * R( log sigma_c + (d_f - mu(d_m))^2 / (2 sigma_c^2) ), where R
/// is the head's reduction. The additive Gaussian constant is omitted.
double mi_transfer_loss(std::span<const LatentFeature> full_feats, std::span<const LatentFeature> sub_feats,
                        const MIHead& head, MIGradients* grad = nullptr);

/// The dropped constant 0.5*log(2*pi) accumulated the same way.
double mi_constant(std::span<const LatentFeature> full_feats, const MIHead& head);

struct LossBreakdown {
  double dice = 0.0;
  double mi = 0.0;
  double hd = 0.0;
  double total = 0.0;
};

struct TotalGradients {
  ProbabilityField pred;
  MIGradients mi;
};

/// dice + lambda1 * mi + lambda2 * seg-divergence(kind). The MI term and its
/// gradient are skipped when lambda1 == 0, the divergence term when lambda2 == 0.
/// Throws NonFiniteLossError naming the first component that is not finite.
LossBreakdown total_loss(const ProbabilityField& pred, const LabelField& label,
                         std::span<const LatentFeature> full_feats, std::span<const LatentFeature> sub_feats,
                         const MIHead& head, const LossWeights& w, const DivergenceKind& seg_kind,
                         TotalGradients* grad = nullptr);

inline LossBreakdown total_loss(const ProbabilityField& pred, const LabelField& label,
                                std::span<const LatentFeature> full_feats, std::span<const LatentFeature> sub_feats,
                                const MIHead& head, const LossWeights& w, const HolderExponent& exp,
                                TotalGradients* grad = nullptr) {
  return total_loss(pred, label, full_feats, sub_feats, head, w,
                    DivergenceKind{divergence::DivergenceTag::holder, exp}, grad);
}

}  // namespace hdseg::losses
