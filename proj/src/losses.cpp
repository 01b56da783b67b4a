#include "hdseg/losses.hpp"

#include <cmath>
#include <numbers>

namespace hdseg::losses {

void LossWeights::validate() const {
  if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || lambda1 < 0.0 || lambda2 < 0.0) {
    throw ConfigError("loss weights must be finite and non-negative");
  }
}

ProbabilityField softmax(const BasicTensor<double>& logits) {
  const int j_count = logits.channels();
  ProbabilityField out(j_count, logits.shape());
  const std::size_t n = logits.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    double m = logits.channel(0)[v];
    for (int j = 1; j < j_count; ++j) m = std::max(m, logits.channel(j)[v]);
    double s = 0.0;
    for (int j = 0; j < j_count; ++j) {
      const double e = std::exp(logits.channel(j)[v] - m);
      out.at(j, v) = e;
      s += e;
    }
    for (int j = 0; j < j_count; ++j) out.at(j, v) /= s;
  }
  return out;
}

BasicTensor<double> softmax_backward(const ProbabilityField& probs, const ProbabilityField& grad_probs) {
  if (!probs.same_layout(grad_probs)) throw DimensionError("softmax backward: layout mismatch");
  BasicTensor<double> out(probs.n_classes(), probs.shape());
  for (std::size_t v = 0; v < probs.voxels(); ++v) {
    double dot = 0.0;
    for (int j = 0; j < probs.n_classes(); ++j) dot += probs.at(j, v) * grad_probs.at(j, v);
    for (int j = 0; j < probs.n_classes(); ++j) {
      out.channel(j)[v] = probs.at(j, v) * (grad_probs.at(j, v) - dot);
    }
  }
  return out;
}

double dice_loss(const ProbabilityField& pred, const LabelField& label, ProbabilityField* grad) {
  if (pred.n_classes() != label.n_classes()) {
    throw DimensionError("dice: prediction has " + std::to_string(pred.n_classes()) + " classes, label " +
                         std::to_string(label.n_classes()));
  }
  if (!(pred.shape() == label.shape())) throw DimensionError("dice: grid shapes differ");
  const int j_count = pred.n_classes();
  if (j_count < 2) throw DimensionError("dice: need at least two classes");
  label.validate();

  std::vector<double> inter(j_count, 0.0), denom(j_count, 0.0);
  const std::size_t n = pred.voxels();
  for (int j = 0; j < j_count; ++j) {
    double a = 0.0, pp = 0.0, yy = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double p = pred.at(j, v);
      const double y = label[v] == j ? 1.0 : 0.0;
      a += p * y;
      pp += p * p;
      yy += y;
    }
    inter[j] = a;
    denom[j] = pp + yy;
  }
  const double scale = 2.0 / j_count;
  double acc = 0.0;
  for (int j = 0; j < j_count; ++j) acc += denom[j] == 0.0 ? 0.5 : inter[j] / denom[j];  // NaN must propagate
  if (grad) {
    *grad = ProbabilityField(j_count, pred.shape());
    for (int j = 0; j < j_count; ++j) {
      if (denom[j] == 0.0) continue;
      const double d2 = denom[j] * denom[j];
      for (std::size_t v = 0; v < n; ++v) {
        const double y = label[v] == j ? 1.0 : 0.0;
        grad->at(j, v) = -scale * (y * denom[j] - inter[j] * 2.0 * pred.at(j, v)) / d2;
      }
    }
  }
  return 1.0 - scale * acc;
}

double seg_divergence_loss(const ProbabilityField& pred, const LabelField& label, const DivergenceKind& kind,
                           ProbabilityField* grad) {
  if (pred.n_classes() != label.n_classes() || !(pred.shape() == label.shape())) {
    throw DimensionError("segmentation divergence: prediction and label layouts differ");
  }
  const ProbabilityField target = label_to_field(label, kLabelFloor);
  return divergence::batched_divergence(pred, target, kind, grad);
}

MIHead::MIHead(std::vector<int> channels_per_level, MIReduction reduction) : reduction_(reduction) {
  if (channels_per_level.empty()) throw ConfigError("MI head needs at least one level");
  const double k_total = static_cast<double>(channels_per_level.size());
  for (std::size_t k = 0; k < channels_per_level.size(); ++k) {
    const int c = channels_per_level[k];
    if (c < 1) throw ConfigError("MI head level with no channels");
    Level lv;
    lv.channels = c;
    lv.weight.assign(static_cast<std::size_t>(c) * c, 0.0);
    for (int i = 0; i < c; ++i) lv.weight[static_cast<std::size_t>(i) * c + i] = 1.0;
    lv.bias.assign(c, 0.0);
    lv.log_sigma.assign(c, 0.0);
    lv.gamma = static_cast<double>(k + 1) / k_total;
    levels_.push_back(std::move(lv));
  }
}

void MIHead::validate() const {
  double prev = 0.0;
  for (const auto& lv : levels_) {
    if (!(lv.gamma > 0.0) || lv.gamma < prev) throw ConfigError("MI layer weights must be positive and non-decreasing");
    prev = lv.gamma;
  }
}

LatentFeature MIHead::predict_mean(std::size_t k, const LatentFeature& sub) const {
  const Level& lv = levels_.at(k);
  if (sub.channels() != lv.channels) throw DimensionError("MI head: channel count differs from level");
  LatentFeature mu(lv.channels, sub.shape());
  const std::size_t n = sub.voxels();
  for (int c = 0; c < lv.channels; ++c) {
    double* dst = mu.channel(c);
    std::fill(dst, dst + n, lv.bias[c]);
    for (int ci = 0; ci < lv.channels; ++ci) {
      const double w = lv.weight[static_cast<std::size_t>(c) * lv.channels + ci];
      if (w == 0.0) continue;
      const double* src = sub.channel(ci);
      for (std::size_t v = 0; v < n; ++v) dst[v] += w * src[v];
    }
  }
  return mu;
}

double mi_transfer_loss(std::span<const LatentFeature> full_feats, std::span<const LatentFeature> sub_feats,
                        const MIHead& head, MIGradients* grad) {
  if (full_feats.size() != head.levels() || sub_feats.size() != head.levels()) {
    throw ConfigError("MI loss: head has " + std::to_string(head.levels()) + " levels, got " +
                      std::to_string(full_feats.size()) + " full / " + std::to_string(sub_feats.size()) +
                      " missing-modality features");
  }
  if (grad) {
    grad->full.clear();
    grad->sub.clear();
    grad->head.clear();
  }
  double total = 0.0;
  for (std::size_t k = 0; k < head.levels(); ++k) {
    const auto& lv = head.level(k);
    const LatentFeature& f = full_feats[k];
    const LatentFeature& m = sub_feats[k];
    if (!f.same_layout(m) || f.channels() != lv.channels) {
      throw DimensionError("MI loss: feature layout mismatch at level " + std::to_string(k));
    }
    const LatentFeature mu = head.predict_mean(k, m);
    const std::size_t n = f.voxels();
    const double norm = head.reduction() == MIReduction::mean ? 1.0 / static_cast<double>(f.size()) : 1.0;
    const double scale = lv.gamma * norm;

    LatentFeature g_mu;
    if (grad) {
      grad->full.emplace_back(f.channels(), f.shape());
      g_mu = LatentFeature(f.channels(), f.shape());
      MIHead::Level gl;
      gl.channels = lv.channels;
      gl.weight.assign(lv.weight.size(), 0.0);
      gl.bias.assign(lv.channels, 0.0);
      gl.log_sigma.assign(lv.channels, 0.0);
      grad->head.push_back(std::move(gl));
    }
    double level_sum = 0.0;
    for (int c = 0; c < lv.channels; ++c) {
      const double log_sigma = lv.log_sigma[c];
      const double inv_var = std::exp(-2.0 * log_sigma);
      const double* fc = f.channel(c);
      const double* mc = mu.channel(c);
      double sq = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        const double r = fc[v] - mc[v];
        sq += r * r;
      }
      level_sum += static_cast<double>(n) * log_sigma + 0.5 * sq * inv_var;
      if (grad) {
        double* gf = grad->full.back().channel(c);
        double* gm = g_mu.channel(c);
        for (std::size_t v = 0; v < n; ++v) {
          const double d = scale * (fc[v] - mc[v]) * inv_var;
          gf[v] = d;
          gm[v] = -d;
        }
        grad->head.back().log_sigma[c] = scale * (static_cast<double>(n) - sq * inv_var);
      }
    }
    total += scale * level_sum;

    if (grad) {
      // Pull d/dmu back through the 1x1x1 map.
      auto& gl = grad->head.back();
      LatentFeature gs(m.channels(), m.shape());
      for (int c = 0; c < lv.channels; ++c) {
        const double* gm = g_mu.channel(c);
        double b = 0.0;
        for (std::size_t v = 0; v < n; ++v) b += gm[v];
        gl.bias[c] = b;
        for (int ci = 0; ci < lv.channels; ++ci) {
          const double* src = m.channel(ci);
          double acc = 0.0;
          for (std::size_t v = 0; v < n; ++v) acc += gm[v] * src[v];
          gl.weight[static_cast<std::size_t>(c) * lv.channels + ci] = acc;
          const double w = lv.weight[static_cast<std::size_t>(c) * lv.channels + ci];
          if (w == 0.0) continue;
          double* dst = gs.channel(ci);
          for (std::size_t v = 0; v < n; ++v) dst[v] += w * gm[v];
        }
      }
      grad->sub.push_back(std::move(gs));
    }
  }
  return total;
}

double mi_constant(std::span<const LatentFeature> full_feats, const MIHead& head) {
  if (full_feats.size() != head.levels()) throw ConfigError("MI constant: level count mismatch");
  const double per_element = 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (std::size_t k = 0; k < head.levels(); ++k) {
    const double count = static_cast<double>(full_feats[k].size());
    const double norm = head.reduction() == MIReduction::mean ? 1.0 / count : 1.0;
    total += head.level(k).gamma * norm * count * per_element;
  }
  return total;
}

LossBreakdown total_loss(const ProbabilityField& pred, const LabelField& label,
                         std::span<const LatentFeature> full_feats, std::span<const LatentFeature> sub_feats,
                         const MIHead& head, const LossWeights& w, const DivergenceKind& seg_kind,
                         TotalGradients* grad) {
  w.validate();
  LossBreakdown out;
  ProbabilityField g_dice;
  out.dice = dice_loss(pred, label, grad ? &g_dice : nullptr);
  if (!std::isfinite(out.dice)) throw NonFiniteLossError("dice", "non-finite dice loss");
  if (grad) grad->pred = std::move(g_dice);

  if (w.lambda2 > 0.0) {
    ProbabilityField g_hd;
    out.hd = seg_divergence_loss(pred, label, seg_kind, grad ? &g_hd : nullptr);
    if (!std::isfinite(out.hd)) throw NonFiniteLossError("hd", "non-finite divergence loss");
    if (grad) {
      auto& gp = grad->pred.tensor().values();
      const auto& gh = g_hd.tensor().values();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += w.lambda2 * gh[i];
    }
  }
  if (w.lambda1 > 0.0) {
    MIGradients g_mi;
    out.mi = mi_transfer_loss(full_feats, sub_feats, head, grad ? &g_mi : nullptr);
    if (!std::isfinite(out.mi)) throw NonFiniteLossError("mi", "non-finite mutual-information loss");
    if (grad) {
      auto scale_all = [&](std::vector<LatentFeature>& v) {
        for (auto& t : v)
          for (double& x : t.values()) x *= w.lambda1;
      };
      scale_all(g_mi.full);
      scale_all(g_mi.sub);
      for (auto& lv : g_mi.head) {
        for (double& x : lv.weight) x *= w.lambda1;
        for (double& x : lv.bias) x *= w.lambda1;
        for (double& x : lv.log_sigma) x *= w.lambda1;
      }
      grad->mi = std::move(g_mi);
    }
  } else if (grad) {
    grad->mi = MIGradients{};
  }
  out.total = out.dice + w.lambda1 * out.mi + w.lambda2 * out.hd;
  return out;
}

}  // namespace hdseg::losses
