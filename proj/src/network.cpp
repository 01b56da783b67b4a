#include "hdseg/network.hpp"

#include <algorithm>
#include <bit>

#include "hdseg/losses.hpp"

namespace hdseg::net {

void NetworkConfig::validate() const {
  if (n_modalities < 1 || n_modalities > 16) throw ConfigError("network: n_modalities must be in 1..16");
  if (n_classes < 2) throw ConfigError("network: n_classes must be >= 2");
  if (levels < 1) throw ConfigError("network: levels must be >= 1");
  if (base_channels < 1 || norm_groups < 1) throw ConfigError("network: channels and groups must be >= 1");
  if (base_channels % norm_groups != 0) {
    throw ConfigError("network: base_channels " + std::to_string(base_channels) + " not divisible by norm_groups " +
                      std::to_string(norm_groups));
  }
  const int div = 1 << (levels - 1);
  for (int dim : {patch_shape.d, patch_shape.h, patch_shape.w}) {
    if (dim < 2 * div || dim % div != 0) {
      throw ConfigError("network: patch " + patch_shape.str() + " must be divisible by " + std::to_string(div) +
                        " with at least two voxels per axis at the bottleneck");
    }
  }
}

Shape3 NetworkConfig::level_shape(const Shape3& s, int level) const {
  return {s.d >> level, s.h >> level, s.w >> level};
}

// ---------------------------------------------------------------------------

ModalitySubset::ModalitySubset(int n_modalities, std::uint32_t bits) : n_(n_modalities), bits_(bits) {
  if (n_modalities < 1 || n_modalities > 16) throw ConfigError("subset: modality count must be in 1..16");
  const std::uint32_t all = (1u << n_modalities) - 1u;
  if (bits == 0 || (bits & ~all) != 0) throw ConfigError("subset: must be a non-empty subset of the modalities");
}

ModalitySubset ModalitySubset::full(int n_modalities) {
  return ModalitySubset(n_modalities, (1u << n_modalities) - 1u);
}

ModalitySubset ModalitySubset::of(int n_modalities, std::initializer_list<int> members) {
  std::uint32_t bits = 0;
  for (int m : members) {
    if (m < 0 || m >= n_modalities) throw ConfigError("subset: modality index out of range");
    bits |= 1u << m;
  }
  return ModalitySubset(n_modalities, bits);
}

int ModalitySubset::size() const noexcept { return std::popcount(bits_); }

std::vector<int> ModalitySubset::members() const {
  std::vector<int> out;
  for (int i = 0; i < n_; ++i)
    if (contains(i)) out.push_back(i);
  return out;
}

std::string ModalitySubset::label(std::span<const std::string> names) const {
  std::string out;
  for (int i : members()) {
    if (!out.empty()) out += '+';
    out += i < static_cast<int>(names.size()) ? names[i] : std::to_string(i);
  }
  return out;
}

std::vector<ModalitySubset> enumerate_subsets(int n) {
  if (n <= 0) throw ConfigError("enumerate_subsets: need at least one modality");
  if (n > 16) throw ConfigError("enumerate_subsets: at most 16 modalities");
  std::vector<ModalitySubset> out;
  std::vector<int> idx;
  for (int size = n; size >= 1; --size) {
    // Lexicographic combinations of `size` indices out of n.
    idx.resize(size);
    for (int i = 0; i < size; ++i) idx[i] = i;
    while (true) {
      std::uint32_t bits = 0;
      for (int i : idx) bits |= 1u << i;
      out.emplace_back(n, bits);
      int pos = size - 1;
      while (pos >= 0 && idx[pos] == n - size + pos) --pos;
      if (pos < 0) break;
      ++idx[pos];
      for (int i = pos + 1; i < size; ++i) idx[i] = idx[i - 1] + 1;
    }
  }
  return out;
}

namespace {

// Elementwise mean whose result does not depend on the order of `srcs`:
// each element's addends are summed in sorted order.
void ordered_mean(std::span<const std::vector<double>* const> srcs, std::vector<double>& out) {
  const std::size_t k = srcs.size();
  const double inv = 1.0 / static_cast<double>(k);
  if (k == 1) {
    out = *srcs[0];
    return;
  }
  std::vector<double> vals(k);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) vals[j] = (*srcs[j])[i];
    std::sort(vals.begin(), vals.end());
    double s = 0.0;
    for (double v : vals) s += v;
    out[i] = s * inv;
  }
}

}  // namespace

LatentFeature fuse_features(std::span<const LatentFeature* const> deeps) {
  if (deeps.empty()) throw DegenerateInputError("fuse_features: empty set");
  LatentFeature out(deeps[0]->channels(), deeps[0]->shape());
  std::vector<const std::vector<double>*> srcs;
  for (const LatentFeature* d : deeps) {
    if (!d->same_layout(out)) throw DimensionError("fuse_features: feature layouts differ");
    srcs.push_back(&d->values());
  }
  ordered_mean(srcs, out.values());
  return out;
}

ProbabilityField fuse_predictions(std::span<const ProbabilityField* const> preds) {
  if (preds.empty()) throw DegenerateInputError("fuse_predictions: empty set");
  ProbabilityField out(preds[0]->n_classes(), preds[0]->shape());
  std::vector<const std::vector<double>*> srcs;
  for (const ProbabilityField* p : preds) {
    if (!p->same_layout(out)) throw DimensionError("fuse_predictions: field layouts differ");
    srcs.push_back(&p->tensor().values());
  }
  ordered_mean(srcs, out.tensor().values());
  return out;
}

// ---------------------------------------------------------------------------

Network::Network(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build();
  initialise(seed);
}

Network::Network(const NetworkConfig& cfg, nn::ParamStore params) : cfg_(cfg) {
  cfg_.validate();
  build();
  if (params.size() != params_.size()) throw ConfigError("checkpoint parameter count does not match the network");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& mine = params_[static_cast<int>(i)];
    auto& theirs = params[static_cast<int>(i)];
    if (mine.name != theirs.name || mine.dims != theirs.dims) {
      throw ConfigError("checkpoint parameter '" + theirs.name + "' does not match network parameter '" + mine.name +
                        "'");
    }
    mine.value = std::move(theirs.value);
  }
}

void Network::build() {
  const int c0 = cfg_.channels_at(0);
  if (cfg_.parallel) {
    for (int i = 0; i < cfg_.n_modalities; ++i) {
      stems_.emplace_back(params_, "stem." + std::to_string(i), 1, c0, 3, 1, 1);
    }
  } else {
    stems_.emplace_back(params_, "stem.joint", cfg_.n_modalities, c0, 3, 1, 1);
  }
  for (int l = 0; l < cfg_.levels; ++l) {
    const int c = cfg_.channels_at(l);
    enc_.emplace_back(params_, "enc." + std::to_string(l), c, cfg_.norm_groups);
    if (l + 1 < cfg_.levels) {
      down_.emplace_back(params_, "down." + std::to_string(l), c, cfg_.channels_at(l + 1), 2, 2, 0);
    }
  }
  for (int l = 0; l + 1 < cfg_.levels; ++l) {
    up_.emplace_back(params_, "up." + std::to_string(l), cfg_.channels_at(l + 1), cfg_.channels_at(l));
    dec_.emplace_back(params_, "dec." + std::to_string(l), cfg_.channels_at(l), cfg_.norm_groups);
  }
  head_norm_ = nn::GroupNorm(params_, "head.norm", c0, cfg_.norm_groups);
  head_ = nn::Conv3d(params_, "head.conv", c0, cfg_.n_classes, 1, 1, 0);
}

void Network::initialise(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_.all()) {
    if (p.dims.size() != 5) continue;  // biases and norm affine keep their fills
    const bool transposed = p.name.rfind("up.", 0) == 0;
    const int fan_in = transposed ? p.dims[0] : p.dims[1] * p.dims[2] * p.dims[3] * p.dims[4];
    nn::he_normal(p, fan_in, rng);
  }
}

Tensor Network::encode_modality(const ModalityVolume& x, int modality, BranchCache* cache) const {
  if (!cfg_.parallel) throw ConfigError("encode_modality: early-fusion network has no per-modality stems");
  if (modality < 0 || modality >= cfg_.n_modalities) throw ConfigError("encode_modality: modality out of range");
  if (x.channels() != 1) throw DimensionError("encode_modality: expected a single-channel volume");
  Tensor e = stems_[modality].forward(params_, x);
  if (cache) {
    cache->input = x;
    cache->encoded = e;
  }
  return e;
}

Tensor Network::encode_joint(std::span<const ModalityVolume* const> volumes, const ModalitySubset& subset,
                             BranchCache* cache) const {
  if (cfg_.parallel) throw ConfigError("encode_joint: parallel network has per-modality stems");
  if (static_cast<int>(volumes.size()) != cfg_.n_modalities) throw DimensionError("encode_joint: modality count");
  std::optional<Shape3> shape;
  for (int i : subset.members()) {
    if (!volumes[i]) throw DimensionError("encode_joint: subset modality " + std::to_string(i) + " not supplied");
    if (shape && !(*shape == volumes[i]->shape())) throw DimensionError("encode_joint: volume shapes differ");
    shape = volumes[i]->shape();
  }
  Tensor x(cfg_.n_modalities, *shape);
  for (int i : subset.members()) std::copy(volumes[i]->data(), volumes[i]->data() + x.voxels(), x.channel(i));
  Tensor e = stems_[0].forward(params_, x);
  if (cache) {
    cache->input = std::move(x);
    cache->encoded = e;
  }
  return e;
}

BackboneOutput Network::backbone_forward(const Tensor& encoded, BranchCache* cache) const {
  invocations_.fetch_add(1);
  const int levels = cfg_.levels;
  const int div = 1 << (levels - 1);
  const Shape3 s = encoded.shape();
  if (encoded.channels() != cfg_.channels_at(0)) throw DimensionError("backbone: encoded channel count");
  if (s.d % div || s.h % div || s.w % div) {
    throw DimensionError("backbone: input " + s.str() + " not divisible by " + std::to_string(div));
  }
  BranchCache local;
  BranchCache& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  c.enc.assign(levels, {});
  c.enc_out.assign(levels, {});
  c.dec.assign(levels > 1 ? levels - 1 : 0, {});
  c.dec_out.assign(levels > 1 ? levels - 1 : 0, {});

  BackboneOutput out;
  Tensor cur = encoded;
  for (int l = 0; l < levels; ++l) {
    Tensor e = enc_[l].forward(params_, cur, keep ? &c.enc[l] : nullptr);
    out.features.push_back(e.cast<double>());
    if (l + 1 < levels) cur = down_[l].forward(params_, e);
    c.enc_out[l] = std::move(e);
  }
  Tensor u = c.enc_out[levels - 1];
  for (int l = levels - 2; l >= 0; --l) {
    Tensor up = up_[l].forward(params_, u);
    nn::add_inplace(up, c.enc_out[l]);
    u = dec_[l].forward(params_, up, keep ? &c.dec[l] : nullptr);
    if (keep) c.dec_out[l] = u;
  }
  Tensor a = head_norm_.forward(params_, u, keep ? &c.head_norm : nullptr);
  nn::relu_inplace(a);
  Tensor logits = head_.forward(params_, a);
  out.pred = losses::softmax(logits.cast<double>());
  if (keep) {
    c.head_act = std::move(a);
    c.pred = out.pred;
  } else {
    c.enc_out.clear();
  }
  return out;
}

void Network::backward(const BranchCache& c, int modality, const ProbabilityField* grad_pred,
                       std::span<const LatentFeature* const> grad_features, nn::GradStore& g) const {
  const int levels = cfg_.levels;
  if (!grad_features.empty() && static_cast<int>(grad_features.size()) != levels) {
    throw DimensionError("backward: feature gradients must cover every level (null for none)");
  }
  auto injected = [&](int l) -> const LatentFeature* {
    return grad_features.empty() ? nullptr : grad_features[l];
  };

  // d/d(top decoder output), or d/d(bottleneck) when there is no decoder.
  Tensor g_u(cfg_.channels_at(0), c.enc_out[0].shape());
  if (grad_pred) {
    const auto g_logits = losses::softmax_backward(c.pred, *grad_pred).cast<float>();
    Tensor g_a = head_.backward(params_, c.head_act, g_logits, g);
    nn::relu_backward_inplace(c.head_act, g_a);
    g_u = head_norm_.backward(params_, c.head_norm, g_a, g);
  }

  std::vector<Tensor> g_skip(levels);
  for (int l = 0; l + 1 < levels; ++l) {
    Tensor g_in = dec_[l].backward(params_, c.dec[l], g_u, g);
    g_skip[l] = g_in;
    const Tensor& up_input = (l == levels - 2) ? c.enc_out[levels - 1] : c.dec_out[l + 1];
    g_u = up_[l].backward(params_, up_input, g_in, g);
  }
  // g_u now holds d/d(bottleneck) from the decoder path.
  Tensor g_e = std::move(g_u);
  for (int l = levels - 1; l >= 0; --l) {
    if (const LatentFeature* gf = injected(l)) {
      if (gf->channels() != g_e.channels() || !(gf->shape() == g_e.shape())) {
        throw DimensionError("backward: feature gradient layout mismatch at level " + std::to_string(l));
      }
      auto& dst = g_e.values();
      const auto& src = gf->values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<float>(src[i]);
    }
    Tensor g_in = enc_[l].backward(params_, c.enc[l], g_e, g);
    if (l == 0) {
      const nn::Conv3d& stem = cfg_.parallel ? stems_.at(modality) : stems_[0];
      stem.backward(params_, c.input, g_in, g, /*need_input_grad=*/false);
      break;
    }
    Tensor g_prev = down_[l - 1].backward(params_, c.enc_out[l - 1], g_in, g);
    nn::add_inplace(g_prev, g_skip[l - 1]);
    g_e = std::move(g_prev);
  }
}

ForwardOutputs Network::forward(std::span<const ModalityVolume* const> volumes, const ModalitySubset& subset) const {
  if (static_cast<int>(volumes.size()) != cfg_.n_modalities || subset.n_modalities() != cfg_.n_modalities) {
    throw DimensionError("forward: expected " + std::to_string(cfg_.n_modalities) + " modality slots");
  }
  ForwardOutputs out;
  if (!cfg_.parallel) {
    BackboneOutput o = backbone_forward(encode_joint(volumes, subset));
    out.fused_pred = std::move(o.pred);
    out.subset_deep = o.deep();
    return out;
  }
  for (int i : subset.members()) {
    if (!volumes[i]) throw DimensionError("forward: subset modality " + std::to_string(i) + " not supplied");
    BackboneOutput o = backbone_forward(encode_modality(*volumes[i], i));
    out.per_modality_deep.emplace(i, o.deep());
    out.per_modality_preds.emplace(i, std::move(o.pred));
  }
  std::vector<const ProbabilityField*> preds;
  std::vector<const LatentFeature*> deeps;
  for (const auto& [i, p] : out.per_modality_preds) preds.push_back(&p);
  for (const auto& [i, d] : out.per_modality_deep) deeps.push_back(&d);
  out.fused_pred = fuse_predictions(preds);
  out.subset_deep = fuse_features(deeps);
  if (subset.is_full()) out.full_deep = out.subset_deep;
  return out;
}

}  // namespace hdseg::net
