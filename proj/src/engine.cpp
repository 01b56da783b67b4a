#include "hdseg/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "hdseg/checkpoint.hpp"

namespace hdseg::engine {

namespace fs = std::filesystem;
using net::ModalitySubset;

double dsc(const data::Mask& pred, const data::Mask& truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("dsc: masks have " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()) +
                         " voxels");
  }
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = truth[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

std::vector<int> mi_feature_levels(const net::NetworkConfig& net_cfg, int mi_levels) {
  if (mi_levels < 1 || mi_levels > net_cfg.levels) {
    throw ConfigError("mi_levels must be in 1.." + std::to_string(net_cfg.levels));
  }
  std::vector<int> out;
  for (int l = net_cfg.levels - mi_levels; l < net_cfg.levels; ++l) out.push_back(l);
  return out;
}

Model make_model(const net::NetworkConfig& net_cfg, const config::LossConfig& loss_cfg, std::uint64_t seed) {
  Model m;
  m.network = std::make_unique<net::Network>(net_cfg, seed);
  std::vector<int> channels;
  for (int l : mi_feature_levels(net_cfg, loss_cfg.mi_levels)) channels.push_back(net_cfg.channels_at(l));
  m.mi_head = losses::MIHead(channels, loss_cfg.reduction());
  return m;
}

Model load_model(const fs::path& checkpoint) {
  net::Checkpoint ck = net::load_checkpoint(checkpoint);
  Model m;
  m.network = std::move(ck.network);
  m.run_config = std::move(ck.run_config);
  if (ck.mi_head) {
    m.mi_head = std::move(*ck.mi_head);
  } else {
    m.mi_head = losses::MIHead({m.network->config().channels_at(m.network->config().levels - 1)});
  }
  return m;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

// Sub-block of a case starting at `origin` with shape `extent`; voxels that
// fall outside the source are zero (background for the label).
struct Window {
  int origin[3] = {0, 0, 0};
  Shape3 extent;
};

ModalityVolume extract(const ModalityVolume& v, const Window& w) {
  const Shape3& s = v.shape();
  ModalityVolume out(1, w.extent);
  for (int z = 0; z < w.extent.d; ++z) {
    const int sz = z + w.origin[0];
    if (sz >= s.d) break;
    for (int y = 0; y < w.extent.h; ++y) {
      const int sy = y + w.origin[1];
      if (sy >= s.h) break;
      const int nx = std::min(w.extent.w, s.w - w.origin[2]);
      std::copy_n(&v.at(0, sz, sy, w.origin[2]), nx, &out.at(0, z, y, 0));
    }
  }
  return out;
}

LabelField extract(const LabelField& l, const Window& w) {
  const Shape3& s = l.shape();
  LabelField out(l.n_classes(), w.extent);
  for (int z = 0; z < w.extent.d && z + w.origin[0] < s.d; ++z) {
    for (int y = 0; y < w.extent.h && y + w.origin[1] < s.h; ++y) {
      for (int x = 0; x < w.extent.w && x + w.origin[2] < s.w; ++x) {
        const std::size_t src =
            (static_cast<std::size_t>(z + w.origin[0]) * s.h + (y + w.origin[1])) * s.w + (x + w.origin[2]);
        out[(static_cast<std::size_t>(z) * w.extent.h + y) * w.extent.w + x] = l[src];
      }
    }
  }
  return out;
}

// Inverse of a zero-origin padding window: keep the leading `shape` block.
ProbabilityField crop_leading(const ProbabilityField& p, const Shape3& shape) {
  if (p.shape() == shape) return p;
  ProbabilityField out(p.n_classes(), shape);
  const Shape3& s = p.shape();
  for (int j = 0; j < p.n_classes(); ++j) {
    for (int z = 0; z < shape.d; ++z) {
      for (int y = 0; y < shape.h; ++y) {
        const std::size_t src = (static_cast<std::size_t>(z) * s.h + y) * s.w;
        const std::size_t dst = (static_cast<std::size_t>(z) * shape.h + y) * shape.w;
        std::copy_n(p.tensor().channel(j) + src, shape.w, out.tensor().channel(j) + dst);
      }
    }
  }
  return out;
}

struct Patch {
  std::vector<ModalityVolume> volumes;
  LabelField label;
};

Patch random_patch(const data::MultimodalCase& c, const net::NetworkConfig& cfg, std::mt19937_64& rng) {
  const int div = 1 << (cfg.levels - 1);
  const int dims[3] = {c.shape().d, c.shape().h, c.shape().w};
  const int patch[3] = {cfg.patch_shape.d, cfg.patch_shape.h, cfg.patch_shape.w};
  Window w;
  int ext[3];
  for (int a = 0; a < 3; ++a) {
    const int take = std::min(dims[a], patch[a]);
    ext[a] = std::max(round_up(take, div), 2 * div);
    w.origin[a] = dims[a] > take ? std::uniform_int_distribution<int>(0, dims[a] - take)(rng) : 0;
  }
  w.extent = {ext[0], ext[1], ext[2]};
  Patch p;
  for (const auto& v : c.volumes) p.volumes.push_back(extract(v, w));
  p.label = extract(c.label, w);
  return p;
}

void add_scaled(std::vector<double>& dst, const std::vector<double>& src, double s) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

// Adam over the float network parameters and the double MI-head parameters.
class Optimizer {
 public:
  Optimizer(const nn::ParamStore& params, const losses::MIHead& head, const config::TrainConfig& cfg)
      : cfg_(cfg) {
    for (const auto& p : params.all()) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
    for (std::size_t k = 0; k < head.levels(); ++k) {
      const auto& lv = head.level(k);
      for (std::size_t n : {lv.weight.size(), lv.bias.size(), lv.log_sigma.size()}) {
        hm_.emplace_back(n, 0.0);
        hv_.emplace_back(n, 0.0);
      }
    }
  }

  void step(nn::ParamStore& params, nn::GradStore& grads, losses::MIHead& head,
            std::vector<losses::MIHead::Level>& head_grads, bool update_head) {
    ++t_;
    double sq = grads.squared_norm();
    if (update_head) {
      for (const auto& lv : head_grads) {
        for (const auto* v : {&lv.weight, &lv.bias, &lv.log_sigma}) {
          for (double g : *v) sq += g * g;
        }
      }
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NonFiniteLossError("gradient", "non-finite gradient norm at step " + std::to_string(t_));
    const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    auto update = [&](double& theta, double g, double& m, double& v) {
      g = g * clip + cfg_.weight_decay * theta;
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g * g;
      theta -= cfg_.lr * (m / c1) / (std::sqrt(v / c2) + eps);
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& val = params[static_cast<int>(i)].value;
      const auto& g = grads[static_cast<int>(i)];
      for (std::size_t j = 0; j < val.size(); ++j) {
        double theta = val[j];
        update(theta, g[j], m_[i][j], v_[i][j]);
        val[j] = static_cast<float>(theta);
      }
    }
    if (!update_head) return;
    std::size_t slot = 0;
    const double bound = cfg_.losses.log_sigma_bound;
    for (std::size_t k = 0; k < head.levels(); ++k) {
      auto& lv = head.level(k);
      const auto& gl = head_grads[k];
      std::vector<double>* vals[3] = {&lv.weight, &lv.bias, &lv.log_sigma};
      const std::vector<double>* gs[3] = {&gl.weight, &gl.bias, &gl.log_sigma};
      for (int part = 0; part < 3; ++part, ++slot) {
        for (std::size_t j = 0; j < vals[part]->size(); ++j) {
          update((*vals[part])[j], (*gs[part])[j], hm_[slot][j], hv_[slot][j]);
        }
      }
      for (double& s : lv.log_sigma) s = std::clamp(s, -bound, bound);
    }
  }

 private:
  const config::TrainConfig& cfg_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_, hm_, hv_;
};

std::vector<losses::MIHead::Level> zero_head_grads(const losses::MIHead& head) {
  std::vector<losses::MIHead::Level> out;
  for (std::size_t k = 0; k < head.levels(); ++k) {
    const auto& lv = head.level(k);
    losses::MIHead::Level g;
    g.channels = lv.channels;
    g.weight.assign(lv.weight.size(), 0.0);
    g.bias.assign(lv.bias.size(), 0.0);
    g.log_sigma.assign(lv.log_sigma.size(), 0.0);
    out.push_back(std::move(g));
  }
  return out;
}

void check_finite(const losses::LossBreakdown& b, int step, const std::string& case_id) {
  const std::pair<const char*, double> parts[] = {{"dice", b.dice}, {"mi", b.mi}, {"hd", b.hd}, {"total", b.total}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw NonFiniteLossError(name, std::string("non-finite ") + name + " loss at step " + std::to_string(step) +
                                         " (case " + case_id + ")");
    }
  }
}

std::vector<ModalitySubset> choose_subsets(config::SubsetPolicy policy, int n, const std::vector<ModalitySubset>& all,
                                           std::mt19937_64& rng) {
  switch (policy) {
    case config::SubsetPolicy::full_enumeration: return all;
    case config::SubsetPolicy::full_only: return {ModalitySubset::full(n)};
    case config::SubsetPolicy::sample_uniform:
      break;
  }
  const auto idx = std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng);
  return {all[idx]};
}

// Loss and gradients of one training case, accumulated into `grads` /
// `head_grads` with weight `scale`.
losses::LossBreakdown case_step(const Model& model, const Patch& patch, const std::vector<ModalitySubset>& subsets,
                                const config::TrainConfig& cfg, double scale, nn::GradStore& grads,
                                std::vector<losses::MIHead::Level>& head_grads, int step, const std::string& case_id) {
  const net::Network& network = *model.network;
  const auto& ncfg = network.config();
  const int n = ncfg.n_modalities;
  const auto weights = cfg.losses.weights();
  const auto kind = cfg.losses.kind();
  const bool mi_on = weights.lambda1 > 0.0;
  const std::vector<int> mi_lv = mi_feature_levels(ncfg, cfg.losses.mi_levels);
  const double per_subset = scale / static_cast<double>(subsets.size());

  losses::LossBreakdown acc;
  auto accumulate = [&](const losses::LossBreakdown& b) {
    check_finite(b, step, case_id);
    const double s = 1.0 / static_cast<double>(subsets.size());
    acc.dice += s * b.dice;
    acc.mi += s * b.mi;
    acc.hd += s * b.hd;
    acc.total += s * b.total;
  };
  auto add_head = [&](const losses::TotalGradients& tg) {
    for (std::size_t k = 0; k < tg.mi.head.size(); ++k) {
      add_scaled(head_grads[k].weight, tg.mi.head[k].weight, per_subset);
      add_scaled(head_grads[k].bias, tg.mi.head[k].bias, per_subset);
      add_scaled(head_grads[k].log_sigma, tg.mi.head[k].log_sigma, per_subset);
    }
  };

  if (!ncfg.parallel) {
    std::vector<const ModalityVolume*> vols;
    for (const auto& v : patch.volumes) vols.push_back(&v);
    std::vector<LatentFeature> teacher;
    if (mi_on) {
      const auto full = network.backbone_forward(network.encode_joint(vols, ModalitySubset::full(n)));
      for (int l : mi_lv) teacher.push_back(full.features[l]);
    }
    for (const auto& s : subsets) {
      net::BranchCache cache;
      const auto out = network.backbone_forward(network.encode_joint(vols, s, &cache), &cache);
      std::vector<LatentFeature> student;
      for (int l : mi_lv) student.push_back(out.features[l]);
      losses::TotalGradients tg;
      const auto b = losses::total_loss(out.pred, patch.label, teacher, student, model.mi_head, weights, kind, &tg);
      accumulate(b);
      for (double& g : tg.pred.tensor().values()) g *= per_subset;
      std::vector<const LatentFeature*> gf(ncfg.levels, nullptr);
      for (auto& g : tg.mi.sub) {
        for (double& x : g.values()) x *= per_subset;
      }
      for (std::size_t k = 0; k < tg.mi.sub.size(); ++k) gf[mi_lv[k]] = &tg.mi.sub[k];
      network.backward(cache, -1, &tg.pred, gf, grads);
      add_head(tg);
    }
    return acc;
  }

  // Parallel branches: each needed modality runs once; subsets fuse them.
  std::uint32_t needed = 0;
  for (const auto& s : subsets) needed |= s.bits();
  if (mi_on) needed = (1u << n) - 1u;
  std::vector<std::unique_ptr<net::BranchCache>> caches(n);
  std::vector<std::optional<net::BackboneOutput>> outs(n);
  for (int i = 0; i < n; ++i) {
    if (!((needed >> i) & 1u)) continue;
    caches[i] = std::make_unique<net::BranchCache>();
    outs[i] = network.backbone_forward(network.encode_modality(patch.volumes[i], i, caches[i].get()), caches[i].get());
  }
  std::vector<LatentFeature> teacher;
  if (mi_on) {
    for (int l : mi_lv) {
      std::vector<const LatentFeature*> all;
      for (int i = 0; i < n; ++i) all.push_back(&outs[i]->features[l]);
      teacher.push_back(net::fuse_features(all));
    }
  }

  std::vector<std::optional<ProbabilityField>> g_pred(n);
  std::vector<std::vector<LatentFeature>> g_feat(n);
  for (const auto& s : subsets) {
    const auto members = s.members();
    std::vector<const ProbabilityField*> preds;
    for (int i : members) preds.push_back(&outs[i]->pred);
    const ProbabilityField fused = net::fuse_predictions(preds);
    std::vector<LatentFeature> student;
    if (mi_on) {
      for (int l : mi_lv) {
        std::vector<const LatentFeature*> fs;
        for (int i : members) fs.push_back(&outs[i]->features[l]);
        student.push_back(net::fuse_features(fs));
      }
    }
    losses::TotalGradients tg;
    const auto b = losses::total_loss(fused, patch.label, teacher, student, model.mi_head, weights, kind, &tg);
    accumulate(b);
    const double w = per_subset / static_cast<double>(members.size());
    for (int i : members) {
      if (!g_pred[i]) g_pred[i] = ProbabilityField(fused.n_classes(), fused.shape());
      add_scaled(g_pred[i]->tensor().values(), tg.pred.tensor().values(), w);
      if (!tg.mi.sub.empty()) {
        if (g_feat[i].empty()) {
          for (const auto& f : tg.mi.sub) g_feat[i].emplace_back(f.channels(), f.shape());
        }
        for (std::size_t k = 0; k < tg.mi.sub.size(); ++k) add_scaled(g_feat[i][k].values(), tg.mi.sub[k].values(), w);
      }
    }
    add_head(tg);
  }
  for (int i = 0; i < n; ++i) {
    if (!g_pred[i]) continue;
    std::vector<const LatentFeature*> gf(ncfg.levels, nullptr);
    for (std::size_t k = 0; k < g_feat[i].size(); ++k) gf[mi_lv[k]] = &g_feat[i][k];
    network.backward(*caches[i], i, &*g_pred[i], gf, grads);
  }
  return acc;
}

}  // namespace

TrainResult train(Model& model, std::span<const data::MultimodalCase> cases, const config::TrainConfig& cfg,
                  const TrainOptions& opts) {
  cfg.validate();
  if (cases.empty()) throw ConfigError("train: dataset is empty");
  net::Network& network = *model.network;
  const auto& ncfg = network.config();
  for (const auto& c : cases) {
    if (c.n_modalities() != ncfg.n_modalities) {
      throw DimensionError("train: case " + c.case_id + " has " + std::to_string(c.n_modalities()) +
                           " modalities, network expects " + std::to_string(ncfg.n_modalities));
    }
    if (c.label.n_classes() != ncfg.n_classes) {
      throw DimensionError("train: case " + c.case_id + " has " + std::to_string(c.label.n_classes()) +
                           " classes, network expects " + std::to_string(ncfg.n_classes));
    }
  }
  if (cfg.losses.lambda1 > 0.0 &&
      model.mi_head.levels() != static_cast<std::size_t>(cfg.losses.mi_levels)) {
    throw ConfigError("train: MI head has " + std::to_string(model.mi_head.levels()) + " levels, config asks for " +
                      std::to_string(cfg.losses.mi_levels));
  }
  model.mi_head.set_reduction(cfg.losses.reduction());
  if (!opts.checkpoint_dir.empty()) fs::create_directories(opts.checkpoint_dir);

  std::mt19937_64 rng(mix(cfg.seed ^ 0x5eedull));
  const auto all_subsets = net::enumerate_subsets(ncfg.n_modalities);
  const int steps_per_epoch = (static_cast<int>(cases.size()) + cfg.batch_size - 1) / cfg.batch_size;
  int total_steps = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  Optimizer opt(network.params(), model.mi_head, cfg);
  nn::GradStore grads(network.params());
  TrainResult result;
  std::vector<std::size_t> order(cases.size());
  int step = 0;
  auto save = [&](const std::string& name) {
    const fs::path p = opts.checkpoint_dir / name;
    net::save_checkpoint(p, network, &model.mi_head, opts.run_config);
    result.checkpoints.push_back(p);
  };

  for (int epoch = 0; step < total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size() && step < total_steps; b += cfg.batch_size) {
      ++step;
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const double scale = 1.0 / static_cast<double>(end - b);
      grads.zero();
      auto head_grads = zero_head_grads(model.mi_head);
      const std::size_t calls_before = network.backbone_invocations();
      StepRecord rec;
      rec.step = step;
      for (std::size_t k = b; k < end; ++k) {
        const auto& c = cases[order[k]];
        const Patch patch = random_patch(c, ncfg, rng);
        const auto subsets = choose_subsets(cfg.subset_policy, ncfg.n_modalities, all_subsets, rng);
        losses::LossBreakdown br;
        try {
          br = case_step(model, patch, subsets, cfg, scale, grads, head_grads, step, c.case_id);
        } catch (const NonFiniteLossError& e) {
          throw NonFiniteLossError(e.component(), std::string(e.what()) + " at step " + std::to_string(step) +
                                                      " (case " + c.case_id + ")");
        }
        rec.dice += scale * br.dice;
        rec.mi += scale * br.mi;
        rec.hd += scale * br.hd;
        rec.total += scale * br.total;
      }
      result.backbone_calls.push_back(network.backbone_invocations() - calls_before);
      opt.step(network.params(), grads, model.mi_head, head_grads, cfg.losses.lambda1 > 0.0);
      result.trace.push_back(rec);
      if (opts.on_step) opts.on_step(rec);
      if (!opts.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%06d.ckpt", step);
        save(name);
      }
    }
  }
  if (!opts.checkpoint_dir.empty()) save("final.ckpt");
  return result;
}

// ---- evaluation ----

SubsetPredictor network_predictor(const net::Network& network) {
  return [&network](const data::MultimodalCase& c, std::span<const ModalitySubset> subsets) {
    const auto& ncfg = network.config();
    if (c.n_modalities() != ncfg.n_modalities) {
      throw DimensionError("evaluate: case " + c.case_id + " has " + std::to_string(c.n_modalities()) +
                           " modalities, network expects " + std::to_string(ncfg.n_modalities));
    }
    const int div = 1 << (ncfg.levels - 1);
    const Shape3 s = c.shape();
    Window w;
    w.extent = {std::max(round_up(s.d, div), 2 * div), std::max(round_up(s.h, div), 2 * div),
                std::max(round_up(s.w, div), 2 * div)};
    std::vector<ModalityVolume> padded;
    for (const auto& v : c.volumes) padded.push_back(extract(v, w));

    std::vector<ProbabilityField> out;
    if (!ncfg.parallel) {
      std::vector<const ModalityVolume*> vols;
      for (const auto& v : padded) vols.push_back(&v);
      for (const auto& sub : subsets) {
        out.push_back(crop_leading(network.backbone_forward(network.encode_joint(vols, sub)).pred, s));
      }
      return out;
    }
    std::uint32_t needed = 0;
    for (const auto& sub : subsets) needed |= sub.bits();
    std::vector<std::optional<ProbabilityField>> per(ncfg.n_modalities);
    for (int i = 0; i < ncfg.n_modalities; ++i) {
      if ((needed >> i) & 1u) per[i] = network.backbone_forward(network.encode_modality(padded[i], i)).pred;
    }
    for (const auto& sub : subsets) {
      std::vector<const ProbabilityField*> preds;
      for (int i : sub.members()) preds.push_back(&*per[i]);
      out.push_back(crop_leading(net::fuse_predictions(preds), s));
    }
    return out;
  };
}

SubsetPredictor oracle_predictor() {
  return [](const data::MultimodalCase& c, std::span<const ModalitySubset> subsets) {
    const ProbabilityField truth = label_to_field(c.label, 0.0);
    return std::vector<ProbabilityField>(subsets.size(), truth);
  };
}

double EvalReport::mean() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : dsc) {
    for (double v : row) s += v;
    n += row.size();
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

double EvalReport::bucket_mean(int missing) const {
  double s = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < dsc.size(); ++r) {
    if (n_modalities - subset_sizes[r] != missing) continue;
    for (double v : dsc[r]) {
      s += v;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("no subsets miss " + std::to_string(missing) + " modalities");
  return s / n;
}

EvalReport evaluate_subsets(const SubsetPredictor& predictor, int n_modalities,
                            std::span<const data::MultimodalCase> cases, const std::vector<data::RegionSpec>& regions) {
  if (cases.empty()) throw ConfigError("evaluate: dataset is empty");
  if (regions.empty()) throw ConfigError("evaluate: no regions");
  const auto subsets = net::enumerate_subsets(n_modalities);
  EvalReport r;
  r.n_modalities = n_modalities;
  r.n_cases = static_cast<int>(cases.size());
  const auto& names = cases.front().modality_names;
  for (const auto& s : subsets) {
    r.subsets.push_back(s.label(names));
    r.subset_sizes.push_back(s.size());
  }
  for (const auto& reg : regions) r.regions.push_back(reg.name);
  r.dsc.assign(subsets.size(), std::vector<double>(regions.size(), 0.0));

  for (const auto& c : cases) {
    const auto preds = predictor(c, subsets);
    if (preds.size() != subsets.size()) throw DimensionError("evaluate: predictor returned the wrong number of fields");
    std::vector<data::Mask> truth;
    for (const auto& reg : regions) truth.push_back(data::region_mask(c.label, reg));
    for (std::size_t si = 0; si < subsets.size(); ++si) {
      if (!(preds[si].shape() == c.shape())) throw DimensionError("evaluate: prediction shape differs from case " + c.case_id);
      const LabelField hard = argmax(preds[si]);
      for (std::size_t ri = 0; ri < regions.size(); ++ri) {
        r.dsc[si][ri] += dsc(data::region_mask(hard, regions[ri]), truth[ri]);
      }
    }
  }
  r.region_mean.assign(regions.size(), 0.0);
  for (auto& row : r.dsc) {
    for (std::size_t ri = 0; ri < row.size(); ++ri) {
      row[ri] /= static_cast<double>(cases.size());
      r.region_mean[ri] += row[ri];
    }
  }
  for (double& m : r.region_mean) m /= static_cast<double>(subsets.size());
  return r;
}

EvalReport evaluate_subsets(const net::Network& network, std::span<const data::MultimodalCase> cases,
                            const std::vector<data::RegionSpec>& regions) {
  return evaluate_subsets(network_predictor(network), network.config().n_modalities, cases, regions);
}

// ---- experiments ----

RunResult run_once(const config::RunConfig& base, const Experiment& exp, std::uint64_t seed) {
  config::RunConfig cfg = base;
  cfg.train.seed = seed;
  cfg.validate();
  const std::string hash = config::config_hash(cfg);
  if (exp.cache) {
    if (const auto it = exp.cache->find(hash); it != exp.cache->end()) return it->second;
  }
  Model model = make_model(cfg.network, cfg.train.losses, seed);
  RunResult out;
  out.config_hash = hash;
  out.trace = train(model, exp.train_cases, cfg.train).trace;
  out.report = evaluate_subsets(*model.network, exp.eval_cases);
  out.report.config_hash = out.config_hash;
  out.report.seed = seed;
  out.report.dataset_id = exp.dataset_id;
  if (exp.cache) exp.cache->emplace(hash, out);
  return out;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

SweepRow sweep_row(const config::RunConfig& cfg, const Experiment& exp, std::string divergence, std::string alpha) {
  SweepRow row;
  row.divergence = std::move(divergence);
  row.alpha = std::move(alpha);
  const auto& seeds = exp.base.eval.seeds;
  for (std::uint64_t seed : seeds) {
    if (exp.log) exp.log("train " + row.divergence + (row.alpha.empty() ? "" : " alpha=" + row.alpha) + " seed=" + std::to_string(seed));
    const RunResult r = run_once(cfg, exp, seed);
    if (row.config_hash.empty()) row.config_hash = r.config_hash;
    row.wt += r.report.region_mean.at(0);
    row.tc += r.report.region_mean.at(1);
    row.et += r.report.region_mean.at(2);
    row.seed_avg.push_back(r.report.mean());
  }
  const double n = static_cast<double>(seeds.size());
  row.wt /= n;
  row.tc /= n;
  row.et /= n;
  row.avg = (row.wt + row.tc + row.et) / 3.0;
  return row;
}

std::vector<std::pair<std::string, std::string>> common_metadata(const Experiment& exp) {
  std::string seeds;
  for (auto s : exp.base.eval.seeds) seeds += (seeds.empty() ? "" : " ") + std::to_string(s);
  return {{"config_hash", config::config_hash(exp.base)},
          {"seeds", seeds},
          {"dataset_id", exp.dataset_id},
          {"train_cases", std::to_string(exp.train_cases.size())},
          {"eval_cases", std::to_string(exp.eval_cases.size())}};
}

}  // namespace

SweepTable sweep_alpha(const std::vector<double>& alphas, const Experiment& exp) {
  if (alphas.empty()) throw ConfigError("sweep_alpha: no alphas given");
  for (double a : alphas) divergence::HolderExponent{a};
  SweepTable t;
  t.metadata = common_metadata(exp);
  t.metadata.emplace_back("reference_full_scale", "holder alpha=1.10 avg=80.1");
  for (double a : alphas) {
    config::RunConfig cfg = exp.base;
    cfg.train.losses.divergence = "holder";
    cfg.train.losses.alpha = a;
    t.rows.push_back(sweep_row(cfg, exp, "holder", fmt(a)));
  }
  config::RunConfig kl = exp.base;
  kl.train.losses.divergence = "kl";
  t.rows.push_back(sweep_row(kl, exp, "kl", ""));
  config::RunConfig none = exp.base;
  none.train.losses.lambda2 = 0.0;
  t.rows.push_back(sweep_row(none, exp, "none", ""));
  return t;
}

std::vector<divergence::DivergenceKind> standard_divergence_kinds(double alpha) {
  using divergence::DivergenceKind;
  using divergence::DivergenceTag;
  return {DivergenceKind::holder(alpha),
          DivergenceKind::of(DivergenceTag::total_variation),
          DivergenceKind::of(DivergenceTag::squared_hellinger),
          DivergenceKind::of(DivergenceTag::kullback_leibler),
          DivergenceKind::of(DivergenceTag::neyman_chi2),
          DivergenceKind::of(DivergenceTag::jensen_shannon),
          DivergenceKind::of(DivergenceTag::mse),
          DivergenceKind::of(DivergenceTag::bce)};
}

SweepTable compare_divergences(const std::vector<divergence::DivergenceKind>& kinds, const Experiment& exp) {
  if (kinds.empty()) throw ConfigError("compare_divergences: no divergence kinds given");
  SweepTable t;
  t.metadata = common_metadata(exp);
  t.metadata.emplace_back("reference_full_scale", "holder avg=80.1 kl avg=74.0");
  for (const auto& k : kinds) {
    config::RunConfig cfg = exp.base;
    std::string alpha;
    if (k.tag == divergence::DivergenceTag::holder) {
      cfg.train.losses.divergence = "holder";
      cfg.train.losses.alpha = k.exponent->alpha();
      alpha = fmt(k.exponent->alpha());
    } else {
      cfg.train.losses.divergence = k.name();
    }
    t.rows.push_back(sweep_row(cfg, exp, k.tag == divergence::DivergenceTag::holder ? "holder" : k.name(), alpha));
  }
  return t;
}

std::string AblationFlags::label() const {
  std::string s = parallel ? "parallel" : "early-fusion";
  s += " dice";
  if (use_mi) s += "+mi";
  if (use_hd) s += "+hd";
  return s;
}

AblationGrid AblationGrid::standard() {
  return {{{false, false, false}, {true, false, false}, {true, true, false}, {true, false, true}, {true, true, true}}};
}

void AblationGrid::validate() const {
  if (runs.empty()) throw ConfigError("ablation grid is empty");
  const bool has_baseline = std::any_of(runs.begin(), runs.end(), [](const AblationFlags& f) { return !f.use_mi && !f.use_hd; });
  if (!has_baseline) throw ConfigError("ablation grid needs a dice-only baseline");
}

config::RunConfig apply_flags(const config::RunConfig& base, const AblationFlags& flags) {
  config::RunConfig cfg = base;
  cfg.network.parallel = flags.parallel;
  if (!flags.use_mi) cfg.train.losses.lambda1 = 0.0;
  if (!flags.use_hd) cfg.train.losses.lambda2 = 0.0;
  return cfg;
}

AblationTable run_ablation(const AblationGrid& grid, const Experiment& exp) {
  grid.validate();
  AblationTable t;
  t.metadata = common_metadata(exp);
  const int n = exp.base.network.n_modalities;
  for (int missing = n - 1; missing >= 0; --missing) t.buckets.push_back(missing);
  for (const auto& flags : grid.runs) {
    const config::RunConfig cfg = apply_flags(exp.base, flags);
    AblationRow row;
    row.flags = flags;
    for (std::uint64_t seed : exp.base.eval.seeds) {
      if (exp.log) exp.log("train " + flags.label() + " seed=" + std::to_string(seed));
      const RunResult r = run_once(cfg, exp, seed);
      if (row.config_hash.empty()) row.config_hash = r.config_hash;
      for (int b : t.buckets) row.bucket_per_seed[b].push_back(r.report.bucket_mean(b));
    }
    double sum = 0.0;
    for (int b : t.buckets) {
      const auto& v = row.bucket_per_seed[b];
      row.bucket[b] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      sum += row.bucket[b];
    }
    row.avg = sum / static_cast<double>(t.buckets.size());
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace hdseg::engine
