#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hdseg/checkpoint.hpp"
#include "hdseg/losses.hpp"
#include "hdseg/network.hpp"
#include "support.hpp"

using namespace hdseg;
using namespace hdseg::net;

namespace {

NetworkConfig small_config(bool parallel = true) {
  NetworkConfig c;
  c.levels = 2;
  c.base_channels = 4;
  c.norm_groups = 2;
  c.patch_shape = {4, 4, 4};
  c.parallel = parallel;
  return c;
}

std::vector<ModalityVolume> random_volumes(testing::Rng& rng, int n, Shape3 s) {
  std::vector<ModalityVolume> out;
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (int i = 0; i < n; ++i) {
    ModalityVolume v(1, s);
    for (float& x : v.values()) x = d(rng);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<const ModalityVolume*> pointers(const std::vector<ModalityVolume>& v) {
  std::vector<const ModalityVolume*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

}  // namespace

TEST_CASE("subset enumeration order") {
  const auto s4 = enumerate_subsets(4);
  REQUIRE(s4.size() == 15);
  CHECK(s4.front().is_full());
  CHECK(s4.back().members() == std::vector<int>{3});
  for (std::size_t i = 1; i < s4.size(); ++i) CHECK(s4[i - 1].size() >= s4[i].size());
  CHECK(s4[1].members() == std::vector<int>{0, 1, 2});
  CHECK(s4[5].members() == std::vector<int>{0, 1});

  const auto s1 = enumerate_subsets(1);
  REQUIRE(s1.size() == 1);
  CHECK(s1[0].members() == std::vector<int>{0});

  std::vector<int> sizes;
  for (const auto& s : enumerate_subsets(3)) sizes.push_back(s.size());
  CHECK(sizes == std::vector<int>{3, 2, 2, 2, 1, 1, 1});

  CHECK_THROWS_AS(enumerate_subsets(0), ConfigError);
  CHECK_THROWS_AS(ModalitySubset(4, 0), ConfigError);
  const std::vector<std::string> names{"t1", "t1c", "t2", "flair"};
  CHECK(ModalitySubset::of(4, {0, 3}).label(names) == "t1+flair");
}

TEST_CASE("fusion operators: singleton identity and permutation invariance") {
  testing::Rng rng(77);
  std::uniform_int_distribution<int> count(1, 6), dim(1, 3);
  for (int t = 0; t < 1000; ++t) {
    const int k = count(rng);
    const Shape3 s{dim(rng), dim(rng), dim(rng)};
    std::vector<LatentFeature> feats;
    std::vector<ProbabilityField> preds;
    for (int i = 0; i < k; ++i) {
      feats.push_back(testing::random_tensor(rng, 3, s));
      preds.push_back(testing::random_field(rng, 4, s, 0.0));
    }
    std::vector<const LatentFeature*> fp;
    std::vector<const ProbabilityField*> pp;
    for (int i = 0; i < k; ++i) {
      fp.push_back(&feats[i]);
      pp.push_back(&preds[i]);
    }
    const LatentFeature f1 = fuse_features(std::span(fp.data(), 1));
    CHECK(f1 == feats[0]);
    CHECK(fuse_predictions(std::span(pp.data(), 1)) == preds[0]);

    const LatentFeature fa = fuse_features(fp);
    const ProbabilityField pa = fuse_predictions(pp);
    std::shuffle(fp.begin(), fp.end(), rng);
    std::shuffle(pp.begin(), pp.end(), rng);
    CHECK(fuse_features(fp) == fa);
    CHECK(fuse_predictions(pp) == pa);
    CHECK(pa.max_simplex_violation() <= 1e-6);

    const LatentFeature* twice[2] = {&feats[0], &feats[0]};
    CHECK(fuse_features(twice) == feats[0]);
  }
  CHECK_THROWS_AS(fuse_features(std::span<const LatentFeature* const>{}), DegenerateInputError);
  CHECK_THROWS_AS(fuse_predictions(std::span<const ProbabilityField* const>{}), DegenerateInputError);
}

TEST_CASE("fusion of opposite one-hot voxels") {
  ProbabilityField a(2, {1, 1, 1}), b(2, {1, 1, 1});
  a.at(0, 0) = 1.0;
  b.at(1, 0) = 1.0;
  const ProbabilityField* both[2] = {&a, &b};
  const auto m = fuse_predictions(both);
  CHECK(m.at(0, 0) == 0.5);
  CHECK(m.at(1, 0) == 0.5);
}

TEST_CASE("config validation") {
  NetworkConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.base_channels = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.patch_shape = {5, 4, 4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.n_classes = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward outputs contract") {
  testing::Rng rng(8);
  const Network n(small_config(), 3);
  const auto vols = random_volumes(rng, 4, {4, 4, 4});
  const auto ptrs = pointers(vols);
  const auto sub = ModalitySubset::of(4, {1, 3});
  const auto out = n.forward(ptrs, sub);
  CHECK(out.per_modality_preds.size() == 2);
  CHECK(out.per_modality_preds.count(1) == 1);
  CHECK(out.per_modality_preds.count(3) == 1);
  CHECK(out.per_modality_deep.size() == 2);
  CHECK(out.fused_pred.shape() == Shape3{4, 4, 4});
  CHECK(out.fused_pred.n_classes() == 4);
  CHECK(out.fused_pred.max_simplex_violation() <= 1e-6);
  CHECK_FALSE(out.full_deep.has_value());
  CHECK(out.subset_deep.shape() == Shape3{2, 2, 2});
  CHECK(out.subset_deep.channels() == 8);

  const auto full = n.forward(ptrs, ModalitySubset::full(4));
  REQUIRE(full.full_deep.has_value());
  CHECK(*full.full_deep == full.subset_deep);

  // Determinism.
  const Network n2(small_config(), 3);
  CHECK(n2.forward(ptrs, sub).fused_pred == out.fused_pred);
}

TEST_CASE("modality stems are distinct, the backbone is shared") {
  testing::Rng rng(9);
  const Network n(small_config(), 4);
  const auto vols = random_volumes(rng, 1, {4, 4, 4});
  const Tensor e0 = n.encode_modality(vols[0], 0);
  const Tensor e1 = n.encode_modality(vols[0], 1);
  double gap = 0.0;
  for (std::size_t i = 0; i < e0.size(); ++i) gap = std::max(gap, static_cast<double>(std::abs(e0.values()[i] - e1.values()[i])));
  CHECK(gap > 0.0);
  CHECK(n.backbone_forward(e0).pred == n.backbone_forward(e0).pred);

  // Zero input through zeroed stem parameters gives a zero block.
  Network z(small_config(), 4);
  for (auto& p : z.params().all()) {
    if (p.name.rfind("stem.0", 0) == 0) std::fill(p.value.begin(), p.value.end(), 0.0f);
  }
  const Tensor ez = z.encode_modality(ModalityVolume(1, {4, 4, 4}), 0);
  CHECK(std::all_of(ez.values().begin(), ez.values().end(), [](float v) { return v == 0.0f; }));
  CHECK_THROWS_AS(n.encode_modality(ModalityVolume(2, {4, 4, 4}), 0), DimensionError);
}

TEST_CASE("absent modalities are never read or evaluated") {
  testing::Rng rng(10);
  for (bool parallel : {true, false}) {
    CAPTURE(parallel);
    Network n(small_config(parallel), 5);
    const auto present = random_volumes(rng, 4, {4, 4, 4});
    const auto noise = random_volumes(rng, 4, {4, 4, 4});
    const std::vector<ModalityVolume> zeros(4, ModalityVolume(1, {4, 4, 4}));
    for (const auto& sub : enumerate_subsets(4)) {
      if (sub.is_full()) continue;
      std::vector<const ModalityVolume*> a(4), b(4), c(4, nullptr);
      for (int i = 0; i < 4; ++i) {
        a[i] = sub.contains(i) ? &present[i] : &zeros[i];
        b[i] = sub.contains(i) ? &present[i] : &noise[i];
        if (sub.contains(i)) c[i] = &present[i];
      }
      n.reset_invocations();
      const auto oa = n.forward(a, sub);
      if (parallel) CHECK(n.backbone_invocations() == static_cast<std::size_t>(sub.size()));
      CHECK(n.forward(b, sub).fused_pred == oa.fused_pred);
      CHECK(n.forward(c, sub).fused_pred == oa.fused_pred);
    }
  }
}

TEST_CASE("network backward matches finite differences") {
  testing::Rng rng(12);
  for (bool parallel : {true, false}) {
    CAPTURE(parallel);
    Network n(small_config(parallel), 6);
    const auto vols = random_volumes(rng, 4, {4, 4, 4});
    const auto ptrs = pointers(vols);
    const auto label = testing::random_label(rng, 4, {4, 4, 4});
    const LatentFeature r1 = testing::random_tensor(rng, 4, {4, 4, 4});
    const LatentFeature r2 = testing::random_tensor(rng, 8, {2, 2, 2});
    const auto sub = ModalitySubset::of(4, {0, 2});

    auto run = [&](BranchCache* cache, BackboneOutput* keep) {
      const Tensor e = parallel ? n.encode_modality(vols[2], 2, cache) : n.encode_joint(ptrs, sub, cache);
      BackboneOutput o = n.backbone_forward(e, cache);
      double l = losses::dice_loss(o.pred, label) + losses::holder_seg_loss(o.pred, label, divergence::HolderExponent(1.1));
      for (std::size_t i = 0; i < r1.size(); ++i) l += r1.values()[i] * o.features[0].values()[i];
      for (std::size_t i = 0; i < r2.size(); ++i) l += r2.values()[i] * o.features[1].values()[i];
      if (keep) *keep = std::move(o);
      return l;
    };
    BranchCache cache;
    BackboneOutput out;
    run(&cache, &out);
    ProbabilityField g1, g2;
    losses::dice_loss(out.pred, label, &g1);
    losses::holder_seg_loss(out.pred, label, divergence::HolderExponent(1.1), &g2);
    for (std::size_t i = 0; i < g1.tensor().size(); ++i) g1.tensor().values()[i] += g2.tensor().values()[i];
    const LatentFeature* gf[2] = {&r1, &r2};
    nn::GradStore grads(n.params());
    n.backward(cache, 2, &g1, gf, grads);

    std::vector<double> a, fd;
    std::uniform_int_distribution<std::size_t> pick_param(0, n.params().size() - 1);
    for (int t = 0; t < 60; ++t) {
      const int pi = static_cast<int>(pick_param(rng));
      auto& vals = n.params()[pi].value;
      const std::size_t j = std::uniform_int_distribution<std::size_t>(0, vals.size() - 1)(rng);
      const float saved = vals[j];
      const float h = 1e-3f;  // larger steps straddle ReLU kinks
      vals[j] = saved + h;
      const double up = run(nullptr, nullptr);
      vals[j] = saved - h;
      const double down = run(nullptr, nullptr);
      vals[j] = saved;
      a.push_back(grads[pi][j]);
      fd.push_back((up - down) / (2.0 * h));
    }
    CHECK(testing::vector_rel_err(a, fd) <= 3e-2);
  }
}

TEST_CASE("checkpoint round trip") {
  testing::Rng rng(13);
  const auto dir = std::filesystem::temp_directory_path() / "hdseg_test_ckpt";
  std::filesystem::create_directories(dir);
  const Network n(small_config(), 14);
  losses::MIHead head({8}, losses::MIReduction::mean);
  head.level(0).log_sigma[3] = -0.7;
  save_checkpoint(dir / "a.ckpt", n, &head, "{\"k\":1}");
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  REQUIRE(ck.network);
  CHECK(ck.network->config() == n.config());
  for (std::size_t i = 0; i < n.params().size(); ++i) {
    CHECK(ck.network->params()[static_cast<int>(i)].value == n.params()[static_cast<int>(i)].value);
  }
  REQUIRE(ck.mi_head.has_value());
  CHECK(ck.mi_head->level(0).log_sigma == head.level(0).log_sigma);
  CHECK(ck.mi_head->reduction() == losses::MIReduction::mean);
  CHECK(ck.run_config == "{\"k\":1}");
  const auto vols = random_volumes(rng, 4, {4, 4, 4});
  CHECK(ck.network->forward(pointers(vols), ModalitySubset::full(4)).fused_pred ==
        n.forward(pointers(vols), ModalitySubset::full(4)).fused_pred);

  std::ofstream(dir / "bad.ckpt") << "NOTACKPT and more bytes";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), IngestionError);
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("default network forwards a four-modality 32^3 case within a second") {
  testing::Rng rng(15);
  const Network n(NetworkConfig{}, 1);
  const auto vols = random_volumes(rng, 4, {32, 32, 32});
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = n.forward(pointers(vols), ModalitySubset::full(4));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("4-modality forward: " << secs << " s");
  CHECK(out.fused_pred.max_simplex_violation() <= 1e-6);
  CHECK(secs < 1.0);
}
