#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hdseg/data.hpp"
#include "hdseg/nifti.hpp"
#include "support.hpp"

using namespace hdseg;
using namespace hdseg::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct BBox {
  int lo[3] = {1 << 20, 1 << 20, 1 << 20};
  int hi[3] = {-1, -1, -1};
};

BBox bbox_of(const Mask& m, Shape3 s) {
  BBox b;
  std::size_t i = 0;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x, ++i) {
        if (!m[i]) continue;
        const int c[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], c[a]);
          b.hi[a] = std::max(b.hi[a], c[a]);
        }
      }
  return b;
}

nifti::Volume to_nifti(const ModalityVolume& v) {
  nifti::Volume n;
  n.shape = v.shape();
  n.data = v.values();
  return n;
}

void write_brats(const fs::path& dir, const std::string& prefix, const std::vector<nifti::Volume>& mods,
                 const nifti::Volume& seg, const std::string& ext = ".nii.gz") {
  const char* names[4] = {"t1", "t1ce", "t2", "flair"};
  for (int m = 0; m < 4; ++m) {
    if (!mods[m].data.empty()) nifti::write(dir / (prefix + "_" + names[m] + ext), mods[m]);
  }
  nifti::write(dir / (prefix + "_seg" + ext), seg);
}

}  // namespace

TEST_CASE("phantoms are deterministic per seed") {
  const auto spec = PhantomSpec::defaults();
  const auto a = generate_phantom(spec, 17, "x");
  const auto b = generate_phantom(spec, 17, "x");
  const auto c = generate_phantom(spec, 18, "x");
  CHECK(a.label == b.label);
  CHECK(a.volumes == b.volumes);
  CHECK(a.volumes != c.volumes);
  CHECK_NOTHROW(a.validate());
  CHECK(a.n_modalities() == 4);
  CHECK(case_seed(3, "case_000") == case_seed(3, "case_000"));
  CHECK(case_seed(3, "case_000") != case_seed(3, "case_001"));
  CHECK(case_seed(3, "case_000") != case_seed(4, "case_000"));
}

TEST_CASE("phantom regions are nested") {
  const auto spec = PhantomSpec::defaults();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto c = generate_phantom(spec, seed);
    const auto& regions = standard_regions();
    const Mask wt = region_mask(c.label, regions[0]);
    const Mask tc = region_mask(c.label, regions[1]);
    const Mask et = region_mask(c.label, regions[2]);
    for (std::size_t i = 0; i < wt.size(); ++i) {
      REQUIRE(wt[i] >= tc[i]);
      REQUIRE(tc[i] >= et[i]);
    }
    const BBox bw = bbox_of(wt, c.shape()), bt = bbox_of(tc, c.shape()), be = bbox_of(et, c.shape());
    for (int a = 0; a < 3; ++a) {
      CHECK(bw.lo[a] < bt.lo[a]);
      CHECK(bt.lo[a] < be.lo[a]);
      CHECK(be.hi[a] < bt.hi[a]);
      CHECK(bt.hi[a] < bw.hi[a]);
    }
  }
}

TEST_CASE("phantom class histograms track the analytic ellipsoid volumes") {
  const auto spec = PhantomSpec::defaults();
  std::vector<double> counted(4, 0.0), analytic(4, 0.0);
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    const auto c = generate_phantom(spec, seed);
    for (auto v : c.label.values()) counted[v] += 1.0;
    const auto a = phantom_class_volumes(spec, seed);
    REQUIRE(a.size() == 4);
    for (int k = 0; k < 4; ++k) analytic[k] += a[k];
  }
  for (int k = 0; k < 4; ++k) {
    CAPTURE(k);
    CHECK(std::abs(counted[k] - analytic[k]) <= 0.05 * analytic[k]);
  }
}

TEST_CASE("noise-free phantoms are piecewise constant") {
  auto spec = PhantomSpec::defaults();
  spec.noise_sigma = 0.0;
  const auto c = generate_phantom(spec, 5);
  for (int m = 0; m < 4; ++m) {
    for (std::size_t i = 0; i < c.label.voxels(); ++i) {
      REQUIRE(c.volumes[m].values()[i] == static_cast<float>(spec.contrast[m][c.label[i]]));
    }
  }
}

TEST_CASE("phantom generation failures") {
  auto spec = PhantomSpec::defaults({4, 4, 4});
  CHECK_THROWS_AS(generate_phantom(spec, 1), GenerationError);
  spec = PhantomSpec::defaults();
  spec.noise_sigma = 10.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = PhantomSpec::defaults();
  spec.n_regions = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("region masks") {
  LabelField l(4, {1, 1, 4});
  l.values() = {0, 1, 2, 3};
  const auto& r = standard_regions();
  REQUIRE(r.size() == 3);
  CHECK(r[0].name == "WT");
  CHECK(region_mask(l, r[0]) == Mask{0, 1, 1, 1});
  CHECK(region_mask(l, r[1]) == Mask{0, 0, 1, 1});
  CHECK(region_mask(l, r[2]) == Mask{0, 0, 0, 1});
}

TEST_CASE("nifti round trip") {
  TempDir tmp("hdseg_test_nifti");
  testing::Rng rng(4);
  nifti::Volume v;
  v.shape = {3, 4, 5};
  std::normal_distribution<float> d;
  for (std::size_t i = 0; i < v.shape.voxels(); ++i) v.data.push_back(d(rng));
  v.pixdim[1] = 2.0f;
  v.description = "abc";
  for (const char* name : {"a.nii", "a.nii.gz"}) {
    nifti::write(tmp.path / name, v);
    const auto r = nifti::read(tmp.path / name);
    CHECK(r.shape == v.shape);
    CHECK(r.data == v.data);
    CHECK(r.pixdim[1] == 2.0f);
    CHECK(r.description == "abc");
  }
  std::ofstream(tmp.path / "short.nii") << "tiny";
  CHECK_THROWS_AS(nifti::read(tmp.path / "short.nii"), IngestionError);
  CHECK_THROWS_AS(nifti::read(tmp.path / "absent.nii"), IngestionError);
}

TEST_CASE("BraTS ingestion: label remap and z-scoring") {
  TempDir tmp("hdseg_test_brats");
  testing::Rng rng(21);
  const Shape3 s{4, 5, 6};
  std::vector<nifti::Volume> mods(4);
  std::uniform_real_distribution<float> u(10.0f, 400.0f);
  for (auto& m : mods) {
    m.shape = s;
    for (std::size_t i = 0; i < s.voxels(); ++i) m.data.push_back(i % 7 == 0 ? 0.0f : u(rng));
  }
  nifti::Volume seg;
  seg.shape = s;
  const float codes[5] = {0, 2, 1, 4, 3};
  for (std::size_t i = 0; i < s.voxels(); ++i) seg.data.push_back(codes[i % 5]);
  write_brats(tmp.path, "case7", mods, seg);

  const auto c = load_brats_case(tmp.path);
  CHECK(c.shape() == s);
  const std::uint8_t expect[5] = {0, 1, 2, 3, 3};
  for (std::size_t i = 0; i < s.voxels(); ++i) REQUIRE(c.label[i] == expect[i % 5]);
  for (int m = 0; m < 4; ++m) {
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < s.voxels(); ++i) {
      const double v = c.volumes[m].values()[i];
      if (i % 7 == 0) {
        REQUIRE(v == 0.0);
        continue;
      }
      sum += v;
      sq += v * v;
      ++n;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 1e-6);
  }

  // Save -> load -> save -> load is the identity after the first load.
  save_brats_case(c, tmp.path / "out1");
  const auto c1 = load_brats_case(tmp.path / "out1");
  save_brats_case(c1, tmp.path / "out2");
  const auto c2 = load_brats_case(tmp.path / "out2");
  CHECK(c1.label == c.label);
  CHECK(c1.volumes == c.volumes);
  CHECK(c2.volumes == c1.volumes);
  CHECK(c2.label == c1.label);
}

TEST_CASE("BraTS ingestion errors") {
  TempDir tmp("hdseg_test_brats_err");
  const Shape3 s{2, 2, 2};
  std::vector<nifti::Volume> mods(4);
  for (auto& m : mods) {
    m.shape = s;
    m.data.assign(s.voxels(), 1.0f);
  }
  nifti::Volume seg;
  seg.shape = s;
  seg.data.assign(s.voxels(), 0.0f);
  seg.data[0] = 1.0f;

  const fs::path missing = tmp.path / "missing";
  fs::create_directories(missing);
  auto no_t2 = mods;
  no_t2[2].data.clear();
  write_brats(missing, "c", no_t2, seg);
  try {
    load_brats_case(missing);
    FAIL("expected IngestionError");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("t2") != std::string::npos);
  }

  const fs::path mismatch = tmp.path / "mismatch";
  fs::create_directories(mismatch);
  auto bad = mods;
  bad[1].shape = {2, 2, 3};
  bad[1].data.assign(12, 1.0f);
  write_brats(mismatch, "c", bad, seg, ".nii");
  CHECK_THROWS_AS(load_brats_case(mismatch), IngestionError);

  const fs::path empty = tmp.path / "empty";
  fs::create_directories(empty);
  auto zero = seg;
  zero.data.assign(s.voxels(), 0.0f);
  write_brats(empty, "c", mods, zero);
  // A tumor-free case is valid input; its label is all background.
  const auto healthy = load_brats_case(empty);
  CHECK(std::all_of(healthy.label.values().begin(), healthy.label.values().end(), [](auto v) { return v == 0; }));

  const fs::path badcode = tmp.path / "badcode";
  fs::create_directories(badcode);
  auto odd = seg;
  odd.data[1] = 7.0f;
  write_brats(badcode, "c", mods, odd);
  CHECK_THROWS_AS(load_brats_case(badcode), IngestionError);
}

TEST_CASE("raw datasets round trip through the manifest") {
  TempDir tmp("hdseg_test_dataset");
  const auto spec = PhantomSpec::defaults({16, 16, 16});
  const auto entries = generate_dataset(tmp.path, spec, 6, 9);
  REQUIRE(entries.size() == 6);
  CHECK(entries[0].case_id == "case_000");
  CHECK(read_manifest(tmp.path).size() == 6);
  const auto all = load_dataset(tmp.path);
  REQUIRE(all.size() == 6);
  const auto regenerated = generate_phantom(spec, case_seed(9, "case_003"), "case_003");
  CHECK(all[3].volumes == regenerated.volumes);
  CHECK(all[3].label == regenerated.label);
  CHECK(all[3].case_id == "case_003");
  std::size_t train = 0;
  for (const auto& e : entries) train += e.split == "train";
  CHECK(load_dataset(tmp.path, "train").size() == train);
  CHECK(load_dataset(tmp.path, "val").size() == 6 - train);
  CHECK_THROWS_AS(read_manifest(tmp.path / "nope"), IngestionError);
}

TEST_CASE("split ratio is close to 80/20") {
  int train = 0;
  for (int i = 0; i < 2000; ++i) train += split_for("case_" + std::to_string(i)) == "train";
  CHECK(train > 1500);
  CHECK(train < 1700);
  CHECK(split_for("abc") == split_for("abc"));
}
