#pragma once
// Multimodal cases: synthetic phantoms, BraTS ingestion, on-disk datasets
// and evaluation regions.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "hdseg/grid.hpp"

namespace hdseg::data {

inline const std::vector<std::string>& default_modality_names() {
  static const std::vector<std::string> names{"t1", "t1c", "t2", "flair"};
  return names;
}

struct MultimodalCase {
  std::vector<ModalityVolume> volumes;  // one single-channel volume per modality
  LabelField label;
  std::string case_id;
  std::uint64_t seed = 0;
  std::vector<std::string> modality_names = default_modality_names();

  Shape3 shape() const { return label.shape(); }
  int n_modalities() const { return static_cast<int>(volumes.size()); }
  /// Shapes agree, intensities are finite, labels are in range.
  void validate() const;
};

struct PhantomSpec {
  Shape3 shape{32, 32, 32};
  int n_regions = 3;
  /// contrast[m][c]: mean intensity of class c in modality m.
  std::vector<std::vector<double>> contrast;
  double noise_sigma = 0.5;

  /// Default contrast for 4 modalities and 4 classes: each modality pulls a
  /// different class far away from the others (T1: necrotic core, T1c:
  /// enhancing, T2: edema, FLAIR: background), all other classes follow a
  /// 0.6-step ramp.
  static PhantomSpec defaults(Shape3 shape = {32, 32, 32});

  int n_classes() const { return n_regions + 1; }
  int n_modalities() const { return static_cast<int>(contrast.size()); }
  double min_contrast_gap() const;
  /// Throws ConfigError.
  void validate() const;
};

/// Deterministic in (spec, seed). Regions are concentric axis-aligned
/// ellipsoids; region r is scaled by 1 - 0.55 r / (n_regions - 1).
/// Throws GenerationError if the outer ellipsoid cannot fit.
MultimodalCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed, std::string case_id = "");

/// Stream seed for one case of a dataset generated with `seed`.
std::uint64_t case_seed(std::uint64_t seed, const std::string& case_id);

/// Analytic class volumes (in voxels) of a generated phantom, from the
/// ellipsoid radii it was built with.
std::vector<double> phantom_class_volumes(const PhantomSpec& spec, std::uint64_t seed);

// ---- regions ----

struct RegionSpec {
  std::string name;
  std::set<int> member_classes;
};

/// WT = {1,2,3}, TC = {2,3}, ET = {3}.
const std::vector<RegionSpec>& standard_regions();
using Mask = std::vector<std::uint8_t>;
Mask region_mask(const LabelField& label, const RegionSpec& region);

// ---- BraTS ingestion ----

/// z-score over nonzero voxels; zero voxels stay zero.
void zscore_nonzero(ModalityVolume& vol);

/// Looks for <prefix>_{t1,t1ce,t2,flair,seg}.nii[.gz]. Label codes
/// 0 / 2 / 1 / 4 (background, edema, necrotic core, enhancing) become
/// 0 / 1 / 2 / 3; code 3 is accepted as enhancing too.
MultimodalCase load_brats_case(const std::filesystem::path& dir);

/// Writes the case back in the same naming and label convention. Volumes
/// are tagged as already normalized so a reload leaves them untouched.
void save_brats_case(const MultimodalCase& c, const std::filesystem::path& dir);

// ---- phantom datasets on disk ----

struct ManifestEntry {
  std::string case_id;
  std::string path;   // relative to the dataset root
  std::string split;  // "train" or "val"
};

/// 80/20 split from a hash of the case id.
std::string split_for(const std::string& case_id);

/// Raw little-endian float32 volumes plus meta.txt.
void save_case_raw(const MultimodalCase& c, const std::filesystem::path& dir);
MultimodalCase load_case_raw(const std::filesystem::path& dir);

void write_manifest(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);

/// Generates `n_cases` phantoms case_000.. into root and writes the manifest.
std::vector<ManifestEntry> generate_dataset(const std::filesystem::path& root, const PhantomSpec& spec, int n_cases,
                                            std::uint64_t seed);

/// Loads cases from a dataset root. split "" or "all" loads everything.
std::vector<MultimodalCase> load_dataset(const std::filesystem::path& root, const std::string& split = "all");

}  // namespace hdseg::data
