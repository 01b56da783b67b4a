#include "hdseg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <limits>
#include <cstdio>
#include <random>
#include <sstream>

#include "hdseg/nifti.hpp"

namespace hdseg::data {

namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Layout {
  double center[3];  // z, y, x
  double radii[3];
};

Layout draw_layout(const PhantomSpec& spec, std::mt19937_64& rng) {
  const int dims[3] = {spec.shape.d, spec.shape.h, spec.shape.w};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Layout l{};
  for (int a = 0; a < 3; ++a) {
    const double half = (dims[a] - 1) / 2.0;
    l.radii[a] = dims[a] * (0.28 + 0.10 * unit(rng));
    if (l.radii[a] > half) {
      throw GenerationError("tumor regions do not fit a grid of shape " + spec.shape.str());
    }
    const double slack = std::max(0.0, half - l.radii[a] - 1.0);
    l.center[a] = half + slack * (2.0 * unit(rng) - 1.0);
  }
  return l;
}

double region_scale(int r, int n_regions) {
  return n_regions <= 1 ? 1.0 : 1.0 - 0.55 * r / (n_regions - 1);
}

void write_floats(const fs::path& path, const float* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<float> read_floats(const fs::path& path, std::size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("missing volume file " + path.string());
  std::vector<float> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(n * sizeof(float))) {
    throw IngestionError("volume file has the wrong size: " + path.string());
  }
  in.peek();
  if (!in.eof()) throw IngestionError("volume file has trailing bytes: " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : v) {
      auto bits = std::bit_cast<std::uint32_t>(f);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) | (bits >> 24);
      f = std::bit_cast<float>(bits);
    }
  }
  return v;
}

}  // namespace

void MultimodalCase::validate() const {
  if (volumes.empty()) throw DimensionError("case " + case_id + " has no modality volumes");
  if (modality_names.size() != volumes.size()) throw DimensionError("case " + case_id + ": modality names do not match volumes");
  for (std::size_t m = 0; m < volumes.size(); ++m) {
    const auto& v = volumes[m];
    if (v.channels() != 1 || !(v.shape() == label.shape())) {
      throw DimensionError("case " + case_id + ": modality " + modality_names[m] + " has shape " + v.shape().str() +
                           ", label has " + label.shape().str());
    }
    for (float x : v.values()) {
      if (!std::isfinite(x)) throw DegenerateInputError("case " + case_id + ": non-finite intensity in " + modality_names[m]);
    }
  }
  label.validate();
}

PhantomSpec PhantomSpec::defaults(Shape3 shape) {
  PhantomSpec s;
  s.shape = shape;
  s.n_regions = 3;
  const int best[4] = {2, 3, 1, 0};
  s.contrast.assign(4, std::vector<double>(4));
  for (int m = 0; m < 4; ++m) {
    for (int c = 0; c < 4; ++c) s.contrast[m][c] = 0.6 * c;
    s.contrast[m][best[m]] = -1.5;
  }
  return s;
}

double PhantomSpec::min_contrast_gap() const {
  double gap = std::numeric_limits<double>::infinity();
  for (const auto& row : contrast) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      for (std::size_t j = i + 1; j < row.size(); ++j) gap = std::min(gap, std::abs(row[i] - row[j]));
    }
  }
  return gap;
}

void PhantomSpec::validate() const {
  if (shape.d <= 0 || shape.h <= 0 || shape.w <= 0) throw ConfigError("phantom shape must be positive, got " + shape.str());
  if (n_regions < 1 || n_regions > 254) throw ConfigError("phantom n_regions must be in [1, 254]");
  if (contrast.empty()) throw ConfigError("phantom contrast matrix is empty");
  for (const auto& row : contrast) {
    if (static_cast<int>(row.size()) != n_classes()) {
      throw ConfigError("contrast matrix rows need " + std::to_string(n_classes()) + " entries");
    }
    for (double v : row) {
      if (!std::isfinite(v)) throw ConfigError("contrast matrix entries must be finite");
    }
  }
  for (std::size_t a = 0; a < contrast.size(); ++a) {
    for (std::size_t b = a + 1; b < contrast.size(); ++b) {
      if (contrast[a] == contrast[b]) throw ConfigError("contrast rows must differ between modalities");
    }
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
  if (!(noise_sigma < min_contrast_gap())) throw ConfigError("noise_sigma must be below the smallest contrast gap");
}

std::uint64_t case_seed(std::uint64_t seed, const std::string& case_id) {
  return splitmix64(seed ^ splitmix64(fnv1a(case_id)));
}

MultimodalCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed, std::string case_id) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const Layout layout = draw_layout(spec, rng);

  MultimodalCase c;
  c.case_id = std::move(case_id);
  c.seed = seed;
  c.label = LabelField(spec.n_classes(), spec.shape);
  const Shape3 s = spec.shape;
  double inv_r2[3];
  for (int a = 0; a < 3; ++a) inv_r2[a] = 1.0 / (layout.radii[a] * layout.radii[a]);
  std::size_t i = 0;
  for (int z = 0; z < s.d; ++z) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x, ++i) {
        const double dz = z - layout.center[0], dy = y - layout.center[1], dx = x - layout.center[2];
        const double q = dz * dz * inv_r2[0] + dy * dy * inv_r2[1] + dx * dx * inv_r2[2];
        int cls = 0;
        for (int r = 0; r < spec.n_regions; ++r) {
          const double f = region_scale(r, spec.n_regions);
          if (q <= f * f) cls = r + 1;
        }
        c.label[i] = static_cast<std::uint8_t>(cls);
      }
    }
  }
  std::vector<std::size_t> counts(spec.n_classes(), 0);
  for (auto v : c.label.values()) ++counts[v];
  for (int k = 0; k < spec.n_classes(); ++k) {
    if (counts[k] == 0) {
      throw GenerationError("class " + std::to_string(k) + " is empty on a grid of shape " + s.str());
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  const int n_mod = spec.n_modalities();
  c.volumes.reserve(n_mod);
  for (int m = 0; m < n_mod; ++m) {
    ModalityVolume v(1, s);
    for (std::size_t j = 0; j < s.voxels(); ++j) {
      v.values()[j] = static_cast<float>(spec.contrast[m][c.label[j]] + spec.noise_sigma * noise(rng));
    }
    c.volumes.push_back(std::move(v));
  }
  if (n_mod == 4) {
    c.modality_names = default_modality_names();
  } else {
    c.modality_names.clear();
    for (int m = 0; m < n_mod; ++m) c.modality_names.push_back("m" + std::to_string(m));
  }
  return c;
}

std::vector<double> phantom_class_volumes(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const Layout l = draw_layout(spec, rng);
  const double base = 4.0 / 3.0 * std::numbers::pi * l.radii[0] * l.radii[1] * l.radii[2];
  std::vector<double> nested(spec.n_regions + 2, 0.0);
  nested[0] = static_cast<double>(spec.shape.voxels());
  for (int r = 0; r < spec.n_regions; ++r) {
    const double f = region_scale(r, spec.n_regions);
    nested[r + 1] = base * f * f * f;
  }
  std::vector<double> out(spec.n_classes());
  for (int k = 0; k < spec.n_classes(); ++k) out[k] = nested[k] - nested[k + 1];
  return out;
}

const std::vector<RegionSpec>& standard_regions() {
  static const std::vector<RegionSpec> regions{{"WT", {1, 2, 3}}, {"TC", {2, 3}}, {"ET", {3}}};
  return regions;
}

Mask region_mask(const LabelField& label, const RegionSpec& region) {
  Mask m(label.voxels());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = region.member_classes.count(label[i]) ? 1 : 0;
  return m;
}

// ---- BraTS ----

void zscore_nonzero(ModalityVolume& vol) {
  double sum = 0.0;
  std::size_t n = 0;
  for (float x : vol.values()) {
    if (x != 0.0f) {
      sum += x;
      ++n;
    }
  }
  if (n == 0) return;
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (float x : vol.values()) {
    if (x != 0.0f) ss += (x - mean) * (x - mean);
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  for (float& x : vol.values()) {
    if (x == 0.0f) continue;
    x = sd > 0.0 ? static_cast<float>((x - mean) / sd) : 0.0f;
  }
}

namespace {

constexpr const char* kNormalizedTag = "hdseg:zscore";

struct BratsFile {
  std::string role;                  // modality name or "label"
  std::vector<std::string> keys;     // accepted file name suffixes
  std::string save_key;
};

const std::vector<BratsFile>& brats_files() {
  static const std::vector<BratsFile> files{
      {"t1", {"t1"}, "t1"},
      {"t1c", {"t1ce", "t1c", "t1gd"}, "t1ce"},
      {"t2", {"t2"}, "t2"},
      {"flair", {"flair"}, "flair"},
      {"label", {"seg", "label"}, "seg"},
  };
  return files;
}

std::string nifti_stem(const std::string& name) {
  for (const char* ext : {".nii.gz", ".nii"}) {
    const std::string e = ext;
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      return name.substr(0, name.size() - e.size());
    }
  }
  return {};
}

fs::path find_brats_file(const fs::path& dir, const BratsFile& f) {
  std::vector<fs::path> hits;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string stem = nifti_stem(entry.path().filename().string());
    std::transform(stem.begin(), stem.end(), stem.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (stem.empty()) continue;
    for (const auto& key : f.keys) {
      const std::string suffix = "_" + key;
      if (stem == key || (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)) {
        hits.push_back(entry.path());
      }
    }
  }
  if (hits.empty()) throw IngestionError("missing " + f.role + " volume in " + dir.string());
  std::sort(hits.begin(), hits.end());
  if (hits.size() > 1) throw IngestionError("ambiguous " + f.role + " volume in " + dir.string() + ": " + hits[0].filename().string() + ", " + hits[1].filename().string());
  return hits[0];
}

std::uint8_t remap_brats_label(float v, const fs::path& file) {
  const long code = std::lround(v);
  if (static_cast<float>(code) != v) throw IngestionError("non-integer label value in " + file.string());
  switch (code) {
    case 0: return 0;
    case 2: return 1;
    case 1: return 2;
    case 3:
    case 4: return 3;
    default: throw IngestionError("unexpected label value " + std::to_string(code) + " in " + file.string());
  }
}

}  // namespace

MultimodalCase load_brats_case(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IngestionError("not a directory: " + dir.string());
  MultimodalCase c;
  c.case_id = dir.filename().string();
  if (c.case_id.empty()) c.case_id = dir.parent_path().filename().string();
  c.modality_names.clear();
  std::optional<Shape3> shape;
  for (const auto& f : brats_files()) {
    const fs::path path = find_brats_file(dir, f);
    nifti::Volume vol = nifti::read(path);
    if (shape && !(*shape == vol.shape)) {
      throw IngestionError(f.role + " volume has shape " + vol.shape.str() + ", expected " + shape->str() + " in " + dir.string());
    }
    shape = vol.shape;
    if (f.role == "label") {
      c.label = LabelField(4, vol.shape);
      for (std::size_t i = 0; i < vol.data.size(); ++i) c.label[i] = remap_brats_label(vol.data[i], path);
    } else {
      ModalityVolume mv(1, vol.shape);
      for (float x : vol.data) {
        if (!std::isfinite(x)) throw IngestionError("non-finite intensity in " + path.string());
      }
      mv.values() = std::move(vol.data);
      if (vol.description.rfind(kNormalizedTag, 0) != 0) zscore_nonzero(mv);
      c.volumes.push_back(std::move(mv));
      c.modality_names.push_back(f.role);
    }
  }
  return c;
}

void save_brats_case(const MultimodalCase& c, const fs::path& dir) {
  c.validate();
  if (c.volumes.size() != 4) throw DimensionError("BraTS layout needs exactly four modalities");
  fs::create_directories(dir);
  const std::string prefix = c.case_id.empty() ? "case" : c.case_id;
  const auto& files = brats_files();
  for (int m = 0; m < 4; ++m) {
    nifti::Volume v;
    v.shape = c.shape();
    v.data = c.volumes[m].values();
    v.description = kNormalizedTag;
    nifti::write(dir / (prefix + "_" + files[m].save_key + ".nii.gz"), v);
  }
  static const float codes[4] = {0.0f, 2.0f, 1.0f, 4.0f};
  nifti::Volume lab;
  lab.shape = c.shape();
  lab.data.resize(c.label.voxels());
  for (std::size_t i = 0; i < lab.data.size(); ++i) lab.data[i] = codes[c.label[i]];
  lab.description = "hdseg:label";
  nifti::write(dir / (prefix + "_seg.nii.gz"), lab);
}

// ---- on-disk phantom datasets ----

std::string split_for(const std::string& case_id) {
  return fnv1a(case_id) % 100 < 80 ? "train" : "val";
}

void save_case_raw(const MultimodalCase& c, const fs::path& dir) {
  c.validate();
  fs::create_directories(dir);
  const Shape3 s = c.shape();
  for (std::size_t m = 0; m < c.volumes.size(); ++m) {
    write_floats(dir / (c.modality_names[m] + ".raw"), c.volumes[m].data(), s.voxels());
  }
  std::vector<float> lab(c.label.voxels());
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<float>(c.label[i]);
  write_floats(dir / "label.raw", lab.data(), lab.size());

  std::ofstream meta(dir / "meta.txt");
  meta << "case_id " << c.case_id << "\n";
  meta << "shape " << s.d << " " << s.h << " " << s.w << "\n";
  meta << "dtype float32le\n";
  meta << "modalities";
  for (const auto& n : c.modality_names) meta << " " << n;
  meta << "\n";
  meta << "n_classes " << c.label.n_classes() << "\n";
  meta << "class_map 0:background 1:edema 2:core 3:enhancing\n";
  meta << "seed " << c.seed << "\n";
  if (!meta) throw Error("cannot write metadata in " + dir.string());
}

MultimodalCase load_case_raw(const fs::path& dir) {
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw IngestionError("missing meta.txt in " + dir.string());
  MultimodalCase c;
  c.modality_names.clear();
  Shape3 s{};
  int n_classes = 4;
  std::string line;
  while (std::getline(meta, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "case_id") {
      ls >> c.case_id;
    } else if (key == "shape") {
      ls >> s.d >> s.h >> s.w;
    } else if (key == "dtype") {
      std::string dt;
      ls >> dt;
      if (dt != "float32le") throw IngestionError("unsupported dtype " + dt + " in " + dir.string());
    } else if (key == "modalities") {
      std::string n;
      while (ls >> n) c.modality_names.push_back(n);
    } else if (key == "n_classes") {
      ls >> n_classes;
    } else if (key == "seed") {
      ls >> c.seed;
    }
  }
  if (s.voxels() == 0 || c.modality_names.empty()) throw IngestionError("incomplete meta.txt in " + dir.string());
  for (const auto& n : c.modality_names) {
    ModalityVolume v(1, s);
    v.values() = read_floats(dir / (n + ".raw"), s.voxels());
    c.volumes.push_back(std::move(v));
  }
  const auto lab = read_floats(dir / "label.raw", s.voxels());
  c.label = LabelField(n_classes, s);
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (!(lab[i] >= 0.0f && lab[i] < static_cast<float>(n_classes)) || std::floor(lab[i]) != lab[i]) {
      throw IngestionError("bad label value in " + dir.string());
    }
    c.label[i] = static_cast<std::uint8_t>(lab[i]);
  }
  c.validate();
  return c;
}

void write_manifest(const fs::path& root, const std::vector<ManifestEntry>& entries) {
  fs::create_directories(root);
  std::ofstream out(root / "manifest.csv");
  out << "case_id,path,split\n";
  for (const auto& e : entries) out << e.case_id << "," << e.path << "," << e.split << "\n";
  if (!out) throw Error("cannot write manifest in " + root.string());
}

std::vector<ManifestEntry> read_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.csv");
  if (!in) throw IngestionError("missing manifest.csv in " + root.string());
  std::string line;
  if (!std::getline(in, line) || line != "case_id,path,split") {
    throw IngestionError("manifest.csv must start with 'case_id,path,split' in " + root.string());
  }
  std::vector<ManifestEntry> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 3) throw IngestionError("manifest.csv line " + std::to_string(line_no) + ": expected 3 fields");
    out.push_back({cells[0], cells[1], cells[2]});
  }
  return out;
}

std::vector<ManifestEntry> generate_dataset(const fs::path& root, const PhantomSpec& spec, int n_cases, std::uint64_t seed) {
  if (n_cases < 1) throw ConfigError("need at least one case");
  spec.validate();
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < n_cases; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03d", i);
    const MultimodalCase c = generate_phantom(spec, case_seed(seed, id), id);
    save_case_raw(c, root / id);
    entries.push_back({id, id, split_for(id)});
  }
  write_manifest(root, entries);
  return entries;
}

std::vector<MultimodalCase> load_dataset(const fs::path& root, const std::string& split) {
  std::vector<MultimodalCase> out;
  for (const auto& e : read_manifest(root)) {
    if (!split.empty() && split != "all" && e.split != split) continue;
    out.push_back(load_case_raw(root / e.path));
  }
  return out;
}

}  // namespace hdseg::data
