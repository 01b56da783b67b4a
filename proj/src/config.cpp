#include "hdseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace hdseg::config {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<ojson(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
  std::string help;
};

std::string path_of(const Field& f) { return f.section + "." + f.key; }

template <class T>
T as(const json& j, const std::string& path) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw ConfigError(path + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0) {
          throw ConfigError(path + ": expected a non-negative integer");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j.is_number()) throw ConfigError(path + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!j.is_string()) throw ConfigError(path + ": expected a string");
    }
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

Shape3 as_shape(const json& j, const std::string& path) {
  if (j.is_number_integer()) {
    const int n = j.get<int>();
    return {n, n, n};
  }
  if (j.is_array() && j.size() == 3) {
    return {as<int>(j[0], path), as<int>(j[1], path), as<int>(j[2], path)};
  }
  throw ConfigError(path + ": expected an integer or [d, h, w]");
}

ojson shape_json(const Shape3& s) { return ojson::array({s.d, s.h, s.w}); }

template <class T>
std::vector<T> as_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path + ": expected a list");
  std::vector<T> out;
  for (const auto& e : j) out.push_back(as<T>(e, path));
  return out;
}

#define FIELD(SEC, KEY, MEMBER, TYPE, HELP)                                                         \
  Field {                                                                                           \
    SEC, #KEY, [](const RunConfig& c) { return ojson(c.MEMBER); },                                  \
        [](RunConfig& c, const json& j) { c.MEMBER = as<TYPE>(j, std::string(SEC) + "." #KEY); }, HELP \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      FIELD("data", dir, data.dir, std::string, "phantom dataset root (manifest.csv + case directories)"),
      FIELD("data", cases, data.cases, int, "number of phantom cases for gen-data"),
      Field{"data", "shape", [](const RunConfig& c) { return shape_json(c.data.shape); },
            [](RunConfig& c, const json& j) { c.data.shape = as_shape(j, "data.shape"); },
            "phantom grid shape, integer or [d, h, w]"},
      FIELD("data", n_regions, data.n_regions, int, "nested tumor regions per phantom"),
      FIELD("data", noise_sigma, data.noise_sigma, double, "Gaussian noise on phantom intensities"),
      Field{"data", "contrast", [](const RunConfig& c) { return ojson(c.data.contrast); },
            [](RunConfig& c, const json& j) {
              if (!j.is_array()) throw ConfigError("data.contrast: expected a list of rows");
              c.data.contrast.clear();
              for (const auto& row : j) c.data.contrast.push_back(as_list<double>(row, "data.contrast"));
            },
            "per-modality class intensities; [] uses the built-in matrix"},
      FIELD("data", seed, data.seed, std::uint64_t, "phantom generation seed"),
      FIELD("data", train_split, data.train_split, std::string, "manifest split used for training"),
      FIELD("data", eval_split, data.eval_split, std::string, "manifest split used for evaluation"),

      FIELD("network", n_modalities, network.n_modalities, int, "input modalities"),
      FIELD("network", n_classes, network.n_classes, int, "output classes"),
      FIELD("network", levels, network.levels, int, "U-Net resolution levels"),
      FIELD("network", base_channels, network.base_channels, int, "channels at the finest level"),
      FIELD("network", norm_groups, network.norm_groups, int, "GroupNorm groups"),
      Field{"network", "patch_shape", [](const RunConfig& c) { return shape_json(c.network.patch_shape); },
            [](RunConfig& c, const json& j) { c.network.patch_shape = as_shape(j, "network.patch_shape"); },
            "training crop shape"},
      FIELD("network", parallel, network.parallel, bool, "per-modality branches (false: early fusion)"),
      Field{"network", "fusion", [](const RunConfig&) { return ojson("mean"); },
            [](RunConfig&, const json& j) {
              if (as<std::string>(j, "network.fusion") != "mean") throw ConfigError("network.fusion: only \"mean\" is supported");
            },
            "branch combination"},

      FIELD("train", lr, train.lr, double, "Adam learning rate"),
      FIELD("train", weight_decay, train.weight_decay, double, "L2 weight decay"),
      FIELD("train", batch_size, train.batch_size, int, "cases per optimizer step"),
      FIELD("train", epochs, train.epochs, int, "passes over the training split"),
      FIELD("train", max_steps, train.max_steps, int, "stop after this many steps (0: no cap)"),
      FIELD("train", seed, train.seed, std::uint64_t, "initialization / sampling seed"),
      Field{"train", "subset_policy", [](const RunConfig& c) { return ojson(to_string(c.train.subset_policy)); },
            [](RunConfig& c, const json& j) {
              c.train.subset_policy = parse_subset_policy(as<std::string>(j, "train.subset_policy"));
            },
            "sample_uniform | full_enumeration | full_only"},
      FIELD("train", grad_clip, train.grad_clip, double, "global gradient-norm clip (0: off)"),
      FIELD("train", checkpoint_every, train.checkpoint_every, int, "checkpoint cadence in steps (0: final only)"),

      FIELD("losses", lambda1, train.losses.lambda1, double, "MI transfer weight"),
      FIELD("losses", lambda2, train.losses.lambda2, double, "segmentation divergence weight"),
      FIELD("losses", alpha, train.losses.alpha, double, "Holder exponent (> 1)"),
      FIELD("losses", divergence, train.losses.divergence, std::string, "holder | kl | tv | hellinger | neyman | js | mse | bce"),
      FIELD("losses", mi_levels, train.losses.mi_levels, int, "deepest encoder levels in the MI term"),
      FIELD("losses", mi_reduction, train.losses.mi_reduction, std::string, "mean | sum over feature elements"),
      FIELD("losses", log_sigma_bound, train.losses.log_sigma_bound, double, "|log sigma| bound of the MI head"),

      Field{"eval", "seeds", [](const RunConfig& c) { return ojson(c.eval.seeds); },
            [](RunConfig& c, const json& j) { c.eval.seeds = as_list<std::uint64_t>(j, "eval.seeds"); },
            "training seeds for sweeps"},
      Field{"eval", "alphas", [](const RunConfig& c) { return ojson(c.eval.alphas); },
            [](RunConfig& c, const json& j) { c.eval.alphas = as_list<double>(j, "eval.alphas"); },
            "Holder exponents for sweep-alpha"},
      Field{"eval", "divergences", [](const RunConfig& c) { return ojson(c.eval.divergences); },
            [](RunConfig& c, const json& j) { c.eval.divergences = as_list<std::string>(j, "eval.divergences"); },
            "divergence kinds for compare-divergences"},
  };
  return f;
}

#undef FIELD

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

const std::vector<std::string>& sections() {
  static const std::vector<std::string> s{"data", "network", "train", "eval", "losses"};
  return s;
}

// Best-effort line of `"key"` inside `"section"` in the raw text.
int locate(std::string_view text, const std::string& section, const std::string& key) {
  std::size_t from = 0;
  if (!section.empty()) {
    const auto s = text.find("\"" + section + "\"");
    if (s != std::string_view::npos) from = s + section.size() + 2;
  }
  std::size_t pos = key.empty() ? std::string_view::npos : text.find("\"" + key + "\"", from);
  if (pos == std::string_view::npos) pos = from == 0 ? std::string_view::npos : from - section.size() - 2;
  if (pos == std::string_view::npos) return 1;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

// Errors raised while reading the document carry the key path; parse()
// turns that into a line number.
struct KeyedError {
  std::string section;
  std::string key;
  std::string message;
};

RunConfig build(const json& j, KeyedError* where) {
  auto fail = [&](std::string section, std::string key, std::string msg) -> void {
    if (where) *where = {section, key, msg};
    throw ConfigError(msg);
  };
  if (!j.is_object()) fail("", "", "config must be a JSON object");
  RunConfig cfg;
  for (const auto& [name, value] : j.items()) {
    if (name == "schema_version") {
      if (!value.is_number_integer() || value.get<int>() != kSchemaVersion) {
        fail("", "schema_version", "schema_version must be " + std::to_string(kSchemaVersion));
      }
      continue;
    }
    if (std::find(sections().begin(), sections().end(), name) == sections().end()) {
      fail("", name, "unknown section \"" + name + "\"");
    }
    if (!value.is_object()) fail("", name, "section \"" + name + "\" must be an object");
    for (const auto& [key, v] : value.items()) {
      const Field* f = find_field(name, key);
      if (!f) fail(name, key, "unknown key \"" + name + "." + key + "\"");
      try {
        f->set(cfg, v);
      } catch (const ConfigError& e) {
        fail(name, key, e.what());
      }
    }
  }
  if (!j.contains("schema_version")) fail("", "", "missing schema_version");
  return cfg;
}

void validate_with_location(const RunConfig& cfg, KeyedError* where) {
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    // Messages start with the dotted key path.
    const std::string msg = e.what();
    const auto dot = msg.find('.');
    const auto colon = msg.find(':');
    if (where && dot != std::string::npos && colon != std::string::npos && dot < colon) {
      *where = {msg.substr(0, dot), msg.substr(dot + 1, colon - dot - 1), msg};
    }
    throw;
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

data::PhantomSpec DataConfig::phantom_spec() const {
  data::PhantomSpec s = data::PhantomSpec::defaults(shape);
  s.n_regions = n_regions;
  s.noise_sigma = noise_sigma;
  if (!contrast.empty()) {
    s.contrast = contrast;
  } else if (n_regions != 3) {
    for (auto& row : s.contrast) {
      row.resize(n_regions + 1);
      for (int c = 4; c <= n_regions; ++c) row[c] = 0.6 * c;
    }
  }
  return s;
}

divergence::DivergenceKind LossConfig::kind() const {
  if (divergence == "holder") return divergence::DivergenceKind::holder(alpha);
  return divergence::DivergenceKind::parse(divergence);
}

losses::MIReduction LossConfig::reduction() const {
  if (mi_reduction == "mean") return losses::MIReduction::mean;
  if (mi_reduction == "sum") return losses::MIReduction::sum;
  throw ConfigError("losses.mi_reduction: expected \"mean\" or \"sum\", got \"" + mi_reduction + "\"");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr: must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs: must be >= 1");
  if (max_steps < 0) throw ConfigError("train.max_steps: must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip: must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every: must be >= 0");
  try {
    losses.weights().validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("losses.lambda1: ") + e.what());
  }
  try {
    (void)losses.kind();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(losses.divergence == "holder" ? "losses.alpha: " : "losses.divergence: ") + e.what());
  }
  (void)losses.reduction();
  if (losses.mi_levels < 1) throw ConfigError("losses.mi_levels: must be >= 1");
  if (!(losses.log_sigma_bound > 0.0)) throw ConfigError("losses.log_sigma_bound: must be > 0");
}

void RunConfig::validate() const {
  if (data.cases < 1) throw ConfigError("data.cases: must be >= 1");
  try {
    data.phantom_spec().validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("data.contrast: ") + e.what());
  }
  try {
    network.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("network.levels: ") + e.what());
  }
  train.validate();
  if (train.losses.mi_levels > network.levels) throw ConfigError("losses.mi_levels: exceeds network.levels");
  if (eval.seeds.empty()) throw ConfigError("eval.seeds: must not be empty");
  for (double a : eval.alphas) {
    if (!(a > 1.0)) throw ConfigError("eval.alphas: every alpha must be > 1");
  }
  for (const auto& d : eval.divergences) {
    if (d != "holder") (void)divergence::DivergenceKind::parse(d);
  }
}

RunConfig RunConfig::full_scale() {
  RunConfig c;
  c.train.epochs = 600;
  c.train.batch_size = 8;
  return c;
}

std::string to_string(SubsetPolicy p) {
  switch (p) {
    case SubsetPolicy::sample_uniform: return "sample_uniform";
    case SubsetPolicy::full_enumeration: return "full_enumeration";
    case SubsetPolicy::full_only: return "full_only";
  }
  return "?";
}

SubsetPolicy parse_subset_policy(const std::string& s) {
  if (s == "sample_uniform") return SubsetPolicy::sample_uniform;
  if (s == "full_enumeration") return SubsetPolicy::full_enumeration;
  if (s == "full_only") return SubsetPolicy::full_only;
  throw ConfigError("train.subset_policy: unknown policy \"" + s + "\"");
}

ojson to_json(const net::NetworkConfig& n) {
  RunConfig c;
  c.network = n;
  ojson out = ojson::object();
  for (const auto& f : fields()) {
    if (f.section == "network") out[f.key] = f.get(c);
  }
  return out;
}

net::NetworkConfig network_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("network config must be an object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    const Field* f = find_field("network", key);
    if (!f) throw ConfigError("unknown key \"network." + key + "\"");
    f->set(c, v);
  }
  c.network.validate();
  return c.network;
}

ojson to_json(const RunConfig& cfg) {
  ojson out = ojson::object();
  out["schema_version"] = cfg.schema_version;
  for (const auto& s : sections()) {
    ojson sec = ojson::object();
    for (const auto& f : fields()) {
      if (f.section == s) sec[f.key] = f.get(cfg);
    }
    out[s] = std::move(sec);
  }
  return out;
}

RunConfig from_json(const json& j) {
  RunConfig cfg = build(j, nullptr);
  cfg.validate();
  return cfg;
}

RunConfig parse(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const std::size_t byte = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
    throw ConfigError("line " + std::to_string(line) + ": malformed JSON: " + e.what());
  }
  KeyedError where;
  try {
    RunConfig cfg = build(j, &where);
    validate_with_location(cfg, &where);
    return cfg;
  } catch (const ConfigError& e) {
    const int line = locate(text, where.section, where.key);
    throw ConfigError("line " + std::to_string(line) + ": " + e.what());
  }
}

RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ":" + std::string(e.what()).substr(5));  // "line N: ..." -> "path:N: ..."
  }
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(to_json(cfg).dump())));
  return buf;
}

std::vector<std::string> describe_defaults() {
  const RunConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(path_of(f) + " = " + f.get(c).dump() + "  # " + f.help);
  return out;
}

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must look like section.key: " + dotted_key);
  const Field* f = find_field(dotted_key.substr(0, dot), dotted_key.substr(dot + 1));
  if (!f) throw ConfigError("unknown key \"" + dotted_key + "\"");
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;  // bare string
  f->set(cfg, v);
}

}  // namespace hdseg::config
