#pragma once
// Run configuration: one JSON document with sections data / network /
// train / eval / losses. Every key has a default; unknown keys are errors.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hdseg/data.hpp"
#include "hdseg/divergence.hpp"
#include "hdseg/losses.hpp"
#include "hdseg/network.hpp"

namespace hdseg::config {

inline constexpr int kSchemaVersion = 1;

struct DataConfig {
  std::string dir = "data/phantom";
  int cases = 64;
  Shape3 shape{32, 32, 32};
  int n_regions = 3;
  double noise_sigma = 0.5;
  /// Empty means the built-in per-modality contrast.
  std::vector<std::vector<double>> contrast;
  std::uint64_t seed = 0;
  std::string train_split = "train";
  std::string eval_split = "val";

  data::PhantomSpec phantom_spec() const;
};

struct LossConfig {
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  double alpha = 1.1;
  /// Segmentation divergence: holder (uses alpha), kl, tv, hellinger,
  /// neyman, js, mse, bce.
  std::string divergence = "holder";
  /// Number of deepest encoder levels that take part in the MI term.
  int mi_levels = 1;
  std::string mi_reduction = "mean";
  /// log_sigma is kept within [-bound, bound] after every update.
  double log_sigma_bound = 3.0;

  losses::LossWeights weights() const { return {lambda1, lambda2}; }
  divergence::DivergenceKind kind() const;
  losses::MIReduction reduction() const;
};

enum class SubsetPolicy { sample_uniform, full_enumeration, full_only };

struct TrainConfig {
  double lr = 8e-4;
  double weight_decay = 1e-5;
  int batch_size = 2;
  int epochs = 30;
  /// Stop after this many optimizer steps; 0 means run every epoch.
  int max_steps = 0;
  std::uint64_t seed = 0;
  SubsetPolicy subset_policy = SubsetPolicy::sample_uniform;
  double grad_clip = 5.0;
  /// Write a checkpoint every n steps; 0 only writes the final one.
  int checkpoint_every = 0;
  LossConfig losses;

  void validate() const;
};

struct EvalConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<double> alphas{1.05, 1.08, 1.10, 1.15, 1.20};
  std::vector<std::string> divergences{"holder", "kl", "tv", "hellinger", "neyman", "js", "mse", "bce"};
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  DataConfig data;
  net::NetworkConfig network;
  TrainConfig train;
  EvalConfig eval;

  void validate() const;
  /// Full-length schedule: 600 epochs, batch 8.
  static RunConfig full_scale();
};

std::string to_string(SubsetPolicy p);
SubsetPolicy parse_subset_policy(const std::string& s);

nlohmann::ordered_json to_json(const net::NetworkConfig& cfg);
net::NetworkConfig network_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Throws ConfigError naming the offending key path.
RunConfig from_json(const nlohmann::json& j);

/// Parses a config document. Errors carry "line N:" prefixes pointing into
/// `text` (syntax errors, unknown keys, bad types, invalid values).
RunConfig parse(std::string_view text);
RunConfig load(const std::string& path);

/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

/// One "section.key = default" line per key, for --help.
std::vector<std::string> describe_defaults();

/// Sets "section.key" from a JSON literal or bare string (used by --set).
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace hdseg::config
