#pragma once
// Training loop, subset evaluation and the experiment drivers built on them
// (alpha sweep, divergence comparison, ablation grid).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hdseg/config.hpp"
#include "hdseg/data.hpp"
#include "hdseg/losses.hpp"
#include "hdseg/network.hpp"

namespace hdseg::engine {

/// 2|P n G| / (|P| + |G|); 1 when both masks are empty.
double dsc(const data::Mask& pred, const data::Mask& truth);

struct Model {
  std::unique_ptr<net::Network> network;
  losses::MIHead mi_head;
  /// Run config recorded in the checkpoint this model was loaded from.
  std::string run_config;
};

/// Fresh network plus an MI head over the `losses.mi_levels` deepest encoder levels.
Model make_model(const net::NetworkConfig& net_cfg, const config::LossConfig& loss_cfg, std::uint64_t seed);
Model load_model(const std::filesystem::path& checkpoint);

/// Encoder levels that feed the MI head, shallowest first.
std::vector<int> mi_feature_levels(const net::NetworkConfig& net_cfg, int mi_levels);

struct StepRecord {
  int step = 0;
  double dice = 0.0;
  double mi = 0.0;
  double hd = 0.0;
  double total = 0.0;
  bool operator==(const StepRecord&) const = default;
};

struct TrainOptions {
  /// Checkpoints go here; empty disables them.
  std::filesystem::path checkpoint_dir;
  /// Stored in every checkpoint so reports can cite the generating config.
  std::string run_config;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::vector<std::filesystem::path> checkpoints;
  /// Backbone passes per optimizer step.
  std::vector<std::size_t> backbone_calls;
};

/// Adam with L2 weight decay and global-norm clipping. Throws
/// NonFiniteLossError naming dice / mi / hd / gradient when a value blows up.
TrainResult train(Model& model, std::span<const data::MultimodalCase> cases, const config::TrainConfig& cfg,
                  const TrainOptions& opts = {});

// ---- evaluation ----

/// Returns one probability field per requested subset, on the case grid.
using SubsetPredictor =
    std::function<std::vector<ProbabilityField>(const data::MultimodalCase&, std::span<const net::ModalitySubset>)>;

/// Each modality branch runs once per case; subsets fuse the cached outputs.
SubsetPredictor network_predictor(const net::Network& network);
/// Predicts the ground truth for every subset.
SubsetPredictor oracle_predictor();

struct EvalReport {
  std::vector<std::string> subsets;  // row labels, enumerate_subsets order
  std::vector<int> subset_sizes;
  std::vector<std::string> regions;  // column labels
  std::vector<std::vector<double>> dsc;
  std::vector<double> region_mean;   // mean over subsets
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string dataset_id;
  int n_modalities = 0;
  int n_cases = 0;

  /// Mean over regions and subsets.
  double mean() const;
  /// Mean DSC over subsets missing `missing` modalities (and over regions).
  double bucket_mean(int missing) const;
  bool operator==(const EvalReport&) const = default;
};

/// Throws ConfigError on an empty dataset.
EvalReport evaluate_subsets(const SubsetPredictor& predictor, int n_modalities,
                            std::span<const data::MultimodalCase> cases,
                            const std::vector<data::RegionSpec>& regions = data::standard_regions());
EvalReport evaluate_subsets(const net::Network& network, std::span<const data::MultimodalCase> cases,
                            const std::vector<data::RegionSpec>& regions = data::standard_regions());

// ---- experiments ----

struct RunResult {
  EvalReport report;
  std::vector<StepRecord> trace;
  std::string config_hash;
};

/// Finished runs keyed by config hash (the hash covers the seed).
using RunCache = std::map<std::string, RunResult>;

struct Experiment {
  config::RunConfig base;
  std::vector<data::MultimodalCase> train_cases;
  std::vector<data::MultimodalCase> eval_cases;
  std::string dataset_id;
  std::function<void(const std::string&)> log;
  /// When set, drivers reuse runs with an identical config instead of retraining.
  std::shared_ptr<RunCache> cache;
};

/// Train from scratch with cfg.train.seed = seed, then evaluate.
RunResult run_once(const config::RunConfig& cfg, const Experiment& exp, std::uint64_t seed);

struct SweepRow {
  std::string divergence;  // "holder", "kl", ... or "none"
  std::string alpha;       // "" for non-Holder rows
  double wt = 0.0, tc = 0.0, et = 0.0, avg = 0.0;  // means over seeds
  std::vector<double> seed_avg;
  std::string config_hash;  // first seed's run config
};

struct SweepTable {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<SweepRow> rows;
};

/// One row per alpha, then KL and no-divergence baselines.
SweepTable sweep_alpha(const std::vector<double>& alphas, const Experiment& exp);
/// Swaps the segmentation divergence; MI and Dice terms unchanged.
SweepTable compare_divergences(const std::vector<divergence::DivergenceKind>& kinds, const Experiment& exp);
/// Holder, TV, squared Hellinger, KL, Neyman chi2, JS, MSE, BCE.
std::vector<divergence::DivergenceKind> standard_divergence_kinds(double alpha);

struct AblationFlags {
  bool parallel = true;
  bool use_mi = true;
  bool use_hd = true;
  std::string label() const;
  bool operator==(const AblationFlags&) const = default;
};

struct AblationGrid {
  std::vector<AblationFlags> runs;
  /// Early-fusion dice-only, parallel dice-only, +MI, +divergence, full.
  static AblationGrid standard();
  /// Throws ConfigError unless a dice-only run is present.
  void validate() const;
};

struct AblationRow {
  AblationFlags flags;
  std::map<int, double> bucket;  // missing count -> mean DSC over seeds
  std::map<int, std::vector<double>> bucket_per_seed;
  double avg = 0.0;
  std::string config_hash;
};

struct AblationTable {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<AblationRow> rows;
  std::vector<int> buckets;  // e.g. 3, 2, 1, 0
};

AblationTable run_ablation(const AblationGrid& grid, const Experiment& exp);

/// RunConfig adjusted for one ablation flag set.
config::RunConfig apply_flags(const config::RunConfig& base, const AblationFlags& flags);

}  // namespace hdseg::engine
