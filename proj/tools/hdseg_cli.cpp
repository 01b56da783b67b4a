// Command-line front end: dataset generation, training, evaluation,
// experiment sweeps and report rendering.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "hdseg/checkpoint.hpp"
#include "hdseg/config.hpp"
#include "hdseg/data.hpp"
#include "hdseg/engine.hpp"
#include "hdseg/report.hpp"

namespace fs = std::filesystem;
using namespace hdseg;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out;
};

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("HDSEG_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

config::RunConfig load_config(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::RunConfig{} : config::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + kv);
    config::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

Shape3 parse_shape(const std::string& s) {
  std::vector<int> dims;
  std::stringstream ss(s);
  std::string part;
  try {
    while (std::getline(ss, part, 'x')) dims.push_back(std::stoi(part));
  } catch (const std::exception&) {
    throw ConfigError("--shape expects N or DxHxW, got " + s);
  }
  if (dims.size() == 1) return {dims[0], dims[0], dims[0]};
  if (dims.size() == 3) return {dims[0], dims[1], dims[2]};
  throw ConfigError("--shape expects N or DxHxW, got " + s);
}

std::string dataset_id(const fs::path& root) {
  std::ifstream in(root / "manifest.csv", std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : ss.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s@%08llx", root.filename().string().c_str(),
                static_cast<unsigned long long>(h & 0xffffffffull));
  return buf;
}

void log(const std::string& msg) { std::cerr << "[hdseg] " << msg << std::endl; }

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

void emit_csv(const std::string& out, const report::Table& t) {
  if (out.empty() || out == "-") {
    std::cout << report::to_csv(t);
  } else {
    const fs::path p = output_path(out);
    report::write_csv(p, t);
    log("wrote " + p.string());
  }
}

engine::Experiment experiment(const config::RunConfig& cfg, const std::string& data_dir) {
  engine::Experiment exp;
  exp.base = cfg;
  const fs::path root = data_dir.empty() ? fs::path(cfg.data.dir) : fs::path(data_dir);
  exp.train_cases = data::load_dataset(root, cfg.data.train_split);
  exp.eval_cases = data::load_dataset(root, cfg.data.eval_split);
  if (exp.train_cases.empty()) throw ConfigError("no '" + cfg.data.train_split + "' cases in " + root.string());
  if (exp.eval_cases.empty()) throw ConfigError("no '" + cfg.data.eval_split + "' cases in " + root.string());
  exp.dataset_id = dataset_id(root);
  exp.log = log;
  return exp;
}

void apply_sweep_seed(config::RunConfig& cfg, const std::optional<std::uint64_t>& seed) {
  if (!seed) return;
  for (std::size_t i = 0; i < cfg.eval.seeds.size(); ++i) cfg.eval.seeds[i] = *seed + i;
}

void add_common(CLI::App* app, Common& c, const std::string& out_help) {
  app->add_option("--config", c.config_path, "JSON run config");
  app->add_option("--seed", c.seed, "seed governing all randomness of this command");
  app->add_option("--set", c.overrides, "override one config key, e.g. --set train.lr=0.001")->take_all();
  app->add_option("--out", c.out, out_help);
  std::string keys = "\nConfig keys (section.key = default):\n";
  for (const auto& line : config::describe_defaults()) keys += "  " + line + "\n";
  keys += "\nRelative output paths are placed under $HDSEG_OUTPUT_ROOT when it is set.\n";
  app->footer(keys);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Missing-modality brain tumor segmentation toolkit"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  int cases = 0;
  std::string shape;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic multimodal phantom dataset");
  add_common(gen_cmd, gen, "dataset directory (default data.dir)");
  gen_cmd->add_option("--cases", cases, "number of cases (default data.cases)");
  gen_cmd->add_option("--shape", shape, "grid shape N or DxHxW (default data.shape)");

  // train
  Common tr;
  std::string train_data;
  int steps = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes trace.jsonl, config.json and checkpoints");
  add_common(train_cmd, tr, "run directory (default runs/train)");
  train_cmd->add_option("--data", train_data, "dataset directory (default data.dir)");
  train_cmd->add_option("--steps", steps, "cap on optimizer steps (train.max_steps)");

  // eval
  Common ev;
  std::string checkpoint, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint under every modality subset");
  add_common(eval_cmd, ev, "CSV path (default stdout)");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory (default data.dir)");

  // sweep-alpha
  Common sw;
  std::string sweep_data;
  std::vector<double> alphas;
  auto* sweep_cmd = app.add_subcommand("sweep-alpha", "train and evaluate across Holder exponents plus KL and no-divergence baselines");
  add_common(sweep_cmd, sw, "CSV path (default stdout)");
  sweep_cmd->add_option("--data", sweep_data, "dataset directory (default data.dir)");
  sweep_cmd->add_option("--alphas", alphas, "comma-separated exponents (default eval.alphas)")->delimiter(',');

  // compare-divergences
  Common cd;
  std::string cmp_data;
  std::vector<std::string> kinds;
  auto* cmp_cmd = app.add_subcommand("compare-divergences", "train and evaluate with each segmentation divergence");
  add_common(cmp_cmd, cd, "CSV path (default stdout)");
  cmp_cmd->add_option("--data", cmp_data, "dataset directory (default data.dir)");
  cmp_cmd->add_option("--kinds", kinds, "comma-separated kinds (default eval.divergences)")->delimiter(',');

  // ablate
  Common ab;
  std::string abl_data;
  auto* abl_cmd = app.add_subcommand("ablate", "run the parallel-framework / MI / divergence ablation grid");
  add_common(abl_cmd, ab, "CSV path (default stdout)");
  abl_cmd->add_option("--data", abl_data, "dataset directory (default data.dir)");

  // report
  std::string rep_csv, rep_trace, rep_out = "plots";
  auto* rep_cmd = app.add_subcommand("report", "render SVG charts from a report CSV and/or a loss trace");
  rep_cmd->add_option("--csv", rep_csv, "report CSV");
  rep_cmd->add_option("--trace", rep_trace, "loss trace (JSONL)");
  rep_cmd->add_option("--out", rep_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (gen_cmd->parsed()) {
      config::RunConfig cfg = load_config(gen);
      if (gen.seed) cfg.data.seed = *gen.seed;
      if (cases > 0) cfg.data.cases = cases;
      if (!shape.empty()) cfg.data.shape = parse_shape(shape);
      cfg.validate();
      const fs::path root = output_path(gen.out.empty() ? cfg.data.dir : gen.out);
      const auto entries = data::generate_dataset(root, cfg.data.phantom_spec(), cfg.data.cases, cfg.data.seed);
      log("wrote " + std::to_string(entries.size()) + " cases to " + root.string());
      return 0;
    }
    if (train_cmd->parsed()) {
      config::RunConfig cfg = load_config(tr);
      if (tr.seed) cfg.train.seed = *tr.seed;
      if (steps > 0) cfg.train.max_steps = steps;
      cfg.validate();
      const fs::path root = train_data.empty() ? fs::path(cfg.data.dir) : fs::path(train_data);
      const auto cases_v = data::load_dataset(root, cfg.data.train_split);
      if (cases_v.empty()) throw ConfigError("no '" + cfg.data.train_split + "' cases in " + root.string());
      const fs::path run_dir = output_path(tr.out.empty() ? "runs/train" : tr.out);
      fs::create_directories(run_dir);
      write_text(run_dir / "config.json", config::to_json(cfg).dump(2) + "\n");
      engine::Model model = engine::make_model(cfg.network, cfg.train.losses, cfg.train.seed);
      engine::TrainOptions opts;
      opts.checkpoint_dir = run_dir / "checkpoints";
      opts.run_config = config::to_json(cfg).dump();
      opts.on_step = [](const engine::StepRecord& r) {
        if (r.step % 10 == 0) {
          char buf[160];
          std::snprintf(buf, sizeof(buf), "step %d total=%.5f dice=%.5f mi=%.5f hd=%.5f", r.step, r.total, r.dice,
                        r.mi, r.hd);
          log(buf);
        }
      };
      const auto result = engine::train(model, cases_v, cfg.train, opts);
      report::write_trace(run_dir / "trace.jsonl", result.trace);
      log("config " + config::config_hash(cfg) + "; wrote " + (run_dir / "trace.jsonl").string() + " and " +
          std::to_string(result.checkpoints.size()) + " checkpoint(s)");
      return 0;
    }
    if (eval_cmd->parsed()) {
      engine::Model model = engine::load_model(checkpoint);
      // The training config recorded in the checkpoint is the baseline; an
      // explicit --config still wins.
      config::RunConfig cfg = (!ev.config_path.empty() || model.run_config.empty())
                                  ? load_config(ev)
                                  : config::from_json(nlohmann::json::parse(model.run_config));
      if (ev.config_path.empty() && !model.run_config.empty()) {
        for (const auto& kv : ev.overrides) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + kv);
          config::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
      }
      cfg.validate();
      const fs::path root = eval_data.empty() ? fs::path(cfg.data.dir) : fs::path(eval_data);
      const auto cases_v = data::load_dataset(root, cfg.data.eval_split);
      auto rep = engine::evaluate_subsets(*model.network, cases_v);
      cfg.network = model.network->config();
      rep.config_hash = config::config_hash(cfg);
      rep.seed = ev.seed.value_or(cfg.train.seed);
      rep.dataset_id = dataset_id(root);
      emit_csv(ev.out, report::eval_table(rep));
      return 0;
    }
    if (sweep_cmd->parsed()) {
      config::RunConfig cfg = load_config(sw);
      apply_sweep_seed(cfg, sw.seed);
      if (!alphas.empty()) cfg.eval.alphas = alphas;
      cfg.validate();
      const auto exp = experiment(cfg, sweep_data);
      emit_csv(sw.out, report::sweep_table(engine::sweep_alpha(cfg.eval.alphas, exp)));
      return 0;
    }
    if (cmp_cmd->parsed()) {
      config::RunConfig cfg = load_config(cd);
      apply_sweep_seed(cfg, cd.seed);
      if (!kinds.empty()) cfg.eval.divergences = kinds;
      cfg.validate();
      std::vector<divergence::DivergenceKind> ks;
      for (const auto& k : cfg.eval.divergences) {
        ks.push_back(k == "holder" ? divergence::DivergenceKind::holder(cfg.train.losses.alpha)
                                   : divergence::DivergenceKind::parse(k));
      }
      const auto exp = experiment(cfg, cmp_data);
      emit_csv(cd.out, report::sweep_table(engine::compare_divergences(ks, exp)));
      return 0;
    }
    if (abl_cmd->parsed()) {
      config::RunConfig cfg = load_config(ab);
      apply_sweep_seed(cfg, ab.seed);
      cfg.validate();
      const auto exp = experiment(cfg, abl_data);
      emit_csv(ab.out, report::ablation_table(engine::run_ablation(engine::AblationGrid::standard(), exp)));
      return 0;
    }
    if (rep_cmd->parsed()) {
      if (rep_csv.empty() && rep_trace.empty()) throw ConfigError("report needs --csv and/or --trace");
      const fs::path out = output_path(rep_out);
      std::vector<report::RenderResult> results;
      if (!rep_csv.empty()) results.push_back(report::render_report(rep_csv, out));
      if (!rep_trace.empty()) results.push_back(report::render_trace(rep_trace, out));
      for (const auto& r : results) {
        for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
        for (const auto& f : r.files) log("wrote " + f.string());
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DegenerateInputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "error: " << e.what() << " [component: " << e.component() << "]\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
