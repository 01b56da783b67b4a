#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hdseg/engine.hpp"
#include "hdseg/report.hpp"

using namespace hdseg;
using namespace hdseg::report;
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

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

engine::EvalReport sample_report() {
  engine::EvalReport r;
  r.regions = {"WT", "TC", "ET"};
  r.n_modalities = 4;
  r.n_cases = 2;
  r.config_hash = "00112233aabbccdd";
  r.seed = 3;
  r.dataset_id = "phantom";
  const std::vector<std::string> names{"t1", "t1c", "t2", "flair"};
  int i = 0;
  for (const auto& s : net::enumerate_subsets(4)) {
    r.subsets.push_back(s.label(names));
    r.subset_sizes.push_back(s.size());
    r.dsc.push_back({0.5 + 0.01 * i, 0.4 + 0.02 * i, 0.3 + 0.01 * i});
    ++i;
  }
  r.region_mean = {0.57, 0.54, 0.37};
  return r;
}

}  // namespace

TEST_CASE("evaluation CSV round trip") {
  TempDir tmp("hdseg_test_report_csv");
  const Table t = eval_table(sample_report());
  CHECK(t.header == std::vector<std::string>{"subset", "WT", "TC", "ET"});
  CHECK(t.rows.size() == 15);
  REQUIRE(t.meta("config_hash"));
  CHECK(*t.meta("config_hash") == "00112233aabbccdd");
  CHECK(t.meta("git_describe"));
  CHECK(t.meta("dataset_id"));
  CHECK(t.meta("seed"));
  write_csv(tmp.path / "e.csv", t);
  const Table back = read_csv(tmp.path / "e.csv");
  CHECK(back.metadata == t.metadata);
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(to_csv(back) == slurp(tmp.path / "e.csv"));
  CHECK(back.column("TC") == 2);
  CHECK(back.column("nope") == -1);
}

TEST_CASE("malformed CSV is rejected") {
  CHECK_THROWS_AS(parse_csv("# a: b\nsubset,WT\nx,0.5,0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_csv("subset,WT\nx,abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_csv("# only: metadata\n"), ConfigError);
  try {
    parse_csv("subset,WT\nx\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("malformed CSV") != std::string::npos);
  }
}

TEST_CASE("trace JSONL round trip") {
  TempDir tmp("hdseg_test_report_trace");
  std::vector<engine::StepRecord> tr{{1, 0.9, 0.3, 0.2, 1.25}, {2, 0.8, 0.25, 0.18, 1.105}};
  write_trace(tmp.path / "t.jsonl", tr);
  CHECK(read_trace(tmp.path / "t.jsonl") == tr);
  std::ofstream(tmp.path / "bad.jsonl") << "{\"step\": 1}\nnot json\n";
  CHECK_THROWS_AS(read_trace(tmp.path / "bad.jsonl"), ConfigError);
}

TEST_CASE("rendering is byte-deterministic") {
  TempDir tmp("hdseg_test_report_render");
  write_csv(tmp.path / "eval.csv", eval_table(sample_report()));
  const auto a = render_report(tmp.path / "eval.csv", tmp.path / "a");
  const auto b = render_report(tmp.path / "eval.csv", tmp.path / "b");
  REQUIRE(a.files.size() == 3);
  REQUIRE(b.files.size() == 3);
  for (std::size_t i = 0; i < a.files.size(); ++i) {
    CHECK(a.files[i].filename() == b.files[i].filename());
    CHECK(slurp(a.files[i]) == slurp(b.files[i]));
  }
  // One bar per subset.
  const std::string svg = slurp(a.files[0]);
  std::size_t bars = 0;
  for (std::size_t p = svg.find("class=\"bar\""); p != std::string::npos; p = svg.find("class=\"bar\"", p + 1)) ++bars;
  CHECK(bars == 15);
  CHECK(svg.rfind("<svg", 0) == 0);
}

TEST_CASE("trace rendering and the empty-trace warning") {
  TempDir tmp("hdseg_test_report_trace_svg");
  write_trace(tmp.path / "t.jsonl", {{1, 0.9, 0.3, 0.2, 1.25}, {2, 0.8, 0.25, 0.18, 1.105}});
  const auto r = render_trace(tmp.path / "t.jsonl", tmp.path / "out");
  REQUIRE(r.files.size() == 1);
  CHECK(r.warnings.empty());
  CHECK(slurp(r.files[0]) == slurp(render_trace(tmp.path / "t.jsonl", tmp.path / "out2").files[0]));

  std::ofstream(tmp.path / "empty.jsonl").close();
  const auto e = render_trace(tmp.path / "empty.jsonl", tmp.path / "out3");
  CHECK(e.files.empty());
  CHECK(e.warnings.size() == 1);
}

TEST_CASE("sweep and ablation tables") {
  engine::SweepTable s;
  s.metadata = {{"config_hash", "x"}};
  s.rows.push_back({"holder", "1.1", 0.8, 0.7, 0.6, 0.7, {0.7}, "h1"});
  s.rows.push_back({"kl", "", 0.7, 0.6, 0.5, 0.6, {0.6}, "h2"});
  const Table st = sweep_table(s);
  CHECK(st.header == std::vector<std::string>{"divergence", "alpha", "WT", "TC", "ET", "avg", "config_hash"});
  CHECK(st.rows.size() == 2);
  CHECK(parse_csv(to_csv(st)).rows == st.rows);

  engine::AblationTable a;
  a.buckets = {3, 2, 1, 0};
  engine::AblationRow row;
  row.flags = {true, true, false};
  row.bucket = {{3, 0.4}, {2, 0.5}, {1, 0.6}, {0, 0.7}};
  row.avg = 0.55;
  row.config_hash = "c";
  a.rows.push_back(row);
  const Table at = ablation_table(a);
  CHECK(at.column("missing_3") >= 0);
  CHECK(at.column("avg") >= 0);
  CHECK(parse_csv(to_csv(at)).rows == at.rows);

  TempDir tmp("hdseg_test_report_sweep");
  write_csv(tmp.path / "s.csv", st);
  const auto r = render_report(tmp.path / "s.csv", tmp.path / "plots");
  CHECK(r.files.size() == 4);  // WT, TC, ET, avg
}
