#pragma once
// Report files: CSV tables with a "# key: value" header block, JSONL loss
// traces, and static SVG charts rendered from them.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hdseg/engine.hpp"

namespace hdseg::report {

using Metadata = std::vector<std::pair<std::string, std::string>>;

/// Build identifier baked in at configure time.
const char* git_describe();

struct Table {
  Metadata metadata;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  const std::string* meta(const std::string& key) const;
  /// Index of a header column, -1 if absent.
  int column(const std::string& name) const;
};

Table eval_table(const engine::EvalReport& r);
Table sweep_table(const engine::SweepTable& t);
Table ablation_table(const engine::AblationTable& t);

void write_csv(const std::filesystem::path& path, const Table& t);
std::string to_csv(const Table& t);
/// Throws ConfigError ("malformed CSV ...") on ragged rows or a missing header.
Table read_csv(const std::filesystem::path& path);
Table parse_csv(const std::string& text);

void write_trace(const std::filesystem::path& path, const std::vector<engine::StepRecord>& trace);
/// Throws ConfigError on malformed lines.
std::vector<engine::StepRecord> read_trace(const std::filesystem::path& path);

struct RenderResult {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
};

/// Evaluation CSVs (first column "subset") give one bar chart per region;
/// sweep and ablation CSVs give one chart per numeric column.
RenderResult render_report(const std::filesystem::path& csv, const std::filesystem::path& out_dir);
/// One line per loss component. An empty trace renders nothing and warns.
RenderResult render_trace(const std::filesystem::path& jsonl, const std::filesystem::path& out_dir);

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values, double y_max);
std::string line_chart_svg(const std::string& title, const std::vector<std::string>& series_names,
                           const std::vector<std::vector<double>>& series);

}  // namespace hdseg::report
