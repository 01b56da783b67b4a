#include "hdseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef HDSEG_GIT_DESCRIBE
#define HDSEG_GIT_DESCRIBE "unknown"
#endif

namespace hdseg::report {

namespace fs = std::filesystem;

const char* git_describe() { return HDSEG_GIT_DESCRIBE; }

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

bool is_value_column(const std::string& name) {
  return name == "WT" || name == "TC" || name == "ET" || name == "avg" || name.rfind("missing_", 0) == 0;
}

double parse_number(const std::string& cell, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("malformed CSV: line " + std::to_string(line) + ": \"" + cell + "\" is not a number");
  }
}

std::string safe_name(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

}  // namespace

const std::string* Table::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return &v;
  }
  return nullptr;
}

int Table::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  return it == header.end() ? -1 : static_cast<int>(it - header.begin());
}

Table eval_table(const engine::EvalReport& r) {
  Table t;
  t.metadata = {{"config_hash", r.config_hash},
                {"seed", std::to_string(r.seed)},
                {"git_describe", git_describe()},
                {"dataset_id", r.dataset_id},
                {"cases", std::to_string(r.n_cases)}};
  for (std::size_t i = 0; i < r.regions.size(); ++i) t.metadata.emplace_back("mean_" + r.regions[i], num(r.region_mean[i]));
  t.header.push_back("subset");
  for (const auto& reg : r.regions) t.header.push_back(reg);
  for (std::size_t s = 0; s < r.subsets.size(); ++s) {
    std::vector<std::string> row{r.subsets[s]};
    for (double v : r.dsc[s]) row.push_back(num(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

Table sweep_table(const engine::SweepTable& st) {
  Table t;
  t.metadata = st.metadata;
  t.metadata.emplace(t.metadata.begin() + std::min<std::ptrdiff_t>(1, std::ssize(t.metadata)), "git_describe", git_describe());
  t.header = {"divergence", "alpha", "WT", "TC", "ET", "avg", "config_hash"};
  for (const auto& r : st.rows) {
    t.rows.push_back({r.divergence, r.alpha, num(r.wt), num(r.tc), num(r.et), num(r.avg), r.config_hash});
  }
  return t;
}

Table ablation_table(const engine::AblationTable& at) {
  Table t;
  t.metadata = at.metadata;
  t.metadata.emplace(t.metadata.begin() + std::min<std::ptrdiff_t>(1, std::ssize(t.metadata)), "git_describe", git_describe());
  t.header = {"parallel", "dice", "mi", "hd"};
  for (int b : at.buckets) t.header.push_back("missing_" + std::to_string(b));
  t.header.push_back("avg");
  t.header.push_back("config_hash");
  for (const auto& r : at.rows) {
    std::vector<std::string> row{r.flags.parallel ? "1" : "0", "1", r.flags.use_mi ? "1" : "0", r.flags.use_hd ? "1" : "0"};
    for (int b : at.buckets) row.push_back(num(r.bucket.at(b)));
    row.push_back(num(r.avg));
    row.push_back(r.config_hash);
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string to_csv(const Table& t) {
  std::ostringstream os;
  for (const auto& [k, v] : t.metadata) os << "# " << k << ": " << v << "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return os.str();
}

void write_csv(const fs::path& path, const Table& t) { spit(path, to_csv(t)); }

Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw ConfigError("malformed CSV: line " + std::to_string(line_no) + ": header line without ':'");
      std::string key = line.substr(1, colon - 1);
      std::string value = colon + 1 < line.size() ? line.substr(colon + 1) : "";
      auto trim = [](std::string& s) {
        s.erase(0, s.find_first_not_of(' '));
        s.erase(s.find_last_not_of(' ') + 1);
      };
      trim(key);
      trim(value);
      t.metadata.emplace_back(key, value);
      continue;
    }
    auto cells = split(line, ',');
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ConfigError("malformed CSV: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " fields, header has " + std::to_string(t.header.size()));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (is_value_column(t.header[i])) parse_number(cells[i], line_no);
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw ConfigError("malformed CSV: no header row");
  return t;
}

Table read_csv(const fs::path& path) { return parse_csv(slurp(path)); }

void write_trace(const fs::path& path, const std::vector<engine::StepRecord>& trace) {
  std::ostringstream os;
  for (const auto& r : trace) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["dice"] = r.dice;
    j["mi"] = r.mi;
    j["hd"] = r.hd;
    j["total"] = r.total;
    os << j.dump() << "\n";
  }
  spit(path, os.str());
}

std::vector<engine::StepRecord> read_trace(const fs::path& path) {
  std::istringstream in(slurp(path));
  std::vector<engine::StepRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      engine::StepRecord r;
      r.step = j.at("step").get<int>();
      r.dice = j.at("dice").get<double>();
      r.mi = j.at("mi").get<double>();
      r.hd = j.at("hd").get<double>();
      r.total = j.at("total").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed trace: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---- SVG ----

namespace {

constexpr double kWidth = 760, kHeight = 400;
constexpr double kLeft = 60, kRight = 20, kTop = 40, kBottom = 130;
const char* const kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << px(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  return os.str();
}

void y_axis(std::ostringstream& os, double y_min, double y_max) {
  const double plot_h = kHeight - kTop - kBottom;
  os << "<line x1=\"" << px(kLeft) << "\" y1=\"" << px(kTop) << "\" x2=\"" << px(kLeft) << "\" y2=\""
     << px(kHeight - kBottom) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y_min + (y_max - y_min) * i / 4.0;
    const double y = kHeight - kBottom - plot_h * i / 4.0;
    os << "<line x1=\"" << px(kLeft - 4) << "\" y1=\"" << px(y) << "\" x2=\"" << px(kWidth - kRight) << "\" y2=\""
       << px(y) << "\" stroke=\"#dddddd\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    os << "<text x=\"" << px(kLeft - 6) << "\" y=\"" << px(y + 4) << "\" text-anchor=\"end\">" << buf << "</text>\n";
  }
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values, double y_max) {
  std::ostringstream os;
  os << svg_open(title);
  if (!(y_max > 0.0)) y_max = 1.0;
  y_axis(os, 0.0, y_max);
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  const double slot = plot_w / std::max<std::size_t>(1, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = plot_h * std::clamp(values[i] / y_max, 0.0, 1.0);
    const double x = kLeft + slot * i + slot * 0.15;
    os << "<rect class=\"bar\" x=\"" << px(x) << "\" y=\"" << px(kHeight - kBottom - h) << "\" width=\"" << px(slot * 0.7)
       << "\" height=\"" << px(h) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    const double lx = kLeft + slot * (i + 0.5), ly = kHeight - kBottom + 8;
    os << "<text x=\"" << px(lx) << "\" y=\"" << px(ly) << "\" text-anchor=\"end\" transform=\"rotate(-60 " << px(lx)
       << " " << px(ly) << ")\">" << xml_escape(labels[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string line_chart_svg(const std::string& title, const std::vector<std::string>& series_names,
                           const std::vector<std::vector<double>>& series) {
  std::ostringstream os;
  os << svg_open(title);
  double lo = 0.0, hi = 0.0;
  std::size_t n = 0;
  bool first = true;
  for (const auto& s : series) {
    n = std::max(n, s.size());
    for (double v : s) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  y_axis(os, lo, hi);
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i) {
      const double x = kLeft + (n > 1 ? plot_w * i / (n - 1) : plot_w / 2);
      const double y = kHeight - kBottom - plot_h * (series[k][i] - lo) / (hi - lo);
      os << (i ? " " : "") << px(x) << "," << px(y);
    }
    os << "\"/>\n";
    const double ly = kHeight - kBottom + 40 + 16 * k;
    os << "<rect x=\"" << px(kLeft) << "\" y=\"" << px(ly - 9) << "\" width=\"10\" height=\"10\" fill=\"" << color
       << "\"/>\n";
    os << "<text x=\"" << px(kLeft + 16) << "\" y=\"" << px(ly) << "\">" << xml_escape(series_names[k]) << "</text>\n";
  }
  os << "<text x=\"" << px(kLeft + plot_w / 2) << "\" y=\"" << px(kHeight - kBottom + 24)
     << "\" text-anchor=\"middle\">step</text>\n";
  os << "</svg>\n";
  return os.str();
}

RenderResult render_report(const fs::path& csv, const fs::path& out_dir) {
  const Table t = read_csv(csv);
  RenderResult res;
  const std::string stem = csv.stem().string();
  if (t.rows.empty()) {
    res.warnings.push_back(csv.string() + " has no rows; nothing rendered");
    return res;
  }
  fs::create_directories(out_dir);
  std::vector<int> label_cols, value_cols;
  for (int i = 0; i < static_cast<int>(t.header.size()); ++i) {
    if (is_value_column(t.header[i])) {
      value_cols.push_back(i);
    } else if (t.header[i] != "config_hash") {
      label_cols.push_back(i);
    }
  }
  if (value_cols.empty()) throw ConfigError("malformed CSV: no value columns in " + csv.string());
  std::vector<std::string> labels;
  for (const auto& row : t.rows) {
    std::string l;
    for (int c : label_cols) {
      if (row[c].empty()) continue;
      l += (l.empty() ? "" : " ") + (t.header[c] == "subset" || t.header[c] == "divergence" || t.header[c] == "alpha"
                                         ? row[c]
                                         : t.header[c] + "=" + row[c]);
    }
    labels.push_back(l);
  }
  const std::string* hash = t.meta("config_hash");
  for (int c : value_cols) {
    std::vector<double> values;
    for (const auto& row : t.rows) values.push_back(std::stod(row[c]));
    std::string title = stem + ": " + t.header[c];
    if (hash) title += " (config " + *hash + ")";
    const fs::path out = out_dir / (stem + "_" + safe_name(t.header[c]) + ".svg");
    spit(out, bar_chart_svg(title, labels, values, 1.0));
    res.files.push_back(out);
  }
  return res;
}

RenderResult render_trace(const fs::path& jsonl, const fs::path& out_dir) {
  const auto trace = read_trace(jsonl);
  RenderResult res;
  if (trace.empty()) {
    res.warnings.push_back(jsonl.string() + " is an empty trace; nothing rendered");
    return res;
  }
  std::vector<std::vector<double>> series(4);
  for (const auto& r : trace) {
    series[0].push_back(r.dice);
    series[1].push_back(r.mi);
    series[2].push_back(r.hd);
    series[3].push_back(r.total);
  }
  fs::create_directories(out_dir);
  const fs::path out = out_dir / (jsonl.stem().string() + "_trace.svg");
  spit(out, line_chart_svg(jsonl.stem().string() + ": loss per step", {"dice", "mi", "hd", "total"}, series));
  res.files.push_back(out);
  return res;
}

}  // namespace hdseg::report
