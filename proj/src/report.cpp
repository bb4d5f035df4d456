#include "poisonlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "poisonlab/csv.hpp"

namespace poisonlab {

namespace {

// Cells keyed by "row/col" (or just "row" for one-axis sweeps).
std::pair<std::string, std::string> split_setting(const std::string& s) {
  auto pos = s.find('/');
  if (pos == std::string::npos) return {s, ""};
  return {s.substr(0, pos), s.substr(pos + 1)};
}

std::string cell_median_asr(const SweepCell& cell) {
  if (cell.failed || cell.runs.empty()) return "FAILED";
  return num_to_string(median(cell_asrs(cell)));
}

// Pivot where the setting is "first/second"; rows follow the order the
// values first appear, as do columns.
ReportTable pivot(const SweepResult& sweep, const std::string& title,
                  const std::string& row_label, bool row_is_first) {
  std::vector<std::string> row_keys, col_keys;
  std::map<std::pair<std::string, std::string>, const SweepCell*> cells;
  for (const auto& cell : sweep.cells) {
    auto [a, b] = split_setting(cell.setting);
    std::string r = row_is_first ? a : b;
    std::string c = row_is_first ? b : a;
    if (std::find(row_keys.begin(), row_keys.end(), r) == row_keys.end())
      row_keys.push_back(r);
    if (std::find(col_keys.begin(), col_keys.end(), c) == col_keys.end())
      col_keys.push_back(c);
    cells[{r, c}] = &cell;
  }
  ReportTable t;
  t.title = title;
  t.columns.push_back(row_label);
  for (const auto& c : col_keys) t.columns.push_back(c + "_asr");
  for (const auto& r : row_keys) {
    std::vector<std::string> row{r};
    for (const auto& c : col_keys) {
      auto it = cells.find({r, c});
      row.push_back(it == cells.end() ? "FAILED" : cell_median_asr(*it->second));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void check_unique_settings(const SweepResult& sweep) {
  std::set<std::string> seen;
  for (const auto& cell : sweep.cells)
    if (!seen.insert(cell.setting).second)
      throw std::runtime_error("sweep has duplicate setting '" + cell.setting + "'");
}

}  // namespace

void write_table_csv(const ReportTable& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_table_csv: cannot write " + path);
  f << csv_join(t.columns) << "\n";
  for (const auto& row : t.rows) {
    if (row.size() != t.columns.size())
      throw std::runtime_error("write_table_csv: ragged row in " + t.title);
    f << csv_join(row) << "\n";
  }
  if (!f) throw std::runtime_error("write_table_csv: write failed " + path);
}

ReportTable read_table_csv(const std::string& path) {
  auto rows = csv_read_file(path);
  if (rows.empty()) throw std::runtime_error("read_table_csv: empty file " + path);
  ReportTable t;
  t.title = std::filesystem::path(path).stem().string();
  t.columns = rows[0];
  for (std::size_t i = 1; i < rows.size(); ++i) t.rows.push_back(rows[i]);
  return t;
}

void write_table_md(const ReportTable& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_table_md: cannot write " + path);
  f << "# " << t.title << "\n\n|";
  for (const auto& c : t.columns) f << " " << c << " |";
  f << "\n|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) f << " --- |";
  f << "\n";
  for (const auto& row : t.rows) {
    f << "|";
    for (const auto& cell : row) f << " " << (cell.empty() ? "FAILED" : cell) << " |";
    f << "\n";
  }
}

ReportTable table_poison_pct(const SweepResult& sweep) {
  // setting = kind/pct; rows are percentages, columns kinds.
  return pivot(sweep, "ASR by poisoning percentage", "poison_pct", false);
}

ReportTable table_snr_grid(const SweepResult& sweep) {
  return pivot(sweep, "ASR by trigger SNR (train x test)", "train_snr_db", true);
}

ReportTable table_location(const SweepResult& sweep) {
  return pivot(sweep, "ASR by trigger location", "poison_pct", false);
}

ReportTable table_defense(const SweepResult& sweep) {
  ReportTable t;
  t.title = "Defense comparison";
  t.columns = {"defense", "median_asr", "median_ifer", "median_auc"};
  for (const auto& cell : sweep.cells) {
    std::vector<std::string> row{cell.setting};
    if (cell.failed || cell.runs.empty()) {
      row.insert(row.end(), {"FAILED", "FAILED", "FAILED"});
    } else {
      row.push_back(num_to_string(median(cell_asrs(cell))));
      row.push_back(num_to_string(median(cell_ifers(cell))));
      std::vector<double> aucs;
      for (const auto& r : cell.runs)
        if (!std::isnan(r.detector_auc)) aucs.push_back(r.detector_auc);
      row.push_back(aucs.empty() ? "n/a" : num_to_string(median(aucs)));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

ReportTable table_runs(const SweepResult& sweep) {
  ReportTable t;
  t.title = "Per-run metrics";
  t.columns = {"setting",  "seed",        "asr_pct",     "benign_ifer_pct",
               "auc",      "poison_count", "eligible_test_count", "plan"};
  for (const auto& cell : sweep.cells) {
    if (cell.failed) {
      t.rows.push_back({cell.setting, "FAILED", "FAILED", "FAILED", "FAILED",
                        "FAILED", "FAILED", cell.error});
      continue;
    }
    for (const auto& r : cell.runs)
      t.rows.push_back({cell.setting, std::to_string(r.seed),
                        num_to_string(r.asr_pct), num_to_string(r.benign_ifer_pct),
                        std::isnan(r.detector_auc) ? "n/a"
                                                   : num_to_string(r.detector_auc),
                        std::to_string(r.poison_count),
                        std::to_string(r.eligible_test_count), r.plan_summary});
  }
  return t;
}

void emit_report(const SweepResult& sweep, const std::string& name,
                 const std::string& out_dir) {
  if (sweep.cells.empty()) throw std::runtime_error("emit_report: empty sweep");
  check_unique_settings(sweep);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  ReportTable t;
  if (sweep.axis == "kind x poison_pct") t = table_poison_pct(sweep);
  else if (sweep.axis == "train_snr_db x test_snr_db") t = table_snr_grid(sweep);
  else if (sweep.axis == "location x poison_pct") t = table_location(sweep);
  else if (sweep.axis == "defense") t = table_defense(sweep);
  else t = table_runs(sweep);
  t.title = name;

  write_table_csv(t, (fs::path(out_dir) / (name + ".csv")).string());
  write_table_md(t, (fs::path(out_dir) / (name + ".md")).string());
  std::string jsonl = (fs::path(out_dir) / (name + ".jsonl")).string();
  std::ofstream clear(jsonl, std::ios::trunc);
  clear.close();
  append_runs_jsonl(sweep, jsonl);
}

}  // namespace poisonlab
