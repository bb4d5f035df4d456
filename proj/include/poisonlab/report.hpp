#pragma once

#include <string>
#include <vector>

#include "poisonlab/eval.hpp"

namespace poisonlab {

struct ReportTable {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;  // each sized like columns
};

void write_table_csv(const ReportTable& t, const std::string& path);
ReportTable read_table_csv(const std::string& path);  // title = file stem
void write_table_md(const ReportTable& t, const std::string& path);

// Paper-shaped pivots; failed cells render as "FAILED", never blank.
// Rows = poison pct, one median-ASR column per kind.
ReportTable table_poison_pct(const SweepResult& sweep);
// Rows = train SNR, one median-ASR column per test SNR.
ReportTable table_snr_grid(const SweepResult& sweep);
// Rows = poison pct, one median-ASR column per location.
ReportTable table_location(const SweepResult& sweep);
// Rows = defense, columns median ASR / median IFER / median AUC.
ReportTable table_defense(const SweepResult& sweep);
// Flat per-run dump (any sweep).
ReportTable table_runs(const SweepResult& sweep);

// Writes <out_dir>/<name>.csv, <name>.md (pivot chosen by sweep axis) and
// <name>.jsonl (raw per-run records).
void emit_report(const SweepResult& sweep, const std::string& name,
                 const std::string& out_dir);

}  // namespace poisonlab
