// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-round series from run directories, as CSV and as SVG line charts.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace dqoforge::tools {

/// One run: metric -> (round, value) points, rounds ascending.
struct RunSeries {
  std::string label;
  std::map<std::string, std::vector<std::pair<int, double>>> metrics;
};

/// Numeric leaves of a round's dev object with dotted names
/// ({"test":{"qe":{"T":0.8}}} -> "test.qe.T"); "round" is skipped.
void flatten_numeric(const nlohmann::json& j, const std::string& prefix, std::map<std::string, double>& out);

/// Reads <dir>/rounds.jsonl (or <dir>/run/rounds.jsonl). Throws ConfigError
/// when there is no round or no dev metric to plot.
RunSeries read_run_series(const std::filesystem::path& dir, std::string label);

/// Long format: "metric,run,round,value", metrics sorted, runs in input order.
std::string series_csv(const std::vector<RunSeries>& runs);

struct ChartLine {
  std::string label;
  std::vector<std::pair<int, double>> points;
};

/// Self-contained SVG line chart, x = round. Output depends only on the input.
std::string svg_line_chart(const std::string& title, const std::vector<ChartLine>& lines);

/// "test.qe.R&T^c" -> "test_qe_R_T_c"
std::string file_stem(const std::string& metric);

/// Writes series.csv and one <metric>.svg per metric under `out`; returns
/// the files written.
std::vector<std::filesystem::path> write_report(const std::vector<RunSeries>& runs, const std::filesystem::path& out);

}  // namespace dqoforge::tools
