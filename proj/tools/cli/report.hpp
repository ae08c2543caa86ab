#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace flowproto::cli {

// One ResultsTable row. Schema version kCsvSchemaVersion.
struct ResultRow {
  std::string scenario_id;
  std::string method;  // proposed | baseline
  int added_unlabeled_classes = 0;
  double beta = 0.0;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::string split;  // train | validation | test
  int episodes = 0;
  double accuracy = 0.0;
  double negative_cross_entropy = 0.0;
  double wall_clock_seconds = 0.0;
};

const std::string& csv_header();

// %.9g
std::string format_number(double v);
std::string format_row(const ResultRow& row);
std::string format_table(const std::vector<ResultRow>& rows);

struct Series {
  std::string label;
  std::string color;
  bool dashed = false;
  std::vector<std::pair<double, double>> points;
  // Set for a horizontal reference line spanning the panel.
  std::optional<double> level;
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

/// SVG 1.1 document with the panels side by side. Output depends only on the
/// arguments.
std::string render_svg(const std::string& title, const std::vector<Panel>& panels);

}  // namespace flowproto::cli
