#pragma once

#include <string>
#include <vector>

#include "simpleq/common.hpp"

namespace simpleq {

// Minimal deterministic SVG output; enough for run reports without pulling in
// a plotting dependency.

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Band {
  std::vector<double> x;
  std::vector<double> lo;
  std::vector<double> hi;
};

void svg_line_plot(const std::string& path, const std::string& title, const std::string& xlabel,
                   const std::string& ylabel, const std::vector<Series>& series,
                   const Band* band = nullptr);

// Diverging colormap saturating at [vmin, vmax]; matrices larger than 128 per
// side are average-pooled first so files stay a sensible size.
void svg_heatmap(const std::string& path, const std::string& title, const Matrix& values,
                 double vmin, double vmax);

// CSV with one header line; cells kept as strings, parsed on access so error
// messages can carry file/line locations.
struct CsvTable {
  std::string path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // throws IoError when missing
  double num(std::size_t row, int col) const;
  const std::string& str(std::size_t row, int col) const;
};

CsvTable read_csv(const std::string& path);

// Figure families used by the CLI.
void plot_success(const std::vector<std::string>& metrics_files, int window,
                  const std::string& out_path);
void plot_loss(const std::string& metrics_file, const std::string& out_path);
void plot_similarity(const std::string& matrix_file, double clip, const std::string& out_path);
void plot_histogram(const std::string& histogram_file, const std::string& out_path);

}  // namespace simpleq
