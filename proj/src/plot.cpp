#include "simpleq/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "simpleq/diagnostics.hpp"
#include "simpleq/harness.hpp"

namespace simpleq {
namespace {

constexpr int kWidth = 860;
constexpr int kHeight = 520;
constexpr int kMarginL = 70, kMarginR = 20, kMarginT = 40, kMarginB = 50;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
constexpr int kPaletteSize = 6;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

struct Range {
  double lo = 0.0, hi = 1.0;

  void include(double v) {
    if (std::isfinite(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }

  void pad() {
    if (hi <= lo) {
      lo -= 1.0;
      hi += 1.0;
    } else {
      const double p = 0.05 * (hi - lo);
      lo -= p;
      hi += p;
    }
  }
};

struct Axes {
  Range x, y;

  double px(double v) const {
    return kMarginL + (v - x.lo) / (x.hi - x.lo) * (kWidth - kMarginL - kMarginR);
  }

  double py(double v) const {
    return kHeight - kMarginB - (v - y.lo) / (y.hi - y.lo) * (kHeight - kMarginT - kMarginB);
  }
};

void svg_open(std::ofstream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" font-family=\"monospace\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
      << escape_xml(title) << "</text>\n";
}

void svg_axes(std::ofstream& out, const Axes& ax, const std::string& xlabel,
              const std::string& ylabel) {
  out << "<rect x=\"" << kMarginL << "\" y=\"" << kMarginT << "\" width=\""
      << kWidth - kMarginL - kMarginR << "\" height=\"" << kHeight - kMarginT - kMarginB
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double tx = ax.x.lo + (ax.x.hi - ax.x.lo) * i / 4.0;
    const double ty = ax.y.lo + (ax.y.hi - ax.y.lo) * i / 4.0;
    out << "<text x=\"" << fmt(ax.px(tx)) << "\" y=\"" << kHeight - kMarginB + 16
        << "\" text-anchor=\"middle\">" << fmt_tick(tx) << "</text>\n";
    out << "<text x=\"" << kMarginL - 6 << "\" y=\"" << fmt(ax.py(ty) + 4)
        << "\" text-anchor=\"end\">" << fmt_tick(ty) << "</text>\n";
    out << "<line x1=\"" << kMarginL << "\" y1=\"" << fmt(ax.py(ty)) << "\" x2=\""
        << kWidth - kMarginR << "\" y2=\"" << fmt(ax.py(ty))
        << "\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n";
  }
  out << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\">" << escape_xml(xlabel) << "</text>\n";
  out << "<text x=\"16\" y=\"" << kHeight / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << kHeight / 2 << ")\">" << escape_xml(ylabel) << "</text>\n";
}

// Long traces are strided down; the plot does not need every gradient step.
std::vector<std::size_t> stride_indices(std::size_t n, std::size_t cap = 2000) {
  std::vector<std::size_t> idx;
  if (n == 0) return idx;
  const std::size_t step = n <= cap ? 1 : (n + cap - 1) / cap;
  for (std::size_t i = 0; i < n; i += step) idx.push_back(i);
  if (idx.back() != n - 1) idx.push_back(n - 1);
  return idx;
}

}  // namespace

void svg_line_plot(const std::string& path, const std::string& title, const std::string& xlabel,
                   const std::string& ylabel, const std::vector<Series>& series,
                   const Band* band) {
  if (series.empty()) throw ConfigError("line plot needs at least one series");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);

  Axes ax;
  bool first = true;
  auto seed_range = [&](double xv, double yv) {
    if (first) {
      ax.x.lo = ax.x.hi = xv;
      ax.y.lo = ax.y.hi = yv;
      first = false;
    } else {
      ax.x.include(xv);
      ax.y.include(yv);
    }
  };
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ConfigError("series " + s.name + " has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) seed_range(s.x[i], s.y[i]);
  }
  if (band) {
    for (std::size_t i = 0; i < band->x.size(); ++i) {
      seed_range(band->x[i], band->lo[i]);
      seed_range(band->x[i], band->hi[i]);
    }
  }
  if (first) throw ConfigError("line plot has no data points");
  ax.x.pad();
  ax.y.pad();

  svg_open(out, title);
  svg_axes(out, ax, xlabel, ylabel);

  if (band && !band->x.empty()) {
    out << "<polygon fill=\"#1f77b4\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < band->x.size(); ++i)
      out << fmt(ax.px(band->x[i])) << ',' << fmt(ax.py(band->hi[i])) << ' ';
    for (std::size_t i = band->x.size(); i-- > 0;)
      out << fmt(ax.px(band->x[i])) << ',' << fmt(ax.py(band->lo[i])) << ' ';
    out << "\"/>\n";
  }

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    if (s.x.empty()) continue;
    const char* color = kPalette[k % kPaletteSize];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i : stride_indices(s.x.size()))
      out << fmt(ax.px(s.x[i])) << ',' << fmt(ax.py(s.y[i])) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << kMarginL + 10 << "\" y=\"" << kMarginT + 16 + 16 * k
        << "\" fill=\"" << color << "\">" << escape_xml(s.name) << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path);
}

void svg_heatmap(const std::string& path, const std::string& title, const Matrix& values,
                 double vmin, double vmax) {
  if (values.size() == 0) throw ConfigError("heatmap needs a non-empty matrix");
  if (!(vmax > vmin)) throw ConfigError("heatmap needs vmax > vmin");

  // Average-pool down to at most 128 cells per side.
  Matrix m = values;
  const Eigen::Index cap = 128;
  if (m.rows() > cap || m.cols() > cap) {
    const Eigen::Index br = (m.rows() + cap - 1) / cap;
    const Eigen::Index bc = (m.cols() + cap - 1) / cap;
    const Eigen::Index nr = (m.rows() + br - 1) / br;
    const Eigen::Index nc = (m.cols() + bc - 1) / bc;
    Matrix pooled(nr, nc);
    for (Eigen::Index i = 0; i < nr; ++i)
      for (Eigen::Index j = 0; j < nc; ++j) {
        const Eigen::Index r0 = i * br, c0 = j * bc;
        const Eigen::Index rn = std::min(br, m.rows() - r0);
        const Eigen::Index cn = std::min(bc, m.cols() - c0);
        pooled(i, j) = m.block(r0, c0, rn, cn).mean();
      }
    m = pooled;
  }

  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  svg_open(out, title);

  const double w = static_cast<double>(kWidth - kMarginL - kMarginR) / m.cols();
  const double h = static_cast<double>(kHeight - kMarginT - kMarginB) / m.rows();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double t = (m(i, j) - vmin) / (vmax - vmin);
      t = clip(t, 0.0, 1.0);
      // blue (33,102,172) -> white -> red (178,24,43)
      int r, g, b;
      if (t < 0.5) {
        const double u = t * 2.0;
        r = static_cast<int>(33 + u * (255 - 33));
        g = static_cast<int>(102 + u * (255 - 102));
        b = static_cast<int>(172 + u * (255 - 172));
      } else {
        const double u = (t - 0.5) * 2.0;
        r = static_cast<int>(255 + u * (178 - 255));
        g = static_cast<int>(255 + u * (24 - 255));
        b = static_cast<int>(255 + u * (43 - 255));
      }
      out << "<rect x=\"" << fmt(kMarginL + j * w) << "\" y=\"" << fmt(kMarginT + i * h)
          << "\" width=\"" << fmt(w + 0.5) << "\" height=\"" << fmt(h + 0.5)
          << "\" fill=\"rgb(" << r << ',' << g << ',' << b << ")\"/>\n";
    }
  }
  out << "<rect x=\"" << kMarginL << "\" y=\"" << kMarginT << "\" width=\""
      << kWidth - kMarginL - kMarginR << "\" height=\"" << kHeight - kMarginT - kMarginB
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  out << "<text x=\"" << kMarginL << "\" y=\"" << kHeight - 12 << "\">scale [" << fmt_tick(vmin)
      << ", " << fmt_tick(vmax) << "]</text>\n";
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path);
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  throw IoError(path + ": missing column '" + name + "'");
}

double CsvTable::num(std::size_t row, int col) const {
  const std::string& cell = str(row, col);
  try {
    std::size_t pos = 0;
    const double v = std::stod(cell, &pos);
    if (pos != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw IoError(path + ":" + std::to_string(row + 2) + ": bad number '" + cell + "' in column " +
                  header[static_cast<std::size_t>(col)]);
  }
}

const std::string& CsvTable::str(std::size_t row, int col) const {
  return rows.at(row).at(static_cast<std::size_t>(col));
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CsvTable t;
  t.path = path;
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw IoError(path + ":1: empty csv");
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) t.header.push_back(cell);
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    if (line.back() == ',') row.push_back("");
    if (row.size() != t.header.size())
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(t.header.size()) + " cells, got " + std::to_string(row.size()));
    t.rows.push_back(std::move(row));
  }
  if (t.rows.empty()) throw IoError(path + ": no data rows");
  return t;
}

void plot_success(const std::vector<std::string>& metrics_files, int window,
                  const std::string& out_path) {
  if (metrics_files.empty()) throw ConfigError("success plot needs at least one metrics file");
  if (window < 1) throw ConfigError("window must be positive");

  std::vector<SeedSeries> seeds;
  std::vector<Series> series;
  for (std::size_t k = 0; k < metrics_files.size(); ++k) {
    const CsvTable t = read_csv(metrics_files[k]);
    const int c_phase = t.column("phase");
    const int c_success = t.column("success");
    const int c_fault = t.column("fault");
    const int c_return = t.column("return");
    SeedSeries s;
    s.seed = k;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      if (t.str(r, c_phase) != "online") continue;
      EpisodeRecord rec;
      rec.success = t.num(r, c_success) != 0.0;
      rec.fault = t.num(r, c_fault) != 0.0;
      rec.episode_return = t.num(r, c_return);
      s.episodes.push_back(rec);
    }
    if (s.episodes.empty()) throw IoError(metrics_files[k] + ": no online rows");
    seeds.push_back(std::move(s));
  }

  const RunStatistics stats = run_statistics(seeds, window);
  Band band;
  Series iqm{"success IQM", {}, {}};
  for (int p = 0; p < stats.points; ++p) {
    const double x = stats.episode_axis[static_cast<std::size_t>(p)];
    iqm.x.push_back(x);
    iqm.y.push_back(stats.success_iqm[static_cast<std::size_t>(p)]);
    band.x.push_back(x);
    band.lo.push_back(stats.success_ci_lo[static_cast<std::size_t>(p)]);
    band.hi.push_back(stats.success_ci_hi[static_cast<std::size_t>(p)]);
  }
  series.push_back(std::move(iqm));
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    Series s{"seed " + std::to_string(k), {}, {}};
    for (int p = 0; p < stats.points; ++p) {
      s.x.push_back(stats.episode_axis[static_cast<std::size_t>(p)]);
      s.y.push_back(stats.success_rate(static_cast<Eigen::Index>(k), p));
    }
    series.push_back(std::move(s));
  }
  svg_line_plot(out_path, "online success rate (window " + std::to_string(window) + ")",
                "episode", "success rate", series, stats.ci_valid ? &band : nullptr);
}

void plot_loss(const std::string& metrics_file, const std::string& out_path) {
  const CsvTable t = read_csv(metrics_file);
  const int c_td = t.column("td");
  const int c_total = t.column("critic_total");
  const int c_actor = t.column("actor");
  Series td{"td", {}, {}}, total{"critic_total", {}, {}}, actor{"actor", {}, {}};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double x = static_cast<double>(r + 1);
    td.x.push_back(x);
    td.y.push_back(t.num(r, c_td));
    total.x.push_back(x);
    total.y.push_back(t.num(r, c_total));
    actor.x.push_back(x);
    actor.y.push_back(t.num(r, c_actor));
  }
  svg_line_plot(out_path, "training losses", "update row", "loss", {td, total, actor});
}

void plot_similarity(const std::string& matrix_file, double clip_value,
                     const std::string& out_path) {
  if (!(clip_value > 0.0)) throw ConfigError("clip must be positive");
  const Matrix m = read_matrix_csv(matrix_file);
  svg_heatmap(out_path, "feature similarity", m, -clip_value, clip_value);
}

void plot_histogram(const std::string& histogram_file, const std::string& out_path) {
  const CsvTable t = read_csv(histogram_file);
  const int c_dim = t.column("dim");
  const int c_lo = t.column("lo");
  const int c_hi = t.column("hi");
  const int c_freq = t.column("freq");
  std::vector<Series> series;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto d = static_cast<std::size_t>(t.num(r, c_dim));
    while (series.size() <= d)
      series.push_back(Series{"dim " + std::to_string(series.size()), {}, {}});
    series[d].x.push_back(0.5 * (t.num(r, c_lo) + t.num(r, c_hi)));
    series[d].y.push_back(t.num(r, c_freq));
  }
  svg_line_plot(out_path, "action histogram", "action value", "frequency", series);
}

}  // namespace simpleq
