#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mlcaps/config.hpp"
#include "mlcaps/errors.hpp"

namespace mlcaps {

struct MetricsRow {
  std::size_t epoch = 0;
  std::string level, split;
  double accuracy = 0, loss_margin = 0, loss_recon = 0, loss_total = 0, lr = 0, lambda = 0;
};

inline std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw format_error("metrics: empty file");
  if (detail::trim(line) != kMetricsHeader) throw format_error("metrics: unexpected header '" + line + "'");
  std::vector<MetricsRow> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split(line, ',');
    const std::string where = "metrics: line " + std::to_string(lineno);
    if (f.size() != 9) throw format_error(where + " has " + std::to_string(f.size()) + " fields, expected 9");
    MetricsRow r;
    try {
      r.epoch = detail::parse_number<std::size_t>("epoch", f[0]);
      r.level = f[1];
      r.split = f[2];
      r.accuracy = detail::parse_number<double>("accuracy", f[3]);
      r.loss_margin = detail::parse_number<double>("loss_margin", f[4]);
      r.loss_recon = detail::parse_number<double>("loss_recon", f[5]);
      r.loss_total = detail::parse_number<double>("loss_total", f[6]);
      r.lr = detail::parse_number<double>("lr", f[7]);
      r.lambda = detail::parse_number<double>("lambda", f[8]);
    } catch (const config_error& e) {
      throw format_error(where + ": " + e.what());
    }
    if (r.split != "train" && r.split != "test") throw format_error(where + ": split must be train or test");
    if (r.level.empty()) throw format_error(where + ": empty level name");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw format_error("metrics: no data rows");
  return rows;
}

inline std::vector<MetricsRow> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw missing_data_error("metrics: cannot open " + path.string());
  return read_metrics_csv(in);
}

struct Curve {
  std::string level;
  std::vector<std::size_t> epochs;
  std::vector<double> values;
};

// Test-accuracy curves, one per level in order of first appearance.
inline std::vector<Curve> accuracy_curves(const std::vector<MetricsRow>& rows, const std::string& split = "test") {
  std::vector<Curve> curves;
  for (const auto& r : rows) {
    if (r.split != split) continue;
    auto it = std::find_if(curves.begin(), curves.end(), [&](const Curve& c) { return c.level == r.level; });
    if (it == curves.end()) {
      curves.push_back({r.level, {}, {}});
      it = std::prev(curves.end());
    }
    it->epochs.push_back(r.epoch);
    it->values.push_back(r.accuracy);
  }
  if (curves.empty()) throw format_error("metrics: no " + split + " rows");
  return curves;
}

inline void write_accuracy_svg(std::ostream& out, const std::vector<Curve>& curves, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double W = 640, H = 420, left = 64, right = 150, top = 40, bottom = 52;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t max_epoch = 1;
  double lo = 1.0;
  for (const auto& c : curves) {
    for (auto e : c.epochs) max_epoch = std::max(max_epoch, e);
    for (double v : c.values) lo = std::min(lo, v);
  }
  lo = std::clamp(std::floor(lo * 10.0) / 10.0, 0.0, 0.9);
  const double hi = 1.0;
  auto xs = [&](double e) { return left + (max_epoch == 1 ? 0.5 : (e - 1) / double(max_epoch - 1)) * pw; };
  auto ys = [&](double a) { return top + (hi - a) / (hi - lo) * ph; };
  auto fmt = [](double v) { return format_number(v, "%.2f"); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double a = lo + (hi - lo) * i / 5.0, y = ys(a);
    out << "<line x1=\"" << left << "\" y1=\"" << fmt(y) << "\" x2=\"" << left + pw << "\" y2=\"" << fmt(y)
        << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">"
        << format_number(100 * a, "%.0f") << "</text>\n";
  }
  const std::size_t step = std::max<std::size_t>(1, max_epoch / 10);
  for (std::size_t e = 1; e <= max_epoch; e += step)
    out << "<text x=\"" << fmt(xs(double(e))) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << e
        << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">Epoch</text>\n"
      << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << "Test accuracy (%)</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = colors[i % 6];
    out << "<polyline class=\"curve\" data-level=\"" << c.level << "\" data-values=\"";
    for (std::size_t j = 0; j < c.values.size(); ++j) out << (j ? "," : "") << format_number(c.values[j]);
    out << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < c.values.size(); ++j)
      out << (j ? " " : "") << fmt(xs(double(c.epochs[j]))) << ',' << fmt(ys(c.values[j]));
    out << "\"/>\n";
    for (std::size_t j = 0; j < c.values.size(); ++j)
      out << "<circle class=\"point\" data-level=\"" << c.level << "\" cx=\"" << fmt(xs(double(c.epochs[j])))
          << "\" cy=\"" << fmt(ys(c.values[j])) << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    const double ly = top + 14 + 20.0 * double(i);
    out << "<line x1=\"" << left + pw + 14 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 38 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n<text x=\"" << left + pw + 44 << "\" y=\""
        << ly + 4 << "\">" << c.level << "</text>\n";
  }
  out << "</svg>\n";
}

// Two-row grid: inputs on top, reconstructions below. Values in [0,1], layout
// [n, C, H, W]; C == 1 gives PGM (P5), C == 3 gives PPM (P6).
inline void write_image_grid(const std::filesystem::path& path, std::span<const float> top_row,
                             std::span<const float> bottom_row, std::size_t n, std::size_t channels,
                             std::size_t height, std::size_t width, std::size_t pad = 2) {
  if (channels != 1 && channels != 3) throw dimension_error("image grid: channels must be 1 or 3");
  const std::size_t plane = height * width, img = channels * plane;
  if (top_row.size() != n * img || bottom_row.size() != n * img)
    throw dimension_error("image grid: expected " + std::to_string(n) + " images of " + std::to_string(img) +
                          " values per row");
  const std::size_t gw = n * (width + pad) + pad, gh = 2 * (height + pad) + pad;
  std::vector<std::uint8_t> pix(gw * gh * channels, 255);
  for (std::size_t row = 0; row < 2; ++row) {
    const auto src = row == 0 ? top_row : bottom_row;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
          for (std::size_t c = 0; c < channels; ++c) {
            const float v = std::clamp(src[i * img + c * plane + y * width + x], 0.0f, 1.0f);
            const std::size_t gy = pad + row * (height + pad) + y, gx = pad + i * (width + pad) + x;
            pix[(gy * gw + gx) * channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("image grid: cannot write " + path.string());
  out << (channels == 1 ? "P5" : "P6") << '\n' << gw << ' ' << gh << "\n255\n";
  out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
}

// One column per level, coarse to fine.
inline std::string accuracy_table(const LabelTree& tree, const SplitMetrics& m) {
  std::ostringstream os;
  os << "Level      ";
  for (const auto& l : tree.levels) os << ' ' << std::string(std::max<std::size_t>(9, l.name.size()) - l.name.size(), ' ') << l.name;
  os << "\nAccuracy   ";
  for (std::size_t i = 0; i < tree.depth(); ++i) {
    const std::string cell = format_number(100.0 * m.accuracy[i], "%.2f") + "%";
    os << ' ' << std::string(std::max<std::size_t>(9, tree.levels[i].name.size()) - cell.size(), ' ') << cell;
  }
  os << "\nConsistency " << format_number(m.consistency, "%.4f") << '\n';
  return os.str();
}

}  // namespace mlcaps
