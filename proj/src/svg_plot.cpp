#include "sdevi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace sdevi {

namespace {

constexpr double kWidth = 720.0;
constexpr double kHeight = 440.0;
constexpr double kLeft = 80.0;
constexpr double kRight = 150.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 50.0;
constexpr const char* kColours[] = {"#ff7f0e", "#1f77b4", "#2ca02c", "#d62728", "#9467bd"};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

std::string loss_svg(const std::vector<PlotSeries>& series, const std::string& title) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  int max_iter = 1;
  for (const PlotSeries& s : series) {
    for (const LossRecord& r : s.records) {
      if (!std::isfinite(r.neg_elbo)) continue;
      lo = std::min(lo, r.neg_elbo);
      hi = std::max(hi, r.neg_elbo);
      max_iter = std::max(max_iter, r.iteration);
    }
  }
  if (!std::isfinite(lo)) {
    lo = 1.0;
    hi = 10.0;
  }
  // Log axes need positive values; shift everything by a common offset.
  double shift = 0.0;
  if (lo <= 0.0) shift = 1.0 - lo;
  const double llo = std::floor(std::log10(lo + shift));
  double lhi = std::ceil(std::log10(hi + shift));
  if (lhi <= llo) lhi = llo + 1.0;

  const double pw = kWidth - kLeft - kRight;
  const double ph = kHeight - kTop - kBottom;
  auto px = [&](double it) { return kLeft + pw * it / max_iter; };
  auto py = [&](double v) { return kTop + ph * (lhi - std::log10(v + shift)) / (lhi - llo); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << fmt(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(title) << "</text>\n";
  svg << "<rect x=\"" << fmt(kLeft) << "\" y=\"" << fmt(kTop) << "\" width=\"" << fmt(pw) << "\" height=\""
      << fmt(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(llo); e <= static_cast<int>(lhi); ++e) {
    const double y = kTop + ph * (lhi - e) / (lhi - llo);
    svg << "<line x1=\"" << fmt(kLeft) << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(kLeft + pw) << "\" y2=\""
        << fmt(y) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << fmt(kLeft - 6) << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">1e" << e
        << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double it = max_iter * k / 4.0;
    svg << "<text x=\"" << fmt(px(it)) << "\" y=\"" << fmt(kTop + ph + 18) << "\" text-anchor=\"middle\">"
        << static_cast<int>(std::lround(it)) << "</text>\n";
  }
  svg << "<text x=\"" << fmt(kLeft + pw / 2) << "\" y=\"" << fmt(kHeight - 12)
      << "\" text-anchor=\"middle\">iteration</text>\n";
  std::string ylabel = "loss (negative ELBO)";
  if (shift > 0.0) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "loss + %.6g", shift);
    ylabel = buf;
  }
  svg << "<text transform=\"translate(18," << fmt(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(ylabel) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* colour = kColours[i % (sizeof(kColours) / sizeof(kColours[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const LossRecord& r : series[i].records) {
      if (!std::isfinite(r.neg_elbo)) continue;
      svg << (first ? "" : " ") << fmt(px(r.iteration)) << "," << fmt(py(r.neg_elbo));
      first = false;
    }
    svg << "\"/>\n";
    const double ly = kTop + 16.0 + 18.0 * static_cast<double>(i);
    svg << "<line x1=\"" << fmt(kLeft + pw + 12) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(kLeft + pw + 36)
        << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << fmt(kLeft + pw + 42) << "\" y=\"" << fmt(ly + 4) << "\">" << escape(series[i].name)
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace sdevi
