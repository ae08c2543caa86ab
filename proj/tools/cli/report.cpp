#include "cli/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace flowproto::cli {

const std::string& csv_header() {
  static const std::string header =
      "scenario_id,method,added_unlabeled_classes,beta,epoch,seed,split,episodes,accuracy,"
      "negative_cross_entropy,wall_clock_seconds";
  return header;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string format_row(const ResultRow& r) {
  std::string s;
  s += r.scenario_id + ',' + r.method + ',' + std::to_string(r.added_unlabeled_classes) + ',';
  s += format_number(r.beta) + ',' + std::to_string(r.epoch) + ',' + std::to_string(r.seed) + ',';
  s += r.split + ',' + std::to_string(r.episodes) + ',';
  s += format_number(r.accuracy) + ',' + format_number(r.negative_cross_entropy) + ',';
  s += format_number(r.wall_clock_seconds);
  return s;
}

std::string format_table(const std::vector<ResultRow>& rows) {
  std::string s = csv_header() + '\n';
  for (const ResultRow& r : rows) s += format_row(r) + '\n';
  return s;
}

namespace {

constexpr double kPanelW = 440, kPanelH = 330;
constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 55;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string coord(double v) { return fmt("%.2f", v); }

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (lo > hi) {
      lo = 0;
      hi = 1;
    } else if (lo == hi) {
      double pad = std::max(std::abs(lo) * 0.05, 1e-3);
      lo -= pad;
      hi += pad;
    } else {
      double pad = (hi - lo) * 0.05;
      lo -= pad;
      hi += pad;
    }
  }
};

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 11,
                 const char* extra = "") {
  return "<text x=\"" + coord(x) + "\" y=\"" + coord(y) + "\" font-size=\"" + std::to_string(size) +
         "\" text-anchor=\"" + anchor + "\"" + extra + ">" + escape(s) + "</text>\n";
}

std::string line(double x1, double y1, double x2, double y2, const std::string& stroke, bool dashed,
                 double width = 1.5) {
  std::string s = "<line x1=\"" + coord(x1) + "\" y1=\"" + coord(y1) + "\" x2=\"" + coord(x2) + "\" y2=\"" +
                  coord(y2) + "\" stroke=\"" + stroke + "\" stroke-width=\"" + fmt("%.1f", width) + "\"";
  if (dashed) s += " stroke-dasharray=\"6,4\"";
  return s + "/>\n";
}

std::string render_panel(const Panel& p, double ox) {
  Range xr, yr;
  for (const Series& s : p.series) {
    for (auto [x, y] : s.points) {
      xr.add(x);
      yr.add(y);
    }
    if (s.level) yr.add(*s.level);
  }
  xr.settle();
  yr.settle();
  const double x0 = ox + kLeft, x1 = ox + kPanelW - kRight;
  const double y0 = kTop, y1 = kPanelH - kBottom;
  auto px = [&](double x) { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * (x1 - x0); };
  auto py = [&](double y) { return y1 - (y - yr.lo) / (yr.hi - yr.lo) * (y1 - y0); };

  std::string s;
  s += text(ox + kPanelW / 2, 22, p.title, "middle", 13);
  s += "<rect x=\"" + coord(x0) + "\" y=\"" + coord(y0) + "\" width=\"" + coord(x1 - x0) + "\" height=\"" +
       coord(y1 - y0) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double fx = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    double fy = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    s += line(px(fx), y1, px(fx), y1 + 5, "#444", false, 1.0);
    s += text(px(fx), y1 + 18, fmt("%.3g", fx));
    s += line(x0 - 5, py(fy), x0, py(fy), "#444", false, 1.0);
    s += text(x0 - 8, py(fy) + 4, fmt("%.3g", fy), "end");
  }
  s += text((x0 + x1) / 2, kPanelH - 15, p.x_label);
  s += text(ox + 16, (y0 + y1) / 2, p.y_label, "middle", 11,
            (" transform=\"rotate(-90 " + coord(ox + 16) + " " + coord((y0 + y1) / 2) + ")\"").c_str());

  for (const Series& ser : p.series) {
    if (ser.level) s += line(x0, py(*ser.level), x1, py(*ser.level), ser.color, ser.dashed);
    if (!ser.points.empty()) {
      s += "<polyline fill=\"none\" stroke=\"" + ser.color + "\" stroke-width=\"1.5\"";
      if (ser.dashed) s += " stroke-dasharray=\"6,4\"";
      s += " points=\"";
      for (std::size_t i = 0; i < ser.points.size(); ++i) {
        if (i) s += ' ';
        s += coord(px(ser.points[i].first)) + "," + coord(py(ser.points[i].second));
      }
      s += "\"/>\n";
      for (auto [x, y] : ser.points) {
        s += "<circle cx=\"" + coord(px(x)) + "\" cy=\"" + coord(py(y)) + "\" r=\"2.5\" fill=\"" + ser.color +
             "\"/>\n";
      }
    }
  }
  double ly = y0 + 14;
  for (const Series& ser : p.series) {
    s += line(x1 - 120, ly - 4, x1 - 98, ly - 4, ser.color, ser.dashed);
    s += text(x1 - 94, ly, ser.label, "start", 10);
    ly += 14;
  }
  return s;
}

}  // namespace

std::string render_svg(const std::string& title, const std::vector<Panel>& panels) {
  double width = kPanelW * std::max<std::size_t>(panels.size(), 1);
  double height = kPanelH + 30;
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + coord(width) + "\" height=\"" +
       coord(height) + "\" viewBox=\"0 0 " + coord(width) + " " + coord(height) + "\">\n";
  s += "<title>" + escape(title) + "</title>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<g transform=\"translate(0,30)\">\n";
  for (std::size_t i = 0; i < panels.size(); ++i) s += render_panel(panels[i], kPanelW * i);
  s += "</g>\n";
  s += text(width / 2, 18, title, "middle", 14);
  s += "</svg>\n";
  return s;
}

}  // namespace flowproto::cli
