#include "ctseg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ctseg::plot {

namespace {

struct Series {
    std::vector<double> x, y;
};

constexpr int kWidth = 900, kPanelH = 230, kMarginL = 70, kMarginR = 25, kMarginT = 30,
              kMarginB = 35, kGap = 20;

void draw_panel(std::ostream& os, int top, const std::string& title, const Series& s,
                const char* color) {
    const int plot_w = kWidth - kMarginL - kMarginR;
    const int plot_h = kPanelH - kMarginT - kMarginB;
    const int left = kMarginL;
    const int bottom = top + kMarginT + plot_h;

    os << "<text x='" << left << "' y='" << top + 18 << "' font-size='14' font-family='sans-serif'>"
       << title << "</text>\n";
    os << "<rect x='" << left << "' y='" << top + kMarginT << "' width='" << plot_w
       << "' height='" << plot_h << "' fill='none' stroke='#888'/>\n";

    if (s.x.empty()) {
        os << "<text x='" << left + plot_w / 2 - 40 << "' y='" << top + kMarginT + plot_h / 2
           << "' font-size='12' font-family='sans-serif' fill='#888'>no records</text>\n";
        return;
    }

    const double xmin = s.x.front(), xmax = s.x.back();
    double ymin = *std::min_element(s.y.begin(), s.y.end());
    double ymax = *std::max_element(s.y.begin(), s.y.end());
    if (ymax - ymin < 1e-12) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    const double xspan = std::max(1.0, xmax - xmin);

    auto px = [&](double x) { return left + (x - xmin) / xspan * plot_w; };
    auto py = [&](double y) {
        return top + kMarginT + plot_h - (y - ymin) / (ymax - ymin) * plot_h;
    };

    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", ymax);
    os << "<text x='" << left - 8 << "' y='" << top + kMarginT + 5
       << "' font-size='11' text-anchor='end' font-family='sans-serif'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.4g", ymin);
    os << "<text x='" << left - 8 << "' y='" << bottom
       << "' font-size='11' text-anchor='end' font-family='sans-serif'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.0f", xmin);
    os << "<text x='" << left << "' y='" << bottom + 16
       << "' font-size='11' font-family='sans-serif'>" << buf << "</text>\n";
    std::snprintf(buf, sizeof(buf), "%.0f", xmax);
    os << "<text x='" << left + plot_w << "' y='" << bottom + 16
       << "' font-size='11' text-anchor='end' font-family='sans-serif'>" << buf
       << "</text>\n";
    os << "<text x='" << left + plot_w / 2 << "' y='" << bottom + 28
       << "' font-size='11' text-anchor='middle' font-family='sans-serif'>iteration</text>\n";

    if (s.x.size() == 1) {
        os << "<circle cx='" << px(s.x[0]) << "' cy='" << py(s.y[0]) << "' r='3' fill='" << color
           << "'/>\n";
        return;
    }
    os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
    for (size_t i = 0; i < s.x.size(); ++i)
        os << px(s.x[i]) << ',' << py(s.y[i]) << (i + 1 < s.x.size() ? " " : "");
    os << "'/>\n";
}

}  // namespace

void write_loss_curves_svg(const train::CurveLog& log, const std::filesystem::path& out) {
    if (log.records.empty()) throw MalformedFile("plot: curves file has no records");

    Series sup, cons, val;
    for (const auto& r : log.records) {
        sup.x.push_back(double(r.iter));
        sup.y.push_back(r.sup);
        cons.x.push_back(double(r.iter));
        cons.y.push_back(r.cons);
        if (r.val) {
            val.x.push_back(double(r.iter));
            val.y.push_back(*r.val);
        }
    }

    const int height = 3 * kPanelH + 2 * kGap + 10;
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw IOFailure("cannot write " + out.string());
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kWidth << "' height='" << height
       << "' viewBox='0 0 " << kWidth << ' ' << height << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    draw_panel(os, 5, "training supervised loss", sup, "#1f77b4");
    draw_panel(os, 5 + kPanelH + kGap, "training consistency loss", cons, "#d62728");
    draw_panel(os, 5 + 2 * (kPanelH + kGap), "validation supervised loss", val, "#2ca02c");
    os << "</svg>\n";
    if (!os) throw IOFailure("write failed: " + out.string());
}

}  // namespace ctseg::plot
