#include "vasc/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vasc/error.hpp"

namespace vasc {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string header(int width, int height, const std::string& title) {
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << escape(title) << "</text>\n";
  return out.str();
}

}  // namespace

std::string roc_svg(std::span<const NamedCurve> curves, const std::string& title) {
  const int w = 640, h = 480, left = 60, top = 40, size = 380;
  std::ostringstream out;
  out << header(w, h, title);
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << top + size << "\" x2=\"" << left + size << "\" y2=\""
      << top << "\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double f = t / 4.0;
    out << "<text x=\"" << num(left + f * size) << "\" y=\"" << top + size + 16
        << "\" text-anchor=\"middle\" font-size=\"11\">" << num(f) << "</text>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << num(top + size - f * size + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << num(f) << "</text>\n";
  }
  out << "<text x=\"" << left + size / 2 << "\" y=\"" << top + size + 34
      << "\" text-anchor=\"middle\" font-size=\"12\">False positive rate</text>\n";
  out << "<text x=\"16\" y=\"" << top + size / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "transform=\"rotate(-90 16 " << top + size / 2 << ")\">True positive rate</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
    for (const auto& p : curves[i].curve.points) {
      out << num(left + p.fpr * size) << ',' << num(top + size - p.tpr * size) << ' ';
    }
    out << "\"/>\n";
    const int ly = top + 12 + static_cast<int>(i) * 16;
    out << "<line x1=\"" << left + size + 14 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + size + 30
        << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    char auc[32];
    std::snprintf(auc, sizeof auc, "%.4f", curves[i].auc);
    out << "<text x=\"" << left + size + 34 << "\" y=\"" << ly << "\" font-size=\"11\">"
        << escape(curves[i].label) << " (" << auc << ")</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string embedding_svg(std::span<const EmbeddingPoint> points,
                          const std::vector<std::string>& class_order, const std::string& title) {
  const int w = 640, h = 480, left = 30, top = 40, size = 420;
  std::ostringstream out;
  out << header(w, h, title);
  double min_x = 0, max_x = 1, min_y = 0, max_y = 1;
  if (!points.empty()) {
    min_x = max_x = points[0].x;
    min_y = max_y = points[0].y;
    for (const auto& p : points) {
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
  }
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-12});
  auto color_of = [&](const std::string& cls) {
    const auto it = std::find(class_order.begin(), class_order.end(), cls);
    const auto idx = static_cast<std::size_t>(it - class_order.begin());
    return kPalette[idx % std::size(kPalette)];
  };
  for (const auto& p : points) {
    out << "<circle cx=\"" << num(left + (p.x - min_x) / span * size) << "\" cy=\""
        << num(top + size - (p.y - min_y) / span * size) << "\" r=\"2.5\" fill=\"" << color_of(p.class_id)
        << "\" fill-opacity=\"0.75\"/>\n";
  }
  for (std::size_t i = 0; i < class_order.size(); ++i) {
    const int ly = top + 12 + static_cast<int>(i) * 16;
    out << "<circle cx=\"" << left + size + 24 << "\" cy=\"" << ly - 4 << "\" r=\"4\" fill=\""
        << kPalette[i % std::size(kPalette)] << "\"/>\n";
    out << "<text x=\"" << left + size + 34 << "\" y=\"" << ly << "\" font-size=\"11\">"
        << escape(class_order[i]) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string confusion_svg(const ConfusionMatrix& matrix, const std::vector<std::string>& labels,
                          const std::string& title) {
  const int k = static_cast<int>(matrix.classes());
  const int cell = 40, left = 190, top = 50;
  const int w = left + k * cell + 30, h = top + k * cell + 150;
  std::ostringstream out;
  out << header(w, h, title);
  for (int t = 0; t < k; ++t) {
    const std::size_t row = matrix.row_sum(static_cast<std::size_t>(t));
    const std::string label = t < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(t)] : std::to_string(t);
    out << "<text x=\"" << left - 6 << "\" y=\"" << top + t * cell + cell / 2 + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << escape(label) << "</text>\n";
    for (int p = 0; p < k; ++p) {
      const std::size_t n = matrix.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
      const double share = row ? static_cast<double>(n) / static_cast<double>(row) : 0.0;
      const int shade = static_cast<int>(std::lround(255 - 200 * share));
      char fill[16];
      std::snprintf(fill, sizeof fill, "#%02x%02xff", shade, shade);
      out << "<rect x=\"" << left + p * cell << "\" y=\"" << top + t * cell << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << fill << "\" stroke=\"#666\"/>\n";
      out << "<text x=\"" << left + p * cell + cell / 2 << "\" y=\"" << top + t * cell + cell / 2 + 4
          << "\" text-anchor=\"middle\" font-size=\"12\"" << (share > 0.6 ? " fill=\"white\"" : "") << ">"
          << n << "</text>\n";
    }
  }
  for (int p = 0; p < k; ++p) {
    const std::string label = p < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(p)] : std::to_string(p);
    const int x = left + p * cell + cell / 2, y = top + k * cell + 8;
    out << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"11\" transform=\"rotate(60 " << x
        << ' ' << y << ")\">" << escape(label) << "</text>\n";
  }
  out << "<text x=\"" << left + k * cell / 2 << "\" y=\"" << h - 8
      << "\" text-anchor=\"middle\" font-size=\"12\">Predicted (rows: true class)</text>\n";
  out << "</svg>\n";
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace vasc
