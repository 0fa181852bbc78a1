#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vasc/interpret.hpp"
#include "vasc/metrics.hpp"

namespace vasc {

// Static SVG figures. Output depends only on the inputs, so re-running a
// command reproduces identical files.

struct NamedCurve {
  std::string label;
  RocCurve curve;
  double auc = 0.0;
};

std::string roc_svg(std::span<const NamedCurve> curves, const std::string& title);
std::string embedding_svg(std::span<const EmbeddingPoint> points,
                          const std::vector<std::string>& class_order, const std::string& title);
/// Row-normalized shading with raw counts printed in each cell.
std::string confusion_svg(const ConfusionMatrix& matrix, const std::vector<std::string>& labels,
                          const std::string& title);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace vasc
