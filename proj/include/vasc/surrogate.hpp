#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vasc/dataset.hpp"
#include "vasc/image.hpp"
#include "vasc/taxonomy.hpp"

namespace vasc {

/// Synthetic stand-in corpus: class-distinct parametric lesion families
/// rendered on skin-tone backgrounds, several views per lesion group.
struct SurrogateSpec {
  int class_count = 6;        // 6 (flagged subset) or 12
  int images_per_class = 120;
  int group_size = 3;         // views per lesion group
  int image_size = 128;
  std::uint64_t seed = 2024;
};

struct LesionBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive-exclusive pixel bounds
};

/// Shape/color parameters of one lesion, shared by every view in its group.
struct LesionParams {
  int family = 0;  // index into the 12-class taxonomy order
  double center_x = 0.5, center_y = 0.5;
  double radius = 0.25;  // fraction of image size
  double rotation = 0.0;
  double elongation = 1.0;
  std::array<double, 3> skin{0.9, 0.75, 0.65};
  std::uint64_t texture_seed = 0;
};

struct RenderedLesion {
  Image image;
  Image mask;  // single channel, 1 inside the lesion
  LesionBox box;
};

LesionParams sample_lesion(int family, std::uint64_t seed);
/// Re-renders `base` under a viewpoint jitter derived from `view_seed`
/// (view_seed 0 renders the base pose).
RenderedLesion render_lesion(const LesionParams& base, std::uint64_t view_seed, int image_size);

struct SurrogateResult {
  Manifest manifest;
  std::map<std::string, LesionBox> boxes;  // image_id -> lesion bounds
};

/// Writes `<dir>/<source>/<raw label>/<group>__v<j>.ppm`, `manifest.tsv` and
/// `lesions.tsv`. Error{Io} if `dir` is non-empty and `force` is false.
SurrogateResult generate_surrogate(const SurrogateSpec& spec, const Taxonomy& taxonomy12,
                                   const std::filesystem::path& dir, bool force = false,
                                   int threads = 0);

std::map<std::string, LesionBox> load_lesion_boxes(const std::filesystem::path& path);

}  // namespace vasc
