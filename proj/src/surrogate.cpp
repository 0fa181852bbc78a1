#include "vasc/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vasc/error.hpp"
#include "vasc/parallel.hpp"
#include "vasc/random.hpp"

namespace fs = std::filesystem;

namespace vasc {

namespace {

using Rgb = std::array<double, 3>;

// Lesion palette per family, in 12-class taxonomy order.
constexpr Rgb kPalette[12] = {
    {0.86, 0.12, 0.14},  // hemangioma: bright red, raised
    {0.50, 0.04, 0.10},  // pyogenic granuloma: dark red nodule
    {0.32, 0.30, 0.62},  // venous malformation: blue-purple
    {0.82, 0.38, 0.60},  // capillary malformation: pink-magenta patch
    {0.74, 0.46, 0.36},  // atopic dermatitis: dull red-brown papules
    {0.26, 0.15, 0.08},  // nevus: dark brown
    {0.90, 0.05, 0.05},  // spider angioma
    {0.93, 0.90, 0.60},  // lymphatic malformation: pale vesicles
    {0.99, 0.98, 0.93},  // milia: white
    {0.88, 0.62, 0.16},  // impetigo: honey crust
    {0.96, 0.90, 0.86},  // molluscum: pearly domes
    {0.80, 0.22, 0.20},  // tinea: red annulus
};

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Soft-edged disk: 1 inside radius r, 0 beyond r * (1 + soft).
double disk(double d, double r, double soft) {
  return 1.0 - smoothstep(r * (1.0 - soft), r * (1.0 + soft), d);
}

struct Spot {
  double u, v, r;
};

std::vector<Spot> scatter(std::uint64_t seed, int count, double spread, double rmin, double rmax) {
  Rng rng(seed);
  std::vector<Spot> spots;
  for (int i = 0; i < count; ++i) {
    const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double rad = spread * std::sqrt(rng.uniform());
    spots.push_back({rad * std::cos(a), rad * std::sin(a), rng.uniform(rmin, rmax)});
  }
  return spots;
}

// Alpha and color of the lesion at local coordinates (u, v), where the
// lesion's nominal radius is 1.
struct Shade {
  double alpha = 0.0;
  Rgb color{};
};

Shade shade(int family, double u, double v, const std::vector<Spot>& spots,
            std::uint64_t texture_seed) {
  const Rgb base = kPalette[family];
  const double d = std::hypot(u, v);
  Shade s;
  s.color = base;
  auto spot_alpha = [&](double soft) {
    double a = 0.0;
    for (const auto& sp : spots) a = std::max(a, disk(std::hypot(u - sp.u, v - sp.v), sp.r, soft));
    return a;
  };
  switch (family) {
    case 0: {  // raised, smooth, with a bright crown
      s.alpha = disk(d, 1.0, 0.12);
      const double lift = 0.25 * (1.0 - std::min(1.0, d));
      for (auto& c : s.color) c = std::min(1.0, c + lift * 0.4);
      break;
    }
    case 1: {  // compact nodule with specular highlight
      s.alpha = disk(d, 0.55, 0.08);
      const double h = disk(std::hypot(u + 0.18, v + 0.18), 0.12, 0.5);
      for (auto& c : s.color) c = c + (1.0 - c) * 0.7 * h;
      break;
    }
    case 2:  // diffuse bluish swelling
      s.alpha = 0.85 * disk(d, 1.0, 0.45);
      break;
    case 3: {  // flat irregular patch
      const double wobble =
          1.0 + 0.18 * std::sin(3.0 * std::atan2(v, u) + static_cast<double>(texture_seed % 7));
      s.alpha = 0.8 * disk(d, wobble, 0.2);
      break;
    }
    case 4: {  // clustered rough papules over a faint patch
      s.alpha = std::max(0.35 * disk(d, 1.0, 0.3), spot_alpha(0.3));
      break;
    }
    case 5:  // small, uniform, sharp
      s.alpha = disk(d, 0.5, 0.05);
      break;
    case 6: {  // central punctum with radiating legs
      const double theta = std::atan2(v, u);
      const double legs = std::pow(std::abs(std::cos(3.0 * theta)), 24.0) * disk(d, 1.0, 0.1);
      s.alpha = std::max(disk(d, 0.18, 0.2), 0.9 * legs);
      break;
    }
    case 7:  // pale vesicle cluster
      s.alpha = spot_alpha(0.25);
      break;
    case 8:  // tiny white dots
      s.alpha = spot_alpha(0.15);
      break;
    case 9: {  // honey crusts
      s.alpha = spot_alpha(0.35);
      break;
    }
    case 10: {  // pearly domes with central dell
      s.alpha = spot_alpha(0.15);
      double dell = 0.0;
      for (const auto& sp : spots) {
        dell = std::max(dell, disk(std::hypot(u - sp.u, v - sp.v), sp.r * 0.25, 0.3));
      }
      for (auto& c : s.color) c *= 1.0 - 0.6 * dell;
      break;
    }
    case 11:  // annulus with clearing center
      s.alpha = 0.9 * std::exp(-std::pow((d - 0.8) / 0.12, 2.0));
      break;
    default:
      throw Error(ErrorKind::Range, "unknown lesion family");
  }
  return s;
}

std::vector<Spot> family_spots(const LesionParams& p) {
  switch (p.family) {
    case 4: return scatter(p.texture_seed, 28, 0.95, 0.06, 0.12);
    case 7: return scatter(p.texture_seed, 10, 0.8, 0.14, 0.26);
    case 8: return scatter(p.texture_seed, 9, 0.95, 0.05, 0.09);
    case 9: return scatter(p.texture_seed, 6, 0.75, 0.2, 0.38);
    case 10: return scatter(p.texture_seed, 6, 0.8, 0.16, 0.26);
    default: return {};
  }
}

}  // namespace

LesionParams sample_lesion(int family, std::uint64_t seed) {
  if (family < 0 || family >= 12) throw Error(ErrorKind::Range, "lesion family out of range");
  Rng rng(seed);
  LesionParams p;
  p.family = family;
  p.center_x = rng.uniform(0.4, 0.6);
  p.center_y = rng.uniform(0.4, 0.6);
  p.radius = rng.uniform(0.2, 0.3);
  p.rotation = rng.uniform(0.0, std::numbers::pi);
  p.elongation = rng.uniform(0.8, 1.25);
  // Skin tones between light and deep, shared by the whole lesion group.
  const double t = rng.uniform(0.0, 0.6);
  const Rgb light{0.97, 0.84, 0.74};
  const Rgb deep{0.52, 0.36, 0.25};
  for (int c = 0; c < 3; ++c) p.skin[c] = light[c] + t * (deep[c] - light[c]);
  p.texture_seed = rng.next();
  return p;
}

RenderedLesion render_lesion(const LesionParams& base, std::uint64_t view_seed, int image_size) {
  LesionParams p = base;
  double brightness = 1.0;
  std::uint64_t noise_seed = derive_seed(base.texture_seed, view_seed);
  if (view_seed != 0) {
    Rng rng(view_seed);
    p.center_x += rng.uniform(-0.06, 0.06);
    p.center_y += rng.uniform(-0.06, 0.06);
    p.radius *= rng.uniform(0.88, 1.12);
    p.rotation += rng.uniform(-0.6, 0.6);
    brightness = rng.uniform(0.94, 1.06);
  }
  const auto spots = family_spots(p);
  RenderedLesion out{Image(image_size, image_size, 3), Image(image_size, image_size, 1), {}};
  Rng noise(noise_seed);
  const double cr = std::cos(p.rotation);
  const double sr = std::sin(p.rotation);
  int x0 = image_size, y0 = image_size, x1 = 0, y1 = 0;
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double px = (x + 0.5) / image_size - p.center_x;
      const double py = (y + 0.5) / image_size - p.center_y;
      const double u = (cr * px + sr * py) / (p.radius * p.elongation);
      const double v = (-sr * px + cr * py) / (p.radius / p.elongation);
      const Shade s = shade(p.family, u, v, spots, p.texture_seed);
      const double grain = 0.025 * noise.normal();
      for (int c = 0; c < 3; ++c) {
        const double skin = p.skin[c] * (1.0 + 0.5 * grain);
        const double value = brightness * ((1.0 - s.alpha) * skin + s.alpha * s.color[c]) + 0.5 * grain;
        out.image.at(x, y, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
      const bool inside = s.alpha > 0.15;
      out.mask.at(x, y, 0) = inside ? 1.0f : 0.0f;
      if (inside) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
    }
  }
  if (x1 == 0) {  // lesion vanished entirely; use an empty box at the center
    x0 = x1 = y0 = y1 = image_size / 2;
  }
  out.box = {x0, y0, x1, y1};
  return out;
}

SurrogateResult generate_surrogate(const SurrogateSpec& spec, const Taxonomy& taxonomy12,
                                   const fs::path& dir, bool force, int threads) {
  if (spec.class_count != 6 && spec.class_count != 12) {
    throw Error(ErrorKind::Parameter, "surrogate class count must be 6 or 12");
  }
  if (taxonomy12.size() != 12) {
    throw Error(ErrorKind::Configuration, "surrogate generation needs the 12-class taxonomy");
  }
  if (spec.images_per_class <= 0 || spec.group_size <= 0 || spec.image_size < 16) {
    throw Error(ErrorKind::Parameter, "surrogate counts and sizes must be positive");
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw Error(ErrorKind::Io, "target directory " + dir.string() +
                                     " is not empty (use force to overwrite)");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);

  std::vector<std::size_t> families;
  for (std::size_t i = 0; i < taxonomy12.size(); ++i) {
    if (spec.class_count == 12 || taxonomy12[i].in_six_subset) families.push_back(i);
  }

  struct Job {
    ImageRecord record;
    LesionParams params;
    std::uint64_t view_seed;
    fs::path path;
  };
  std::vector<Job> jobs;
  const auto& sources = known_sources();
  for (std::size_t fi = 0; fi < families.size(); ++fi) {
    const auto family = families[fi];
    const auto& cls = taxonomy12[family];
    int remaining = spec.images_per_class;
    for (int g = 0; remaining > 0; ++g) {
      const std::uint64_t group_seed = derive_seed(spec.seed, family * 100000 + g);
      Rng pick(group_seed);
      const auto& source = sources[pick.index(sources.size())];
      const auto& raw_label = cls.merged_subtypes.empty()
                                  ? cls.class_id
                                  : cls.merged_subtypes[pick.index(cls.merged_subtypes.size())];
      const LesionParams params = sample_lesion(static_cast<int>(family), pick.next());
      char group_name[64];
      std::snprintf(group_name, sizeof group_name, "%s-g%04d", cls.class_id.c_str(), g);
      const int views = std::min(spec.group_size, remaining);
      for (int v = 0; v < views; ++v) {
        const std::string stem = std::string(group_name) + "__v" + std::to_string(v);
        const fs::path rel = fs::path(source) / raw_label / (stem + ".ppm");
        Job job;
        job.record = {make_image_id(source, raw_label, stem), rel.generic_string(), cls.class_id,
                      make_group_id(source, group_name), source, spec.image_size,
                      spec.image_size};
        job.params = params;
        job.view_seed = v == 0 ? 0 : derive_seed(group_seed, 1000 + v);
        job.path = dir / rel;
        jobs.push_back(std::move(job));
      }
      remaining -= views;
    }
  }

  for (const auto& job : jobs) fs::create_directories(job.path.parent_path());
  std::vector<LesionBox> boxes(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const auto rendered = render_lesion(jobs[i].params, jobs[i].view_seed, spec.image_size);
    write_pnm(jobs[i].path, rendered.image);
    boxes[i] = rendered.box;
  });

  SurrogateResult result;
  result.manifest.taxonomy_version = taxonomy12.version();
  std::ofstream box_file(dir / "lesions.tsv");
  box_file << "image_id\tx0\ty0\tx1\ty1\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    result.manifest.records.push_back(jobs[i].record);
    result.boxes[jobs[i].record.image_id] = boxes[i];
    box_file << jobs[i].record.image_id << '\t' << boxes[i].x0 << '\t' << boxes[i].y0 << '\t'
             << boxes[i].x1 << '\t' << boxes[i].y1 << '\n';
  }
  save_manifest(result.manifest, dir / "manifest.tsv");
  return result;
}

std::map<std::string, LesionBox> load_lesion_boxes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::map<std::string, LesionBox> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id;
    LesionBox b;
    if (!std::getline(fields, id, '\t') || !(fields >> b.x0 >> b.y0 >> b.x1 >> b.y1)) {
      throw Error(ErrorKind::Schema, "malformed lesion box line: " + line);
    }
    out[id] = b;
  }
  return out;
}

}  // namespace vasc
