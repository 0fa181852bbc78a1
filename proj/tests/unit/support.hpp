#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "vasc/image.hpp"
#include "vasc/model.hpp"
#include "vasc/random.hpp"
#include "vasc/taxonomy.hpp"

namespace test_support {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("vasc-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline vasc::Image random_image(int w, int h, int c, std::uint64_t seed) {
  vasc::Image img(w, h, c);
  vasc::Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

/// Untrained six-class classifier on a small input so tests stay fast.
inline vasc::Classifier small_classifier(int input_size = 64, std::uint64_t seed = 3) {
  vasc::BackboneSpec spec;
  spec.input_size = input_size;
  spec.seed = seed;
  vasc::HeadConfig head;
  head.num_classes = 6;
  return vasc::build_classifier(spec, head, vasc::default_taxonomy().subset_six(), seed + 1);
}

}  // namespace test_support
