#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "vasc/dataset.hpp"
#include "vasc/error.hpp"
#include "vasc/image.hpp"

using namespace vasc;

namespace {

// Random manifest: every class gets a random number of groups of 1..4 views.
Manifest random_manifest(const Taxonomy& tax, std::uint64_t seed) {
  Rng rng(seed);
  Manifest m;
  m.taxonomy_version = tax.version();
  int serial = 0;
  for (const auto& cls : tax.classes()) {
    const auto groups = 12 + rng.index(30);
    for (std::uint64_t g = 0; g < groups; ++g) {
      const std::string group = cls.class_id + "-g" + std::to_string(g);
      const auto views = 1 + rng.index(4);
      for (std::uint64_t v = 0; v < views; ++v) {
        ImageRecord r;
        r.image_id = "i" + std::to_string(serial++);
        r.file_path = r.image_id + ".ppm";
        r.class_id = cls.class_id;
        r.lesion_group_id = group;
        r.source = "clinical";
        r.width = r.height = 8;
        m.records.push_back(r);
      }
    }
  }
  return m;
}

}  // namespace

TEST_CASE("manifest text round trip and digest") {
  const Taxonomy tax = default_taxonomy().subset_six();
  const Manifest m = random_manifest(tax, 1);
  const Manifest back = manifest_from_text(manifest_to_text(m));
  CHECK(back.records.size() == m.records.size());
  CHECK(back.content_digest() == m.content_digest());
  CHECK(back.records[3].lesion_group_id == m.records[3].lesion_group_id);

  std::string tampered = manifest_to_text(m);
  tampered.replace(tampered.rfind("clinical"), 8, "repoA123");
  CHECK_THROWS_AS(manifest_from_text(tampered), Error);
}

TEST_CASE("manifest validation") {
  const Taxonomy tax = default_taxonomy().subset_six();
  Manifest m = random_manifest(tax, 2);
  CHECK_NOTHROW(m.validate(tax));
  m.records.push_back(m.records.front());
  CHECK_THROWS_AS(m.validate(tax), Error);
}

TEST_CASE("grouped folds never split a lesion group") {
  const Taxonomy tax = default_taxonomy().subset_six();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Manifest m = random_manifest(tax, seed);
    const auto holdout = make_test_holdout(m, tax, seed, 1000);
    std::set<std::string> cv_groups = holdout.cv.group_ids();
    for (const auto& g : holdout.test_group_ids) CHECK(cv_groups.count(g) == 0);
    CHECK(holdout.cv.size() + holdout.test.size() == m.size());

    const SplitPlan plan = make_grouped_folds(holdout.cv, 10, seed);
    CHECK(plan.fold_assignments.size() == cv_groups.size());
    std::set<std::string> seen_validation;
    for (int f = 0; f < 10; ++f) {
      const auto fold = materialize_fold(holdout.cv, plan, f);
      std::set<std::string> train_groups;
      for (const auto& r : fold.train) train_groups.insert(r.lesion_group_id);
      for (const auto& r : fold.validation) {
        CHECK(train_groups.count(r.lesion_group_id) == 0);
        seen_validation.insert(r.image_id);
      }
      CHECK(fold.train.size() + fold.validation.size() == holdout.cv.size());
    }
    // Every cv image is validated exactly once across folds.
    CHECK(seen_validation.size() == holdout.cv.size());
  }
}

TEST_CASE("holdout withholds close to ten percent per class") {
  const Taxonomy tax = default_taxonomy().subset_six();
  const Manifest m = random_manifest(tax, 42);
  const auto holdout = make_test_holdout(m, tax, 7, 1000);
  for (const auto& cls : tax.classes()) {
    const double total = static_cast<double>(m.of_class(cls.class_id).size());
    const double test = static_cast<double>(holdout.test.of_class(cls.class_id).size());
    CHECK(test > 0);
    // Groups hold at most four views, so the nearest achievable total is within four images.
    CHECK(std::abs(test - 0.1 * total) <= 4.0);
  }
}

TEST_CASE("class cap keeps at most the cap for cross-validation") {
  const Taxonomy tax = default_taxonomy().subset_six();
  const Manifest m = random_manifest(tax, 3);
  const auto holdout = make_test_holdout(m, tax, 9, 20);
  for (const auto& cls : tax.classes()) {
    CHECK(holdout.cv.of_class(cls.class_id).size() <= 20);
  }
}

TEST_CASE("split plan json round trip and determinism") {
  const Taxonomy tax = default_taxonomy().subset_six();
  const Manifest m = random_manifest(tax, 5);
  const SplitPlan a = make_grouped_folds(m, 5, 77);
  const SplitPlan b = make_grouped_folds(m, 5, 77);
  CHECK(a == b);
  CHECK(split_plan_from_json(split_plan_to_json(a)) == a);
  CHECK_THROWS_AS(make_grouped_folds(m, 1, 77), Error);
  CHECK_THROWS_AS(materialize_fold(m, a, 5), Error);
}

TEST_CASE("ingest maps folders onto classes and groups views") {
  const auto root = test_support::scratch_dir("ingest");
  const auto src = root / "raw";
  std::filesystem::create_directories(src / "Infantile Hemangioma");
  std::filesystem::create_directories(src / "nevus");
  std::filesystem::create_directories(src / "unknown thing");
  const Image img = test_support::random_image(6, 5, 3, 1);
  write_pnm(src / "Infantile Hemangioma" / "L1__a.ppm", img);
  write_pnm(src / "Infantile Hemangioma" / "L1__b.ppm", img);
  write_pnm(src / "nevus" / "N7.ppm", img);
  write_pnm(src / "unknown thing" / "x.ppm", img);
  {
    std::ofstream bad(src / "nevus" / "broken.ppm");
    bad << "not an image";
  }
  const auto result = ingest_sources({{"clinical", src}}, default_taxonomy(), GroupingRule{}, root, 1);
  REQUIRE(result.manifest.size() == 3);
  std::map<std::string, std::string> group_of;
  for (const auto& r : result.manifest.records) group_of[r.image_id] = r.lesion_group_id;
  CHECK(result.manifest.records[0].class_id == "hemangioma");
  CHECK(result.manifest.records[0].lesion_group_id == result.manifest.records[1].lesion_group_id);
  CHECK(result.manifest.records[0].width == 6);
  CHECK(result.manifest.records[0].file_path.rfind("raw/", 0) == 0);
  CHECK(result.warnings.size() == 2);  // unmapped label, undecodable file
  std::filesystem::remove_all(root);
}
