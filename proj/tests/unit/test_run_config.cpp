#include "doctest.h"
#include "vasc/error.hpp"
#include "vasc/random.hpp"
#include "vasc/run_config.hpp"

using namespace vasc;

TEST_CASE("component seeds derive from the global seed") {
  const RunConfig a = RunConfig::with_seed(99);
  CHECK(a.experiment.train.seed == derive_seed(99, 3));
  CHECK(a.bootstrap.seed == derive_seed(99, 5));
  CHECK(a.experiment.augmentation.seed != a.experiment.train.seed);
  CHECK(RunConfig::with_seed(100).embed.seed != a.embed.seed);
  CHECK(a.violations().empty());
}

TEST_CASE("json round trip") {
  RunConfig cfg = RunConfig::with_seed(5);
  cfg.classes = 6;
  cfg.experiment.head.num_classes = 6;
  cfg.experiment.train.learning_rate = 3e-4;
  cfg.embed.perplexity = 7;
  const RunConfig back = run_config_from_json(run_config_to_json(cfg));
  CHECK(run_config_to_json(back) == run_config_to_json(cfg));
}

TEST_CASE("partial files override defaults") {
  const RunConfig cfg = run_config_from_json(R"({"seed": 7, "classes": 6, "train": {"epochs": 3}})");
  CHECK(cfg.seed == 7);
  CHECK(cfg.experiment.train.epochs == 3);
  CHECK(cfg.experiment.head.num_classes == 6);
  CHECK(cfg.experiment.train.seed == derive_seed(7, 3));
  CHECK(cfg.folds == 10);
}

TEST_CASE("unknown keys and type errors are reported together") {
  try {
    (void)run_config_from_json(R"({"sed": 1, "train": {"epochs": "many", "lr": 1}})");
    FAIL("expected a configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Configuration);
    const std::string msg = e.what();
    CHECK(msg.find("sed") != std::string::npos);
    CHECK(msg.find("epochs") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
  }
  CHECK_THROWS_AS(run_config_from_json("[1, 2]"), Error);
  CHECK_THROWS_AS(run_config_from_json("{not json"), Error);
}

TEST_CASE("violations cover every component") {
  RunConfig cfg = RunConfig::with_seed(1);
  cfg.classes = 5;
  cfg.folds = 1;
  cfg.experiment.train.learning_rate = -1;
  cfg.embed.perplexity = 0;
  cfg.bootstrap.level = 2;
  const auto v = cfg.violations();
  CHECK(v.size() >= 5);
  CHECK_THROWS_AS(cfg.validate(), Error);
}
