#include "test_support.hpp"

#include "vemkd/config.hpp"
#include "vemkd/errors.hpp"
#include "vemkd/trainer.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace vemkd;
using namespace vemkd::testing;

TEST(RunConfig, DefaultsCoverSchema) {
  RunConfig rc;
  std::set<std::string> names;
  for (const auto& k : RunConfig::schema()) {
    EXPECT_TRUE(names.insert(k.name).second) << "duplicate key " << k.name;
    EXPECT_FALSE(k.doc.empty()) << k.name;
  }
  EXPECT_EQ(rc.get_double("vem.lambda_mi"), 0.1);
  EXPECT_EQ(rc.get_double("schedule.lr_student"), 0.0002);
  EXPECT_EQ(rc.get_double("schedule.lr_ebm"), 0.0001);
  EXPECT_EQ(rc.get_int("sampler.steps"), 10);
  EXPECT_EQ(rc.get_double("sampler.step_size"), 100.0);
  EXPECT_EQ(rc.get_double("sampler.noise_std"), 0.005);
  EXPECT_EQ(rc.get_strings("distill.taps"), (std::vector<std::string>{"down2", "mid", "up1"}));
  EXPECT_EQ(rc.get_doubles("sampler.clamp"), (std::vector<double>{-1.0, 1.0}));
}

TEST(RunConfig, ParsesFileSyntax) {
  const auto rc = RunConfig::from_string(
      "# comment\n"
      "seed = 7   # trailing\n"
      "\n"
      "output_dir = \"runs/with space\"\n"
      "vem.lambda_mi = 0.05\n"
      "deterministic = true\n"
      "model.disc_taps = [0, 2]\n");
  EXPECT_EQ(rc.get_int("seed"), 7);
  EXPECT_EQ(rc.get_string("output_dir"), "runs/with space");
  EXPECT_EQ(rc.get_double("vem.lambda_mi"), 0.05);
  EXPECT_TRUE(rc.get_bool("deterministic"));
  EXPECT_EQ(rc.get_ints("model.disc_taps"), (std::vector<int64_t>{0, 2}));
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::from_string("vem.lamda_mi = 0.1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_string("seed = abc\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_string("deterministic = maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_string("seed 3\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_string("model.disc_taps = 0, 1\n"), ConfigError);
  try {
    RunConfig::from_string("\nnot.a.key = 1\n", "x.conf");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.conf:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("not.a.key"), std::string::npos);
  }
  RunConfig rc;
  EXPECT_THROW(rc.get_int("vem.lambda_mi"), ContractViolation);
  EXPECT_THROW(rc.apply_override("seed"), ConfigError);
  EXPECT_THROW(RunConfig::from_file("/nonexistent/run.conf"), IoError);
}

TEST(RunConfig, OverridesAndEchoRoundTrip) {
  RunConfig rc;
  rc.apply_override("vem.lambda_mi=0.2");
  rc.apply_override("output_dir=a b#c");
  rc.apply_override("distill.taps=[mid]");
  const auto text = rc.to_text();
  const auto back = RunConfig::from_string(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(back.get_double("vem.lambda_mi"), 0.2);
  EXPECT_EQ(back.get_string("output_dir"), "a b#c");
  EXPECT_EQ(back.get_strings("distill.taps"), std::vector<std::string>{"mid"});
  // Canonical floats survive the round trip exactly.
  rc.apply_override("sampler.noise_std=0.1");
  EXPECT_EQ(RunConfig::from_string(rc.to_text()).get_double("sampler.noise_std"), 0.1);
}

TEST(RunConfig, SweepsExpandToCartesianProduct) {
  const auto rc = RunConfig::from_string(
      "output_dir = runs/sweep\n"
      "sweep.vem.lambda_mi = [0.05, 0.1, 0.2]\n"
      "sweep.seed = [0, 1]\n");
  const auto points = rc.expand_sweeps();
  ASSERT_EQ(points.size(), 6u);
  std::set<std::string> dirs;
  for (const auto& p : points) {
    EXPECT_TRUE(p.sweeps().empty());
    dirs.insert(p.get_string("output_dir"));
  }
  EXPECT_EQ(dirs.size(), 6u);
  EXPECT_TRUE(dirs.count("runs/sweep/seed=1,vem.lambda_mi=0.2") || dirs.count("runs/sweep/vem.lambda_mi=0.2,seed=1"));
  EXPECT_THROW(RunConfig::from_string("sweep.distill.taps = [a, b]\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_string("sweep.nope = [1]\n"), ConfigError);
  EXPECT_EQ(RunConfig().expand_sweeps().size(), 1u);
}

TEST(TrainConfig, ValidationNamesTheField) {
  auto check = [](const std::string& text, const std::string& field) {
    try {
      TrainConfig::from(RunConfig::from_string(text)).validate();
      ADD_FAILURE() << "no error for " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  check("vem.lambda_mi = -1\n", "lambda_mi");
  check("schedule.lr_student = 0\n", "lr_student");
  check("model.student_multiplier = 1.5\n", "student_multiplier");
  check("schedule.mode = offline-paired\n", "teacher_checkpoint");
  check("sampler.steps = 0\n", "steps");
  check("data.image_size = 64\n", "image_size");
  check("schedule.mode = sideways\n", "mode");
}

TEST(TrainConfig, MiActiveSwitches) {
  EXPECT_TRUE(TrainConfig::from(RunConfig()).mi_active());
  EXPECT_FALSE(TrainConfig::from(RunConfig::from_string("vem.lambda_mi = 0\n")).mi_active());
  EXPECT_FALSE(TrainConfig::from(RunConfig::from_string("vem.enabled = false\n")).mi_active());
}
