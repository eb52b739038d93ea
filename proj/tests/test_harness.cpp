// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "imagechat/errors.hpp"
#include "imagechat/harness.hpp"
#include "imagechat/retrieval.hpp"
#include "imagechat/util.hpp"
#include "support/toy.hpp"

using namespace imagechat;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("imagechat_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json fixture_config(const fs::path& out) {
  json c = default_run_config();
  set_config(c, "data.dialogues", toy::fixture("dialogues_mini.jsonl"));
  set_config(c, "data.styles", toy::fixture("styles_mini.tsv"));
  set_config(c, "data.features", "synthetic:1:32");
  set_config(c, "retrieval", toy::retrieval_config(CombinerKind::mm_sum));
  set_config(c, "out_dir", out.string());
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(RunConfig, PrecedenceDefaultsFileEnvFlags) {
  const fs::path dir = scratch("precedence");
  const fs::path file = dir / "run.json";
  std::ofstream(file) << R"({"seed": 3, "train_ret": {"max_steps": 7}})";

  json c = load_run_config(file);
  EXPECT_EQ(c.at("seed"), 3);
  EXPECT_EQ(c.at("train_ret").at("max_steps"), 7);
  // Untouched siblings keep their defaults.
  EXPECT_EQ(c.at("train_ret").at("batch_size"), default_run_config().at("train_ret").at("batch_size"));
  apply_seed_env(c, "11");
  EXPECT_EQ(c.at("seed"), 11);
  apply_seed_env(c, nullptr);
  EXPECT_EQ(c.at("seed"), 11);
  set_config(c, "seed", 12);
  set_config(c, "train_ret.max_steps", 9);
  EXPECT_EQ(c.at("seed"), 12);
  EXPECT_EQ(c.at("train_ret").at("max_steps"), 9);
  EXPECT_THROW(apply_seed_env(c, "-4"), ConfigError);
  EXPECT_THROW(apply_seed_env(c, "12x"), ConfigError);
}

TEST(RunConfig, RejectsUnknownKeysAndBadFiles) {
  const fs::path dir = scratch("badconfig");
  std::ofstream(dir / "unknown.json") << R"({"sed": 3})";
  std::ofstream(dir / "broken.json") << R"({"seed": )";
  EXPECT_THROW(load_run_config(dir / "unknown.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "absent.json"), ConfigError);
}

TEST(RunConfig, FinalizedHashIsStable) {
  const json a = finalize_run_config(default_run_config());
  EXPECT_EQ(finalize_run_config(a), a);
  json b = default_run_config();
  b["seed"] = 1;
  EXPECT_NE(finalize_run_config(b).at("config_hash"), a.at("config_hash"));
}

TEST(Preferences, BinomialSummaries) {
  std::vector<PreferenceRow> sweep;
  for (int i = 0; i < 10; ++i) sweep.push_back({"c" + std::to_string(i), 1, true});
  const json s = compare_preferences(sweep);
  EXPECT_EQ(s.at("all").at("win_rate_a"), 1.0);
  EXPECT_EQ(s.at("all").at("p_value"), 2.0 * std::pow(0.5, 10));
  EXPECT_EQ(s.at("all").at("p_numerator"), "2");

  std::vector<PreferenceRow> even;
  for (int i = 0; i < 20; ++i) even.push_back({"c" + std::to_string(i), 1 + i % 2, i < 10});
  const json e = compare_preferences(even);
  EXPECT_EQ(e.at("all").at("p_value"), 1.0);
  EXPECT_EQ(e.at("turns").at("turn1").at("n"), 10);
  EXPECT_THROW(compare_preferences({}), DataError);
}

TEST(Commands, CompareReadsFixtures) {
  const fs::path dir = scratch("compare");
  json c = default_run_config();
  set_config(c, "compare.a", toy::fixture("responses_a.jsonl"));
  set_config(c, "compare.b", toy::fixture("responses_b.jsonl"));
  set_config(c, "compare.preferences", toy::fixture("preferences_mini.jsonl"));
  set_config(c, "out_dir", dir.string());
  std::ostringstream out;
  EXPECT_EQ(cmd_compare(finalize_run_config(c), out), 0);
  const json r = json::parse(slurp(dir / "compare.json"));
  EXPECT_GE(r.at("all").at("p_value").get<double>(), 0.0);
  EXPECT_LE(r.at("all").at("p_value").get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "config.json"));
}

TEST(Commands, TrainRetrievalIsReproducible) {
  auto run = [](const std::string& tag) {
    const fs::path dir = scratch(tag);
    json c = fixture_config(dir);
    set_config(c, "seed", 4);
    set_config(c, "train_ret.batch_size", 4);
    set_config(c, "train_ret.max_steps", 6);
    set_config(c, "train_ret.lr", 1e-3);
    std::ostringstream out;
    EXPECT_EQ(cmd_train_ret(finalize_run_config(c), out), 0);
    EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
    return slurp(dir / "loss.jsonl");
  };
  const std::string a = run("train_a");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run("train_b"));
}

TEST(Commands, EvalWithOracleScorerIsPerfect) {
  const fs::path dir = scratch("eval_oracle");
  json c = fixture_config(dir);
  set_config(c, "eval.scorer", "oracle");
  set_config(c, "eval.split", "train");
  set_config(c, "eval.n_candidates", 5);
  std::ostringstream out;
  const json cfg = finalize_run_config(c);
  EXPECT_EQ(cmd_eval(cfg, out), 0);
  const json r = json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(r.at("all").at("r1"), 1.0);
  EXPECT_EQ(r.at("all").at("r5"), 1.0);
  EXPECT_EQ(r.at("config_hash"), cfg.at("config_hash"));
  EXPECT_EQ(json::parse(slurp(dir / "config.json")), cfg);
}

TEST(Commands, MissingInputsAreNamed) {
  const fs::path dir = scratch("missing");
  json c = fixture_config(dir);
  set_config(c, "data.dialogues", (dir / "nowhere.jsonl").string());
  std::ostringstream out;
  try {
    cmd_stats(finalize_run_config(c), out);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nowhere.jsonl"), std::string::npos);
  }
  c = fixture_config(dir);
  set_config(c, "eval.checkpoint", "");
  try {
    cmd_eval(finalize_run_config(c), out);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("eval.checkpoint"), std::string::npos);
  }
}

TEST(Commands, StatsMatchFixtureCounts) {
  const fs::path dir = scratch("stats");
  std::ostringstream out;
  EXPECT_EQ(cmd_stats(finalize_run_config(fixture_config(dir)), out), 0);
  const json s = json::parse(slurp(dir / "stats.json"));
  EXPECT_EQ(s.at("all").at("dialogues"), 30);
  EXPECT_EQ(s.at("train").at("dialogues"), 22);
}

TEST(Features, SyntheticSpecParsing) {
  const std::vector<std::string> ids = {"a", "b"};
  EXPECT_EQ(open_features("synthetic:2:8", ids).dim(), 8u);
  EXPECT_EQ(open_features("synthetic:2:8", ids).get("a"), open_features("synthetic:2:8", ids).get("a"));
  EXPECT_THROW(open_features("synthetic:x", ids), ConfigError);
  EXPECT_THROW(open_features("/no/such/features.bin", ids), ConfigError);
}
