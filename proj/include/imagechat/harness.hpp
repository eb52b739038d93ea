// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the `imagechat` CLI. Each command takes
// a fully resolved run config (defaults <- config file <- IMAGECHAT_SEED <-
// flags) and writes its artifacts under config["out_dir"], always next to a
// config.json snapshot carrying the config hash and seed.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "imagechat/data.hpp"
#include "imagechat/feature_store.hpp"
#include "imagechat/metrics.hpp"

namespace imagechat {

nlohmann::json default_run_config();
// Defaults merged with the file (if given). Unknown top-level keys are
// rejected with ConfigError.
nlohmann::json load_run_config(const std::optional<std::filesystem::path>& path);
// Sets a dotted key such as "train_ret.max_steps".
void set_config(nlohmann::json& config, const std::string& dotted_key, nlohmann::json value);
// Applies an IMAGECHAT_SEED value (decimal) to config["seed"]; ConfigError
// when it does not parse.
void apply_seed_env(nlohmann::json& config, const char* env_value);
// Stamps config_hash into the config; the hash covers everything else.
nlohmann::json finalize_run_config(nlohmann::json config);

// "synthetic:SEED" or "synthetic:SEED:DIM" builds features for `image_ids`;
// anything else is read as a feature store file.
FeatureStore open_features(const std::string& spec, const std::vector<std::string>& image_ids);
// Strict load: any malformed line is a DataError naming path and line.
std::vector<DialogueExample> load_dialogues(const std::filesystem::path& path,
                                            const StyleCatalog& catalog);

struct PreferenceRow {
  std::string context_id;
  int turn = 0;
  bool prefers_a = false;
};

// Win rate of A and exact two-tailed p-value per turn and overall.
nlohmann::json compare_preferences(const std::vector<PreferenceRow>& rows);

int cmd_train_ret(const nlohmann::json& config, std::ostream& out);
int cmd_train_gen(const nlohmann::json& config, std::ostream& out);
int cmd_pretrain(const nlohmann::json& config, std::ostream& out);
int cmd_eval(const nlohmann::json& config, std::ostream& out);
int cmd_ablate(const nlohmann::json& config, std::ostream& out);
int cmd_igc_eval(const nlohmann::json& config, std::ostream& out);
int cmd_compare(const nlohmann::json& config, std::ostream& out);
int cmd_stats(const nlohmann::json& config, std::ostream& out);
int cmd_serve(const nlohmann::json& config, std::ostream& out);
// REPL over `in`. Plain lines are human utterances; commands are
// :image ID, :style NAME, :human-style NAME, :kind retrieval|generative,
// :show, :save [PATH], :quit.
int cmd_chat(const nlohmann::json& config, std::istream& in, std::ostream& out);

}  // namespace imagechat
