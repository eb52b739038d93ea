// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// imagechat: train, evaluate and serve image-grounded dialogue models.

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "imagechat/errors.hpp"
#include "imagechat/harness.hpp"

namespace {

using nlohmann::json;

enum class Kind { text, integer, real, flag };

struct Override {
  std::string flag;
  std::string key;
  Kind kind;
  std::string help;
};

const std::vector<Override> kData = {
    {"--data", "data.dialogues", Kind::text, "dialogue JSONL"},
    {"--styles", "data.styles", Kind::text, "style catalog TSV"},
    {"--features", "data.features", Kind::text, "feature store file or synthetic:SEED[:DIM]"},
    {"--min-freq", "data.vocab_min_freq", Kind::integer, "vocabulary frequency cutoff"},
};

const std::vector<Override> kEval = {
    {"--checkpoint", "eval.checkpoint", Kind::text, "model checkpoint"},
    {"--split", "eval.split", Kind::text, "train, valid or test"},
    {"--n-candidates", "eval.n_candidates", Kind::integer, "candidates per item"},
    {"--threads", "eval.threads", Kind::integer, "evaluation threads"},
    {"--beam-size", "eval.beam_size", Kind::integer, "beam width"},
};

std::vector<Override> overrides_for(const std::string& cmd) {
  std::vector<Override> o;
  auto add = [&](const std::vector<Override>& v) { o.insert(o.end(), v.begin(), v.end()); };
  if (cmd == "train-ret") {
    add(kData);
    add({{"--steps", "train_ret.max_steps", Kind::integer, "training steps"},
         {"--batch-size", "train_ret.batch_size", Kind::integer, "batch size"},
         {"--lr", "train_ret.lr", Kind::real, "learning rate"},
         {"--modality-mask", "train_ret.mask", Kind::text, "e.g. image,style"},
         {"--combiner", "retrieval.combiner.kind", Kind::text, "mm_sum or mm_att"},
         {"--eval-every", "train_ret.eval_every", Kind::integer, "validation interval"},
         {"--init-from", "init_from", Kind::text, "pretrained checkpoint"}});
  } else if (cmd == "train-gen") {
    add(kData);
    add({{"--steps", "train_gen.max_steps", Kind::integer, "training steps"},
         {"--batch-size", "train_gen.batch_size", Kind::integer, "batch size"},
         {"--lr", "train_gen.lr", Kind::real, "learning rate"},
         {"--modality-mask", "train_gen.mask", Kind::text, "e.g. image,style"}});
  } else if (cmd == "pretrain") {
    add(kData);
    add({{"--pairs", "data.pretrain", Kind::text, "context/response JSONL"},
         {"--steps", "pretrain.max_steps", Kind::integer, "training steps"},
         {"--batch-size", "pretrain.batch_size", Kind::integer, "batch size"},
         {"--k-negatives", "pretrain.k_negatives", Kind::integer, "sampled negatives"}});
  } else if (cmd == "eval" || cmd == "ablate") {
    add(kData);
    add(kEval);
    add({{"--scorer", "eval.scorer", Kind::text, "model, oracle, random or ir"},
         {"--modality-mask", "eval.mask", Kind::text, "mask applied at inference"}});
    if (cmd == "ablate") {
      add({{"--separate-models", "ablate.from_full", Kind::flag,
            "use ablate.checkpoints from the config instead of one full model"}});
    }
  } else if (cmd == "igc-eval") {
    add(kData);
    add(kEval);
    add({{"--igc", "data.igc", Kind::text, "IGC JSONL"},
         {"--style", "igc.style", Kind::text, "responder style"}});
  } else if (cmd == "compare") {
    add({{"--a", "compare.a", Kind::text, "responses of system A"},
         {"--b", "compare.b", Kind::text, "responses of system B"},
         {"--preferences", "compare.preferences", Kind::text, "preference JSONL"}});
  } else if (cmd == "stats") {
    add(kData);
  } else if (cmd == "serve" || cmd == "chat") {
    add(kData);
    add({{"--retrieval", "serve.retrieval", Kind::text, "retrieval checkpoint"},
         {"--generative", "serve.generative", Kind::text, "generative checkpoint"}});
    if (cmd == "serve") {
      add({{"--host", "serve.host", Kind::text, "bind address"},
           {"--port", "serve.port", Kind::integer, "port"}});
    } else {
      add({{"--image", "chat.image_id", Kind::text, "image id"},
           {"--style", "chat.style", Kind::text, "model style"},
           {"--human-style", "chat.style_human", Kind::text, "human style"},
           {"--kind", "chat.model_kind", Kind::text, "retrieval or generative"},
           {"--transcript", "chat.transcript", Kind::text, "transcript output path"}});
    }
  }
  return o;
}

json convert(const Override& o, const std::string& value) {
  switch (o.kind) {
    case Kind::integer: return std::stoull(value);
    case Kind::real: return std::stod(value);
    case Kind::flag: return false;  // --separate-models clears from_full
    case Kind::text: break;
  }
  return value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-grounded, style-conditioned dialogue models"};
  app.require_subcommand(1);
  std::optional<std::string> config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train-ret", "train a retrieval model"},
      {"train-gen", "train a generative model"},
      {"pretrain", "pretrain the retrieval text encoders"},
      {"eval", "evaluate a checkpoint or baseline scorer"},
      {"ablate", "modality ablation table"},
      {"igc-eval", "BLEU-4 on IGC question turns"},
      {"compare", "pairwise preference win rates and p-values"},
      {"stats", "dataset statistics"},
      {"serve", "HTTP chat service"},
      {"chat", "terminal chat"},
  };
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, bool>> flags;
  std::map<std::string, std::vector<Override>> table;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON run config");
    sub->add_option("-o,--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed (overrides IMAGECHAT_SEED and the config)");
    sub->add_option("--set", sets, "KEY=JSON override, e.g. retrieval.text.n_layers=2");
    table[name] = overrides_for(name);
    for (const auto& o : table[name]) {
      if (o.kind == Kind::flag) {
        sub->add_flag(o.flag, flags[name][o.flag], o.help);
      } else {
        sub->add_option(o.flag, values[name][o.flag], o.help);
      }
    }
  }
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    json config = imagechat::load_run_config(config_path);
    imagechat::apply_seed_env(config, std::getenv("IMAGECHAT_SEED"));
    if (seed) config["seed"] = *seed;
    if (out_dir) config["out_dir"] = *out_dir;
    for (const auto& o : table[cmd]) {
      if (o.kind == Kind::flag) {
        if (flags[cmd][o.flag]) imagechat::set_config(config, o.key, convert(o, ""));
        continue;
      }
      const std::string& v = values[cmd][o.flag];
      if (!v.empty()) imagechat::set_config(config, o.key, convert(o, v));
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw imagechat::ConfigError("--set expects KEY=VALUE, got " + s);
      const std::string raw = s.substr(eq + 1);
      json value;
      try {
        value = json::parse(raw);
      } catch (const json::exception&) {
        value = raw;
      }
      imagechat::set_config(config, s.substr(0, eq), value);
    }
    config = imagechat::finalize_run_config(std::move(config));

    if (cmd == "train-ret") return imagechat::cmd_train_ret(config, std::cout);
    if (cmd == "train-gen") return imagechat::cmd_train_gen(config, std::cout);
    if (cmd == "pretrain") return imagechat::cmd_pretrain(config, std::cout);
    if (cmd == "eval") return imagechat::cmd_eval(config, std::cout);
    if (cmd == "ablate") return imagechat::cmd_ablate(config, std::cout);
    if (cmd == "igc-eval") return imagechat::cmd_igc_eval(config, std::cout);
    if (cmd == "compare") return imagechat::cmd_compare(config, std::cout);
    if (cmd == "stats") return imagechat::cmd_stats(config, std::cout);
    if (cmd == "serve") return imagechat::cmd_serve(config, std::cout);
    if (cmd == "chat") return imagechat::cmd_chat(config, std::cin, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "imagechat " << cmd << ": " << e.what() << "\n";
    return 1;
  }
  return 2;
}
