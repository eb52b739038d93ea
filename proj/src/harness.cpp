// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/harness.hpp"

#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "imagechat/checkpoint.hpp"
#include "imagechat/errors.hpp"
#include "imagechat/generative.hpp"
#include "imagechat/retrieval.hpp"
#include "imagechat/service.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

json default_run_config() {
  RetrievalModelConfig ret;
  GenConfig gen;
  return {
      {"seed", 0},
      {"out_dir", "run"},
      {"init_from", ""},
      {"data",
       {{"dialogues", ""},
        {"styles", ""},
        {"features", ""},
        {"igc", ""},
        {"pretrain", ""},
        {"vocab_min_freq", 1}}},
      {"retrieval", ret},
      {"train_ret", RetrievalTrainConfig{}},
      {"generative", gen},
      {"train_gen", GenTrainConfig{}},
      {"pretrain", PretrainConfig{}},
      {"eval",
       {{"checkpoint", ""},
        {"split", "test"},
        {"scorer", "model"},
        {"n_candidates", 100},
        {"threads", 1},
        {"mask", "all"},
        {"beam_size", gen.beam_size},
        {"trigram_block", gen.trigram_block}}},
      {"ablate", {{"from_full", true}, {"checkpoints", json::object()}}},
      {"igc", {{"style", ""}}},
      {"compare", {{"a", ""}, {"b", ""}, {"preferences", ""}}},
      {"serve", {{"host", "127.0.0.1"}, {"port", 8080}, {"retrieval", ""}, {"generative", ""}}},
      {"chat",
       {{"image_id", ""},
        {"style", ""},
        {"style_human", ""},
        {"model_kind", "retrieval"},
        {"transcript", ""}}},
  };
}

json load_run_config(const std::optional<fs::path>& path) {
  json config = default_run_config();
  if (!path) return config;
  if (!fs::exists(*path)) throw ConfigError("config file not found: " + path->string());
  json file;
  try {
    file = json::parse(read_file(*path));
  } catch (const json::exception& e) {
    throw ConfigError(path->string() + ": " + e.what());
  }
  if (!file.is_object()) throw ConfigError(path->string() + ": config must be a JSON object");
  for (const auto& [key, value] : file.items()) {
    if (key == "config_hash") continue;
    if (!config.contains(key)) throw ConfigError(path->string() + ": unknown key '" + key + "'");
  }
  file.erase("config_hash");
  config.merge_patch(file);
  return config;
}

void set_config(json& config, const std::string& dotted_key, json value) {
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

void apply_seed_env(json& config, const char* env_value) {
  if (!env_value || !*env_value) return;
  std::uint64_t seed = 0;
  const std::string_view s(env_value);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("IMAGECHAT_SEED must be a non-negative integer, got '" + std::string(s) + "'");
  }
  config["seed"] = seed;
}

json finalize_run_config(json config) {
  config.erase("config_hash");
  const std::string hash = config_hash(config);
  config["config_hash"] = hash;
  return config;
}

// ------------------------------------------------------------------ inputs

namespace {

fs::path require_path(const json& config, const std::string& section, const std::string& key) {
  const std::string p = config.at(section).at(key).get<std::string>();
  if (p.empty()) throw ConfigError("missing input: " + section + "." + key + " is not set");
  if (!fs::exists(p)) throw ConfigError("missing input: " + p + " (" + section + "." + key + ")");
  return p;
}

std::uint64_t seed_of(const json& config) { return config.at("seed").get<std::uint64_t>(); }

json run_info(const json& config, const std::string& command) {
  return {{"command", command},
          {"config_hash", config.at("config_hash")},
          {"seed", seed_of(config)}};
}

fs::path prepare_out(const json& config) {
  const fs::path dir = config.at("out_dir").get<std::string>();
  fs::create_directories(dir);
  write_file(dir / "config.json", config.dump(2) + "\n");
  return dir;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

std::vector<std::string> image_ids(const std::vector<DialogueExample>& examples) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& ex : examples)
    if (seen.insert(ex.image_id).second) ids.push_back(ex.image_id);
  return ids;
}

struct Corpus {
  StyleCatalog catalog;
  std::vector<DialogueExample> examples;
  FeatureStore features;
};

Corpus load_corpus(const json& config, bool need_features = true) {
  Corpus c;
  c.catalog = StyleCatalog::load(require_path(config, "data", "styles"));
  c.examples = load_dialogues(require_path(config, "data", "dialogues"), c.catalog);
  if (need_features) {
    const std::string spec = config.at("data").at("features").get<std::string>();
    if (spec.empty()) throw ConfigError("missing input: data.features is not set");
    c.features = open_features(spec, image_ids(c.examples));
  }
  return c;
}

std::vector<TurnSample> split_samples(const std::vector<DialogueExample>& examples, Split s) {
  return make_turn_contexts(filter_split(examples, s));
}

json report_json(const MetricReport& report, const json& config, const json& extra = {}) {
  json j = report.to_json();
  j["config_hash"] = config.at("config_hash");
  j["seed"] = seed_of(config);
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

json checkpoint_provenance(const LoadedCheckpoint& ckpt, const std::string& path) {
  return {{"path", path},
          {"config_hash", ckpt.manifest.at("config_hash")},
          {"seed", ckpt.seed()}};
}

DecodeOptions decode_options(const json& config) {
  return {config.at("eval").at("beam_size").get<std::size_t>(),
          config.at("eval").at("trigram_block").get<bool>()};
}

void emit_report(const fs::path& dir, const std::string& stem, const json& j,
                 const std::string& table, std::ostream& out) {
  write_json(dir / (stem + ".json"), j);
  write_file(dir / (stem + ".txt"), table);
  out << table;
}

}  // namespace

FeatureStore open_features(const std::string& spec, const std::vector<std::string>& ids) {
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) != 0) {
    if (!fs::exists(spec)) throw ConfigError("missing input: feature store " + spec);
    return FeatureStore::load(spec);
  }
  std::uint64_t seed = 0;
  std::size_t dim = kImageFeatureDim;
  const std::string rest = spec.substr(prefix.size());
  const std::size_t colon = rest.find(':');
  try {
    seed = std::stoull(rest.substr(0, colon));
    if (colon != std::string::npos) dim = std::stoull(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad synthetic feature spec '" + spec + "'");
  }
  return FeatureStore::synthetic(ids, seed, dim);
}

std::vector<DialogueExample> load_dialogues(const fs::path& path, const StyleCatalog& catalog) {
  LoadResult r = load_dataset(path, catalog);
  if (!r.errors.empty()) {
    std::ostringstream os;
    os << path.string() << ": " << r.errors.size() << " malformed line(s)";
    for (std::size_t i = 0; i < r.errors.size() && i < 5; ++i) {
      os << "\n  line " << r.errors[i].line << ": " << r.errors[i].message;
    }
    throw DataError(os.str());
  }
  return std::move(r.examples);
}

json compare_preferences(const std::vector<PreferenceRow>& rows) {
  if (rows.empty()) throw DataError("no preference rows");
  std::map<int, PreferenceTally> turns;
  PreferenceTally all;
  for (const auto& r : rows) {
    auto& t = turns[r.turn];
    (r.prefers_a ? t.wins_model : t.wins_human)++;
    (r.prefers_a ? all.wins_model : all.wins_human)++;
  }
  auto summarize = [](const PreferenceTally& t) {
    const BinomialTest test = binomial_two_tailed(t);
    return json{{"n", t.n()},
                {"wins_a", t.wins_model},
                {"wins_b", t.wins_human},
                {"win_rate_a", static_cast<double>(t.wins_model) / static_cast<double>(t.n())},
                {"p_value", test.p_value},
                {"p_numerator", test.numerator},
                {"p_denominator_log2", test.n}};
  };
  json out = {{"turns", json::object()}, {"all", summarize(all)}};
  for (const auto& [turn, t] : turns) {
    if (turn > 0) out["turns"]["turn" + std::to_string(turn)] = summarize(t);
  }
  return out;
}

// ----------------------------------------------------------------- commands

int cmd_train_ret(const json& config, std::ostream& out) {
  const Corpus corpus = load_corpus(config);
  const auto train_examples = filter_split(corpus.examples, Split::train);
  const auto train = make_turn_contexts(train_examples);
  const auto valid = split_samples(corpus.examples, Split::valid);
  if (train.empty()) throw DataError("no training examples in " + config["data"]["dialogues"].get<std::string>());

  std::optional<LoadedCheckpoint> pre;
  const std::string init_from = config.at("init_from").get<std::string>();
  if (!init_from.empty()) {
    if (!fs::exists(init_from)) throw ConfigError("missing input: " + init_from + " (init_from)");
    pre = load_checkpoint(init_from);
  }
  const Vocabulary vocab =
      pre ? Vocabulary::from_json(pre->manifest.at("vocab"))
          : build_vocab(train_examples, config["data"]["vocab_min_freq"].get<std::size_t>());
  auto mc = config.at("retrieval").get<RetrievalModelConfig>();
  mc.text.vocab_size = vocab.size();
  mc.n_styles = corpus.catalog.size();
  RetrievalModel model(mc, vocab, corpus.catalog.names(), seed_of(config));
  if (pre) out << "initialized " << model.init_from_pretrain(*pre) << " tensors from " << init_from << "\n";

  auto tc = config.at("train_ret").get<RetrievalTrainConfig>();
  tc.seed = seed_of(config);
  const fs::path dir = prepare_out(config);
  std::ofstream log(dir / "loss.jsonl");
  const TrainResult result = train_retrieval(
      model, train, corpus.features, tc, valid, [&](const TrainLogEntry& e) {
        json j = {{"step", e.step}, {"loss", e.loss}};
        if (e.valid_r1) j["valid_r1"] = *e.valid_r1;
        log << j.dump() << "\n";
      });
  model.save(dir / "model.ckpt", run_info(config, "train-ret"));
  out << "trained " << result.steps << " steps, final loss " << result.log.back().loss << "\n";

  if (!valid.empty()) {
    const auto pool = response_pool(valid);
    RecallOptions ro;
    ro.n_candidates = std::min(config["eval"]["n_candidates"].get<std::size_t>(), pool.size());
    ro.seed = seed_of(config);
    ro.threads = config["eval"]["threads"].get<std::size_t>();
    RetrievalScorer scorer(model, corpus.features, tc.mask);
    const MetricReport report = evaluate_recall(valid, pool, scorer, ro);
    emit_report(dir, "valid_report", report_json(report, config, {{"split", "valid"}}),
                report.to_table({"r1", "r5"}, 100.0), out);
  }
  out << "wrote " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_train_gen(const json& config, std::ostream& out) {
  const Corpus corpus = load_corpus(config);
  const auto train_examples = filter_split(corpus.examples, Split::train);
  const auto train = make_turn_contexts(train_examples);
  const auto valid = split_samples(corpus.examples, Split::valid);
  if (train.empty()) throw DataError("no training examples");
  const Vocabulary vocab = build_vocab(
      train_examples, config["data"]["vocab_min_freq"].get<std::size_t>(), &corpus.catalog);
  auto gc = config.at("generative").get<GenConfig>();
  gc.text.vocab_size = vocab.size();
  GenerativeModel model(gc, vocab, corpus.catalog.names(), seed_of(config));

  auto tc = config.at("train_gen").get<GenTrainConfig>();
  tc.seed = seed_of(config);
  const fs::path dir = prepare_out(config);
  std::ofstream log(dir / "loss.jsonl");
  const GenTrainResult result =
      train_generative(model, train, corpus.features, tc, [&](std::size_t step, double loss) {
        log << json{{"step", step}, {"loss", loss}}.dump() << "\n";
        return false;
      });
  model.save(dir / "model.ckpt", run_info(config, "train-gen"));
  out << "trained " << result.steps << " steps, final loss " << result.losses.back() << "\n";
  if (!valid.empty()) {
    const MetricReport report =
        evaluate_generation(model, valid, corpus.features, tc.mask, decode_options(config));
    emit_report(dir, "valid_report", report_json(report, config, {{"split", "valid"}}),
                report.to_table({"rouge_l", "f1", "bleu4"}, 100.0), out);
  }
  out << "wrote " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_pretrain(const json& config, std::ostream& out) {
  const auto pairs = load_pretrain_pairs(require_path(config, "data", "pretrain"));
  const StyleCatalog catalog = StyleCatalog::load(require_path(config, "data", "styles"));
  std::vector<std::vector<std::string>> corpus;
  for (const auto& p : pairs) {
    corpus.push_back(tokenize(p.context));
    corpus.push_back(tokenize(p.response));
  }
  const std::string dialogues = config["data"]["dialogues"].get<std::string>();
  if (!dialogues.empty()) {
    const auto extra = utterance_corpus(
        filter_split(load_dialogues(require_path(config, "data", "dialogues"), catalog), Split::train));
    corpus.insert(corpus.end(), extra.begin(), extra.end());
  }
  const Vocabulary vocab =
      Vocabulary::build(corpus, config["data"]["vocab_min_freq"].get<std::size_t>());
  auto mc = config.at("retrieval").get<RetrievalModelConfig>();
  mc.text.vocab_size = vocab.size();
  mc.n_styles = catalog.size();
  RetrievalModel model(mc, vocab, catalog.names(), seed_of(config));
  auto pc = config.at("pretrain").get<PretrainConfig>();
  pc.seed = seed_of(config);
  const fs::path dir = prepare_out(config);
  std::ofstream log(dir / "loss.jsonl");
  const TrainResult result = pretrain(model, pairs, pc, [&](const TrainLogEntry& e) {
    log << json{{"step", e.step}, {"loss", e.loss}}.dump() << "\n";
  });
  model.save(dir / "pretrain.ckpt", run_info(config, "pretrain"));
  out << "pretrained " << result.steps << " steps, final loss " << result.log.back().loss << "\n"
      << "wrote " << (dir / "pretrain.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const json& config, std::ostream& out) {
  const json& ev = config.at("eval");
  const std::string scorer_name = ev.at("scorer").get<std::string>();
  const Split split = parse_split(ev.at("split").get<std::string>());
  const Corpus corpus = load_corpus(config);
  const auto items = split_samples(corpus.examples, split);
  if (items.empty()) throw DataError("split " + to_string(split) + " is empty");
  const ModalityMask mask = ModalityMask::parse(ev.at("mask").get<std::string>());
  const fs::path dir = prepare_out(config);
  json extra = {{"split", to_string(split)}, {"scorer", scorer_name}};

  std::optional<LoadedCheckpoint> ckpt;
  if (scorer_name == "model") {
    const fs::path path = require_path(config, "eval", "checkpoint");
    ckpt = load_checkpoint(path);
    extra["checkpoint"] = checkpoint_provenance(*ckpt, path.string());
  }
  if (ckpt && ckpt->manifest.value("kind", "") == "generative") {
    const GenerativeModel model = GenerativeModel::from_checkpoint(*ckpt);
    std::vector<GenerationOutput> outputs;
    const MetricReport report =
        evaluate_generation(model, items, corpus.features, mask, decode_options(config), &outputs);
    std::ofstream jsonl(dir / "outputs.jsonl");
    for (std::size_t i = 0; i < items.size(); ++i) {
      jsonl << json{{"context_id", items[i].context.image_id + "#" + std::to_string(i)},
                    {"turn", items[i].context.turn_index},
                    {"output_text", outputs[i].output_text},
                    {"logprob", outputs[i].logprob}}
                   .dump()
            << "\n";
    }
    emit_report(dir, "report", report_json(report, config, extra),
                report.to_table({"rouge_l", "f1", "bleu4"}, 100.0), out);
    return 0;
  }

  std::unique_ptr<RetrievalModel> model;
  std::unique_ptr<Scorer> scorer;
  if (scorer_name == "model") {
    model = std::make_unique<RetrievalModel>(RetrievalModel::from_checkpoint(*ckpt));
    scorer = std::make_unique<RetrievalScorer>(*model, corpus.features, mask);
  } else if (scorer_name == "oracle") {
    scorer = std::make_unique<OracleScorer>();
  } else if (scorer_name == "random") {
    scorer = std::make_unique<RandomScorer>(seed_of(config));
  } else if (scorer_name == "ir") {
    std::vector<std::string> responses;
    for (const auto& s : split_samples(corpus.examples, Split::train)) responses.push_back(s.gold);
    scorer = std::make_unique<IrScorer>(IrBaseline(responses));
  } else {
    throw ConfigError("unknown scorer '" + scorer_name + "' (model, oracle, random, ir)");
  }
  RecallOptions ro;
  ro.n_candidates = ev.at("n_candidates").get<std::size_t>();
  ro.seed = seed_of(config);
  ro.threads = ev.at("threads").get<std::size_t>();
  const MetricReport report = evaluate_recall(items, response_pool(items), *scorer, ro);
  emit_report(dir, "report", report_json(report, config, extra),
              report.to_table({"r1", "r5"}, 100.0), out);
  return 0;
}

int cmd_ablate(const json& config, std::ostream& out) {
  const json& ev = config.at("eval");
  const Split split = parse_split(ev.at("split").get<std::string>());
  const Corpus corpus = load_corpus(config);
  const auto items = split_samples(corpus.examples, split);
  if (items.empty()) throw DataError("split " + to_string(split) + " is empty");
  const fs::path dir = prepare_out(config);
  const bool from_full = config.at("ablate").at("from_full").get<bool>();

  RecallOptions ro;
  ro.n_candidates = ev.at("n_candidates").get<std::size_t>();
  ro.seed = seed_of(config);
  ro.threads = ev.at("threads").get<std::size_t>();
  const auto pool = response_pool(items);

  if (from_full) {
    const fs::path path = require_path(config, "eval", "checkpoint");
    const LoadedCheckpoint ckpt = load_checkpoint(path);
    if (ckpt.manifest.value("kind", "") == "generative") {
      const GenerativeModel model = GenerativeModel::from_checkpoint(ckpt);
      json rows = json::array();
      std::ostringstream table;
      for (ModalityMask mask : ablation_masks()) {
        const MetricReport r =
            evaluate_generation(model, items, corpus.features, mask, decode_options(config));
        rows.push_back({{"mask", mask.to_string()}, {"label", mask.label()}, {"report", r.to_json()}});
        table << mask.label() << "\n" << r.to_table({"rouge_l"}, 100.0);
      }
      emit_report(dir, "ablation",
                  {{"rows", rows},
                   {"mode", "input_omission"},
                   {"config_hash", config.at("config_hash")},
                   {"seed", seed_of(config)}},
                  table.str(), out);
      return 0;
    }
    const RetrievalModel model = RetrievalModel::from_checkpoint(ckpt);
    std::map<std::uint8_t, std::unique_ptr<RetrievalScorer>> scorers;
    for (ModalityMask m : ablation_masks()) {
      scorers[m.bits()] = std::make_unique<RetrievalScorer>(model, corpus.features,
                                                            ModalityMask::all(), m.complement());
    }
    const AblationTable t = run_ablation_matrix(
        [&](ModalityMask m) -> const Scorer* { return scorers.at(m.bits()).get(); }, items, pool, ro);
    json j = t.to_json();
    j["mode"] = "zero_substitution";
    j["config_hash"] = config.at("config_hash");
    j["seed"] = seed_of(config);
    emit_report(dir, "ablation", j, t.to_text(), out);
    return 0;
  }

  std::vector<std::unique_ptr<RetrievalModel>> models;
  std::map<std::uint8_t, std::unique_ptr<RetrievalScorer>> scorers;
  for (const auto& [key, value] : config.at("ablate").at("checkpoints").items()) {
    const ModalityMask mask = ModalityMask::parse(key);
    const std::string path = value.get<std::string>();
    if (!fs::exists(path)) throw ConfigError("missing input: " + path + " (ablate.checkpoints)");
    models.push_back(std::make_unique<RetrievalModel>(RetrievalModel::load(path)));
    scorers[mask.bits()] = std::make_unique<RetrievalScorer>(*models.back(), corpus.features, mask);
  }
  const AblationTable t = run_ablation_matrix(
      [&](ModalityMask m) -> const Scorer* {
        auto it = scorers.find(m.bits());
        return it == scorers.end() ? nullptr : it->second.get();
      },
      items, pool, ro);
  json j = t.to_json();
  j["mode"] = "separate_models";
  j["config_hash"] = config.at("config_hash");
  j["seed"] = seed_of(config);
  emit_report(dir, "ablation", j, t.to_text(), out);
  return 0;
}

int cmd_igc_eval(const json& config, std::ostream& out) {
  const IgcLoadResult igc = load_igc(require_path(config, "data", "igc"));
  if (!igc.errors.empty()) {
    throw DataError("IGC file has " + std::to_string(igc.errors.size()) +
                    " malformed line(s); first at line " + std::to_string(igc.errors[0].line) +
                    ": " + igc.errors[0].message);
  }
  const fs::path path = require_path(config, "eval", "checkpoint");
  const LoadedCheckpoint ckpt = load_checkpoint(path);
  const GenerativeModel model = GenerativeModel::from_checkpoint(ckpt);
  std::string style = config.at("igc").at("style").get<std::string>();
  if (style.empty()) style = model.styles().front();

  std::vector<IgcExample> kept;
  std::vector<std::string> ids;
  for (const auto& ex : igc.examples) {
    if (!is_question(ex.question)) continue;
    kept.push_back(ex);
    ids.push_back(ex.image_id);
  }
  if (kept.empty()) throw DataError("no IGC example passes the question filter");
  const FeatureStore features = open_features(config["data"]["features"].get<std::string>(), ids);
  const DecodeOptions opts = decode_options(config);
  std::vector<Tokens> hyps, refs;
  const fs::path dir = prepare_out(config);
  std::ofstream jsonl(dir / "outputs.jsonl");
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const DecodeResult r = model.decode(igc_adapt(kept[i], style), features, ModalityMask::all(), opts);
    hyps.push_back(model.vocab().decode(r.tokens));
    refs.push_back(tokenize(kept[i].gold_response));
    jsonl << json{{"context_id", kept[i].image_id + "#" + std::to_string(i)},
                  {"output_text", join_tokens(hyps.back())},
                  {"logprob", r.logprob}}
                 .dump()
          << "\n";
  }
  const BleuResult bleu = bleu4(hyps, refs);
  const json report = {{"bleu4_x100", bleu.bleu_x100()},
                       {"bleu4_unsmoothed_x100", bleu.bleu_unsmoothed_x100()},
                       {"examples", igc.examples.size()},
                       {"questions", kept.size()},
                       {"style", style},
                       {"checkpoint", checkpoint_provenance(ckpt, path.string())},
                       {"config_hash", config.at("config_hash")},
                       {"seed", seed_of(config)}};
  std::ostringstream table;
  table << "IGC questions: " << kept.size() << " of " << igc.examples.size() << "\n"
        << "BLEU-4 (x100): " << bleu.bleu_x100() << "\n";
  emit_report(dir, "igc_report", report, table.str(), out);
  return 0;
}

int cmd_compare(const json& config, std::ostream& out) {
  const json& c = config.at("compare");
  const fs::path prefs = require_path(config, "compare", "preferences");
  std::set<std::string> ids_a, ids_b;
  auto read_ids = [](const fs::path& p) {
    std::set<std::string> ids;
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ids.insert(json::parse(line).at("context_id").get<std::string>());
    return ids;
  };
  const bool check_a = !c.at("a").get<std::string>().empty();
  const bool check_b = !c.at("b").get<std::string>().empty();
  if (check_a) ids_a = read_ids(require_path(config, "compare", "a"));
  if (check_b) ids_b = read_ids(require_path(config, "compare", "b"));

  std::vector<PreferenceRow> rows;
  std::istringstream in(read_file(prefs));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      PreferenceRow r;
      r.context_id = j.at("context_id").get<std::string>();
      r.turn = j.value("turn", 0);
      const std::string w = j.at("winner").get<std::string>();
      if (w != "a" && w != "b") throw DataError("winner must be \"a\" or \"b\"");
      r.prefers_a = w == "a";
      if ((check_a && !ids_a.count(r.context_id)) || (check_b && !ids_b.count(r.context_id))) {
        throw DataError("context_id '" + r.context_id + "' missing from a response file");
      }
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw DataError(prefs.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  json result = compare_preferences(rows);
  result["config_hash"] = config.at("config_hash");
  result["seed"] = seed_of(config);
  const fs::path dir = prepare_out(config);
  std::ostringstream table;
  auto line_for = [&](const std::string& name, const json& j) {
    table << name << ": win rate " << 100.0 * j["win_rate_a"].get<double>() << "% (n=" << j["n"]
          << "), p = " << j["p_value"].get<double>() << "\n";
  };
  for (const auto& [turn, j] : result["turns"].items()) line_for(turn, j);
  line_for("all", result["all"]);
  emit_report(dir, "compare", result, table.str(), out);
  return 0;
}

int cmd_stats(const json& config, std::ostream& out) {
  const Corpus corpus = load_corpus(config, false);
  json j = {{"all", to_json(dataset_stats(corpus.examples))}};
  for (Split s : {Split::train, Split::valid, Split::test}) {
    j[to_string(s)] = to_json(dataset_stats(filter_split(corpus.examples, s)));
  }
  j["config_hash"] = config.at("config_hash");
  j["seed"] = seed_of(config);
  out << j.dump(2) << "\n";
  const std::string dir = config.at("out_dir").get<std::string>();
  if (!dir.empty()) write_json(prepare_out(config) / "stats.json", j);
  return 0;
}

namespace {

std::unique_ptr<ChatService> build_service(const json& config) {
  Corpus corpus = load_corpus(config);
  ServiceResources res;
  const json& sv = config.at("serve");
  res.provenance = {{"config_hash", config.at("config_hash")}, {"seed", seed_of(config)}};
  const std::string ret = sv.at("retrieval").get<std::string>();
  const std::string gen = sv.at("generative").get<std::string>();
  if (ret.empty() && gen.empty()) throw ConfigError("serve needs serve.retrieval or serve.generative");
  if (!ret.empty()) {
    const LoadedCheckpoint ckpt = load_checkpoint(require_path(config, "serve", "retrieval"));
    res.retrieval = std::make_shared<RetrievalModel>(RetrievalModel::from_checkpoint(ckpt));
    res.provenance["retrieval"] = checkpoint_provenance(ckpt, ret);
  }
  if (!gen.empty()) {
    const LoadedCheckpoint ckpt = load_checkpoint(require_path(config, "serve", "generative"));
    res.generative = std::make_shared<GenerativeModel>(GenerativeModel::from_checkpoint(ckpt));
    res.provenance["generative"] = checkpoint_provenance(ckpt, gen);
  }
  const auto train = filter_split(corpus.examples, Split::train);
  for (int turn = 1; turn <= 3; ++turn) {
    auto store = build_candidate_store(train, turn);
    if (!store.empty()) res.candidate_stores[turn] = std::move(store);
  }
  res.features = std::make_shared<FeatureStore>(std::move(corpus.features));
  res.catalog = std::move(corpus.catalog);
  return std::make_unique<ChatService>(std::move(res));
}

}  // namespace

int cmd_serve(const json& config, std::ostream& out) {
  auto service = build_service(config);
  HttpServer server(*service);
  const json& sv = config.at("serve");
  out << "listening on " << sv["host"].get<std::string>() << ":" << sv["port"].get<int>() << std::endl;
  server.listen(sv["host"].get<std::string>(), sv["port"].get<int>());
  return 0;
}

int cmd_chat(const json& config, std::istream& in, std::ostream& out) {
  auto service = build_service(config);
  const json& ch = config.at("chat");
  const json catalog = service->catalog().body;
  ChatSession s;
  s.session_id = "cli";
  s.image_id = ch.at("image_id").get<std::string>();
  if (s.image_id.empty()) s.image_id = catalog["images"].at(0).get<std::string>();
  s.style_model = ch.at("style").get<std::string>();
  if (s.style_model.empty()) s.style_model = catalog["styles"].at(0)["name"].get<std::string>();
  s.style_human = ch.at("style_human").get<std::string>();
  s.model_kind = parse_model_kind(ch.at("model_kind").get<std::string>());
  std::string transcript_path = ch.at("transcript").get<std::string>();
  json provenance = {{"config_hash", config.at("config_hash")}, {"seed", seed_of(config)}};

  auto is_image = [&](const std::string& id) {
    for (const auto& i : catalog["images"])
      if (i == id) return true;
    return false;
  };
  auto is_style = [&](const std::string& name) {
    for (const auto& st : catalog["styles"])
      if (st["name"] == name) return true;
    return false;
  };
  if (!is_image(s.image_id)) throw CatalogError("unknown image '" + s.image_id + "'");
  if (!is_style(s.style_model)) throw CatalogError("unknown style '" + s.style_model + "'");

  auto model_turn = [&]() {
    TurnContext ctx{s.image_id, s.style_model, s.history(), static_cast<int>(s.transcript.size()) + 1};
    const Reply r = service->respond(ctx, s.model_kind);
    s.transcript.push_back({"model", r.text, s.style_model, s.model_kind, r.score});
    out << "model [" << s.style_model << "]: " << r.text << "\n";
  };
  auto save = [&](const std::string& path) {
    json j = s.to_json();
    j["provenance"] = provenance;
    write_json(path, j);
    out << "saved " << path << "\n";
  };

  out << "image " << s.image_id << ", model style " << s.style_model << " (" << to_string(s.model_kind)
      << "). Type :quit to exit.\n";
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] != ':') {
      if (!s.transcript.empty() && s.transcript.back().speaker == "human") model_turn();
      s.transcript.push_back({"human", line, s.style_human, std::nullopt, 0.0});
      model_turn();
      continue;
    }
    std::istringstream cmd(line.substr(1));
    std::string name, arg;
    cmd >> name;
    std::getline(cmd >> std::ws, arg);
    try {
      if (name == "quit" || name == "q") {
        break;
      } else if (name == "next") {
        if (!s.transcript.empty() && s.transcript.back().speaker == "model") {
          out << "the model spoke last\n";
        } else {
          model_turn();
        }
      } else if (name == "style" || name == "human-style") {
        if (!is_style(arg)) throw CatalogError("unknown style '" + arg + "'");
        std::string& target = name == "style" ? s.style_model : s.style_human;
        const std::string event = "turn " + std::to_string(s.transcript.size() + 1) + ": " + name +
                                  " " + (target.empty() ? "-" : target) + " -> " + arg;
        spdlog::info("{}", event);
        s.events.push_back(event);
        target = arg;
        out << event << "\n";
      } else if (name == "kind") {
        const ModelKind k = parse_model_kind(arg);
        s.events.push_back("turn " + std::to_string(s.transcript.size() + 1) + ": model_kind " +
                           to_string(s.model_kind) + " -> " + to_string(k));
        s.model_kind = k;
      } else if (name == "image") {
        if (!s.transcript.empty()) throw ContractError("the image is fixed once the dialogue starts");
        if (!is_image(arg)) throw CatalogError("unknown image '" + arg + "'");
        s.image_id = arg;
      } else if (name == "show") {
        out << s.to_json().dump(2) << "\n";
      } else if (name == "save") {
        const std::string path = !arg.empty() ? arg
                                 : !transcript_path.empty()
                                     ? transcript_path
                                     : (fs::path(config.at("out_dir").get<std::string>()) / "transcript.json").string();
        if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
        save(path);
      } else {
        out << "unknown command :" << name << "\n";
      }
    } catch (const Error& e) {
      out << "error: " << e.what() << "\n";
    }
  }
  if (!transcript_path.empty()) save(transcript_path);
  return 0;
}

}  // namespace imagechat
