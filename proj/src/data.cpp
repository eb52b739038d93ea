// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/data.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <unordered_set>

#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

std::string to_string(StyleClass c) {
  switch (c) {
    case StyleClass::positive: return "positive";
    case StyleClass::neutral: return "neutral";
    case StyleClass::negative: return "negative";
  }
  return "neutral";
}

StyleClass parse_style_class(std::string_view s) {
  if (s == "positive") return StyleClass::positive;
  if (s == "neutral") return StyleClass::neutral;
  if (s == "negative") return StyleClass::negative;
  throw CatalogError("unknown style class '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- styles

StyleCatalog::StyleCatalog(std::vector<StyleTrait> traits) : traits_(std::move(traits)) {
  for (std::size_t i = 0; i < traits_.size(); ++i) {
    if (traits_[i].name.empty()) throw CatalogError("empty style name");
    if (!index_.emplace(traits_[i].name, i).second) {
      throw CatalogError("duplicate style '" + traits_[i].name + "'");
    }
  }
}

StyleCatalog StyleCatalog::parse(std::string_view text) {
  std::vector<StyleTrait> traits;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw CatalogError("style catalog line " + std::to_string(lineno) +
                         ": expected name<TAB>class");
    }
    traits.push_back({line.substr(0, tab), parse_style_class(line.substr(tab + 1))});
  }
  if (traits.empty()) throw CatalogError("style catalog is empty");
  return StyleCatalog(std::move(traits));
}

StyleCatalog StyleCatalog::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

const StyleTrait& StyleCatalog::at(std::size_t index) const {
  if (index >= traits_.size()) {
    throw CatalogError("style index " + std::to_string(index) + " out of range");
  }
  return traits_[index];
}

bool StyleCatalog::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t StyleCatalog::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw CatalogError("unknown style '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> StyleCatalog::names() const {
  std::vector<std::string> out;
  for (const auto& t : traits_) out.push_back(t.name);
  return out;
}

// ------------------------------------------------------------- tokenizer

namespace {
bool is_split_punct(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == '\'' || c == '"';
}
}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      flush();
    } else if (is_split_punct(ch)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(uc < 128 ? static_cast<char>(std::tolower(uc)) : ch);
    }
  }
  flush();
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ------------------------------------------------------------ vocabulary

namespace {
const char* const kSpecialTokens[] = {"__pad__", "__start__", "__end__", "__sep__",
                                      "__unk__"};
}

std::string style_token_text(std::string_view style_name) {
  return "__style:" + std::string(style_name) + "__";
}

Vocabulary::Vocabulary() {
  for (const char* t : kSpecialTokens) push(t);
}

void Vocabulary::push(const std::string& token) {
  if (ids_.count(token)) throw VocabularyError("duplicate vocabulary entry " + token);
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus,
                             std::size_t min_freq, const std::vector<std::string>* styles) {
  Vocabulary v;
  if (styles) {
    for (const auto& s : *styles) v.push(style_token_text(s));
    v.num_styles_ = styles->size();
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& sentence : corpus)
    for (const auto& t : sentence) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (const auto& [tok, n] : entries) {
    if (n < std::max<std::size_t>(min_freq, 1)) continue;
    if (v.ids_.count(tok)) continue;
    v.push(tok);
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.count(std::string(token)) != 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids,
                                            bool skip_special) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (skip_special && is_special(i)) continue;
    out.push_back(token(i));
  }
  return out;
}

int Vocabulary::style_token(std::size_t style_index) const {
  if (style_index >= num_styles_) {
    throw CatalogError("no reserved token for style index " +
                       std::to_string(style_index));
  }
  return kNumSpecial + static_cast<int>(style_index);
}

bool Vocabulary::is_special(int id) const {
  return id >= 0 && id < kNumSpecial + static_cast<int>(num_styles_);
}

nlohmann::json Vocabulary::to_json() const {
  return {{"tokens", tokens_}, {"num_styles", num_styles_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  const auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < kNumSpecial) throw FormatError("vocabulary missing reserved tokens");
  for (int i = 0; i < kNumSpecial; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[i]) {
      throw FormatError("vocabulary reserved token mismatch at id " + std::to_string(i));
    }
  }
  for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) v.push(tokens[i]);
  v.num_styles_ = j.value("num_styles", std::size_t{0});
  return v;
}

std::vector<std::vector<std::string>> utterance_corpus(
    const std::vector<DialogueExample>& examples) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& ex : examples)
    for (const auto& t : ex.turns) corpus.push_back(tokenize(t.text));
  return corpus;
}

Vocabulary build_vocab(const std::vector<DialogueExample>& examples, std::size_t min_freq,
                       const StyleCatalog* styles) {
  if (styles) {
    const auto names = styles->names();
    return Vocabulary::build(utterance_corpus(examples), min_freq, &names);
  }
  return Vocabulary::build(utterance_corpus(examples), min_freq, nullptr);
}

// -------------------------------------------------------------- datasets

namespace {

std::string require_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw DataError(std::string("missing or non-string field '") + key + "'");
  }
  auto s = j.at(key).get<std::string>();
  if (s.empty()) throw DataError(std::string("empty field '") + key + "'");
  return s;
}

DialogueExample parse_example(const nlohmann::json& j, const StyleCatalog& catalog) {
  if (!j.is_object()) throw DataError("line is not a JSON object");
  if (j.contains("v") && j.at("v") != 1) throw DataError("unsupported schema version");
  DialogueExample ex;
  ex.image_id = require_string(j, "image_id");
  ex.style_a = require_string(j, "style_a");
  ex.style_b = require_string(j, "style_b");
  catalog.index_of(ex.style_a);
  catalog.index_of(ex.style_b);
  ex.split = j.contains("split") ? parse_split(require_string(j, "split")) : Split::train;
  if (!j.contains("turns") || !j.at("turns").is_array()) {
    throw DataError("missing 'turns' array");
  }
  const auto& turns = j.at("turns");
  if (turns.empty() || turns.size() > 3) {
    throw DataError("dialogue must have 1-3 turns, got " + std::to_string(turns.size()));
  }
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const auto speaker = require_string(turns[i], "speaker");
    const Speaker expected = i % 2 == 0 ? Speaker::A : Speaker::B;
    const Speaker got = speaker == "A" ? Speaker::A
                        : speaker == "B" ? Speaker::B
                                         : throw DataError("unknown speaker '" + speaker + "'");
    if (got != expected) {
      throw DataError("speakers must alternate starting with A (turn " +
                      std::to_string(i + 1) + ")");
    }
    ex.turns.push_back({got, require_string(turns[i], "text")});
  }
  return ex;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t lineno = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    bool blank = std::all_of(line.begin(), line.end(),
                             [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    if (!blank) fn(lineno, line);
    start = end + 1;
  }
}

}  // namespace

LoadResult parse_dataset(std::string_view jsonl, const StyleCatalog& catalog) {
  LoadResult result;
  for_each_line(jsonl, [&](std::size_t lineno, std::string_view line) {
    try {
      result.examples.push_back(parse_example(nlohmann::json::parse(line), catalog));
    } catch (const nlohmann::json::exception& e) {
      result.errors.push_back({lineno, std::string("invalid JSON: ") + e.what()});
    } catch (const Error& e) {
      result.errors.push_back({lineno, e.what()});
    }
  });
  return result;
}

LoadResult load_dataset(const std::filesystem::path& path, const StyleCatalog& catalog) {
  return parse_dataset(read_file(path), catalog);
}

nlohmann::json to_json(const DialogueExample& ex) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : ex.turns) {
    turns.push_back({{"speaker", t.speaker == Speaker::A ? "A" : "B"}, {"text", t.text}});
  }
  return {{"v", 1},          {"image_id", ex.image_id}, {"style_a", ex.style_a},
          {"style_b", ex.style_b}, {"split", to_string(ex.split)}, {"turns", turns}};
}

std::vector<DialogueExample> filter_split(const std::vector<DialogueExample>& examples,
                                          Split split) {
  std::vector<DialogueExample> out;
  for (const auto& ex : examples)
    if (ex.split == split) out.push_back(ex);
  return out;
}

std::vector<TurnSample> make_turn_contexts(const DialogueExample& ex) {
  std::vector<TurnSample> out;
  for (std::size_t t = 0; t < ex.turns.size(); ++t) {
    TurnSample s;
    s.context.image_id = ex.image_id;
    s.context.responder_style = t % 2 == 0 ? ex.style_a : ex.style_b;
    s.context.turn_index = static_cast<int>(t) + 1;
    for (std::size_t h = 0; h < t; ++h) s.context.history.push_back(ex.turns[h].text);
    s.gold = ex.turns[t].text;
    s.partner_style = t % 2 == 0 ? ex.style_b : ex.style_a;
    s.split = ex.split;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TurnSample> make_turn_contexts(const std::vector<DialogueExample>& examples) {
  std::vector<TurnSample> out;
  for (const auto& ex : examples) {
    auto part = make_turn_contexts(ex);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<DialogueExample> reconstruct_dialogues(const std::vector<TurnSample>& samples) {
  std::vector<DialogueExample> out;
  for (const auto& s : samples) {
    const auto& ctx = s.context;
    if (ctx.turn_index == 1) {
      DialogueExample ex;
      ex.image_id = ctx.image_id;
      ex.style_a = ctx.responder_style;
      ex.style_b = s.partner_style;
      ex.split = s.split;
      out.push_back(std::move(ex));
    } else if (out.empty() ||
               out.back().turns.size() + 1 != static_cast<std::size_t>(ctx.turn_index)) {
      throw DataError("turn samples are not in dialogue order");
    }
    auto& ex = out.back();
    if (ctx.history.size() != ex.turns.size()) {
      throw DataError("turn sample history does not match preceding turns");
    }
    const Speaker speaker = ctx.turn_index % 2 == 1 ? Speaker::A : Speaker::B;
    ex.turns.push_back({speaker, s.gold});
  }
  return out;
}

bool operator==(const DialogueExample& a, const DialogueExample& b) {
  if (a.image_id != b.image_id || a.style_a != b.style_a || a.style_b != b.style_b ||
      a.split != b.split || a.turns.size() != b.turns.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.turns.size(); ++i) {
    if (a.turns[i].speaker != b.turns[i].speaker || a.turns[i].text != b.turns[i].text) {
      return false;
    }
  }
  return true;
}

std::vector<std::string> build_candidate_store(const std::vector<DialogueExample>& examples,
                                               int turn) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  if (turn < 1) return out;
  for (const auto& ex : examples) {
    if (static_cast<std::size_t>(turn) > ex.turns.size()) continue;
    const auto& text = ex.turns[static_cast<std::size_t>(turn - 1)].text;
    if (seen.insert(text).second) out.push_back(text);
  }
  return out;
}

bool is_question(std::string_view text) {
  if (text.find('?') != std::string_view::npos) return true;
  const auto tokens = tokenize(text);
  if (tokens.empty()) return false;
  static const std::set<std::string> kWh = {"who", "what", "when", "where", "why", "how"};
  return kWh.count(tokens.front()) != 0;
}

// ------------------------------------------------------------------- IGC

IgcLoadResult parse_igc(std::string_view jsonl) {
  IgcLoadResult result;
  for_each_line(jsonl, [&](std::size_t lineno, std::string_view line) {
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DataError("line is not a JSON object");
      result.examples.push_back({require_string(j, "image_id"), require_string(j, "context"),
                                 require_string(j, "question"),
                                 require_string(j, "response")});
    } catch (const nlohmann::json::exception& e) {
      result.errors.push_back({lineno, std::string("invalid JSON: ") + e.what()});
    } catch (const Error& e) {
      result.errors.push_back({lineno, e.what()});
    }
  });
  return result;
}

IgcLoadResult load_igc(const std::filesystem::path& path) { return parse_igc(read_file(path)); }

TurnContext igc_adapt(const IgcExample& ex, const std::string& responder_style) {
  if (ex.image_id.empty() || ex.context_utterance.empty() || ex.question.empty() ||
      ex.gold_response.empty()) {
    throw DataError("IGC example has an empty field");
  }
  TurnContext ctx;
  ctx.image_id = ex.image_id;
  ctx.responder_style = responder_style;
  ctx.history = {ex.context_utterance, ex.question};
  ctx.turn_index = 3;
  return ctx;
}

// ----------------------------------------------------------------- stats

DatasetStats dataset_stats(const std::vector<DialogueExample>& examples) {
  DatasetStats s;
  std::unordered_set<std::string> images, styles, vocab;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    images.insert(ex.image_id);
    styles.insert(ex.style_a);
    styles.insert(ex.style_b);
    for (const auto& t : ex.turns) {
      const auto toks = tokenize(t.text);
      tokens += toks.size();
      vocab.insert(toks.begin(), toks.end());
      ++s.utterances;
    }
  }
  s.images = images.size();
  s.dialogues = examples.size();
  s.style_types = styles.size();
  s.vocab_size = vocab.size();
  s.tokens_per_utterance =
      s.utterances ? static_cast<double>(tokens) / static_cast<double>(s.utterances) : 0.0;
  return s;
}

nlohmann::json to_json(const DatasetStats& s) {
  return {{"images", s.images},           {"dialogues", s.dialogues},
          {"utterances", s.utterances},   {"style_types", s.style_types},
          {"vocab_size", s.vocab_size},   {"tokens_per_utterance", s.tokens_per_utterance}};
}

}  // namespace imagechat
