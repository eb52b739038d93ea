// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset schema and text handling: dialogue records, per-turn contexts,
// style catalog, tokenizer, vocabulary, candidate stores, the IGC adapter and
// corpus statistics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace imagechat {

enum class Split { train, valid, test };
enum class Speaker { A, B };

std::string to_string(Split s);
Split parse_split(std::string_view s);

struct Turn {
  Speaker speaker = Speaker::A;
  std::string text;
};

struct DialogueExample {
  std::string image_id;
  std::string style_a;
  std::string style_b;
  Split split = Split::train;
  std::vector<Turn> turns;
};

// Model input for one response: image I, responder style S, history D.
struct TurnContext {
  std::string image_id;
  std::string responder_style;
  std::vector<std::string> history;
  int turn_index = 1;  // == history.size() + 1
};

struct TurnSample {
  TurnContext context;
  std::string gold;
  // Dialogue-level fields kept so samples can be regrouped into examples.
  std::string partner_style;
  Split split = Split::train;
};

// ---------------------------------------------------------------- styles

enum class StyleClass { positive, neutral, negative };

std::string to_string(StyleClass c);
StyleClass parse_style_class(std::string_view s);

struct StyleTrait {
  std::string name;
  StyleClass style_class = StyleClass::neutral;
};

class StyleCatalog {
 public:
  StyleCatalog() = default;
  explicit StyleCatalog(std::vector<StyleTrait> traits);

  // One `name<TAB>class` per line; blank lines and '#' comments ignored.
  static StyleCatalog parse(std::string_view text);
  static StyleCatalog load(const std::filesystem::path& path);

  std::size_t size() const { return traits_.size(); }
  const std::vector<StyleTrait>& traits() const { return traits_; }
  const StyleTrait& at(std::size_t index) const;
  bool contains(std::string_view name) const;
  // Throws CatalogError for unknown traits.
  std::size_t index_of(std::string_view name) const;
  std::vector<std::string> names() const;

 private:
  std::vector<StyleTrait> traits_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ------------------------------------------------------------- tokenizer

// Lowercases ASCII, splits on whitespace and detaches . , ! ? ' " as tokens.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

// ------------------------------------------------------------ vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecial = 5;

  Vocabulary();

  // Content tokens with frequency >= min_freq, ordered by frequency
  // descending then lexicographically. When `styles` is given, one reserved
  // token per trait follows the special tokens.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          std::size_t min_freq,
                          const std::vector<std::string>* styles = nullptr);

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids,
                                  bool skip_special = true) const;

  std::size_t num_styles() const { return num_styles_; }
  int style_token(std::size_t style_index) const;
  bool is_special(int id) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t num_styles_ = 0;

  void push(const std::string& token);
};

std::string style_token_text(std::string_view style_name);

// Content corpus used for vocabulary building: every utterance, tokenized.
std::vector<std::vector<std::string>> utterance_corpus(
    const std::vector<DialogueExample>& examples);
Vocabulary build_vocab(const std::vector<DialogueExample>& examples, std::size_t min_freq,
                       const StyleCatalog* styles = nullptr);

// -------------------------------------------------------------- datasets

struct LoadError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct LoadResult {
  std::vector<DialogueExample> examples;
  std::vector<LoadError> errors;
};

LoadResult parse_dataset(std::string_view jsonl, const StyleCatalog& catalog);
LoadResult load_dataset(const std::filesystem::path& path, const StyleCatalog& catalog);
nlohmann::json to_json(const DialogueExample& ex);

std::vector<DialogueExample> filter_split(const std::vector<DialogueExample>& examples,
                                          Split split);

// One context per turn; turn t sees the first t-1 utterances.
std::vector<TurnSample> make_turn_contexts(const DialogueExample& ex);
std::vector<TurnSample> make_turn_contexts(const std::vector<DialogueExample>& examples);
// Inverse of make_turn_contexts: a new dialogue starts at every turn-1 sample.
std::vector<DialogueExample> reconstruct_dialogues(const std::vector<TurnSample>& samples);
bool operator==(const DialogueExample& a, const DialogueExample& b);

// All distinct turn-`turn` responses in first-seen order.
std::vector<std::string> build_candidate_store(const std::vector<DialogueExample>& examples,
                                               int turn);

bool is_question(std::string_view text);

// ------------------------------------------------------------------- IGC

struct IgcExample {
  std::string image_id;
  std::string context_utterance;
  std::string question;
  std::string gold_response;
};

struct IgcLoadResult {
  std::vector<IgcExample> examples;
  std::vector<LoadError> errors;
};

IgcLoadResult parse_igc(std::string_view jsonl);
IgcLoadResult load_igc(const std::filesystem::path& path);
// History [context, question] at turn 3, answered in `responder_style`.
TurnContext igc_adapt(const IgcExample& ex, const std::string& responder_style);

// ----------------------------------------------------------------- stats

struct DatasetStats {
  std::size_t images = 0;
  std::size_t dialogues = 0;
  std::size_t utterances = 0;
  std::size_t style_types = 0;
  std::size_t vocab_size = 0;
  double tokens_per_utterance = 0.0;
};

DatasetStats dataset_stats(const std::vector<DialogueExample>& examples);
nlohmann::json to_json(const DatasetStats& s);

}  // namespace imagechat
