// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// HTTP facade over trained models. ChatService holds the request logic and
// is usable without sockets; HttpServer binds it to cpp-httplib routes:
//   GET /api/catalog, POST /api/chat, POST /api/rank, GET /healthz.
// Errors are JSON {code, message}.

#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "imagechat/data.hpp"
#include "imagechat/feature_store.hpp"
#include "imagechat/generative.hpp"
#include "imagechat/retrieval.hpp"

namespace imagechat {

enum class ModelKind { retrieval, generative };
std::string to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view s);

struct TranscriptEntry {
  std::string speaker;  // "human" or "model"
  std::string text;
  // Model turns only.
  std::string style;
  std::optional<ModelKind> model_kind;
  double score = 0.0;  // retrieval score or generative log-prob
};

struct ChatSession {
  std::string session_id;
  std::string image_id;
  std::string style_human;  // may be empty
  std::string style_model;
  ModelKind model_kind = ModelKind::retrieval;
  std::vector<TranscriptEntry> transcript;
  std::vector<std::string> events;  // e.g. mid-session style switches

  std::vector<std::string> history() const;
  nlohmann::json to_json() const;
  static ChatSession from_json(const nlohmann::json& j);
};

struct ServiceResources {
  std::shared_ptr<const RetrievalModel> retrieval;
  std::shared_ptr<const GenerativeModel> generative;
  std::shared_ptr<const FeatureStore> features;
  StyleCatalog catalog;
  // Candidate stores by turn; turns beyond the largest key use that store.
  std::map<int, std::vector<std::string>> candidate_stores;
  // Copied into session exports (checkpoint config hashes and seeds).
  nlohmann::json provenance = nlohmann::json::object();
  std::size_t max_rank_candidates = 1000;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// A stateless reply for one context.
struct Reply {
  std::string text;
  double score = 0.0;
  std::size_t candidates_considered = 0;
  ModelKind model_kind = ModelKind::retrieval;
};

class ChatService {
 public:
  explicit ChatService(ServiceResources resources);

  ApiResponse catalog() const;
  ApiResponse healthz() const;
  // Stateless: {image_id, style, history[], model_kind, n_candidates?, seed?}.
  // Session ops: {op: "create", image_id, style, style_human?, model_kind},
  // {op: "say", session_id, text?}, {op: "export", session_id}.
  ApiResponse chat(const nlohmann::json& request);
  // {context: {image_id, style, history[]}, candidates[]}.
  ApiResponse rank(const nlohmann::json& request) const;
  // Routes a raw request; used by the HTTP layer and by tests.
  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::string& body);

  Reply respond(const TurnContext& ctx, ModelKind kind,
                std::optional<std::size_t> n_candidates = std::nullopt,
                std::uint64_t seed = 0) const;
  const std::vector<std::string>& candidate_store(int turn) const;

 private:
  struct SessionSlot {
    std::mutex mu;
    ChatSession session;
  };

  ApiResponse stateless_chat(const nlohmann::json& request) const;
  ApiResponse create_session(const nlohmann::json& request);
  ApiResponse session_say(const nlohmann::json& request);
  ApiResponse export_session(const nlohmann::json& request);
  std::shared_ptr<SessionSlot> find_session(const std::string& id);
  TurnContext parse_context(const nlohmann::json& j) const;

  ServiceResources res_;
  std::unique_ptr<CandidateCache> cache_;
  std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<SessionSlot>> sessions_;
  std::uint64_t next_session_ = 1;
};

// Re-derives every model turn of `session` through ChatService::respond with
// the recorded style and model kind; returns the indices of transcript
// entries whose text differs.
std::vector<std::size_t> replay_mismatches(const ChatService& service, const ChatSession& session);

class HttpServer {
 public:
  explicit HttpServer(ChatService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds and serves on a background thread. Port 0 picks a free port.
  // Returns the bound port.
  int start(const std::string& host, int port);
  // Blocks serving on the calling thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace imagechat
