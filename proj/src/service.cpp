// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/service.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

namespace {

struct ApiError : Error {
  ApiError(int status, std::string code, const std::string& message)
      : Error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

ApiResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, {{"code", code}, {"message", message}}};
}

const nlohmann::json& field(const nlohmann::json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) {
    throw ApiError(400, "bad_request", std::string("missing field '") + name + "'");
  }
  return j.at(name);
}

std::string string_field(const nlohmann::json& j, const char* name) {
  const auto& v = field(j, name);
  if (!v.is_string()) throw ApiError(400, "bad_request", std::string("'") + name + "' must be a string");
  return v.get<std::string>();
}

std::vector<std::string> history_field(const nlohmann::json& j) {
  if (!j.contains("history")) return {};
  const auto& h = j.at("history");
  if (!h.is_array()) throw ApiError(400, "bad_request", "'history' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& u : h) {
    if (!u.is_string()) throw ApiError(400, "bad_request", "'history' must be an array of strings");
    out.push_back(u.get<std::string>());
  }
  return out;
}

ModelKind kind_field(const nlohmann::json& j, ModelKind fallback) {
  if (!j.contains("model_kind")) return fallback;
  try {
    return parse_model_kind(j.at("model_kind").get<std::string>());
  } catch (const std::exception& e) {
    throw ApiError(400, "bad_request", e.what());
  }
}

}  // namespace

std::string to_string(ModelKind k) { return k == ModelKind::retrieval ? "retrieval" : "generative"; }

ModelKind parse_model_kind(std::string_view s) {
  if (s == "retrieval") return ModelKind::retrieval;
  if (s == "generative") return ModelKind::generative;
  throw ConfigError("unknown model kind '" + std::string(s) + "'");
}

// ------------------------------------------------------------------ session

std::vector<std::string> ChatSession::history() const {
  std::vector<std::string> out;
  for (const auto& e : transcript) out.push_back(e.text);
  return out;
}

nlohmann::json ChatSession::to_json() const {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& e : transcript) {
    nlohmann::json t = {{"speaker", e.speaker}, {"text", e.text}};
    if (!e.style.empty()) t["style"] = e.style;
    if (e.speaker == "model") {
      if (e.model_kind) t["model_kind"] = to_string(*e.model_kind);
      t["score_or_logprob"] = e.score;
    }
    turns.push_back(t);
  }
  return {{"session_id", session_id},   {"image_id", image_id},
          {"style_human", style_human}, {"style_model", style_model},
          {"model_kind", to_string(model_kind)}, {"transcript", turns},
          {"events", events}};
}

ChatSession ChatSession::from_json(const nlohmann::json& j) {
  ChatSession s;
  s.session_id = j.value("session_id", std::string());
  s.image_id = j.at("image_id").get<std::string>();
  s.style_human = j.value("style_human", std::string());
  s.style_model = j.at("style_model").get<std::string>();
  s.model_kind = parse_model_kind(j.value("model_kind", std::string("retrieval")));
  for (const auto& t : j.at("transcript")) {
    TranscriptEntry e;
    e.speaker = t.at("speaker").get<std::string>();
    e.text = t.at("text").get<std::string>();
    e.style = t.value("style", std::string());
    if (t.contains("model_kind")) e.model_kind = parse_model_kind(t.at("model_kind").get<std::string>());
    e.score = t.value("score_or_logprob", 0.0);
    s.transcript.push_back(std::move(e));
  }
  s.events = j.value("events", std::vector<std::string>{});
  return s;
}

// ------------------------------------------------------------------ service

ChatService::ChatService(ServiceResources resources) : res_(std::move(resources)) {
  if (!res_.features) throw ConfigError("service needs a feature store");
  if (res_.retrieval) {
    cache_ = std::make_unique<CandidateCache>(res_.retrieval->params().content_hash());
  }
}

const std::vector<std::string>& ChatService::candidate_store(int turn) const {
  if (res_.candidate_stores.empty()) {
    throw ApiError(503, "model_unavailable", "no candidate store loaded");
  }
  auto it = res_.candidate_stores.upper_bound(turn);
  if (it == res_.candidate_stores.begin()) {
    throw ApiError(503, "model_unavailable", "no candidate store for turn " + std::to_string(turn));
  }
  return std::prev(it)->second;
}

TurnContext ChatService::parse_context(const nlohmann::json& j) const {
  TurnContext ctx;
  ctx.image_id = string_field(j, "image_id");
  ctx.responder_style = string_field(j, "style");
  ctx.history = history_field(j);
  ctx.turn_index = static_cast<int>(ctx.history.size()) + 1;
  if (!res_.features->contains(ctx.image_id)) {
    throw ApiError(404, "unknown_image", "unknown image '" + ctx.image_id + "'");
  }
  if (!res_.catalog.contains(ctx.responder_style)) {
    throw ApiError(404, "unknown_style", "unknown style '" + ctx.responder_style + "'");
  }
  return ctx;
}

Reply ChatService::respond(const TurnContext& ctx, ModelKind kind,
                           std::optional<std::size_t> n_candidates, std::uint64_t seed) const {
  Reply reply;
  reply.model_kind = kind;
  if (kind == ModelKind::generative) {
    if (!res_.generative) throw ApiError(503, "model_unavailable", "no generative model loaded");
    const DecodeResult r = res_.generative->decode(ctx, *res_.features);
    reply.text = res_.generative->text(r);
    reply.score = r.logprob;
    reply.candidates_considered = res_.generative->config().beam_size;
    return reply;
  }
  if (!res_.retrieval) throw ApiError(503, "model_unavailable", "no retrieval model loaded");
  const auto& store = candidate_store(ctx.turn_index);
  std::vector<std::string> subset;
  std::span<const std::string> candidates(store);
  if (n_candidates) {
    if (*n_candidates == 0) throw ApiError(400, "bad_request", "n_candidates must be positive");
    if (*n_candidates < store.size()) {
      std::vector<std::size_t> idx(store.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::mt19937_64 rng(splitmix64(seed));
      for (std::size_t s = 0; s < *n_candidates; ++s) {
        std::uniform_int_distribution<std::size_t> pick(s, idx.size() - 1);
        std::swap(idx[s], idx[pick(rng)]);
      }
      idx.resize(*n_candidates);
      std::sort(idx.begin(), idx.end());
      for (std::size_t i : idx) subset.push_back(store[i]);
      candidates = subset;
    }
  }
  const RankingResult ranked =
      res_.retrieval->rank(ctx, candidates, *res_.features, ModalityMask::all(), cache_.get());
  reply.text = candidates[ranked.ranked[0].id];
  reply.score = ranked.ranked[0].score;
  reply.candidates_considered = candidates.size();
  return reply;
}

ApiResponse ChatService::catalog() const {
  nlohmann::json styles = nlohmann::json::array();
  for (const auto& t : res_.catalog.traits()) {
    styles.push_back({{"name", t.name}, {"class", to_string(t.style_class)}});
  }
  return {200,
          {{"styles", styles},
           {"images", res_.features->ids()},
           {"models", {{"retrieval", res_.retrieval != nullptr},
                       {"generative", res_.generative != nullptr}}}}};
}

ApiResponse ChatService::healthz() const {
  return {200,
          {{"status", "ok"},
           {"retrieval", res_.retrieval != nullptr},
           {"generative", res_.generative != nullptr}}};
}

ApiResponse ChatService::chat(const nlohmann::json& request) {
  try {
    if (!request.is_object()) throw ApiError(400, "bad_request", "request must be a JSON object");
    const std::string op = request.value("op", std::string());
    if (op.empty()) return stateless_chat(request);
    if (op == "create") return create_session(request);
    if (op == "say") return session_say(request);
    if (op == "export") return export_session(request);
    throw ApiError(400, "bad_request", "unknown op '" + op + "'");
  } catch (const ApiError& e) {
    return error_response(e.status, e.code, e.what());
  } catch (const CatalogError& e) {
    return error_response(404, "not_found", e.what());
  } catch (const ContractError& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

ApiResponse ChatService::stateless_chat(const nlohmann::json& request) const {
  const TurnContext ctx = parse_context(request);
  const ModelKind kind = kind_field(request, ModelKind::retrieval);
  std::optional<std::size_t> n;
  if (request.contains("n_candidates")) n = request.at("n_candidates").get<std::size_t>();
  const std::uint64_t seed = request.value("seed", std::uint64_t{0});
  const Reply r = respond(ctx, kind, n, seed);
  return {200,
          {{"text", r.text},
           {"score_or_logprob", r.score},
           {"candidates_considered", r.candidates_considered},
           {"model_kind", to_string(r.model_kind)},
           {"turn", ctx.turn_index}}};
}

std::shared_ptr<ChatService::SessionSlot> ChatService::find_session(const std::string& id) {
  std::lock_guard<std::mutex> lock(sessions_mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "unknown_session", "unknown session '" + id + "'");
  return it->second;
}

ApiResponse ChatService::create_session(const nlohmann::json& request) {
  ChatSession s;
  s.image_id = string_field(request, "image_id");
  s.style_model = string_field(request, "style");
  s.style_human = request.value("style_human", std::string());
  s.model_kind = kind_field(request, ModelKind::retrieval);
  if (!res_.features->contains(s.image_id)) {
    throw ApiError(404, "unknown_image", "unknown image '" + s.image_id + "'");
  }
  for (const auto& style : {s.style_model, s.style_human}) {
    if (!style.empty() && !res_.catalog.contains(style)) {
      throw ApiError(404, "unknown_style", "unknown style '" + style + "'");
    }
  }
  auto slot = std::make_shared<SessionSlot>();
  {
    std::lock_guard<std::mutex> lock(sessions_mu_);
    s.session_id = "s" + std::to_string(next_session_++);
    slot->session = s;
    sessions_.emplace(s.session_id, slot);
  }
  nlohmann::json body = s.to_json();
  body["provenance"] = res_.provenance;
  return {200, {{"session", body}}};
}

ApiResponse ChatService::session_say(const nlohmann::json& request) {
  auto slot = find_session(string_field(request, "session_id"));
  std::lock_guard<std::mutex> lock(slot->mu);
  ChatSession& s = slot->session;
  const ModelKind kind = kind_field(request, s.model_kind);
  const bool last_is_human = !s.transcript.empty() && s.transcript.back().speaker == "human";
  std::optional<std::string> text;
  if (request.contains("text")) text = request.at("text").get<std::string>();
  if (text && last_is_human) {
    throw ApiError(409, "conflict", "the model has not replied to the previous utterance");
  }
  if (!text && !s.transcript.empty() && !last_is_human) {
    throw ApiError(409, "conflict", "the model spoke last; send text");
  }
  TurnContext ctx;
  ctx.image_id = s.image_id;
  ctx.responder_style = s.style_model;
  ctx.history = s.history();
  if (text) ctx.history.push_back(*text);
  ctx.turn_index = static_cast<int>(ctx.history.size()) + 1;
  const Reply r = respond(ctx, kind);

  if (kind != s.model_kind) {
    s.events.push_back("turn " + std::to_string(ctx.turn_index) + ": model_kind " +
                       to_string(s.model_kind) + " -> " + to_string(kind));
    s.model_kind = kind;
  }
  if (text) s.transcript.push_back({"human", *text, s.style_human, std::nullopt, 0.0});
  s.transcript.push_back({"model", r.text, s.style_model, kind, r.score});
  nlohmann::json body = s.to_json();
  body["provenance"] = res_.provenance;
  return {200,
          {{"text", r.text},
           {"score_or_logprob", r.score},
           {"candidates_considered", r.candidates_considered},
           {"model_kind", to_string(kind)},
           {"turn", ctx.turn_index},
           {"session", body}}};
}

ApiResponse ChatService::export_session(const nlohmann::json& request) {
  auto slot = find_session(string_field(request, "session_id"));
  std::lock_guard<std::mutex> lock(slot->mu);
  nlohmann::json body = slot->session.to_json();
  body["provenance"] = res_.provenance;
  return {200, {{"session", body}}};
}

ApiResponse ChatService::rank(const nlohmann::json& request) const {
  try {
    const TurnContext ctx = parse_context(field(request, "context"));
    const auto& cj = field(request, "candidates");
    if (!cj.is_array() || cj.empty()) {
      throw ApiError(400, "bad_request", "'candidates' must be a non-empty array");
    }
    if (cj.size() > res_.max_rank_candidates) {
      throw ApiError(413, "too_many_candidates",
                     std::to_string(cj.size()) + " candidates exceed the limit of " +
                         std::to_string(res_.max_rank_candidates));
    }
    const auto candidates = cj.get<std::vector<std::string>>();
    if (!res_.retrieval) throw ApiError(503, "model_unavailable", "no retrieval model loaded");
    const RankingResult r =
        res_.retrieval->rank(ctx, candidates, *res_.features, ModalityMask::all(), cache_.get());
    nlohmann::json ranked = nlohmann::json::array();
    for (const auto& c : r.ranked) {
      ranked.push_back({{"index", c.id}, {"text", candidates[c.id]}, {"score", c.score}});
    }
    return {200, {{"ranked", ranked}}};
  } catch (const ApiError& e) {
    return error_response(e.status, e.code, e.what());
  } catch (const ContractError& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

ApiResponse ChatService::handle(const std::string& method, const std::string& path,
                                const std::string& body) {
  const bool get = method == "GET", post = method == "POST";
  if (path == "/healthz" && get) return healthz();
  if (path == "/api/catalog" && get) return catalog();
  if ((path == "/api/chat" || path == "/api/rank") && post) {
    nlohmann::json request;
    try {
      request = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, "bad_request", std::string("invalid JSON: ") + e.what());
    }
    return path == "/api/chat" ? chat(request) : rank(request);
  }
  if (path == "/healthz" || path == "/api/catalog" || path == "/api/chat" || path == "/api/rank") {
    return error_response(405, "method_not_allowed", method + " not allowed on " + path);
  }
  return error_response(404, "not_found", "no route for " + path);
}

std::vector<std::size_t> replay_mismatches(const ChatService& service, const ChatSession& session) {
  std::vector<std::size_t> bad;
  TurnContext ctx;
  ctx.image_id = session.image_id;
  for (std::size_t i = 0; i < session.transcript.size(); ++i) {
    const auto& e = session.transcript[i];
    if (e.speaker == "model") {
      ctx.responder_style = e.style;
      ctx.turn_index = static_cast<int>(ctx.history.size()) + 1;
      const Reply r = service.respond(ctx, e.model_kind.value_or(session.model_kind));
      if (r.text != e.text) bad.push_back(i);
    }
    ctx.history.push_back(e.text);
  }
  return bad;
}

// --------------------------------------------------------------------- http

struct HttpServer::Impl {
  ChatService& service;
  httplib::Server server;

  explicit Impl(ChatService& s) : service(s) {
    auto bind = [this](const httplib::Request& req, httplib::Response& res) {
      const ApiResponse r = service.handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    for (const char* path : {"/healthz", "/api/catalog", "/api/chat", "/api/rank"}) {
      server.Get(path, bind);
      server.Post(path, bind);
    }
    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      res.set_content(nlohmann::json{{"code", res.status == 404 ? "not_found" : "http_error"},
                                     {"message", "no route for " + req.path}}
                          .dump(),
                      "application/json");
    });
  }
};

HttpServer::HttpServer(ChatService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  spdlog::info("serving on {}:{}", host, bound);
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  spdlog::info("serving on {}:{}", host, port);
  if (!impl_->server.listen(host, port)) {
    throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
  }
}

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace imagechat
