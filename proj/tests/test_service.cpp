// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "httplib.h"
#include "imagechat/errors.hpp"
#include "imagechat/service.hpp"
#include "support/toy.hpp"

using namespace imagechat;
using nlohmann::json;

namespace {

const std::vector<std::string>& styles() {
  static const std::vector<std::string> s = toy::catalog().names();
  return s;
}

struct Fixture {
  std::vector<TurnSample> items = toy::samples(8, styles(), toy::words(40), 5);
  ServiceResources res;

  explicit Fixture(bool with_models = true, std::size_t rank_limit = 1000) {
    res.features = std::make_shared<const FeatureStore>(
        FeatureStore::synthetic(toy::image_ids(items), 1, 32));
    res.catalog = toy::catalog();
    res.provenance = {{"seed", 5}};
    res.max_rank_candidates = rank_limit;
    if (!with_models) return;
    res.retrieval = std::make_shared<const RetrievalModel>(
        toy::retrieval_config(CombinerKind::mm_sum), toy::vocab(50), styles(), 2);
    res.generative = std::make_shared<const GenerativeModel>(toy::gen_config(),
                                                             toy::vocab(50, &styles()), styles(), 3);
    res.candidate_stores[1] = response_pool(items);
    res.candidate_stores[2] = {"w1 w2", "w3 w4 w5", "w6"};
  }
};

json post(ChatService& s, const char* path, const json& body) {
  const ApiResponse r = s.handle("POST", path, body.dump());
  json out = r.body;
  out["_status"] = r.status;
  return out;
}

void expect_error(const json& r, int status, const std::string& code) {
  EXPECT_EQ(r.at("_status"), status) << r.dump();
  EXPECT_EQ(r.at("code"), code) << r.dump();
  EXPECT_TRUE(r.at("message").is_string());
}

}  // namespace

TEST(Service, CatalogAndHealth) {
  Fixture f;
  ChatService s(f.res);
  const ApiResponse c = s.handle("GET", "/api/catalog", "");
  EXPECT_EQ(c.status, 200);
  EXPECT_EQ(c.body.at("styles").size(), styles().size());
  EXPECT_EQ(c.body.at("styles")[0].at("name"), styles()[0]);
  EXPECT_EQ(c.body.at("images").size(), f.items.size());
  EXPECT_EQ(c.body.at("models").at("generative"), true);
  const ApiResponse h = s.handle("GET", "/healthz", "");
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body.at("status"), "ok");
}

TEST(Service, StatelessChatIsDeterministic) {
  Fixture f;
  ChatService s(f.res);
  const json req = {{"image_id", "img0"}, {"style", styles()[1]}, {"history", json::array()}};
  const json a = post(s, "/api/chat", req), b = post(s, "/api/chat", req);
  EXPECT_EQ(a.at("_status"), 200);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.at("turn"), 1);
  EXPECT_EQ(a.at("candidates_considered"), f.items.size());
  const auto& pool = f.res.candidate_stores.at(1);
  EXPECT_NE(std::find(pool.begin(), pool.end(), a.at("text").get<std::string>()), pool.end());

  json later = req;
  later["history"] = {"w1 w2", "w3"};
  const json c = post(s, "/api/chat", later);
  EXPECT_EQ(c.at("turn"), 3);
  EXPECT_EQ(c.at("candidates_considered"), 3);

  json gen = req;
  gen["model_kind"] = "generative";
  const json g = post(s, "/api/chat", gen);
  EXPECT_EQ(g.at("_status"), 200);
  EXPECT_EQ(g.at("model_kind"), "generative");
  EXPECT_LE(g.at("score_or_logprob").get<double>(), 0.0);
  EXPECT_EQ(post(s, "/api/chat", gen), g);

  json sub = req;
  sub["n_candidates"] = 3;
  sub["seed"] = 9;
  const json d = post(s, "/api/chat", sub);
  EXPECT_EQ(d.at("candidates_considered"), 3);
  EXPECT_EQ(post(s, "/api/chat", sub), d);
}

TEST(Service, SessionLifecycle) {
  Fixture f;
  ChatService s(f.res);
  const json created = post(s, "/api/chat",
                            {{"op", "create"}, {"image_id", "img2"}, {"style", styles()[0]},
                             {"style_human", styles()[3]}});
  ASSERT_EQ(created.at("_status"), 200) << created.dump();
  const std::string id = created.at("session").at("session_id");
  EXPECT_EQ(created.at("session").at("provenance").at("seed"), 5);

  // The model may open the conversation.
  const json first = post(s, "/api/chat", {{"op", "say"}, {"session_id", id}});
  EXPECT_EQ(first.at("turn"), 1);
  expect_error(post(s, "/api/chat", {{"op", "say"}, {"session_id", id}}), 409, "conflict");
  const json second = post(s, "/api/chat", {{"op", "say"}, {"session_id", id}, {"text", "w5 w6"}});
  EXPECT_EQ(second.at("turn"), 3);
  const json third = post(s, "/api/chat", {{"op", "say"}, {"session_id", id}, {"text", "w7"},
                                           {"model_kind", "generative"}});
  EXPECT_EQ(third.at("model_kind"), "generative");

  const json exported = post(s, "/api/chat", {{"op", "export"}, {"session_id", id}});
  const ChatSession session = ChatSession::from_json(exported.at("session"));
  ASSERT_EQ(session.transcript.size(), 5u);
  EXPECT_EQ(session.transcript[1].speaker, "human");
  EXPECT_EQ(session.transcript[1].style, styles()[3]);
  EXPECT_EQ(session.events.size(), 1u);
  EXPECT_EQ(ChatSession::from_json(session.to_json()).to_json(), session.to_json());
  EXPECT_TRUE(replay_mismatches(s, session).empty());

  ChatSession tampered = session;
  tampered.transcript[2].text = "not what the model said";
  EXPECT_EQ(replay_mismatches(s, tampered), (std::vector<std::size_t>{2}));

  expect_error(post(s, "/api/chat", {{"op", "say"}, {"session_id", "s999"}}), 404, "unknown_session");
}

TEST(Service, ErrorsAreJson) {
  Fixture f(true, 4);
  ChatService s(f.res);
  const json ctx = {{"image_id", "img0"}, {"style", styles()[0]}};
  expect_error(post(s, "/api/chat", {{"image_id", "nope"}, {"style", styles()[0]}}), 404, "unknown_image");
  expect_error(post(s, "/api/chat", {{"image_id", "img0"}, {"style", "Nobody"}}), 404, "unknown_style");
  expect_error(post(s, "/api/chat", {{"style", styles()[0]}}), 400, "bad_request");
  expect_error(post(s, "/api/chat", {{"image_id", "img0"}, {"style", styles()[0]}, {"history", "x"}}),
               400, "bad_request");
  expect_error(post(s, "/api/chat", {{"op", "dance"}}), 400, "bad_request");
  expect_error(post(s, "/api/chat", json::array()), 400, "bad_request");
  expect_error(post(s, "/api/chat", {{"image_id", "img0"}, {"style", styles()[0]}, {"model_kind", "x"}}),
               400, "bad_request");

  ApiResponse r = s.handle("POST", "/api/chat", "{not json");
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(r.body.at("code"), "bad_request");
  r = s.handle("GET", "/api/chat", "");
  EXPECT_EQ(r.status, 405);
  EXPECT_EQ(r.body.at("code"), "method_not_allowed");
  r = s.handle("POST", "/healthz", "");
  EXPECT_EQ(r.status, 405);
  r = s.handle("GET", "/api/nothing", "");
  EXPECT_EQ(r.status, 404);
  EXPECT_EQ(r.body.at("code"), "not_found");

  expect_error(post(s, "/api/rank", {{"context", ctx}, {"candidates", {"a", "b", "c", "d", "e"}}}), 413,
               "too_many_candidates");
  expect_error(post(s, "/api/rank", {{"context", ctx}, {"candidates", json::array()}}), 400, "bad_request");
  expect_error(post(s, "/api/rank", {{"candidates", {"a"}}}), 400, "bad_request");
}

TEST(Service, MissingModelsAre503) {
  Fixture f(false);
  ChatService s(f.res);
  const json ctx = {{"image_id", "img0"}, {"style", styles()[0]}};
  expect_error(post(s, "/api/chat", ctx), 503, "model_unavailable");
  json gen = ctx;
  gen["model_kind"] = "generative";
  expect_error(post(s, "/api/chat", gen), 503, "model_unavailable");
  expect_error(post(s, "/api/rank", {{"context", ctx}, {"candidates", {"w1"}}}), 503, "model_unavailable");
  EXPECT_EQ(s.handle("GET", "/healthz", "").body.at("retrieval"), false);
  EXPECT_THROW(ChatService(ServiceResources{}), ConfigError);
}

TEST(Service, RankSortsAndTiesDuplicates) {
  Fixture f;
  ChatService s(f.res);
  const json r = post(s, "/api/rank",
                      {{"context", {{"image_id", "img1"}, {"style", styles()[2]}, {"history", {"w1"}}}},
                       {"candidates", {"w2 w3", "w9", "w2 w3", "w4 w5 w6"}}});
  ASSERT_EQ(r.at("_status"), 200) << r.dump();
  const auto& ranked = r.at("ranked");
  ASSERT_EQ(ranked.size(), 4u);
  double dup_score[2];
  int seen = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i > 0) EXPECT_GE(ranked[i - 1].at("score").get<double>(), ranked[i].at("score").get<double>());
    if (ranked[i].at("text") == "w2 w3") dup_score[seen++] = ranked[i].at("score");
  }
  ASSERT_EQ(seen, 2);
  EXPECT_EQ(dup_score[0], dup_score[1]);
}

TEST(HttpServer, ServesTheApiOverSockets) {
  Fixture f;
  ChatService s(f.res);
  HttpServer server(s);
  const int port = server.start("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  httplib::Client client("127.0.0.1", port);

  auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(json::parse(health->body).at("status"), "ok");

  auto catalog = client.Get("/api/catalog");
  ASSERT_TRUE(catalog);
  EXPECT_EQ(json::parse(catalog->body).at("images").size(), f.items.size());

  const json req = {{"image_id", "img0"}, {"style", styles()[0]}, {"history", {"w1 w2"}}};
  auto chat = client.Post("/api/chat", req.dump(), "application/json");
  ASSERT_TRUE(chat);
  EXPECT_EQ(chat->status, 200);
  EXPECT_EQ(json::parse(chat->body), s.handle("POST", "/api/chat", req.dump()).body);

  auto bad = client.Post("/api/rank", "[]", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_TRUE(json::parse(bad->body).contains("code"));

  auto missing = client.Get("/nowhere");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body).at("code"), "not_found");
  server.stop();
}
