#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <random>
#include <thread>

#include "retrograph/error.hpp"
#include "retrograph/service.hpp"
#include "support/memorized.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace retrograph;
using nlohmann::json;

namespace {

std::string product_of(const std::string& id) {
  for (const auto& r : fixture::mini_corpus())
    if (r.record_id == id) return canonical_smiles(r.product);
  throw std::out_of_range(id);
}

std::string truth_of(const std::string& id) {
  for (const auto& r : fixture::mini_corpus()) {
    if (r.record_id != id) continue;
    std::string key;
    for (const auto& s : canonical_multiset(contributing_reactants(r))) key += (key.empty() ? "" : ".") + s;
    return key;
  }
  throw std::out_of_range(id);
}

std::string mapped_reaction(int line) {
  std::ifstream in(fixture::data_path("mini_corpus.csv"));
  std::string row;
  for (int i = 0; i <= line; ++i) std::getline(in, row);
  return row.substr(row.rfind(',') + 1);
}

std::map<std::string, BuildingBlockSet> profiles() {
  std::map<std::string, BuildingBlockSet> p;
  p["default"] = BuildingBlockSet::load(fixture::data_path("building_blocks.smi"));
  p["empty"] = BuildingBlockSet{};
  return p;
}

// A live server on an ephemeral port.
class Live {
 public:
  explicit Live(ServiceConfig cfg = {}) : service(fixture::memorized_model(), profiles(), std::move(cfg)) {
    service.mount(server);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~Live() {
    server.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  }
  std::pair<int, json> post(const std::string& path, const json& body) const {
    auto res = client().Post(path, body.dump(), "application/json");
    return {res->status, json::parse(res->body)};
  }
  std::pair<int, json> get(const std::string& path) const {
    auto res = client().Get(path);
    return {res->status, json::parse(res->body)};
  }

  Service service;
  httplib::Server server;
  int port = 0;
  std::thread thread;
};

std::string session(const Live& live, const std::string& target, json limits = json::object(),
                    const std::string& profile = "default") {
  auto [status, body] = live.post("/plan/session", {{"target", target}, {"limits", limits}, {"blocks_profile", profile}});
  EXPECT_EQ(status, 200) << body.dump();
  return body.value("session_id", std::string());
}

// Links are symmetric and every id is in range.
void expect_consistent(const json& snap) {
  const auto& nodes = snap.at("nodes");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    ASSERT_EQ(nodes[i].at("id"), i);
    for (int c : nodes[i].at("children")) {
      ASSERT_LT(static_cast<std::size_t>(c), nodes.size());
      const auto& parents = nodes[static_cast<std::size_t>(c)].at("parents");
      EXPECT_NE(std::find(parents.begin(), parents.end(), static_cast<int>(i)), parents.end());
    }
  }
}

}  // namespace

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { (void)fixture::memorized_model(); }
};

TEST_F(ServiceTest, HealthAndModel) {
  Live live;
  EXPECT_EQ(live.get("/health").first, 200);
  auto [status, body] = live.get("/model");
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body.at("vocab_size"), fixture::memorized_model().vocab.size());
  EXPECT_EQ(body.at("block_profiles").at("empty"), 0);
  EXPECT_EQ(live.get("/nope").first, 404);
}

TEST_F(ServiceTest, PredictReturnsRankSortedEnergies) {
  Live live;
  auto [status, body] = live.post("/predict", {{"smiles", product_of("mini-05")}, {"topk", 5}});
  ASSERT_EQ(status, 200) << body.dump();
  const auto& c = body.at("candidates");
  ASSERT_GE(c.size(), 1u);
  ASSERT_LE(c.size(), 5u);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c[i].at("rank"), i + 1);
    EXPECT_EQ(c[i].at("deltas").size(), 4u);
    if (i) EXPECT_LE(c[i - 1].at("total").get<double>(), c[i].at("total").get<double>());
  }
  std::string key;
  for (const auto& r : c[0].at("reactants")) key += (key.empty() ? "" : ".") + r.get<std::string>();
  EXPECT_EQ(key, truth_of("mini-05"));
}

TEST_F(ServiceTest, InvalidSmilesIs422WithOffset) {
  Live live;
  auto [status, body] = live.post("/predict", {{"smiles", "C1CC"}});
  EXPECT_EQ(status, 422);
  EXPECT_EQ(body.at("kind"), "SyntaxError");
  EXPECT_TRUE(body.at("offset").is_number_integer());
  EXPECT_EQ(live.post("/predict", {{"smiles", "CC"}, {"class", 11}}).first, 422);
  EXPECT_EQ(live.post("/predict", {{"smiles", "CC"}, {"topk", 0}}).first, 422);
  EXPECT_EQ(live.post("/predict", json::object()).first, 422);
  auto res = live.client().Post("/predict", "{not json", "application/json");
  EXPECT_EQ(res->status, 422);
}

TEST_F(ServiceTest, ResponseReactantsLoopBack) {
  Live live;
  std::set<std::string> seen;
  for (const char* id : {"mini-01", "mini-13", "mini-21", "mini-33"}) {
    auto [status, body] = live.post("/predict", {{"smiles", product_of(id)}, {"topk", 3}});
    ASSERT_EQ(status, 200);
    for (const auto& c : body.at("candidates"))
      for (const auto& r : c.at("reactants")) seen.insert(r.get<std::string>());
  }
  for (const auto& s : seen) {
    const int st = live.post("/predict", {{"smiles", s}, {"topk", 1}}).first;
    EXPECT_TRUE(st == 200 || st == 409) << s << " -> " << st;
  }
}

TEST_F(ServiceTest, PredictIsReplayable) {
  Live live;
  const json req = {{"smiles", product_of("mini-17")}, {"topk", 4}};
  const auto a = live.client().Post("/predict", req.dump(), "application/json");
  const auto b = live.client().Post("/predict", req.dump(), "application/json");
  EXPECT_EQ(a->body, b->body);
}

TEST_F(ServiceTest, QueryScoresOwnPrediction) {
  Live live;
  auto [s1, pred] = live.post("/predict", {{"smiles", product_of("mini-09")}, {"topk", 1}});
  ASSERT_EQ(s1, 200);
  const auto& top = pred.at("candidates").at(0);
  auto [s2, q] = live.post("/query", {{"smiles", product_of("mini-09")}, {"reactants", top.at("reactants")}});
  ASSERT_EQ(s2, 200) << q.dump();
  EXPECT_EQ(q.at("total").get<double>(), top.at("total").get<double>());
  auto [s3, bad] = live.post("/query", {{"smiles", "CCO"}, {"reactants", "CCI.O"}});
  EXPECT_EQ(s3, 422);
  EXPECT_EQ(bad.at("kind"), "NotScorable");
}

TEST_F(ServiceTest, BuildingBlockTargetIsSolvedAtCreation) {
  Live live;
  const std::string id = session(live, "OCC(C)C");
  auto [status, snap] = live.get("/plan/session/" + id + "/tree");
  ASSERT_EQ(status, 200);
  EXPECT_EQ(snap.at("version"), kSnapshotVersion);
  EXPECT_TRUE(snap.at("solved").get<bool>());
  EXPECT_EQ(snap.at("routes").size(), 1u);
  EXPECT_EQ(live.post("/plan/session/" + id + "/expand", {{"node_id", 0}}).first, 409);
}

TEST_F(ServiceTest, ExpandThenSnapshotIsConsistent) {
  Live live;
  const std::string id = session(live, product_of("mini-01"));
  auto [status, exp] = live.post("/plan/session/" + id + "/expand", {{"node_id", 0}, {"topk", 3}});
  ASSERT_EQ(status, 200) << exp.dump();
  auto [s2, snap] = live.get("/plan/session/" + id + "/tree");
  ASSERT_EQ(s2, 200);
  expect_consistent(snap);
  const auto& root = snap.at("nodes").at(0);
  EXPECT_EQ(root.at("children").size(), exp.at("reactions").get<std::size_t>());
  EXPECT_LE(exp.at("reactions").get<int>(), 3);
  EXPECT_EQ(root.at("status"), snap.at("solved").get<bool>() ? "solved" : "expanded");
  EXPECT_EQ(snap.at("nodes").size(), 1 + exp.at("created").size());
  // The memorized first step reaches purchasable reactants directly.
  EXPECT_TRUE(snap.at("solved").get<bool>());

  EXPECT_EQ(live.post("/plan/session/" + id + "/expand", {{"node_id", 0}}).first, 409);
  EXPECT_EQ(live.post("/plan/session/" + id + "/expand", {{"node_id", 999}}).first, 404);
  EXPECT_EQ(live.post("/plan/session/" + id + "/expand", {{"node_id", 1}}).first, 422);  // reaction node
  EXPECT_EQ(live.post("/plan/session/0123abcd/expand", {{"node_id", 0}}).first, 404);
  EXPECT_EQ(live.get("/plan/session/0123abcd/tree").first, 404);
  EXPECT_EQ(live.post("/plan/session/" + id + "/expand", json::object()).first, 422);
}

TEST_F(ServiceTest, BudgetExhaustedIs429) {
  Live live;
  const std::string id = session(live, product_of("mini-01"), {{"max_expansions", 1}}, "empty");
  auto [status, exp] = live.post("/plan/session/" + id + "/expand", {{"node_id", 0}, {"topk", 2}});
  ASSERT_EQ(status, 200);
  EXPECT_EQ(exp.at("budget_remaining"), 0);
  int open = -1;
  for (const auto& n : exp.at("created"))
    if (n.at("kind") == "molecule" && n.at("status") == "open") open = n.at("id");
  ASSERT_GE(open, 0);
  auto [s2, body] = live.post("/plan/session/" + id + "/expand", {{"node_id", open}});
  EXPECT_EQ(s2, 429);
  EXPECT_EQ(body.at("kind"), "BudgetExhausted");
  auto [s3, snap] = live.get("/plan/session/" + id + "/tree");
  EXPECT_EQ(snap.at("nodes").at(static_cast<std::size_t>(open)).at("status"), "open");
}

TEST_F(ServiceTest, ConcurrentDoubleExpandHasOneWinner) {
  Live live;
  for (int trial = 0; trial < 8; ++trial) {
    const std::string id = session(live, product_of("mini-0" + std::to_string(1 + trial % 8)));
    std::atomic<int> ready{0};
    int codes[2] = {0, 0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 2; ++t) {
      threads.emplace_back([&, t] {
        auto cli = live.client();
        ++ready;
        while (ready.load() < 2) std::this_thread::yield();
        auto res = cli.Post("/plan/session/" + id + "/expand", json({{"node_id", 0}}).dump(), "application/json");
        codes[t] = res ? res->status : -1;
      });
    }
    // Concurrent readers must never see a torn tree.
    std::thread reader([&] {
      auto cli = live.client();
      for (int i = 0; i < 5; ++i) {
        auto res = cli.Get("/plan/session/" + id + "/tree");
        ASSERT_EQ(res->status, 200);
        expect_consistent(json::parse(res->body));
      }
    });
    for (auto& th : threads) th.join();
    reader.join();
    std::sort(codes, codes + 2);
    EXPECT_EQ(codes[0], 200) << "trial " << trial;
    EXPECT_EQ(codes[1], 409) << "trial " << trial;
  }
}

TEST_F(ServiceTest, SessionsAreIsolated) {
  Live live;
  const std::string a = session(live, product_of("mini-13"), {{"max_expansions", 20}}, "empty");
  const std::string b = session(live, product_of("mini-25"), json::object(), "empty");
  live.post("/plan/session/" + b + "/expand", {{"node_id", 0}, {"topk", 2}});
  const auto before = live.get("/plan/session/" + b + "/tree").second;
  std::mt19937 rng(4);
  for (int i = 0; i < 12; ++i) {
    const auto snap = live.get("/plan/session/" + a + "/tree").second;
    std::uniform_int_distribution<std::size_t> pick(0, snap.at("nodes").size() - 1);
    live.post("/plan/session/" + a + "/expand", {{"node_id", pick(rng)}, {"topk", 2}});
  }
  live.post("/plan/session/" + a + "/run", json::object());
  EXPECT_EQ(live.get("/plan/session/" + b + "/tree").second, before);
}

TEST_F(ServiceTest, RunSolvesWithinBudget) {
  Live live;
  const std::string id = session(live, product_of("mini-21"));
  auto [status, body] = live.post("/plan/session/" + id + "/run", json::object());
  ASSERT_EQ(status, 200) << body.dump();
  EXPECT_TRUE(body.at("solved").get<bool>());
  EXPECT_GE(body.at("routes").size(), 1u);
  EXPECT_EQ(live.client().Delete("/plan/session/" + id)->status, 200);
  EXPECT_EQ(live.get("/plan/session/" + id + "/tree").first, 404);
}

TEST_F(ServiceTest, IdleSessionsExpireAndAreDumped) {
  auto now = std::make_shared<Clock::time_point>(Clock::now());
  ServiceConfig cfg;
  cfg.session_ttl = std::chrono::seconds(60);
  cfg.now = [now] { return *now; };
  cfg.dump_dir = std::filesystem::temp_directory_path() / "retrograph_service_dump";
  std::filesystem::remove_all(cfg.dump_dir);
  Live live(cfg);
  const std::string id = session(live, "OCC(C)C");
  *now += std::chrono::seconds(30);
  EXPECT_EQ(live.get("/plan/session/" + id + "/tree").first, 200);  // touches
  *now += std::chrono::seconds(59);
  EXPECT_EQ(live.service.session_count(), 1u);
  *now += std::chrono::seconds(2);
  EXPECT_EQ(live.get("/plan/session/" + id + "/tree").first, 404);
  EXPECT_EQ(live.service.session_count(), 0u);
  std::ifstream dumped(cfg.dump_dir / (id + ".json"));
  ASSERT_TRUE(dumped.good());
  EXPECT_EQ(json::parse(dumped).at("version"), kSnapshotVersion);
  std::filesystem::remove_all(cfg.dump_dir);
}

TEST_F(ServiceTest, OverloadAnswers503WithRetryHint) {
  ServiceConfig cfg;
  cfg.max_inflight = 1;
  cfg.busy_timeout = std::chrono::milliseconds(0);
  Live live(cfg);
  int busy = 0;
  for (int attempt = 0; attempt < 5 && busy == 0; ++attempt) {
    std::vector<std::thread> threads;
    std::atomic<int> ready{0}, n503{0};
    for (int t = 0; t < 6; ++t) {
      threads.emplace_back([&] {
        auto cli = live.client();
        ++ready;
        while (ready.load() < 6) std::this_thread::yield();
        auto res = cli.Post("/predict", json({{"smiles", product_of("mini-25")}}).dump(), "application/json");
        ASSERT_TRUE(res);
        ASSERT_TRUE(res->status == 200 || res->status == 503) << res->status;
        if (res->status == 503) {
          EXPECT_EQ(res->get_header_value("Retry-After"), "1");
          ++n503;
        }
      });
    }
    for (auto& th : threads) th.join();
    busy = n503.load();
  }
  EXPECT_GT(busy, 0);
}

TEST_F(ServiceTest, ExplainEndpoints) {
  Live live;
  httplib::Params p{{"reaction", mapped_reaction(1)}, {"task", "overall"}};
  auto res = live.client().Get("/explain/apex", p, httplib::Headers{});
  ASSERT_EQ(res->status, 200) << res->body;
  const auto body = json::parse(res->body);
  EXPECT_EQ(body.at("atoms").size(), static_cast<std::size_t>(parse_smiles(product_of("mini-01")).size()));

  res = live.client().Get("/explain/trace", p, httplib::Headers{});
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(json::parse(res->body).at("kind"), "ModeError");

  res = live.client().Get("/model/heads", httplib::Params{{"smiles", product_of("mini-01")}}, httplib::Headers{});
  ASSERT_EQ(res->status, 200);
  const auto heads = json::parse(res->body).at("heads");
  EXPECT_EQ(heads.size(), static_cast<std::size_t>(fixture::memorized_model().params.config.n_head));
  for (const auto& h : heads) {
    EXPECT_GE(h.at("rv").get<double>(), -1.0);
    EXPECT_LE(h.at("rv").get<double>(), 1.0);
    EXPECT_EQ(h.at("bias").size(), h.at("global").size());
  }
  res = live.client().Get("/explain/apex", httplib::Params{{"task", "overall"}}, httplib::Headers{});
  EXPECT_EQ(res->status, 422);
  res = live.client().Get("/explain/apex", httplib::Params{{"reaction", mapped_reaction(1)}, {"task", "x"}},
                          httplib::Headers{});
  EXPECT_EQ(res->status, 422);
}

TEST_F(ServiceTest, StaticRouteServesUiFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "retrograph_ui_static";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "index.html") << "<!doctype html><title>routes</title>\n";
  ServiceConfig cfg;
  cfg.static_dir = dir;
  {
    Live live(cfg);
    auto res = live.client().Get("/ui/index.html");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_NE(res->body.find("<title>routes</title>"), std::string::npos);
    EXPECT_EQ(live.client().Get("/ui/missing.js")->status, 404);
  }
  std::filesystem::remove_all(dir);
}
