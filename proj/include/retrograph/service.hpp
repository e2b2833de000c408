#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>

#include <json.hpp>

#include "retrograph/decision.hpp"
#include "retrograph/explain.hpp"
#include "retrograph/planner.hpp"

namespace httplib {
class Server;
}

namespace retrograph {

using Clock = std::chrono::steady_clock;

struct ServiceConfig {
  std::chrono::seconds session_ttl{1800};
  std::size_t max_sessions = 256;
  /// Wait for a busy session or a compute slot before answering 503.
  std::chrono::milliseconds busy_timeout{10000};
  int max_inflight = 8;  ///< Concurrent compute-heavy requests.
  PlanLimits default_limits;
  BeamConfig beam;
  std::filesystem::path static_dir;  ///< Served under /ui when set.
  /// Evicted session trees are written here as <id>.json when set.
  std::filesystem::path dump_dir;
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
};

/// Status plus JSON body; errors carry {"error", "kind"} and parser offsets.
struct ApiResponse {
  int status = 200;
  nlohmann::json body;
  std::optional<int> retry_after;  ///< Seconds, for 503.
};

/// The HTTP facade without the transport. Every public member is safe to
/// call concurrently. Sessions are single-writer: expansions of one session
/// are serialized and tree snapshots never observe a half-applied expansion.
class Service {
 public:
  Service(Model model, std::map<std::string, BuildingBlockSet> block_profiles, ServiceConfig config = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Routes a request; `path` excludes the query string.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body,
                     const std::multimap<std::string, std::string>& query = {});

  /// Registers every route (and the static mount) on an httplib server.
  void mount(httplib::Server& server);

  /// Drops sessions idle for longer than the TTL; returns how many.
  std::size_t evict_expired();
  std::size_t session_count() const;
  const Predictor& predictor() const noexcept { return predictor_; }
  const ServiceConfig& config() const noexcept { return config_; }

 private:
  // Endpoint bodies; they may throw, handle() maps errors to statuses.
  ApiResponse predict(const nlohmann::json& req);
  ApiResponse query(const nlohmann::json& req);
  ApiResponse create_session(const nlohmann::json& req);
  ApiResponse expand(const std::string& id, const nlohmann::json& req);
  ApiResponse run_session(const std::string& id, const nlohmann::json& req);
  ApiResponse tree(const std::string& id);
  ApiResponse delete_session(const std::string& id);
  ApiResponse apex(const std::multimap<std::string, std::string>& q);
  ApiResponse trace(const std::multimap<std::string, std::string>& q);
  ApiResponse heads(const std::multimap<std::string, std::string>& q);
  ApiResponse model_info() const;

  struct Session;
  struct Slot;

  std::shared_ptr<Session> find_session(const std::string& id);
  std::string new_session_id();
  void dump(const std::string& id, const Session& s) const;

  Model model_;
  Predictor predictor_;
  std::map<std::string, BuildingBlockSet> blocks_;
  ServiceConfig config_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 id_rng_;

  std::mutex slots_mu_;
  std::condition_variable slots_cv_;
  int inflight_ = 0;
};

/// JSON form of a candidate at 1-based `rank`.
nlohmann::json candidate_json(const Candidate& c, int rank);

}  // namespace retrograph
