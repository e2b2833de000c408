#include "retrograph/service.hpp"

#include <httplib.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "retrograph/error.hpp"

namespace retrograph {

namespace {

using nlohmann::json;

ApiResponse fail(int status, const std::string& kind, const std::string& message) {
  return {status, {{"error", message}, {"kind", kind}}, std::nullopt};
}

ApiResponse busy(const std::string& what) {
  ApiResponse r = fail(503, "Busy", what + " is busy; retry shortly");
  r.retry_after = 1;
  return r;
}

// Maps library errors onto the documented status codes.
ApiResponse error_response(const std::exception& e) {
  if (const auto* p = dynamic_cast<const ParseError*>(&e)) {
    ApiResponse r = fail(422, dynamic_cast<const ValenceError*>(&e) ? "ValenceError" : "SyntaxError", e.what());
    r.body["offset"] = p->offset();
    return r;
  }
  if (dynamic_cast<const EmptyBeamError*>(&e)) return fail(409, "EmptyBeam", e.what());
  if (dynamic_cast<const AlreadyExpanded*>(&e)) return fail(409, "AlreadyExpanded", e.what());
  if (dynamic_cast<const ModeError*>(&e)) return fail(409, "ModeError", e.what());
  if (dynamic_cast<const LabelError*>(&e)) return fail(422, "NotScorable", e.what());
  if (dynamic_cast<const DegenerateLoss*>(&e)) return fail(422, "DegenerateLoss", e.what());
  if (dynamic_cast<const MappingError*>(&e)) return fail(422, "MappingError", e.what());
  if (dynamic_cast<const FormatError*>(&e)) return fail(422, "FormatError", e.what());
  if (dynamic_cast<const ConfigError*>(&e)) return fail(422, "InvalidArgument", e.what());
  if (dynamic_cast<const json::exception*>(&e)) return fail(422, "InvalidArgument", e.what());
  if (dynamic_cast<const std::out_of_range*>(&e)) return fail(422, "InvalidArgument", e.what());
  if (dynamic_cast<const NumericsError*>(&e)) return fail(500, "NumericsError", e.what());
  return fail(500, "InternalError", e.what());
}

std::optional<int> optional_class(const json& req) {
  if (!req.contains("class") || req.at("class").is_null()) return std::nullopt;
  const int c = req.at("class").get<int>();
  if (c < 1 || c > kNumReactionTypes) throw ConfigError("class must be in 1..10");
  return c;
}

int bounded_int(const json& req, const char* key, int fallback, int lo, int hi) {
  if (!req.contains(key) || req.at(key).is_null()) return fallback;
  const int v = req.at(key).get<int>();
  if (v < lo || v > hi) {
    throw ConfigError(std::string(key) + " must be in " + std::to_string(lo) + ".." + std::to_string(hi));
  }
  return v;
}

std::optional<std::string> param(const std::multimap<std::string, std::string>& q, const std::string& key) {
  auto it = q.find(key);
  if (it == q.end()) return std::nullopt;
  return it->second;
}

std::string required_param(const std::multimap<std::string, std::string>& q, const std::string& key) {
  auto v = param(q, key);
  if (!v || v->empty()) throw ConfigError("missing query parameter '" + key + "'");
  return *v;
}

std::optional<int> class_param(const std::multimap<std::string, std::string>& q) {
  const auto v = param(q, "class");
  if (!v || v->empty()) return std::nullopt;
  json j = {{"class", std::stoi(*v)}};
  return optional_class(j);
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

std::vector<MolGraph> parse_reactants(const json& value) {
  std::vector<std::string> parts;
  if (value.is_array()) {
    parts = value.get<std::vector<std::string>>();
  } else {
    std::stringstream ss(value.get<std::string>());
    for (std::string p; std::getline(ss, p, '.');)
      if (!p.empty()) parts.push_back(p);
  }
  if (parts.empty()) throw ConfigError("no reactants given");
  std::vector<MolGraph> out;
  for (const auto& p : parts) out.push_back(parse_smiles(p));
  return out;
}

}  // namespace

json candidate_json(const Candidate& c, int rank) {
  json bonds = json::array();
  for (const auto& b : c.bond_changes) bonds.push_back({{"u", b.u}, {"v", b.v}, {"new_order", b.new_order}});
  const json energy = trace_json(c.trace);
  return {{"rank", rank},
          {"reactants", c.reactant_smiles},
          {"mapped_reactants", c.mapped_smiles},
          {"total", c.trace.total()},
          {"deltas", energy.at("deltas")},
          {"energy", energy},
          {"lg_id", c.lg_id},
          {"leaving_group", c.leaving_group},
          {"gate_targets", c.gate_targets},
          {"bond_changes", bonds},
          {"h_delta", c.h_delta}};
}

struct Service::Session {
  std::string id;
  std::string profile;
  std::unique_ptr<RouteSearch> search;
  std::shared_timed_mutex mu;
  Clock::time_point created, touched;  // touched is guarded by sessions_mu_
};

// A compute slot; requests beyond max_inflight wait up to busy_timeout.
struct Service::Slot {
  Service& s;
  bool held = false;
  explicit Slot(Service& svc) : s(svc) {
    std::unique_lock lk(s.slots_mu_);
    held = s.slots_cv_.wait_for(lk, s.config_.busy_timeout, [&] { return s.inflight_ < s.config_.max_inflight; });
    if (held) ++s.inflight_;
  }
  ~Slot() {
    if (!held) return;
    {
      std::lock_guard lk(s.slots_mu_);
      --s.inflight_;
    }
    s.slots_cv_.notify_one();
  }
};

Service::Service(Model model, std::map<std::string, BuildingBlockSet> block_profiles, ServiceConfig config)
    : model_(std::move(model)),
      predictor_(model_),
      blocks_(std::move(block_profiles)),
      config_(std::move(config)),
      id_rng_(std::random_device{}()) {
  config_.default_limits.validate();
  config_.beam.validate();
  if (config_.max_inflight < 1) throw ConfigError("max_inflight must be >= 1");
  if (blocks_.empty()) blocks_.emplace("default", BuildingBlockSet{});
}

Service::~Service() = default;

std::string Service::new_session_id() {
  std::ostringstream out;
  out << std::hex;
  for (int i = 0; i < 2; ++i) {
    const auto x = id_rng_();
    out.width(16);
    out.fill('0');
    out << x;
  }
  return out.str();
}

void Service::dump(const std::string& id, const Session& s) const {
  if (config_.dump_dir.empty()) return;
  std::filesystem::create_directories(config_.dump_dir);
  std::ofstream out(config_.dump_dir / (id + ".json"));
  out << s.search->snapshot().dump(1) << '\n';
}

std::size_t Service::evict_expired() {
  std::vector<std::pair<std::string, std::shared_ptr<Session>>> gone;
  {
    const auto now = config_.now();
    std::lock_guard lk(sessions_mu_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (now - it->second->touched > config_.session_ttl) {
        gone.emplace_back(it->first, it->second);
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (const auto& [id, s] : gone) {
    std::shared_lock lk(s->mu);
    dump(id, *s);
  }
  return gone.size();
}

std::size_t Service::session_count() const {
  std::lock_guard lk(sessions_mu_);
  return sessions_.size();
}

std::shared_ptr<Service::Session> Service::find_session(const std::string& id) {
  evict_expired();
  std::lock_guard lk(sessions_mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  it->second->touched = config_.now();
  return it->second;
}

ApiResponse Service::model_info() const {
  const auto& c = model_.params.config;
  return {200,
          {{"type_known", c.type_known},
           {"vocab_size", model_.vocab.size()},
           {"d", c.d},
           {"n_head", c.n_head},
           {"layers", c.layers},
           {"k", c.k},
           {"k_r", c.k_r},
           {"encoders", encoder_prefixes(c)},
           {"task_weights", model_.params.task_weights},
           {"block_profiles",
            [&] {
              json p = json::object();
              for (const auto& [name, set] : blocks_) p[name] = set.size();
              return p;
            }()}},
          std::nullopt};
}

ApiResponse Service::predict(const json& req) {
  const MolGraph product = parse_smiles(req.at("smiles").get<std::string>());
  const auto type = optional_class(req);
  BeamConfig beam = config_.beam;
  beam.k_out = bounded_int(req, "topk", beam.k_out, 1, 100);
  if (req.contains("beam")) {
    const auto& b = req.at("beam");
    beam.n_lg = bounded_int(b, "n_lg", beam.n_lg, 1, 1000);
    beam.n_conn = bounded_int(b, "n_conn", beam.n_conn, 1, 100);
    beam.n_bond = bounded_int(b, "n_bond", beam.n_bond, 1, 100);
    if (b.contains("greedy")) beam.greedy = b.at("greedy").get<bool>();
  }
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  const auto cands = predictor_.predict(product, type, beam);
  json list = json::array();
  for (std::size_t i = 0; i < cands.size(); ++i) list.push_back(candidate_json(cands[i], static_cast<int>(i) + 1));
  return {200, {{"product", canonical_smiles(product)}, {"class", type ? json(*type) : json(nullptr)}, {"candidates", list}},
          std::nullopt};
}

ApiResponse Service::query(const json& req) {
  const MolGraph product = parse_smiles(req.at("smiles").get<std::string>());
  const auto reactants = parse_reactants(req.at("reactants"));
  const auto type = optional_class(req);
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  const EnergyTrace t = predictor_.evaluate_query(product, reactants, type);
  return {200, {{"product", canonical_smiles(product)}, {"energy", trace_json(t)}, {"total", t.total()}},
          std::nullopt};
}

ApiResponse Service::create_session(const json& req) {
  const MolGraph target = parse_smiles(req.at("target").get<std::string>());
  const std::string profile = req.value("blocks_profile", std::string("default"));
  auto bit = blocks_.find(profile);
  if (bit == blocks_.end()) return fail(404, "UnknownProfile", "no building-block profile '" + profile + "'");
  PlanLimits limits = config_.default_limits;
  if (req.contains("limits")) {
    const auto& l = req.at("limits");
    limits.max_expansions = bounded_int(l, "max_expansions", limits.max_expansions, 0, 100000);
    limits.max_depth = bounded_int(l, "max_depth", limits.max_depth, 1, 64);
    limits.topk_per_expand = bounded_int(l, "topk_per_expand", limits.topk_per_expand, 1, 100);
    limits.max_routes = bounded_int(l, "max_routes", limits.max_routes, 1, 100);
  }
  auto s = std::make_shared<Session>();
  s->profile = profile;
  s->search = std::make_unique<RouteSearch>(target, bit->second, predictor_expander(predictor_, config_.beam), limits);
  s->created = s->touched = config_.now();

  evict_expired();
  std::lock_guard lk(sessions_mu_);
  if (sessions_.size() >= config_.max_sessions) return busy("session table");
  do s->id = new_session_id();
  while (sessions_.count(s->id));
  sessions_[s->id] = s;
  return {200,
          {{"session_id", s->id},
           {"root", s->search->root()},
           {"target", s->search->node(0).smiles},
           {"solved", s->search->solved()},
           {"budget_remaining", limits.max_expansions}},
          std::nullopt};
}

ApiResponse Service::expand(const std::string& id, const json& req) {
  auto s = find_session(id);
  if (!s) return fail(404, "UnknownSession", "unknown or expired session");
  const int node = req.at("node_id").get<int>();
  const auto type = optional_class(req);
  std::unique_lock lk(s->mu, std::defer_lock);
  if (!lk.try_lock_for(config_.busy_timeout)) return busy("session");
  auto& search = *s->search;
  if (node < 0 || static_cast<std::size_t>(node) >= search.size()) return fail(404, "UnknownNode", "unknown node");
  const auto& n = search.node(node);
  if (n.kind != NodeKind::Molecule) return fail(422, "InvalidArgument", "node is a reaction node");
  if (n.expanded || n.in_blocks) {
    return fail(409, "AlreadyExpanded", "node " + std::to_string(node) + (n.in_blocks ? " is a building block" : " is already expanded"));
  }
  const int budget = search.limits().max_expansions;
  if (search.expansions() >= budget) return fail(429, "BudgetExhausted", "session expansion budget exhausted");
  const int topk = bounded_int(req, "topk", search.limits().topk_per_expand, 1, 100);
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  const auto created = search.expand_node(node, type, topk);
  json nodes = json::array();
  for (int c : created) nodes.push_back(search.node_json(c));
  int reactions = 0;
  for (int c : created) reactions += search.node(c).kind == NodeKind::Reaction ? 1 : 0;
  return {200,
          {{"node", search.node_json(node)},
           {"created", nodes},
           {"reactions", reactions},
           {"expansions", search.expansions()},
           {"budget_remaining", budget - search.expansions()},
           {"solved", search.solved()}},
          std::nullopt};
}

ApiResponse Service::run_session(const std::string& id, const json& req) {
  (void)req;
  auto s = find_session(id);
  if (!s) return fail(404, "UnknownSession", "unknown or expired session");
  std::unique_lock lk(s->mu, std::defer_lock);
  if (!lk.try_lock_for(config_.busy_timeout)) return busy("session");
  auto& search = *s->search;
  if (search.expansions() >= search.limits().max_expansions && !search.solved()) {
    return fail(429, "BudgetExhausted", "session expansion budget exhausted");
  }
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  json routes = json::array();
  for (const auto& r : search.run()) routes.push_back(route_json(r));
  return {200,
          {{"solved", search.solved()},
           {"routes", routes},
           {"expansions", search.expansions()},
           {"budget_remaining", search.limits().max_expansions - search.expansions()}},
          std::nullopt};
}

ApiResponse Service::tree(const std::string& id) {
  auto s = find_session(id);
  if (!s) return fail(404, "UnknownSession", "unknown or expired session");
  std::shared_lock lk(s->mu, std::defer_lock);
  if (!lk.try_lock_for(config_.busy_timeout)) return busy("session");
  json snap = s->search->snapshot();
  snap["session_id"] = s->id;
  snap["blocks_profile"] = s->profile;
  snap["budget_remaining"] = s->search->limits().max_expansions - s->search->expansions();
  return {200, std::move(snap), std::nullopt};
}

ApiResponse Service::delete_session(const std::string& id) {
  std::lock_guard lk(sessions_mu_);
  if (!sessions_.erase(id)) return fail(404, "UnknownSession", "unknown or expired session");
  return {200, {{"deleted", id}}, std::nullopt};
}

ApiResponse Service::apex(const std::multimap<std::string, std::string>& q) {
  const auto type = class_param(q);
  const ReactionRecord rec = parse_reaction("query", type, required_param(q, "reaction"));
  const ExplainTask task = parse_explain_task(param(q, "task").value_or("overall"));
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  const auto c = apex_contributions(model_, rec, task);
  json atoms = json::array();
  for (std::size_t v = 0; v < c.score.size(); ++v) {
    const auto& a = rec.product.atom(static_cast<int>(v));
    atoms.push_back({{"index", v}, {"map", a.atom_map}, {"score", c.score[v]}, {"masked_loss", c.masked_loss[v]}});
  }
  return {200,
          {{"task", explain_task_name(task)}, {"base_loss", c.base_loss}, {"product", canonical_smiles(rec.product)},
           {"atoms", atoms}},
          std::nullopt};
}

ApiResponse Service::trace(const std::multimap<std::string, std::string>& q) {
  if (!model_.params.config.type_known) throw ModeError("model was trained without reaction types");
  const ReactionRecord rec = parse_reaction("query", class_param(q), required_param(q, "reaction"));
  const ExplainTask task = parse_explain_task(param(q, "task").value_or("overall"));
  Slot slot(*this);
  if (!slot.held) return busy("predictor");
  const auto t = reaction_type_trace(model_, rec, task);
  json atoms = json::array();
  for (Eigen::Index v = 0; v < t.contributions.rows(); ++v) {
    std::vector<double> row(t.contributions.row(v).begin(), t.contributions.row(v).end());
    atoms.push_back({{"index", v},
                     {"contributions", row},
                     {"hard_label", t.hard_label[static_cast<std::size_t>(v)]},
                     {"soft_label", t.soft_label[static_cast<std::size_t>(v)]}});
  }
  return {200, {{"task", explain_task_name(task)}, {"atoms", atoms}}, std::nullopt};
}

ApiResponse Service::heads(const std::multimap<std::string, std::string>& q) {
  const MolGraph mol = parse_smiles(required_param(q, "smiles"));
  const HeatmapReport rep = attention_heatmaps(mol, model_, param(q, "encoder").value_or(""));
  const bool with_matrices = param(q, "matrices").value_or("1") != "0";
  json heads = json::array();
  for (const auto& h : rep.heads) {
    json j = {{"head", h.head}, {"rv", h.rv}, {"class", head_class_name(h.cls)}};
    if (with_matrices) {
      j["bias"] = matrix_json(h.bias);
      j["global"] = matrix_json(h.global);
    }
    heads.push_back(std::move(j));
  }
  return {200, {{"encoder", rep.encoder}, {"heads", heads}}, std::nullopt};
}

ApiResponse Service::handle(const std::string& method, const std::string& path, const std::string& body,
                            const std::multimap<std::string, std::string>& query_params) {
  static const std::regex session_re(R"(^/plan/session/([0-9a-f]+)(/expand|/tree|/run)?$)");
  try {
    const auto json_body = [&] {
      if (body.empty()) return json::object();
      json j = json::parse(body);
      if (!j.is_object()) throw ConfigError("request body must be an object");
      return j;
    };
    std::smatch m;
    if (method == "GET" && path == "/health") return {200, {{"status", "ok"}}, std::nullopt};
    if (method == "GET" && path == "/model") return model_info();
    if (method == "POST" && path == "/predict") return predict(json_body());
    if (method == "POST" && path == "/query") return query(json_body());
    if (method == "POST" && path == "/plan/session") return create_session(json_body());
    if (std::regex_match(path, m, session_re)) {
      const std::string id = m[1];
      const std::string op = m[2];
      if (method == "POST" && op == "/expand") return expand(id, json_body());
      if (method == "POST" && op == "/run") return run_session(id, json_body());
      if (method == "GET" && op == "/tree") return tree(id);
      if (method == "DELETE" && op.empty()) return delete_session(id);
      return fail(405, "MethodNotAllowed", method + " " + path);
    }
    if (method == "GET" && path == "/explain/apex") return apex(query_params);
    if (method == "GET" && path == "/explain/trace") return trace(query_params);
    if (method == "GET" && path == "/model/heads") return heads(query_params);
    return fail(404, "NotFound", "no route for " + method + " " + path);
  } catch (const std::exception& e) {
    return error_response(e);
  }
}

void Service::mount(httplib::Server& server) {
  if (!config_.static_dir.empty()) server.set_mount_point("/ui", config_.static_dir.string());
  const auto adapt = [this](const httplib::Request& req, httplib::Response& res) {
    std::multimap<std::string, std::string> q(req.params.begin(), req.params.end());
    const ApiResponse r = handle(req.method, req.path, req.body, q);
    res.status = r.status;
    if (r.retry_after) res.set_header("Retry-After", std::to_string(*r.retry_after));
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get(".*", adapt);
  server.Post(".*", adapt);
  server.Delete(".*", adapt);
}

}  // namespace retrograph
