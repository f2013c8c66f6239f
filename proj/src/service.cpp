#include "converse/service.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>

namespace converse {

struct SessionManager::LoadedCatalog {
    std::string id;
    Catalog full;
    Catalog graph;
    GraphIndex index;
};

struct SessionManager::LoadedCheckpoint {
    std::string id;
    Checkpoint checkpoint;
};

struct SessionManager::Session {
    std::mutex mutex;
    std::string id;
    std::shared_ptr<const LoadedCatalog> catalog;
    std::shared_ptr<const LoadedCheckpoint> checkpoint;
    std::unique_ptr<Agent> agent;
    bool simulated = false;
    std::vector<ItemId> targets;
    ConversationState state;
    Action pending;
    std::vector<TurnRecord> transcript;
    double total_reward = 0.0;
    std::atomic<Clock::rep> last_used{0};

    void touch() { last_used = Clock::now().time_since_epoch().count(); }
};

namespace {

ServiceError bad_request(const std::string& what) { return ServiceError(400, what); }

template <class T>
T field(const Json& j, const char* key) {
    if (!j.contains(key)) throw bad_request(std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw bad_request(std::string("field '") + key + "' has the wrong type");
    }
}

template <class T>
T field_or(const Json& j, const char* key, T fallback) {
    return j.contains(key) ? field<T>(j, key) : fallback;
}

std::string item_name(ItemId v) { return "item " + std::to_string(v); }

Json action_json(const Catalog& catalog, const Action& a) {
    Json j;
    j["kind"] = to_string(a.kind);
    j["payload"] = a.payload;
    Json names = Json::array();
    for (std::int32_t id : a.payload) names.push_back(a.kind == ActionKind::Ask ? catalog.value_name(id) : item_name(id));
    j["names"] = names;
    if (a.kind == ActionKind::Ask) j["type"] = catalog.type_name(catalog.value_type(a.payload.front()));
    return j;
}

Json finite_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace

SessionManager::SessionManager(EpisodeConfig episode, std::chrono::minutes idle) : episode_(episode), idle_(idle) {
    episode_.validate();
}

SessionManager::~SessionManager() = default;

void SessionManager::add_catalog(const std::string& id, Catalog full, Catalog graph) {
    if (full.num_items() != graph.num_items() || full.num_values() != graph.num_values() ||
        full.num_users() != graph.num_users()) {
        throw CatalogError("catalog " + id + ": graph catalog must share the universe");
    }
    auto c = std::make_shared<LoadedCatalog>();
    c->id = id;
    c->full = std::move(full);
    c->graph = std::move(graph);
    c->index = build_graph_index(build_global_graph(c->graph));
    std::lock_guard lock(mutex_);
    catalogs_[id] = std::move(c);
}

void SessionManager::add_checkpoint(const std::string& id, Checkpoint checkpoint) {
    auto c = std::make_shared<LoadedCheckpoint>();
    c->id = id;
    c->checkpoint = std::move(checkpoint);
    std::lock_guard lock(mutex_);
    checkpoints_[id] = std::move(c);
}

Json SessionManager::catalogs() const {
    std::lock_guard lock(mutex_);
    Json out = Json::array();
    for (const auto& [id, c] : catalogs_) {
        Json j;
        j["id"] = id;
        j["users"] = c->full.num_users();
        j["items"] = c->full.num_items();
        j["types"] = c->full.num_types();
        j["values"] = c->full.num_values();
        j["fingerprint"] = std::to_string(c->graph.fingerprint());
        out.push_back(std::move(j));
    }
    return out;
}

Json SessionManager::checkpoints() const {
    std::lock_guard lock(mutex_);
    Json out = Json::array();
    for (const auto& [id, c] : checkpoints_) {
        Json j;
        j["id"] = id;
        j["mode"] = c->checkpoint.mode;
        j["step"] = c->checkpoint.step;
        j["d"] = c->checkpoint.dims.d;
        j["catalog_fingerprint"] = std::to_string(c->checkpoint.catalog_fingerprint);
        Json compatible = Json::array();
        for (const auto& [cid, cat] : catalogs_) {
            if (cat->graph.fingerprint() == c->checkpoint.catalog_fingerprint) compatible.push_back(cid);
        }
        j["catalogs"] = compatible;
        out.push_back(std::move(j));
    }
    return out;
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
    return it->second;
}

namespace {

Json summary(const ConversationState& s) {
    Json j;
    j["turn"] = s.turn;
    j["outcome"] = to_string(s.outcome);
    j["user"] = s.user;
    j["seed_value"] = s.seed_value;
    j["accepted_values"] = s.accepted_values;
    j["rejected_values"] = s.rejected_values;
    j["rejected_items"] = s.rejected_items;
    j["candidate_values"] = s.candidate_values.size();
    j["candidate_items"] = s.candidate_items.size();
    return j;
}

}  // namespace

Json SessionManager::create(const Json& request) {
    if (!request.is_object()) throw bad_request("request body must be a JSON object");
    std::shared_ptr<const LoadedCatalog> cat;
    std::shared_ptr<const LoadedCheckpoint> ckpt;
    {
        std::lock_guard lock(mutex_);
        const auto cid = field<std::string>(request, "catalog");
        const auto kid = field<std::string>(request, "checkpoint");
        auto c = catalogs_.find(cid);
        if (c == catalogs_.end()) throw ServiceError(404, "unknown catalog " + cid);
        auto k = checkpoints_.find(kid);
        if (k == checkpoints_.end()) throw ServiceError(404, "unknown checkpoint " + kid);
        cat = c->second;
        ckpt = k->second;
    }
    if (ckpt->checkpoint.catalog_fingerprint != cat->graph.fingerprint()) {
        throw ServiceError(409, "checkpoint " + ckpt->id + " was trained on a different catalog than " + cat->id);
    }

    auto s = std::make_shared<Session>();
    s->catalog = cat;
    s->checkpoint = ckpt;
    s->simulated = field_or<bool>(request, "simulated", false);
    const auto user = field<UserId>(request, "user");
    if (user < 0 || user >= cat->full.num_users()) throw bad_request("user id out of range");
    s->targets = field_or<std::vector<ItemId>>(request, "targets", {});
    std::sort(s->targets.begin(), s->targets.end());
    s->targets.erase(std::unique(s->targets.begin(), s->targets.end()), s->targets.end());
    for (ItemId v : s->targets) {
        if (v < 0 || v >= cat->full.num_items()) throw bad_request("target item out of range");
    }
    if (s->simulated && s->targets.empty()) throw bad_request("simulated sessions need targets");

    const bool auto_seed = !request.contains("seed_value") || request["seed_value"] == "auto";
    try {
        if (auto_seed) {
            if (s->targets.empty()) throw bad_request("an automatic seed value needs targets");
            std::mt19937_64 rng(field_or<std::uint64_t>(request, "seed", 0));
            s->state = init_session(cat->full, user, s->targets, rng);
        } else {
            const auto p = field<ValueId>(request, "seed_value");
            if (p < 0 || p >= cat->full.num_values()) throw bad_request("seed value out of range");
            s->state = init_session_with_seed(cat->full, user, p);
        }
    } catch (const EnvError& e) {
        throw bad_request(e.what());
    }

    const Checkpoint& c = ckpt->checkpoint;
    EpisodeConfig episode = episode_;
    if (c.dims.max_turns != episode.t_max) throw ServiceError(409, "checkpoint turn limit differs from the service");
    s->agent = std::make_unique<Agent>(cat->full, cat->index, c.params, c.dims, episode);
    s->transcript.push_back(seed_record(s->state));
    if (s->state.running()) s->pending = s->agent->select_action(s->state);

    {
        std::lock_guard lock(mutex_);
        s->id = std::to_string(next_id_++);
        sessions_[s->id] = s;
    }
    s->touch();
    spdlog::info("session {} opened: user {} seed {} ({})", s->id, user, s->state.seed_value,
                 s->simulated ? "simulated" : "human");
    return get(s->id);
}

Json SessionManager::respond(const std::string& id, const Json& request) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    s->touch();
    if (!s->state.running()) throw ServiceError(409, "session " + id + " has already ended");
    if (!request.is_object() && !request.is_null()) throw bad_request("request body must be a JSON object");
    const Catalog& catalog = s->catalog->full;
    const Action& a = s->pending;

    UserResponse response;
    const bool empty = request.is_null() || request.empty();
    if (s->simulated && empty) {
        response = simulate_user(catalog, s->state, a, s->targets);
    } else if (a.kind == ActionKind::Ask) {
        auto accepted = field_or<std::vector<ValueId>>(request, "accepted", {});
        std::sort(accepted.begin(), accepted.end());
        for (ValueId p : a.payload) {
            if (std::binary_search(accepted.begin(), accepted.end(), p)) response.accepted_values.push_back(p);
            else response.rejected_values.push_back(p);
        }
        std::sort(response.rejected_values.begin(), response.rejected_values.end());
        if (response.accepted_values.size() != accepted.size()) throw bad_request("accepted values were not asked");
    } else {
        const bool rejected = field_or<bool>(request, "rejected", false);
        auto accepted = field_or<std::vector<ItemId>>(request, "accepted", {});
        if (rejected == !accepted.empty()) throw bad_request("answer a recommendation with accepted items or rejected");
        std::sort(accepted.begin(), accepted.end());
        response.accepted_items = accepted;
        response.hit = !accepted.empty();
    }
    StepResult r;
    try {
        validate_response(a, response);
        r = step_with_response(catalog, s->state, a, response, s->agent->config());
    } catch (const EnvError& e) {
        throw bad_request(e.what());
    }
    s->transcript.push_back(turn_record(r.next, a, r.response, r.reward));
    s->total_reward += r.reward;
    s->state = std::move(r.next);
    if (s->state.running()) s->pending = s->agent->select_action(s->state);
    else spdlog::info("session {} ended: {} after {} turns", id, to_string(s->state.outcome), s->state.turn);

    Json out;
    out["session_id"] = id;
    out["reward"] = r.reward;
    out["total_reward"] = s->total_reward;
    out["outcome"] = to_string(s->state.outcome);
    out["state"] = summary(s->state);
    out["action"] = s->state.running() ? action_json(catalog, s->pending) : Json(nullptr);
    return out;
}

Json SessionManager::get(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    s->touch();
    const Catalog& catalog = s->catalog->full;
    Json out;
    out["session_id"] = id;
    out["catalog"] = s->catalog->id;
    out["checkpoint"] = s->checkpoint->id;
    out["simulated"] = s->simulated;
    out["outcome"] = to_string(s->state.outcome);
    out["total_reward"] = s->total_reward;
    out["state"] = summary(s->state);
    out["action"] = s->state.running() ? action_json(catalog, s->pending) : Json(nullptr);
    if (s->state.running()) {
        const StateEvaluation& ev = s->agent->evaluate(s->state);
        Json d;
        d["pi"] = {ev.probs[0], ev.probs[1]};
        d["q_ask"] = finite_or_null(ev.best_q_ask);
        d["q_rec"] = finite_or_null(ev.best_q_rec);
        d["ask_allowed"] = ev.ask_allowed;
        out["diagnostics"] = d;
    } else {
        out["diagnostics"] = nullptr;
    }
    Json transcript = Json::array();
    for (const TurnRecord& r : s->transcript) transcript.push_back(Json::parse(trace_line(r)));
    out["transcript"] = transcript;
    return out;
}

std::size_t SessionManager::expire(Clock::time_point now) {
    const auto cutoff = (now - idle_).time_since_epoch().count();
    std::lock_guard lock(mutex_);
    return std::erase_if(sessions_, [cutoff](const auto& e) { return e.second->last_used.load() < cutoff; });
}

std::size_t SessionManager::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

void register_routes(httplib::Server& server, SessionManager& sessions) {
    auto reply = [](httplib::Response& res, const std::function<Json()>& body, int ok = 200) {
        try {
            res.set_content(body().dump(), "application/json");
            res.status = ok;
        } catch (const ServiceError& e) {
            res.status = e.status();
            res.set_content(Json{{"error", e.what()}}.dump(), "application/json");
        } catch (const nlohmann::json::exception& e) {
            res.status = 400;
            res.set_content(Json{{"error", std::string("malformed JSON: ") + e.what()}}.dump(), "application/json");
        } catch (const std::exception& e) {
            spdlog::error("request failed: {}", e.what());
            res.status = 500;
            res.set_content(Json{{"error", e.what()}}.dump(), "application/json");
        }
    };
    auto parse = [](const std::string& body) { return body.empty() ? Json() : Json::parse(body); };
    auto sweep = [&sessions] {
        if (std::size_t n = sessions.expire(SessionManager::Clock::now())) spdlog::info("expired {} idle sessions", n);
    };

    server.Post("/sessions", [=, &sessions](const httplib::Request& req, httplib::Response& res) {
        sweep();
        reply(res, [&] { return sessions.create(parse(req.body)); }, 201);
    });
    server.Post(R"(/sessions/([^/]+)/response)", [=, &sessions](const httplib::Request& req, httplib::Response& res) {
        sweep();
        reply(res, [&] { return sessions.respond(req.matches[1], parse(req.body)); });
    });
    server.Get(R"(/sessions/([^/]+))", [=, &sessions](const httplib::Request& req, httplib::Response& res) {
        reply(res, [&] { return sessions.get(req.matches[1]); });
    });
    server.Get("/catalogs", [=, &sessions](const httplib::Request&, httplib::Response& res) {
        reply(res, [&] { return sessions.catalogs(); });
    });
    server.Get("/checkpoints", [=, &sessions](const httplib::Request&, httplib::Response& res) {
        reply(res, [&] { return sessions.checkpoints(); });
    });
}

}  // namespace converse
