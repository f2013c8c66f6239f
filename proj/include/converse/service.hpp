#pragma once

#include "converse/agent.hpp"
#include "converse/catalog.hpp"
#include "converse/encoder.hpp"
#include "converse/env.hpp"
#include "converse/params.hpp"

#include <json.hpp>

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>

namespace httplib {
class Server;
}

namespace converse {

/// Carries the HTTP status the error maps to.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

using Json = nlohmann::ordered_json;

/// In-memory conversations driven by client responses. Thread-safe; each
/// session is serialised by its own mutex.
class SessionManager {
public:
    using Clock = std::chrono::steady_clock;

    explicit SessionManager(EpisodeConfig episode, std::chrono::minutes idle = std::chrono::minutes(30));
    ~SessionManager();

    /// `graph` is the catalog the agent's global graph is built from (the
    /// training interactions); `full` supplies targets for simulated sessions.
    void add_catalog(const std::string& id, Catalog full, Catalog graph);
    void add_checkpoint(const std::string& id, Checkpoint checkpoint);

    Json catalogs() const;
    Json checkpoints() const;

    /// {catalog, checkpoint, user, seed_value | "auto", targets, simulated, seed}
    Json create(const Json& request);
    /// Ask: {"accepted": [value ids]}. Rec: {"accepted": [item ids]} or
    /// {"rejected": true}. Simulated sessions accept an empty body.
    Json respond(const std::string& id, const Json& request);
    Json get(const std::string& id);

    /// Drops sessions idle since before now - idle; returns how many.
    std::size_t expire(Clock::time_point now);
    std::size_t session_count() const;

private:
    struct LoadedCatalog;
    struct LoadedCheckpoint;
    struct Session;

    std::shared_ptr<Session> find(const std::string& id);

    EpisodeConfig episode_;
    std::chrono::minutes idle_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<LoadedCatalog>> catalogs_;
    std::map<std::string, std::shared_ptr<LoadedCheckpoint>> checkpoints_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 1;
};

/// Binds the JSON routes to `server`.
void register_routes(httplib::Server& server, SessionManager& sessions);

}  // namespace converse
