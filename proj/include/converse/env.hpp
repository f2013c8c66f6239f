#pragma once

#include "converse/catalog.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace converse {

enum class ActionKind : std::uint8_t { Ask = 0, Rec = 1 };
enum class Outcome : std::uint8_t { Running, Success, Fail };

const char* to_string(ActionKind kind);
const char* to_string(Outcome outcome);

class EnvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RewardConstants {
    double rec_accept = 1.0;
    double ask_accept = 0.01;
    double rec_reject = -0.1;
    double ask_reject = -0.1;
    double quit = -0.3;
};

struct EpisodeConfig {
    int t_max = 15;
    int k_v = 10;
    int k_p = 2;
    double gamma = 0.999;
    RewardConstants rewards;

    void validate() const;
};

/// A value or item the user reacted to, in the order it entered the
/// conversation. `turn` is the turn whose response produced it (0 = opening).
struct Mention {
    enum class Kind : std::uint8_t { Value, Item };
    Kind kind = Kind::Value;
    std::int32_t id = 0;
    bool accepted = false;
    int turn = 0;

    friend bool operator==(const Mention&, const Mention&) = default;
};

struct ConversationState {
    UserId user = 0;
    ValueId seed_value = 0;
    TypeId seed_type = 0;
    int turn = 0;
    Outcome outcome = Outcome::Running;

    std::vector<ValueId> accepted_values;   // P+
    std::vector<ValueId> rejected_values;   // P-
    std::vector<ItemId> rejected_items;     // V-
    std::vector<ValueId> candidate_values;  // P^c
    std::vector<ItemId> candidate_items;    // V^c
    std::vector<Mention> mentions;

    bool running() const { return outcome == Outcome::Running; }
    bool can_ask() const { return !candidate_values.empty(); }
    /// Canonical text key; equal states have equal keys.
    std::string key() const;

    friend bool operator==(const ConversationState&, const ConversationState&) = default;
};

struct Action {
    ActionKind kind = ActionKind::Rec;
    std::vector<std::int32_t> payload;  // value ids for ask, ranked item ids for rec

    friend bool operator==(const Action&, const Action&) = default;
};

struct UserResponse {
    std::vector<ValueId> accepted_values;
    std::vector<ValueId> rejected_values;
    std::vector<ItemId> accepted_items;
    bool hit = false;

    friend bool operator==(const UserResponse&, const UserResponse&) = default;
};

/// Opens a conversation; p0 is drawn uniformly from the values shared by
/// all target items.
ConversationState init_session(const Catalog& catalog, UserId user, const std::vector<ItemId>& targets,
                               std::mt19937_64& rng);
/// Opens a conversation with an explicit seed value.
ConversationState init_session_with_seed(const Catalog& catalog, UserId user, ValueId seed_value);

void validate_action(const ConversationState& state, const Action& action, const Catalog& catalog,
                     const EpisodeConfig& config);
/// Checks that a client-supplied response is well formed for the action.
void validate_response(const Action& action, const UserResponse& response);

UserResponse simulate_user(const Catalog& catalog, const ConversationState& state, const Action& action,
                           const std::vector<ItemId>& targets);

ConversationState transition(const Catalog& catalog, const ConversationState& state, const Action& action,
                             const UserResponse& response, const EpisodeConfig& config);

/// Immediate reward of the turn that produced `next`.
double reward(const Action& action, const UserResponse& response, const ConversationState& next,
              const EpisodeConfig& config);

Outcome is_terminal(const ConversationState& state);

/// sum_{k >= start} gamma^{k - start} rewards[k]
double cumulative_return(std::span<const double> rewards, double gamma, std::size_t start = 0);

struct StepResult {
    ConversationState next;
    UserResponse response;
    double reward = 0.0;
};

StepResult step(const Catalog& catalog, const ConversationState& state, const Action& action,
                const std::vector<ItemId>& targets, const EpisodeConfig& config);
StepResult step_with_response(const Catalog& catalog, const ConversationState& state, const Action& action,
                              const UserResponse& response, const EpisodeConfig& config);

/// One line of the episode trace export.
struct TurnRecord {
    int turn = 0;
    std::string kind;  // "seed", "ask" or "rec"
    std::vector<std::int32_t> payload;
    std::vector<std::int32_t> accepted;
    std::vector<std::int32_t> rejected;
    double reward = 0.0;
};

TurnRecord seed_record(const ConversationState& opening);
TurnRecord turn_record(const ConversationState& next, const Action& action, const UserResponse& response,
                       double reward);
std::string trace_line(const TurnRecord& record);

}  // namespace converse
