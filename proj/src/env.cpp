#include "converse/env.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iterator>
#include <set>

namespace converse {

const char* to_string(ActionKind kind) { return kind == ActionKind::Ask ? "ask" : "rec"; }

const char* to_string(Outcome outcome) {
    switch (outcome) {
        case Outcome::Running: return "running";
        case Outcome::Success: return "success";
        case Outcome::Fail: return "fail";
    }
    return "?";
}

void EpisodeConfig::validate() const {
    if (t_max < 1) throw EnvError("t_max must be at least 1");
    if (k_v < 1) throw EnvError("k_v must be at least 1");
    if (k_p < 1) throw EnvError("k_p must be at least 1");
    if (!(gamma > 0.0 && gamma < 1.0)) throw EnvError("gamma must lie in (0, 1)");
}

std::string ConversationState::key() const {
    std::string k;
    k.reserve(16 + mentions.size() * 8);
    k += std::to_string(user) + ':' + std::to_string(seed_value) + ':' + std::to_string(turn) + ':' +
         std::to_string(static_cast<int>(outcome)) + '|';
    for (const Mention& m : mentions) {
        k += m.kind == Mention::Kind::Value ? 'p' : 'v';
        k += m.accepted ? '+' : '-';
        k += std::to_string(m.id);
        k += '@';
        k += std::to_string(m.turn);
        k += ',';
    }
    return k;
}

namespace {

template <class T>
std::vector<T> set_union(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<T> out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

template <class T>
std::vector<T> set_difference(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<T> out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

template <class T>
std::vector<T> sorted(std::vector<T> v) {
    std::sort(v.begin(), v.end());
    return v;
}

bool intersects(const std::vector<ValueId>& a, const std::vector<ValueId>& b) {
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i == *j) return true;
        if (*i < *j) ++i;
        else ++j;
    }
    return false;
}

}  // namespace

ConversationState init_session_with_seed(const Catalog& catalog, UserId user, ValueId seed_value) {
    if (seed_value < 0 || seed_value >= catalog.num_values()) {
        throw EnvError("seed value " + std::to_string(seed_value) + " is not in the catalog");
    }
    ConversationState s;
    s.user = user;
    s.seed_value = seed_value;
    s.seed_type = catalog.value_type(seed_value);
    s.accepted_values = {seed_value};
    s.mentions.push_back({Mention::Kind::Value, seed_value, true, 0});
    // naming one value of a single-valued type rules out its siblings
    if (catalog.single_valued(s.seed_type)) {
        for (ValueId p : catalog.type_values(s.seed_type)) {
            if (p == seed_value) continue;
            s.rejected_values.push_back(p);
            s.mentions.push_back({Mention::Kind::Value, p, false, 0});
        }
    }
    for (ValueId p = 0; p < catalog.num_values(); ++p) {
        if (p != seed_value && !std::binary_search(s.rejected_values.begin(), s.rejected_values.end(), p)) {
            s.candidate_values.push_back(p);
        }
    }
    for (ItemId v : catalog.value_items(seed_value)) {
        if (!intersects(catalog.item_values(v), s.rejected_values)) s.candidate_items.push_back(v);
    }
    if (s.candidate_items.empty()) s.outcome = Outcome::Fail;
    return s;
}

ConversationState init_session(const Catalog& catalog, UserId user, const std::vector<ItemId>& targets,
                               std::mt19937_64& rng) {
    if (targets.empty()) throw EnvError("a session needs at least one target item");
    const auto& owned = catalog.interactions(user);
    for (ItemId v : targets) {
        if (!std::binary_search(owned.begin(), owned.end(), v)) {
            throw EnvError("target item " + std::to_string(v) + " is not an interaction of user " + std::to_string(user));
        }
    }
    const auto shared = shared_values(catalog, sorted(targets));
    if (shared.empty()) throw EnvError("target items share no attribute value");
    std::uniform_int_distribution<std::size_t> pick(0, shared.size() - 1);
    return init_session_with_seed(catalog, user, shared[pick(rng)]);
}

void validate_action(const ConversationState& state, const Action& action, const Catalog& catalog,
                     const EpisodeConfig& config) {
    if (!state.running()) throw EnvError("action on a terminal conversation");
    if (action.payload.empty()) throw EnvError("action payload is empty");
    std::set<std::int32_t> unique(action.payload.begin(), action.payload.end());
    if (unique.size() != action.payload.size()) throw EnvError("action payload repeats an id");
    if (action.kind == ActionKind::Ask) {
        if (static_cast<int>(action.payload.size()) > config.k_p) throw EnvError("question asks more than k_p values");
        const TypeId y = catalog.value_type(action.payload.front());
        for (ValueId p : action.payload) {
            if (!std::binary_search(state.candidate_values.begin(), state.candidate_values.end(), p)) {
                throw EnvError("asked value " + std::to_string(p) + " is not a candidate");
            }
            if (catalog.value_type(p) != y) throw EnvError("question mixes attribute types");
        }
    } else {
        if (static_cast<int>(action.payload.size()) > config.k_v) throw EnvError("recommendation exceeds k_v items");
        for (ItemId v : action.payload) {
            if (!std::binary_search(state.candidate_items.begin(), state.candidate_items.end(), v)) {
                throw EnvError("recommended item " + std::to_string(v) + " is not a candidate");
            }
        }
    }
}

void validate_response(const Action& action, const UserResponse& response) {
    if (action.kind == ActionKind::Ask) {
        auto asked = sorted(action.payload);
        auto answered = set_union(sorted(response.accepted_values), sorted(response.rejected_values));
        if (answered != asked || response.accepted_values.size() + response.rejected_values.size() != asked.size()) {
            throw EnvError("accepted and rejected values must partition the asked values");
        }
    } else {
        for (ItemId v : response.accepted_items) {
            if (std::find(action.payload.begin(), action.payload.end(), v) == action.payload.end()) {
                throw EnvError("accepted item " + std::to_string(v) + " was not recommended");
            }
        }
        if (response.hit != !response.accepted_items.empty()) throw EnvError("hit flag disagrees with accepted items");
    }
}

UserResponse simulate_user(const Catalog& catalog, const ConversationState&, const Action& action,
                           const std::vector<ItemId>& targets) {
    UserResponse r;
    if (action.kind == ActionKind::Ask) {
        std::vector<ValueId> liked;
        for (ItemId v : targets) liked = set_union(liked, catalog.item_values(v));
        for (ValueId p : action.payload) {
            if (std::binary_search(liked.begin(), liked.end(), p)) r.accepted_values.push_back(p);
            else r.rejected_values.push_back(p);
        }
        std::sort(r.accepted_values.begin(), r.accepted_values.end());
        std::sort(r.rejected_values.begin(), r.rejected_values.end());
    } else {
        for (ItemId v : action.payload) {
            if (std::find(targets.begin(), targets.end(), v) != targets.end()) r.accepted_items.push_back(v);
        }
        r.hit = !r.accepted_items.empty();
    }
    return r;
}

ConversationState transition(const Catalog& catalog, const ConversationState& state, const Action& action,
                             const UserResponse& response, const EpisodeConfig& config) {
    if (!state.running()) throw EnvError("transition on a terminal conversation");
    ConversationState next = state;
    next.turn = state.turn + 1;
    const int mention_turn = next.turn;

    if (action.kind == ActionKind::Rec && response.hit) {
        next.outcome = Outcome::Success;
        return next;
    }

    std::vector<ValueId> newly_rejected_values;
    std::vector<ItemId> newly_rejected_items;
    if (action.kind == ActionKind::Ask) {
        const auto acc = sorted(response.accepted_values);
        newly_rejected_values = sorted(response.rejected_values);
        next.candidate_values = set_difference(next.candidate_values, sorted(action.payload));
        next.accepted_values = set_union(next.accepted_values, acc);
        next.rejected_values = set_union(next.rejected_values, newly_rejected_values);
        for (ValueId p : acc) next.mentions.push_back({Mention::Kind::Value, p, true, mention_turn});
        for (ValueId p : newly_rejected_values) next.mentions.push_back({Mention::Kind::Value, p, false, mention_turn});
    } else {
        newly_rejected_items = sorted(action.payload);
        next.rejected_items = set_union(next.rejected_items, newly_rejected_items);
        for (ItemId v : newly_rejected_items) next.mentions.push_back({Mention::Kind::Item, v, false, mention_turn});
    }

    // candidates only shrink: filter the previous set by what was just learned
    std::vector<ItemId> kept;
    kept.reserve(next.candidate_items.size());
    for (ItemId v : next.candidate_items) {
        if (std::binary_search(newly_rejected_items.begin(), newly_rejected_items.end(), v)) continue;
        const auto& pv = catalog.item_values(v);
        if (intersects(pv, newly_rejected_values)) continue;
        if (!intersects(pv, next.accepted_values)) continue;
        kept.push_back(v);
    }
    next.candidate_items = std::move(kept);

    if (next.candidate_items.empty() || next.turn >= config.t_max) next.outcome = Outcome::Fail;
    return next;
}

double reward(const Action& action, const UserResponse& response, const ConversationState& next,
              const EpisodeConfig& config) {
    const RewardConstants& c = config.rewards;
    double r = 0.0;
    if (action.kind == ActionKind::Ask) {
        r = static_cast<double>(response.accepted_values.size()) * c.ask_accept +
            static_cast<double>(response.rejected_values.size()) * c.ask_reject;
    } else {
        r = response.hit ? c.rec_accept : c.rec_reject;
    }
    if (next.outcome == Outcome::Fail) r += c.quit;
    return r;
}

Outcome is_terminal(const ConversationState& state) { return state.outcome; }

double cumulative_return(std::span<const double> rewards, double gamma, std::size_t start) {
    double total = 0.0;
    for (std::size_t k = rewards.size(); k-- > start;) total = rewards[k] + gamma * total;
    return total;
}

StepResult step_with_response(const Catalog& catalog, const ConversationState& state, const Action& action,
                              const UserResponse& response, const EpisodeConfig& config) {
    StepResult out;
    out.response = response;
    out.next = transition(catalog, state, action, response, config);
    out.reward = reward(action, response, out.next, config);
    return out;
}

StepResult step(const Catalog& catalog, const ConversationState& state, const Action& action,
                const std::vector<ItemId>& targets, const EpisodeConfig& config) {
    return step_with_response(catalog, state, action, simulate_user(catalog, state, action, targets), config);
}

TurnRecord seed_record(const ConversationState& opening) {
    TurnRecord r;
    r.turn = 0;
    r.kind = "seed";
    r.payload = {opening.seed_value};
    r.accepted = {opening.seed_value};
    for (const Mention& m : opening.mentions) {
        if (m.turn == 0 && !m.accepted) r.rejected.push_back(m.id);
    }
    return r;
}

TurnRecord turn_record(const ConversationState& next, const Action& action, const UserResponse& response,
                       double reward) {
    TurnRecord r;
    r.turn = next.turn;
    r.kind = to_string(action.kind);
    r.payload = action.payload;
    r.reward = reward;
    if (action.kind == ActionKind::Ask) {
        r.accepted = response.accepted_values;
        r.rejected = response.rejected_values;
    } else {
        r.accepted = response.accepted_items;
        if (!response.hit) r.rejected = sorted(action.payload);
    }
    return r;
}

std::string trace_line(const TurnRecord& record) {
    nlohmann::ordered_json j;
    j["turn"] = record.turn;
    j["kind"] = record.kind;
    j["payload"] = record.payload;
    j["accepted"] = record.accepted;
    j["rejected"] = record.rejected;
    j["reward"] = record.reward;
    return j.dump();
}

}  // namespace converse
