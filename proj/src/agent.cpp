#include "converse/agent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace converse {

using ad::Index;
using ad::Tensor;

Tensor policy_logits(const Tensor& s, const ParameterSet& params) {
    const Tensor h = ad::leaky_relu(ad::add_bias(ad::matmul(s, params["policy.w1"]), params["policy.b1"]));
    return ad::add_bias(ad::matmul(h, params["policy.w2"]), params["policy.b2"]);
}

std::array<double, 2> action_type_probs(const Tensor& s, const ParameterSet& params, bool ask_allowed,
                                        bool rec_allowed) {
    if (!ask_allowed && !rec_allowed) throw AgentError("both action types are masked");
    ad::NoGradGuard guard;
    const ad::Matrix z = policy_logits(s, params).value();
    if (!ask_allowed) return {0.0, 1.0};
    if (!rec_allowed) return {1.0, 0.0};
    const double m = std::max(z(0, 0), z(0, 1));
    const double ea = std::exp(z(0, 0) - m), er = std::exp(z(0, 1) - m);
    return {ea / (ea + er), er / (ea + er)};
}

Tensor q_values(const Tensor& s, const ParameterSet& params, ActionKind kind, std::span<const std::int32_t> candidates) {
    const Index d = s.cols();
    const Tensor& table = params[kind == ActionKind::Ask ? "emb.value" : "emb.item"];
    std::vector<Index> rows(candidates.begin(), candidates.end());
    const Tensor e = ad::gather_rows(table, rows);
    const Tensor& w1 = params["qa.w1"];
    // [s || e] W1 = s W1[:d] + e W1[d:]
    const Tensor state_part = ad::add(ad::matmul(s, ad::slice_rows(w1, 0, d)), params["qa.b1"]);
    const Tensor hidden = ad::leaky_relu(ad::add_bias(ad::matmul(e, ad::slice_rows(w1, d, d)), state_part));
    const Tensor adv = ad::add_bias(ad::matmul(hidden, params["qa.w2"]), params["qa.b2"]);
    const Tensor hv = ad::leaky_relu(ad::add_bias(ad::matmul(s, params["qv.w1"]), params["qv.b1"]));
    const Tensor value = ad::add_bias(ad::matmul(hv, params["qv.w2"]), params["qv.b2"]);
    return ad::add_bias(adv, value);
}

double q_value(const ConversationState& state, const Tensor& s, const ParameterSet& params, ActionKind kind,
               std::int32_t candidate) {
    const auto& space = kind == ActionKind::Ask ? state.candidate_values : state.candidate_items;
    if (!std::binary_search(space.begin(), space.end(), candidate)) {
        throw AgentError(std::string("candidate ") + std::to_string(candidate) + " is outside the " + to_string(kind) +
                         " action space");
    }
    ad::NoGradGuard guard;
    const std::int32_t one[1] = {candidate};
    return q_values(s, params, kind, one).item();
}

namespace {

// indices of `ids` sorted by descending q, ties by ascending id
std::vector<std::size_t> ranked(std::span<const std::int32_t> ids, std::span<const double> q) {
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (q[a] != q[b]) return q[a] > q[b];
        return ids[a] < ids[b];
    });
    return order;
}

}  // namespace

Action compose_question(const Catalog& catalog, const ConversationState& state, std::span<const double> q, int k_p) {
    const auto& cands = state.candidate_values;
    if (cands.empty()) throw AgentError("no candidate value to ask about");
    if (q.size() != cands.size()) throw AgentError("q vector does not match candidate values");
    const auto order = ranked(cands, q);
    const TypeId y = catalog.value_type(cands[order.front()]);
    Action a{ActionKind::Ask, {}};
    for (std::size_t i : order) {
        if (static_cast<int>(a.payload.size()) == k_p) break;
        if (catalog.value_type(cands[i]) == y) a.payload.push_back(cands[i]);
    }
    return a;
}

Action compose_recommendation(const ConversationState& state, std::span<const double> q, int k_v) {
    const auto& cands = state.candidate_items;
    if (cands.empty()) throw AgentError("no candidate item to recommend");
    if (q.size() != cands.size()) throw AgentError("q vector does not match candidate items");
    const auto order = ranked(cands, q);
    Action a{ActionKind::Rec, {}};
    for (std::size_t i : order) {
        if (static_cast<int>(a.payload.size()) == k_v) break;
        a.payload.push_back(cands[i]);
    }
    return a;
}

ActionKind choose_type(const StateEvaluation& eval, SelectMode mode, std::mt19937_64* rng) {
    if (!eval.ask_allowed) return ActionKind::Rec;
    if (mode == SelectMode::Sampled) {
        if (rng == nullptr) throw AgentError("sampled selection needs a random source");
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        return unit(*rng) < eval.probs[0] ? ActionKind::Ask : ActionKind::Rec;
    }
    return eval.probs[0] >= eval.probs[1] ? ActionKind::Ask : ActionKind::Rec;
}

Agent::Agent(const Catalog& catalog, const GraphIndex& index, const ParameterSet& params, const ModelDims& dims,
             const EpisodeConfig& config)
    : catalog_(catalog), index_(index), params_(params), dims_(dims), config_(config) {}

void Agent::refresh() {
    global_.reset();
    cache_.clear();
}

const GlobalEncoding& Agent::global() {
    if (!global_) {
        ad::NoGradGuard guard;
        global_ = std::make_unique<GlobalEncoding>(encode_global(index_, params_, dims_));
    }
    return *global_;
}

const StateEvaluation& Agent::evaluate(const ConversationState& state) {
    if (!state.running()) throw AgentError("cannot act on a finished conversation");
    std::string key = state.key();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;

    const GlobalEncoding& g = global();
    ad::NoGradGuard guard;
    StateEvaluation ev;
    const Tensor s = encode_state(catalog_, state, g, params_, dims_);
    ev.embedding = s.value();
    ev.ask_allowed = state.can_ask();
    ev.probs = action_type_probs(s, params_, ev.ask_allowed, !state.candidate_items.empty());
    if (ev.ask_allowed) {
        const ad::Matrix qa = q_values(s, params_, ActionKind::Ask, state.candidate_values).value();
        ev.q_ask.assign(qa.data(), qa.data() + qa.size());
        ev.question = compose_question(catalog_, state, ev.q_ask, config_.k_p);
        ev.best_q_ask = *std::max_element(ev.q_ask.begin(), ev.q_ask.end());
    } else {
        ev.best_q_ask = -std::numeric_limits<double>::infinity();
    }
    const ad::Matrix qr = q_values(s, params_, ActionKind::Rec, state.candidate_items).value();
    ev.q_rec.assign(qr.data(), qr.data() + qr.size());
    ev.recommendation = compose_recommendation(state, ev.q_rec, config_.k_v);
    ev.best_q_rec = *std::max_element(ev.q_rec.begin(), ev.q_rec.end());
    return cache_.emplace(std::move(key), std::move(ev)).first->second;
}

Action Agent::action_for_type(const ConversationState& state, ActionKind kind) {
    const StateEvaluation& ev = evaluate(state);
    if (kind == ActionKind::Ask) {
        if (!ev.ask_allowed) throw AgentError("ask is masked in this state");
        return ev.question;
    }
    return ev.recommendation;
}

Action Agent::select_action(const ConversationState& state, SelectMode mode, std::mt19937_64* rng) {
    return action_for_type(state, choose_type(evaluate(state), mode, rng));
}

void sync_target(const ParameterSet& online, ParameterSet& target) { target.copy_values_from(online); }

}  // namespace converse
