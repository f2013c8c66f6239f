#pragma once

#include "converse/encoder.hpp"
#include "converse/env.hpp"
#include "converse/params.hpp"

#include <array>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace converse {

class AgentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// MLP_pi(s): 1 x 2 logits, column 0 = ask, column 1 = rec.
ad::Tensor policy_logits(const ad::Tensor& s, const ParameterSet& params);

/// Softmax over the unmasked action types; masked types get probability 0.
std::array<double, 2> action_type_probs(const ad::Tensor& s, const ParameterSet& params, bool ask_allowed,
                                        bool rec_allowed = true);

/// MLP_A(s || e_a) + MLP_V(s) for each candidate, n x 1. Candidates are
/// value ids for ask and item ids for rec; e_a is the raw table embedding.
ad::Tensor q_values(const ad::Tensor& s, const ParameterSet& params, ActionKind kind,
                    std::span<const std::int32_t> candidates);

/// Q for one candidate; rejects candidates outside the state's sub action space.
double q_value(const ConversationState& state, const ad::Tensor& s, const ParameterSet& params, ActionKind kind,
               std::int32_t candidate);

/// Argmax value fixes the attribute type; up to k_p values of that type by
/// descending Q. Ties go to the smaller id. `q` is aligned with
/// state.candidate_values.
Action compose_question(const Catalog& catalog, const ConversationState& state, std::span<const double> q, int k_p);

/// Top k_v candidate items by descending Q; `q` is aligned with state.candidate_items.
Action compose_recommendation(const ConversationState& state, std::span<const double> q, int k_v);

enum class SelectMode : std::uint8_t { Greedy, Sampled };

/// Forward-pass summary of one state under the current parameters.
struct StateEvaluation {
    ad::Matrix embedding;  // 1 x d
    std::array<double, 2> probs{};
    bool ask_allowed = false;
    std::vector<double> q_ask;  // aligned with candidate_values
    std::vector<double> q_rec;  // aligned with candidate_items
    Action question;            // empty payload when ask is masked
    Action recommendation;
    double best_q_ask = 0.0;
    double best_q_rec = 0.0;
};

/// Chooses the action type from probabilities; ties and greedy ties go to ask.
ActionKind choose_type(const StateEvaluation& eval, SelectMode mode, std::mt19937_64* rng);

/// Read-only decision maker over a parameter set. Caches the global graph
/// encoding and per-state evaluations until refresh().
class Agent {
public:
    Agent(const Catalog& catalog, const GraphIndex& index, const ParameterSet& params, const ModelDims& dims,
          const EpisodeConfig& config);

    /// Drops caches; call after the parameters change.
    void refresh();

    const StateEvaluation& evaluate(const ConversationState& state);
    Action select_action(const ConversationState& state, SelectMode mode = SelectMode::Greedy,
                         std::mt19937_64* rng = nullptr);
    Action action_for_type(const ConversationState& state, ActionKind kind);

    const GlobalEncoding& global();
    const Catalog& catalog() const { return catalog_; }
    const ParameterSet& params() const { return params_; }
    const ModelDims& dims() const { return dims_; }
    const EpisodeConfig& config() const { return config_; }
    std::size_t cache_size() const { return cache_.size(); }

private:
    const Catalog& catalog_;
    const GraphIndex& index_;
    const ParameterSet& params_;
    ModelDims dims_;
    EpisodeConfig config_;
    std::unique_ptr<GlobalEncoding> global_;
    std::unordered_map<std::string, StateEvaluation> cache_;
};

/// Target parameters become a copy of the online parameters.
void sync_target(const ParameterSet& online, ParameterSet& target);

}  // namespace converse
