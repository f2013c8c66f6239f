#pragma once

#include "converse/agent.hpp"
#include "converse/env.hpp"

#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace converse {

/// Anything that can act in a running conversation.
class Policy {
public:
    virtual ~Policy() = default;
    virtual Action act(const ConversationState& state, std::mt19937_64& rng) = 0;
    virtual std::string name() const = 0;
};

/// The trained agent acting greedily (or sampling the action type).
class AgentPolicy : public Policy {
public:
    explicit AgentPolicy(Agent& agent, SelectMode mode = SelectMode::Greedy) : agent_(agent), mode_(mode) {}
    Action act(const ConversationState& state, std::mt19937_64& rng) override;
    std::string name() const override { return "sapient"; }

private:
    Agent& agent_;
    SelectMode mode_;
};

/// Top k_v candidates by matching score; ties by ascending id.
Action top_items_by_score(const ConversationState& state, const ParameterSet& params, int k_v);

/// Always recommends.
class AbsGreedyPolicy : public Policy {
public:
    AbsGreedyPolicy(const ParameterSet& params, const EpisodeConfig& config) : params_(params), config_(config) {}
    Action act(const ConversationState& state, std::mt19937_64& rng) override;
    std::string name() const override { return "abs-greedy"; }

private:
    const ParameterSet& params_;
    EpisodeConfig config_;
};

/// Recommends with probability p_rec, otherwise asks about the value whose
/// frequency among candidate items is closest to one half.
class MaxEntropyPolicy : public Policy {
public:
    MaxEntropyPolicy(const Catalog& catalog, const ParameterSet& params, const EpisodeConfig& config, double p_rec = 0.3)
        : catalog_(catalog), params_(params), config_(config), p_rec_(p_rec) {}
    Action act(const ConversationState& state, std::mt19937_64& rng) override;
    std::string name() const override { return "max-entropy"; }

    Action question(const ConversationState& state) const;

private:
    const Catalog& catalog_;
    const ParameterSet& params_;
    EpisodeConfig config_;
    double p_rec_;
};

/// Binary entropy of the share of candidate items carrying each candidate value.
std::vector<double> value_entropies(const Catalog& catalog, const ConversationState& state);

struct EpisodeRecord {
    UserId user = 0;
    std::vector<ItemId> targets;
    Outcome outcome = Outcome::Running;
    int turns = 0;
    std::vector<ActionKind> kinds;
    std::vector<std::vector<ItemId>> lists;  // per turn; empty on ask turns
    std::vector<TurnRecord> trace;           // seed record first
    double value = 0.0;                      // discounted return
};

/// Plays one conversation with the simulated user until it ends.
EpisodeRecord run_episode(Policy& policy, const Catalog& catalog, UserId user, const std::vector<ItemId>& targets,
                          const EpisodeConfig& config, std::mt19937_64& rng);

/// Hierarchical DCG with base-2 logs; a turn's list scores at the position of
/// its best-ranked target.
double hdcg(const EpisodeRecord& record, int t_max, int k_v);

struct MetricsReport {
    double sr = 0.0;
    double at = 0.0;
    double hdcg = 0.0;
    std::size_t episodes = 0;
};

MetricsReport aggregate(const std::vector<EpisodeRecord>& records, const EpisodeConfig& config);

/// Frequency of each length-n run of action kinds (A = ask, R = rec),
/// divided by the number of episodes.
std::map<std::string, double> action_pattern_stats(const std::vector<EpisodeRecord>& records, int n);

struct EvalConfig {
    int episodes_per_user = 1;
    std::uint64_t seed = 1;
};

/// One episode per (user with interactions in `targets`, repeat); the
/// user's interactions there are the targets. Users whose items share no
/// value are skipped.
std::vector<EpisodeRecord> evaluate_policy(Policy& policy, const Catalog& targets, const EpisodeConfig& config,
                                           const EvalConfig& eval);

void write_report(const MetricsReport& report, const std::string& label, std::ostream& out);
std::string report_line(const MetricsReport& report, const std::string& label);

}  // namespace converse
