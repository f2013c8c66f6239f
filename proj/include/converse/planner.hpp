#pragma once

#include "converse/agent.hpp"
#include "converse/env.hpp"

#include <array>
#include <iosfwd>
#include <memory>
#include <random>
#include <vector>

namespace converse {

struct PlannerConfig {
    int simulations = 20;  // N
    double w = 1.5;
    SelectMode rollout_mode = SelectMode::Greedy;
    std::uint64_t seed = 0;  // only used by sampled rollouts

    void validate() const;
};

struct TrajectoryStep {
    ConversationState state;
    ActionKind kind = ActionKind::Rec;
    Action action;
    UserResponse response;
    double reward = 0.0;
};

struct Trajectory {
    UserId user = 0;
    std::vector<TrajectoryStep> steps;
    Outcome outcome = Outcome::Running;
    double value = 0.0;  // R_0

    std::vector<double> rewards() const;
};

/// The simulated user a plan is searched against.
struct Simulator {
    const Catalog& catalog;
    std::vector<ItemId> targets;
    EpisodeConfig config;

    StepResult step(const ConversationState& state, const Action& action) const;
};

struct TreeNode {
    ConversationState state;
    int id = 0;
    int visits = 0;
    /// Simulations whose trajectory ended at this node.
    int stops = 0;
    bool expanded = false;
    std::array<std::unique_ptr<TreeNode>, 2> children;  // indexed by ActionKind
    std::array<double, 2> q{0.0, 0.0};
    std::array<Action, 2> actions;
    std::array<UserResponse, 2> responses;
    std::array<double, 2> rewards{0.0, 0.0};
    /// Every tail return routed through each edge, in order.
    std::array<std::vector<double>, 2> returns;

    bool terminal() const { return !state.running(); }
    TreeNode* child(ActionKind kind) const { return children[static_cast<int>(kind)].get(); }
};

/// UCT with natural log; unvisited children first (ask before rec);
/// children with q = -inf are never chosen.
ActionKind uct_select(const TreeNode& node, double w);

struct SelectedPath {
    std::vector<TreeNode*> nodes;  // root .. leaf
    std::vector<ActionKind> kinds;  // edge taken out of nodes[i]
    Trajectory partial;
};

SelectedPath select_path(TreeNode& root, double w);

/// Attaches both children; each edge's q starts at the best Q of its sub
/// action space, masked types get -inf and no child.
void expand(TreeNode& leaf, Agent& agent, const Simulator& sim, int& next_id);

/// Policy-then-Q continuation until success or failure.
std::vector<TrajectoryStep> rollout(const ConversationState& from, Agent& agent, const Simulator& sim,
                                    SelectMode mode = SelectMode::Greedy, std::mt19937_64* rng = nullptr);

/// Walks the path, bumping visit counts and folding tail returns into each
/// edge's running mean.
void backprop(const std::vector<TreeNode*>& nodes, const std::vector<ActionKind>& kinds,
              const std::vector<double>& rewards, double gamma);

struct PlanResult {
    std::unique_ptr<TreeNode> root;
    std::vector<Trajectory> trajectories;
    int node_count = 0;
};

PlanResult plan_user(const ConversationState& start, Agent& agent, const Simulator& sim, const PlannerConfig& config);

/// Index of the highest R_0; earliest wins ties.
std::size_t best_trajectory(const std::vector<Trajectory>& trajectories);

/// One line per node: id, parent, edge, turn, visits, per-type q, actions.
void dump_tree(const PlanResult& plan, std::ostream& out);

}  // namespace converse
