#include "converse/planner.hpp"

#include <json.hpp>

#include <cmath>
#include <deque>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace converse {

namespace {

constexpr double kMasked = -std::numeric_limits<double>::infinity();

int slot(ActionKind kind) { return static_cast<int>(kind); }

}  // namespace

void PlannerConfig::validate() const {
    if (simulations < 1) throw std::invalid_argument("planner needs at least one simulation");
    if (!(w >= 0.0)) throw std::invalid_argument("exploration factor must be non-negative");
}

std::vector<double> Trajectory::rewards() const {
    std::vector<double> r;
    r.reserve(steps.size());
    for (const auto& s : steps) r.push_back(s.reward);
    return r;
}

StepResult Simulator::step(const ConversationState& state, const Action& action) const {
    return converse::step(catalog, state, action, targets, config);
}

ActionKind uct_select(const TreeNode& node, double w) {
    const auto* ask = node.child(ActionKind::Ask);
    const auto* rec = node.child(ActionKind::Rec);
    const bool ask_ok = ask != nullptr && node.q[0] != kMasked;
    const bool rec_ok = rec != nullptr && node.q[1] != kMasked;
    if (!ask_ok && !rec_ok) throw std::logic_error("uct_select: node has no selectable child");
    if (!rec_ok) return ActionKind::Ask;
    if (!ask_ok) return ActionKind::Rec;
    if (ask->visits == 0) return ActionKind::Ask;
    if (rec->visits == 0) return ActionKind::Rec;
    const double log_n = std::log(static_cast<double>(node.visits));
    const double s_ask = node.q[0] + w * std::sqrt(log_n / ask->visits);
    const double s_rec = node.q[1] + w * std::sqrt(log_n / rec->visits);
    return s_rec > s_ask ? ActionKind::Rec : ActionKind::Ask;
}

SelectedPath select_path(TreeNode& root, double w) {
    SelectedPath path;
    path.partial.user = root.state.user;
    TreeNode* node = &root;
    path.nodes.push_back(node);
    while (node->expanded && !node->terminal()) {
        const ActionKind o = uct_select(*node, w);
        const int i = slot(o);
        path.partial.steps.push_back({node->state, o, node->actions[i], node->responses[i], node->rewards[i]});
        path.kinds.push_back(o);
        node = node->children[i].get();
        path.nodes.push_back(node);
    }
    path.partial.outcome = node->state.outcome;
    return path;
}

void expand(TreeNode& leaf, Agent& agent, const Simulator& sim, int& next_id) {
    if (leaf.terminal()) throw std::logic_error("expand: terminal node");
    if (leaf.expanded) throw std::logic_error("expand: node already has children");
    const StateEvaluation& ev = agent.evaluate(leaf.state);
    for (ActionKind o : {ActionKind::Ask, ActionKind::Rec}) {
        const int i = slot(o);
        if (o == ActionKind::Ask && !ev.ask_allowed) {
            leaf.q[i] = kMasked;
            continue;
        }
        const Action a = o == ActionKind::Ask ? ev.question : ev.recommendation;
        StepResult r = sim.step(leaf.state, a);
        auto child = std::make_unique<TreeNode>();
        child->state = std::move(r.next);
        child->id = next_id++;
        leaf.children[i] = std::move(child);
        leaf.actions[i] = a;
        leaf.responses[i] = std::move(r.response);
        leaf.rewards[i] = r.reward;
        leaf.q[i] = o == ActionKind::Ask ? ev.best_q_ask : ev.best_q_rec;
    }
    leaf.expanded = true;
}

std::vector<TrajectoryStep> rollout(const ConversationState& from, Agent& agent, const Simulator& sim,
                                    SelectMode mode, std::mt19937_64* rng) {
    std::vector<TrajectoryStep> steps;
    ConversationState state = from;
    while (state.running()) {
        const ActionKind o = choose_type(agent.evaluate(state), mode, rng);
        Action a = agent.action_for_type(state, o);
        StepResult r = sim.step(state, a);
        steps.push_back({std::move(state), o, std::move(a), std::move(r.response), r.reward});
        state = std::move(r.next);
    }
    return steps;
}

void backprop(const std::vector<TreeNode*>& nodes, const std::vector<ActionKind>& kinds,
              const std::vector<double>& rewards, double gamma) {
    if (nodes.empty() || kinds.size() + 1 != nodes.size()) throw std::logic_error("backprop: malformed path");
    for (TreeNode* n : nodes) ++n->visits;
    ++nodes.back()->stops;
    for (std::size_t i = kinds.size(); i-- > 0;) {
        TreeNode& parent = *nodes[i];
        const int o = slot(kinds[i]);
        const double ret = cumulative_return(rewards, gamma, i);
        parent.q[o] += (ret - parent.q[o]) / static_cast<double>(nodes[i + 1]->visits);
        parent.returns[o].push_back(ret);
    }
}

PlanResult plan_user(const ConversationState& start, Agent& agent, const Simulator& sim, const PlannerConfig& config) {
    config.validate();
    if (!start.running()) throw std::invalid_argument("plan_user: conversation already finished");
    PlanResult plan;
    plan.root = std::make_unique<TreeNode>();
    plan.root->state = start;
    int next_id = 1;
    std::mt19937_64 rng(config.seed);
    for (int n = 0; n < config.simulations; ++n) {
        SelectedPath path = select_path(*plan.root, config.w);
        Trajectory traj = std::move(path.partial);
        TreeNode* leaf = path.nodes.back();
        if (!leaf->terminal()) {
            if (!leaf->expanded) expand(*leaf, agent, sim, next_id);
            auto suffix = rollout(leaf->state, agent, sim, config.rollout_mode, &rng);
            const ActionKind first = suffix.front().kind;
            path.nodes.push_back(leaf->child(first));
            path.kinds.push_back(first);
            for (auto& s : suffix) traj.steps.push_back(std::move(s));
        }
        const std::vector<double> rewards = traj.rewards();
        traj.value = cumulative_return(rewards, sim.config.gamma, 0);
        const TrajectoryStep& last = traj.steps.back();
        traj.outcome = last.kind == ActionKind::Rec && last.response.hit ? Outcome::Success : Outcome::Fail;
        backprop(path.nodes, path.kinds, rewards, sim.config.gamma);
        plan.trajectories.push_back(std::move(traj));
    }
    plan.node_count = next_id;
    return plan;
}

std::size_t best_trajectory(const std::vector<Trajectory>& trajectories) {
    if (trajectories.empty()) throw std::invalid_argument("best_trajectory: no trajectories");
    std::size_t best = 0;
    for (std::size_t i = 1; i < trajectories.size(); ++i) {
        if (trajectories[i].value > trajectories[best].value) best = i;
    }
    return best;
}

void dump_tree(const PlanResult& plan, std::ostream& out) {
    using nlohmann::ordered_json;
    auto q_json = [](double q) { return std::isinf(q) ? ordered_json(nullptr) : ordered_json(q); };
    std::deque<std::pair<const TreeNode*, std::pair<int, int>>> queue;  // node, (parent, edge)
    queue.push_back({plan.root.get(), {-1, -1}});
    while (!queue.empty()) {
        auto [node, link] = queue.front();
        queue.pop_front();
        ordered_json j;
        j["node"] = node->id;
        j["parent"] = link.first < 0 ? ordered_json(nullptr) : ordered_json(link.first);
        j["edge"] = link.second < 0 ? ordered_json(nullptr) : ordered_json(to_string(static_cast<ActionKind>(link.second)));
        j["turn"] = node->state.turn;
        j["outcome"] = to_string(node->state.outcome);
        j["visits"] = node->visits;
        j["stops"] = node->stops;
        j["candidates"] = node->state.candidate_items.size();
        if (node->expanded) {
            j["q_ask"] = q_json(node->q[0]);
            j["q_rec"] = q_json(node->q[1]);
            j["ask"] = node->children[0] ? ordered_json(node->actions[0].payload) : ordered_json(nullptr);
            j["rec"] = node->children[1] ? ordered_json(node->actions[1].payload) : ordered_json(nullptr);
            j["returns_ask"] = node->returns[0];
            j["returns_rec"] = node->returns[1];
        }
        out << "node " << j.dump() << '\n';
        for (int i = 0; i < 2; ++i) {
            if (node->children[i]) queue.push_back({node->children[i].get(), {node->id, i}});
        }
    }
    for (std::size_t i = 0; i < plan.trajectories.size(); ++i) {
        const Trajectory& t = plan.trajectories[i];
        std::string kinds;
        for (const auto& s : t.steps) kinds += s.kind == ActionKind::Ask ? 'A' : 'R';
        ordered_json j;
        j["index"] = i;
        j["return"] = t.value;
        j["outcome"] = to_string(t.outcome);
        j["actions"] = kinds;
        j["rewards"] = t.rewards();
        out << "trajectory " << j.dump() << '\n';
    }
}

}  // namespace converse
