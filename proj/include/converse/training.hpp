#pragma once

#include "converse/agent.hpp"
#include "converse/eval.hpp"
#include "converse/planner.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace converse {

enum class TrainMode : std::uint8_t { Sapient, SapientE };

const char* to_string(TrainMode mode);
TrainMode parse_mode(const std::string& text);

struct Experience {
    ConversationState state;
    ActionKind kind = ActionKind::Rec;
    std::int32_t action = 0;  // first element of the payload
    double reward = 0.0;
    ConversationState next;
    bool terminal = true;
    ActionKind next_kind = ActionKind::Rec;
    bool from_best = true;  // audit: came from the plan's best trajectory
};

/// Turns one trajectory into replay tuples.
std::vector<Experience> to_experiences(const Trajectory& trajectory, bool from_best);

/// FIFO ring buffer with a sum tree over priority^alpha.
class ReplayMemory {
public:
    explicit ReplayMemory(std::size_t capacity = 10000, double alpha = 0.6);

    /// New entries take the largest priority seen so far (1 when empty).
    void add(Experience e);
    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    double alpha() const { return alpha_; }
    const Experience& at(std::size_t slot) const { return data_.at(slot); }
    double priority(std::size_t slot) const { return priority_.at(slot); }
    void set_priority(std::size_t slot, double p);
    double max_priority() const { return max_priority_; }
    /// Sum of priority^alpha over stored entries.
    double total() const { return tree_[1]; }
    /// Sampling probability of a slot.
    double probability(std::size_t slot) const;
    /// Slot whose cumulative mass interval contains `mass`.
    std::size_t find(double mass) const;
    std::size_t total_added() const { return added_; }

private:
    void update_tree(std::size_t slot, double value);

    std::size_t capacity_;
    double alpha_;
    std::size_t leaves_ = 1;
    std::size_t next_ = 0;
    std::size_t size_ = 0;
    std::size_t added_ = 0;
    double max_priority_ = 1.0;
    std::vector<Experience> data_;
    std::vector<double> priority_;
    std::vector<double> tree_;
};

struct Batch {
    std::vector<std::size_t> slots;
    std::vector<double> weights;  // importance weights, max over memory = 1
};

/// Independent proportional draws with replacement.
Batch sample_batch(const ReplayMemory& memory, std::size_t batch, double beta, std::mt19937_64& rng);

/// mean_i w_i * -log pi(o_i | s_i); `states` is B x d.
ad::Tensor policy_loss(const ad::Tensor& states, std::span<const ActionKind> kinds, std::span<const double> weights,
                       const ParameterSet& params);

/// Q(a_i | s_i, o_i) for row-aligned kinds and candidates, B x 1.
ad::Tensor q_pairs(const ad::Tensor& states, const ParameterSet& params, std::span<const ActionKind> kinds,
                   std::span<const std::int32_t> candidates);

/// mean_i w_i * (Q_i - y_i)^2; writes Q_i - y_i into td_errors.
ad::Tensor q_loss(const ad::Tensor& states, std::span<const ActionKind> kinds, std::span<const std::int32_t> actions,
                  std::span<const double> targets, std::span<const double> weights, const ParameterSet& params,
                  std::vector<double>* td_errors = nullptr);

/// r + gamma * max_a' Q_target(a' | s', o'), or r when terminal.
double td_target(const Experience& e, Agent& target, double gamma);

/// Trajectory indices by descending return, earlier index first on ties.
std::vector<std::size_t> rank_trajectories(const std::vector<Trajectory>& trajectories);

/// Negative log Plackett-Luce likelihood of `scores` (N x 1, best first).
ad::Tensor plackett_luce_loss(const ad::Tensor& scores);

using StateEncoder = std::function<ad::Tensor(const ConversationState&)>;

/// Listwise loss over one planning call: trajectories are ranked by return and
/// scored by the summed log-probability of their action types.
ad::Tensor listwise_loss(const std::vector<Trajectory>& trajectories, const StateEncoder& encode,
                         const ParameterSet& params);

struct TrainConfig {
    TrainMode mode = TrainMode::Sapient;
    int steps = 2000;  // E
    int batch = 128;
    double lr = 1e-4;
    double alpha = 0.6;
    double beta = 0.4;
    double priority_eps = 1e-5;
    int target_sync = 20;
    std::size_t memory = 10000;
    int eval_every = 100;  // 0 disables validation
    int valid_episodes = 1;  // per validation user
    std::uint64_t seed = 1;
    bool log_wall_time = false;

    void validate() const;
};

struct StepMetrics {
    std::int64_t step = 0;
    UserId user = 0;
    bool trained = false;
    bool synced = false;
    double loss_policy = 0.0;
    double loss_q = 0.0;
    double loss_listwise = 0.0;
    double plan_best_return = 0.0;
    double plan_success = 0.0;
    std::size_t stored = 0;
    std::size_t planned = 0;  // trajectories returned by the planning call
    std::size_t ranked = 0;   // trajectories fed to the listwise loss
    std::size_t memory = 0;
    std::optional<MetricsReport> valid;
};

/// Owns the online and target parameters, the optimiser and the replay memory.
class Trainer {
public:
    Trainer(const Catalog& train, const Catalog* valid, const ModelDims& dims, const EpisodeConfig& episode,
            const PlannerConfig& planner, const TrainConfig& config, ParameterSet params);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    /// Continue from a checkpoint (parameters, target, optimiser moments, step).
    void restore(const Checkpoint& ckpt);

    /// One iteration of the self-training loop.
    StepMetrics step();

    /// Runs until config.steps total steps; writes one metrics line per step,
    /// keeps best.ckpt (by validation SR) and last.ckpt in `out_dir`.
    void run(std::ostream* metrics, const std::optional<std::filesystem::path>& out_dir,
             const std::function<void(const StepMetrics&)>& on_step = {});

    Checkpoint checkpoint() const;
    /// Snapshot with the best validation SR seen by run(); the current
    /// state when validation never ran.
    Checkpoint best_checkpoint() const;
    double best_valid_sr() const { return best_valid_; }
    const ParameterSet& params() const { return params_; }
    const ParameterSet& target() const { return target_; }
    const ReplayMemory& memory() const { return memory_; }
    std::int64_t steps_done() const { return step_; }
    std::int64_t syncs() const { return syncs_; }
    Agent& agent() { return agent_; }

    /// Gradient update only (no planning); needs memory.size() >= batch.
    StepMetrics train_step(std::mt19937_64& rng, const std::vector<Trajectory>* fresh);
    /// Plans for one user and stores the experiences the mode keeps.
    PlanResult plan_and_store(UserId user, std::mt19937_64& rng, StepMetrics& metrics);

private:
    const Catalog& train_;
    const Catalog* valid_;
    ModelDims dims_;
    EpisodeConfig episode_;
    PlannerConfig planner_;
    TrainConfig config_;
    GlobalGraph graph_;
    GraphIndex index_;
    ParameterSet params_;
    ParameterSet target_;
    Adam adam_;
    ReplayMemory memory_;
    Agent agent_;
    Agent target_agent_;
    std::vector<UserId> users_;
    std::int64_t step_ = 0;
    std::int64_t syncs_ = 0;
    double best_valid_ = -1.0;
    std::optional<Checkpoint> best_;
};

std::string metrics_line(const StepMetrics& m, TrainMode mode, std::optional<double> wall_ms);

}  // namespace converse
