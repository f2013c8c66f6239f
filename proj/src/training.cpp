#include "converse/training.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

namespace converse {

using ad::Index;
using ad::Tensor;

const char* to_string(TrainMode mode) { return mode == TrainMode::Sapient ? "sapient" : "sapient-e"; }

TrainMode parse_mode(const std::string& text) {
    if (text == "sapient") return TrainMode::Sapient;
    if (text == "sapient-e") return TrainMode::SapientE;
    throw std::invalid_argument("unknown training mode '" + text + "' (expected sapient or sapient-e)");
}

std::vector<Experience> to_experiences(const Trajectory& trajectory, bool from_best) {
    std::vector<Experience> out;
    const auto& steps = trajectory.steps;
    out.reserve(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        Experience e;
        e.state = steps[i].state;
        e.kind = steps[i].kind;
        e.action = steps[i].action.payload.front();
        e.reward = steps[i].reward;
        e.terminal = i + 1 == steps.size();
        if (!e.terminal) {
            e.next = steps[i + 1].state;
            e.next_kind = steps[i + 1].kind;
        }
        e.from_best = from_best;
        out.push_back(std::move(e));
    }
    return out;
}

ReplayMemory::ReplayMemory(std::size_t capacity, double alpha) : capacity_(capacity), alpha_(alpha) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
    if (alpha < 0.0) throw std::invalid_argument("priority exponent must be non-negative");
    while (leaves_ < capacity_) leaves_ *= 2;
    tree_.assign(2 * leaves_, 0.0);
    data_.reserve(std::min<std::size_t>(capacity_, 1024));
}

void ReplayMemory::update_tree(std::size_t slot, double value) {
    std::size_t i = leaves_ + slot;
    tree_[i] = value;
    for (i /= 2; i >= 1; i /= 2) tree_[i] = tree_[2 * i] + tree_[2 * i + 1];
}

void ReplayMemory::add(Experience e) {
    const std::size_t slot = next_;
    if (data_.size() < capacity_) {
        data_.push_back(std::move(e));
        priority_.push_back(max_priority_);
    } else {
        data_[slot] = std::move(e);
        priority_[slot] = max_priority_;
    }
    update_tree(slot, std::pow(max_priority_, alpha_));
    next_ = (next_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
    ++added_;
}

void ReplayMemory::set_priority(std::size_t slot, double p) {
    if (slot >= size_) throw std::out_of_range("replay slot out of range");
    if (!(p > 0.0)) throw std::invalid_argument("priorities must be positive");
    priority_[slot] = p;
    max_priority_ = std::max(max_priority_, p);
    update_tree(slot, std::pow(p, alpha_));
}

double ReplayMemory::probability(std::size_t slot) const { return tree_[leaves_ + slot] / total(); }

std::size_t ReplayMemory::find(double mass) const {
    std::size_t i = 1;
    while (i < leaves_) {
        const std::size_t left = 2 * i;
        if (mass < tree_[left] || tree_[left + 1] <= 0.0) {
            i = left;
        } else {
            mass -= tree_[left];
            i = left + 1;
        }
    }
    return std::min(i - leaves_, size_ - 1);
}

Batch sample_batch(const ReplayMemory& memory, std::size_t batch, double beta, std::mt19937_64& rng) {
    if (memory.size() == 0) throw std::invalid_argument("cannot sample from an empty memory");
    double min_mass = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < memory.size(); ++i) min_mass = std::min(min_mass, std::pow(memory.priority(i), memory.alpha()));
    const double p_min = min_mass / memory.total();
    std::uniform_real_distribution<double> unit(0.0, memory.total());
    Batch b;
    b.slots.reserve(batch);
    b.weights.reserve(batch);
    for (std::size_t k = 0; k < batch; ++k) {
        const std::size_t slot = memory.find(unit(rng));
        b.slots.push_back(slot);
        // (M p_i)^-beta / (M p_min)^-beta
        b.weights.push_back(std::pow(memory.probability(slot) / p_min, -beta));
    }
    return b;
}

Tensor policy_loss(const Tensor& states, std::span<const ActionKind> kinds, std::span<const double> weights,
                   const ParameterSet& params) {
    const Index n = states.rows();
    std::vector<Index> rows(static_cast<std::size_t>(n)), cols;
    std::iota(rows.begin(), rows.end(), 0);
    for (ActionKind k : kinds) cols.push_back(static_cast<Index>(k));
    const Tensor logp = ad::pick(ad::log_softmax_rows(policy_logits(states, params)), rows, cols);
    ad::Matrix w(n, 1);
    for (Index i = 0; i < n; ++i) w(i, 0) = weights[i];
    return ad::scale(ad::sum(ad::scale_rows(logp, w)), -1.0 / static_cast<double>(n));
}

Tensor q_pairs(const Tensor& states, const ParameterSet& params, std::span<const ActionKind> kinds,
               std::span<const std::int32_t> candidates) {
    const Index d = states.cols();
    const auto n_ask = static_cast<Index>(std::count(kinds.begin(), kinds.end(), ActionKind::Ask));
    std::vector<Index> values, items, order;
    Index vi = 0, ii = n_ask;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        if (kinds[i] == ActionKind::Ask) {
            values.push_back(candidates[i]);
            order.push_back(vi++);
        } else {
            items.push_back(candidates[i]);
            order.push_back(ii++);
        }
    }
    std::vector<Tensor> parts;
    if (!values.empty()) parts.push_back(ad::gather_rows(params["emb.value"], values));
    if (!items.empty()) parts.push_back(ad::gather_rows(params["emb.item"], items));
    const Tensor e = ad::gather_rows(ad::concat_rows(parts), order);
    const Tensor& w1 = params["qa.w1"];
    const Tensor pre = ad::add(ad::matmul(states, ad::slice_rows(w1, 0, d)), ad::matmul(e, ad::slice_rows(w1, d, d)));
    const Tensor hidden = ad::leaky_relu(ad::add_bias(pre, params["qa.b1"]));
    const Tensor adv = ad::add_bias(ad::matmul(hidden, params["qa.w2"]), params["qa.b2"]);
    const Tensor hv = ad::leaky_relu(ad::add_bias(ad::matmul(states, params["qv.w1"]), params["qv.b1"]));
    const Tensor value = ad::add_bias(ad::matmul(hv, params["qv.w2"]), params["qv.b2"]);
    return ad::add(adv, value);
}

Tensor q_loss(const Tensor& states, std::span<const ActionKind> kinds, std::span<const std::int32_t> actions,
              std::span<const double> targets, std::span<const double> weights, const ParameterSet& params,
              std::vector<double>* td_errors) {
    const Index n = states.rows();
    const Tensor q = q_pairs(states, params, kinds, actions);
    ad::Matrix y(n, 1), w(n, 1);
    for (Index i = 0; i < n; ++i) {
        y(i, 0) = targets[i];
        w(i, 0) = weights[i];
    }
    const Tensor diff = ad::sub(q, Tensor(y));
    if (td_errors) {
        td_errors->assign(diff.value().data(), diff.value().data() + n);
    }
    return ad::scale(ad::sum(ad::scale_rows(ad::mul(diff, diff), w)), 1.0 / static_cast<double>(n));
}

double td_target(const Experience& e, Agent& target, double gamma) {
    if (e.terminal) return e.reward;
    const StateEvaluation& ev = target.evaluate(e.next);
    const double best = e.next_kind == ActionKind::Ask ? ev.best_q_ask : ev.best_q_rec;
    return e.reward + gamma * best;
}

std::vector<std::size_t> rank_trajectories(const std::vector<Trajectory>& trajectories) {
    std::vector<std::size_t> order(trajectories.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return trajectories[a].value > trajectories[b].value; });
    return order;
}

Tensor plackett_luce_loss(const Tensor& scores) {
    const Index n = scores.rows();
    std::vector<Tensor> norms;
    norms.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) norms.push_back(ad::log_sum_exp(ad::slice_rows(scores, i, n - i)));
    return ad::sub(ad::sum(ad::concat_rows(norms)), ad::sum(scores));
}

Tensor listwise_loss(const std::vector<Trajectory>& trajectories, const StateEncoder& encode,
                     const ParameterSet& params) {
    if (trajectories.empty()) throw std::invalid_argument("listwise_loss: no trajectories");
    std::unordered_map<std::string, Index> row_of;
    std::vector<Tensor> states;
    const auto order = rank_trajectories(trajectories);
    std::vector<std::vector<Index>> rows(order.size()), cols(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        for (const auto& s : trajectories[order[r]].steps) {
            auto [it, fresh] = row_of.try_emplace(s.state.key(), static_cast<Index>(states.size()));
            if (fresh) states.push_back(encode(s.state));
            rows[r].push_back(it->second);
            cols[r].push_back(static_cast<Index>(s.kind));
        }
    }
    const Tensor logp = ad::log_softmax_rows(policy_logits(ad::concat_rows(states), params));
    std::vector<Tensor> scores;
    scores.reserve(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) scores.push_back(ad::sum(ad::pick(logp, rows[r], cols[r])));
    return plackett_luce_loss(ad::concat_rows(scores));
}

void TrainConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (batch < 1) throw std::invalid_argument("batch must be positive");
    if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
    if (target_sync < 1) throw std::invalid_argument("target sync period must be positive");
    if (memory < 1) throw std::invalid_argument("memory size must be positive");
    if (alpha < 0.0 || beta < 0.0 || !(priority_eps > 0.0)) throw std::invalid_argument("bad replay exponents");
    if (eval_every < 0) throw std::invalid_argument("eval_every must be non-negative");
    if (valid_episodes < 1) throw std::invalid_argument("valid_episodes must be positive");
}

Trainer::Trainer(const Catalog& train, const Catalog* valid, const ModelDims& dims, const EpisodeConfig& episode,
                 const PlannerConfig& planner, const TrainConfig& config, ParameterSet params)
    : train_(train),
      valid_(valid),
      dims_(dims),
      episode_(episode),
      planner_(planner),
      config_(config),
      graph_(build_global_graph(train)),
      index_(build_graph_index(graph_)),
      params_(std::move(params)),
      target_(params_.clone()),
      adam_(AdamConfig{config.lr}),
      memory_(config.memory, config.alpha),
      agent_(train_, index_, params_, dims_, episode_),
      target_agent_(train_, index_, target_, dims_, episode_) {
    config_.validate();
    episode_.validate();
    planner_.validate();
    for (UserId u = 0; u < train_.num_users(); ++u) {
        const auto& items = train_.interactions(u);
        if (!items.empty() && !shared_values(train_, items).empty()) users_.push_back(u);
    }
    if (users_.empty()) throw std::invalid_argument("no trainable user: every user needs items sharing a value");
}

void Trainer::restore(const Checkpoint& ckpt) {
    if (!(ckpt.dims == dims_)) throw ModelError("checkpoint dimensions differ from the configured model");
    if (ckpt.catalog_fingerprint != train_.fingerprint()) throw ModelError("checkpoint was trained on another catalog");
    params_.copy_values_from(ckpt.params);
    if (ckpt.target.entries().empty()) target_.copy_values_from(params_);
    else target_.copy_values_from(ckpt.target);
    adam_.first_moment() = ckpt.adam_m;
    adam_.second_moment() = ckpt.adam_v;
    adam_.set_steps(ckpt.adam_steps);
    step_ = ckpt.step;
    agent_.refresh();
    target_agent_.refresh();
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.dims = dims_;
    c.catalog_fingerprint = train_.fingerprint();
    c.step = step_;
    c.mode = to_string(config_.mode);
    c.params = params_.clone();
    c.target = target_.clone();
    c.adam_steps = adam_.steps();
    c.adam_m = adam_.first_moment();
    c.adam_v = adam_.second_moment();
    return c;
}

PlanResult Trainer::plan_and_store(UserId user, std::mt19937_64& rng, StepMetrics& metrics) {
    const auto& targets = train_.interactions(user);
    const ConversationState start = init_session(train_, user, targets, rng);
    Simulator sim{train_, targets, episode_};
    PlannerConfig pc = planner_;
    pc.seed = rng();
    PlanResult plan = plan_user(start, agent_, sim, pc);
    const std::size_t best = best_trajectory(plan.trajectories);
    metrics.plan_best_return = plan.trajectories[best].value;
    std::size_t wins = 0;
    for (const auto& t : plan.trajectories) wins += t.outcome == Outcome::Success ? 1 : 0;
    metrics.plan_success = static_cast<double>(wins) / static_cast<double>(plan.trajectories.size());
    metrics.planned = plan.trajectories.size();
    for (std::size_t i = 0; i < plan.trajectories.size(); ++i) {
        if (config_.mode == TrainMode::Sapient && i != best) continue;
        for (auto& e : to_experiences(plan.trajectories[i], i == best)) {
            memory_.add(std::move(e));
            ++metrics.stored;
        }
    }
    metrics.memory = memory_.size();
    return plan;
}

StepMetrics Trainer::train_step(std::mt19937_64& rng, const std::vector<Trajectory>* fresh) {
    StepMetrics m;
    if (memory_.size() < static_cast<std::size_t>(config_.batch)) {
        throw std::runtime_error("not enough experiences for one batch");
    }
    const Batch batch = sample_batch(memory_, static_cast<std::size_t>(config_.batch), config_.beta, rng);
    const std::size_t n = batch.slots.size();
    std::vector<ActionKind> kinds(n);
    std::vector<std::int32_t> actions(n);
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Experience& e = memory_.at(batch.slots[i]);
        kinds[i] = e.kind;
        actions[i] = e.action;
        targets[i] = td_target(e, target_agent_, episode_.gamma);
    }

    params_.zero_grad();
    const GlobalEncoding global = encode_global(index_, params_, dims_);
    std::unordered_map<std::string, Tensor> encoded;
    auto encode = [&](const ConversationState& s) {
        auto [it, fresh_state] = encoded.try_emplace(s.key());
        if (fresh_state) it->second = encode_state(train_, s, global, params_, dims_);
        return it->second;
    };
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) rows.push_back(encode(memory_.at(batch.slots[i]).state));
    const Tensor states = ad::concat_rows(rows);

    std::vector<double> td;
    Tensor total = q_loss(states, kinds, actions, targets, batch.weights, params_, &td);
    m.loss_q = total.item();
    if (config_.mode == TrainMode::Sapient) {
        const Tensor lp = policy_loss(states, kinds, batch.weights, params_);
        m.loss_policy = lp.item();
        total = ad::add(total, lp);
    } else if (fresh != nullptr) {
        const Tensor ll = listwise_loss(*fresh, encode, params_);
        m.loss_listwise = ll.item();
        m.ranked = fresh->size();
        total = ad::add(total, ll);
    }
    total.backward();
    adam_.step(params_);
    agent_.refresh();
    for (std::size_t i = 0; i < n; ++i) memory_.set_priority(batch.slots[i], std::abs(td[i]) + config_.priority_eps);
    m.trained = true;
    return m;
}

StepMetrics Trainer::step() {
    ++step_;
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(step_), static_cast<std::uint32_t>(step_ >> 32)};
    std::mt19937_64 rng(seq);
    StepMetrics m;
    std::uniform_int_distribution<std::size_t> pick(0, users_.size() - 1);
    m.user = users_[pick(rng)];
    PlanResult plan = plan_and_store(m.user, rng, m);
    if (memory_.size() >= static_cast<std::size_t>(config_.batch)) {
        const StepMetrics t =
            train_step(rng, config_.mode == TrainMode::SapientE ? &plan.trajectories : nullptr);
        m.trained = true;
        m.loss_policy = t.loss_policy;
        m.loss_q = t.loss_q;
        m.loss_listwise = t.loss_listwise;
        m.ranked = t.ranked;
    }
    if (step_ % config_.target_sync == 0) {
        sync_target(params_, target_);
        target_agent_.refresh();
        ++syncs_;
        m.synced = true;
    }
    if (valid_ != nullptr && config_.eval_every > 0 && step_ % config_.eval_every == 0) {
        AgentPolicy policy(agent_);
        m.valid = aggregate(evaluate_policy(policy, *valid_, episode_, EvalConfig{config_.valid_episodes, config_.seed}), episode_);
    }
    m.step = step_;
    m.memory = memory_.size();
    return m;
}

void Trainer::run(std::ostream* metrics, const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const StepMetrics&)>& on_step) {
    if (out_dir) std::filesystem::create_directories(*out_dir);
    while (step_ < config_.steps) {
        const auto t0 = std::chrono::steady_clock::now();
        const StepMetrics m = step();
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (metrics) {
            *metrics << metrics_line(m, config_.mode, config_.log_wall_time ? std::optional<double>(ms) : std::nullopt)
                     << '\n';
        }
        if (on_step) on_step(m);
        if (m.valid) {
            spdlog::info("step {} valid SR {:.3f} AT {:.2f} hDCG {:.3f}", m.step, m.valid->sr, m.valid->at,
                         m.valid->hdcg);
            if (m.valid->sr > best_valid_) {
                best_valid_ = m.valid->sr;
                best_ = checkpoint();
                if (out_dir) save_checkpoint(*best_, *out_dir / "best.ckpt");
            }
        } else if (m.step % 100 == 0) {
            spdlog::debug("step {} memory {} loss_q {:.4f}", m.step, m.memory, m.loss_q);
        }
    }
    if (out_dir) {
        save_checkpoint(checkpoint(), *out_dir / "last.ckpt");
        // a resumed run that never validated keeps the earlier best
        if (!best_ && !std::filesystem::exists(*out_dir / "best.ckpt")) {
            save_checkpoint(checkpoint(), *out_dir / "best.ckpt");
        }
    }
}

Checkpoint Trainer::best_checkpoint() const { return best_ ? *best_ : checkpoint(); }

std::string metrics_line(const StepMetrics& m, TrainMode mode, std::optional<double> wall_ms) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["mode"] = to_string(mode);
    j["user"] = m.user;
    j["trained"] = m.trained;
    j["synced"] = m.synced;
    j["loss_policy"] = m.loss_policy;
    j["loss_q"] = m.loss_q;
    j["loss_listwise"] = m.loss_listwise;
    j["plan_best_return"] = m.plan_best_return;
    j["plan_success"] = m.plan_success;
    j["stored"] = m.stored;
    j["memory"] = m.memory;
    j["planned"] = m.planned;
    j["ranked"] = m.ranked;
    if (m.valid) {
        j["valid_sr"] = m.valid->sr;
        j["valid_at"] = m.valid->at;
        j["valid_hdcg"] = m.valid->hdcg;
    }
    if (wall_ms) j["wall_ms"] = *wall_ms;
    return j.dump();
}

}  // namespace converse
