#include "converse/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace converse {

Action AgentPolicy::act(const ConversationState& state, std::mt19937_64& rng) {
    return agent_.select_action(state, mode_, &rng);
}

Action top_items_by_score(const ConversationState& state, const ParameterSet& params, int k_v) {
    std::vector<double> scores;
    {
        ad::NoGradGuard guard;
        const ad::Matrix m = matching_scores(params, state.user, state.accepted_values, state.rejected_values,
                                        state.candidate_items)
                            .value();
        scores.assign(m.data(), m.data() + m.size());
    }
    return compose_recommendation(state, scores, k_v);
}

Action AbsGreedyPolicy::act(const ConversationState& state, std::mt19937_64&) {
    return top_items_by_score(state, params_, config_.k_v);
}

std::vector<double> value_entropies(const Catalog& catalog, const ConversationState& state) {
    const double n = static_cast<double>(state.candidate_items.size());
    std::vector<double> h;
    h.reserve(state.candidate_values.size());
    for (ValueId p : state.candidate_values) {
        std::size_t count = 0;
        for (ItemId v : state.candidate_items) count += catalog.item_has_value(v, p) ? 1 : 0;
        const double f = n > 0 ? static_cast<double>(count) / n : 0.0;
        double e = 0.0;
        if (f > 0.0 && f < 1.0) e = -f * std::log2(f) - (1.0 - f) * std::log2(1.0 - f);
        h.push_back(e);
    }
    return h;
}

Action MaxEntropyPolicy::question(const ConversationState& state) const {
    return compose_question(catalog_, state, value_entropies(catalog_, state), config_.k_p);
}

Action MaxEntropyPolicy::act(const ConversationState& state, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool recommend = unit(rng) < p_rec_;
    if (recommend || !state.can_ask()) return top_items_by_score(state, params_, config_.k_v);
    return question(state);
}

EpisodeRecord run_episode(Policy& policy, const Catalog& catalog, UserId user, const std::vector<ItemId>& targets,
                          const EpisodeConfig& config, std::mt19937_64& rng) {
    EpisodeRecord rec;
    rec.user = user;
    rec.targets = targets;
    ConversationState state = init_session(catalog, user, targets, rng);
    rec.trace.push_back(seed_record(state));
    std::vector<double> rewards;
    while (state.running()) {
        const Action a = policy.act(state, rng);
        validate_action(state, a, catalog, config);
        StepResult r = step(catalog, state, a, targets, config);
        rec.kinds.push_back(a.kind);
        rec.lists.push_back(a.kind == ActionKind::Rec ? a.payload : std::vector<ItemId>{});
        rec.trace.push_back(turn_record(r.next, a, r.response, r.reward));
        rewards.push_back(r.reward);
        state = std::move(r.next);
    }
    rec.outcome = state.outcome;
    rec.turns = state.turn;
    rec.value = cumulative_return(rewards, config.gamma, 0);
    return rec;
}

double hdcg(const EpisodeRecord& record, int t_max, int k_v) {
    double total = 0.0;
    const int turns = std::min<int>(t_max, static_cast<int>(record.lists.size()));
    for (int t = 1; t <= turns; ++t) {
        const auto& list = record.lists[t - 1];
        const int k_end = std::min<int>(k_v, static_cast<int>(list.size()));
        for (int k = 1; k <= k_end; ++k) {
            if (std::find(record.targets.begin(), record.targets.end(), list[k - 1]) == record.targets.end()) continue;
            const double lo = 1.0 / std::log2(t + 2.0);
            const double hi = 1.0 / std::log2(t + 1.0);
            total += lo + (hi - lo) / std::log2(k + 1.0);
            break;
        }
    }
    return total;
}

MetricsReport aggregate(const std::vector<EpisodeRecord>& records, const EpisodeConfig& config) {
    if (records.empty()) throw std::invalid_argument("aggregate: no episodes");
    MetricsReport r;
    r.episodes = records.size();
    for (const auto& e : records) {
        const bool ok = e.outcome == Outcome::Success;
        r.sr += ok ? 1.0 : 0.0;
        r.at += ok ? e.turns : config.t_max;
        r.hdcg += hdcg(e, config.t_max, config.k_v);
    }
    const double n = static_cast<double>(records.size());
    r.sr /= n;
    r.at /= n;
    r.hdcg /= n;
    return r;
}

std::map<std::string, double> action_pattern_stats(const std::vector<EpisodeRecord>& records, int n) {
    if (n < 1) throw std::invalid_argument("pattern length must be at least 1");
    if (records.empty()) throw std::invalid_argument("action_pattern_stats: no episodes");
    std::map<std::string, double> freq;
    for (const auto& e : records) {
        std::string s;
        for (ActionKind k : e.kinds) s += k == ActionKind::Ask ? 'A' : 'R';
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) freq[s.substr(i, n)] += 1.0;
    }
    for (auto& [_, v] : freq) v /= static_cast<double>(records.size());
    return freq;
}

std::vector<EpisodeRecord> evaluate_policy(Policy& policy, const Catalog& targets, const EpisodeConfig& config,
                                           const EvalConfig& eval) {
    std::vector<EpisodeRecord> out;
    for (UserId u = 0; u < targets.num_users(); ++u) {
        const auto& items = targets.interactions(u);
        if (items.empty() || shared_values(targets, items).empty()) continue;
        for (int e = 0; e < eval.episodes_per_user; ++e) {
            std::seed_seq seq{static_cast<std::uint32_t>(eval.seed), static_cast<std::uint32_t>(eval.seed >> 32),
                              static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(e)};
            std::mt19937_64 rng(seq);
            out.push_back(run_episode(policy, targets, u, items, config, rng));
        }
    }
    return out;
}

std::string report_line(const MetricsReport& report, const std::string& label) {
    nlohmann::ordered_json j;
    j["policy"] = label;
    j["episodes"] = report.episodes;
    j["sr"] = report.sr;
    j["at"] = report.at;
    j["hdcg"] = report.hdcg;
    return j.dump();
}

void write_report(const MetricsReport& report, const std::string& label, std::ostream& out) {
    out << std::left << std::setw(14) << "policy" << std::setw(10) << "episodes" << std::setw(10) << "SR"
        << std::setw(10) << "AT" << "hDCG" << '\n';
    out << std::setw(14) << label << std::setw(10) << report.episodes << std::fixed << std::setprecision(4)
        << std::setw(10) << report.sr << std::setw(10) << report.at << report.hdcg << '\n';
    out << std::defaultfloat;
}

}  // namespace converse
