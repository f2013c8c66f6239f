#include "support.hpp"

#include "converse/env.hpp"

#include <doctest.h>
#include <json.hpp>

#include <numeric>
#include <random>
#include <set>

using namespace converse;

namespace {

using testing::Replay;

void check_against_oracle(const Catalog& c, const ConversationState& s, const Replay& h) {
    const testing::Rebuilt r = testing::set_builder(c, s.seed_value, h);
    CHECK(s.candidate_items == r.items);
    CHECK(s.candidate_values == r.values);
    CHECK(s.accepted_values == r.accepted);
    CHECK(s.rejected_values == r.rejected);
    CHECK(s.rejected_items == r.rejected_items);
}

}  // namespace

TEST_CASE("reward anchors") {
    EpisodeConfig cfg;
    ConversationState next;
    next.turn = 3;
    Action ask{ActionKind::Ask, {0, 1, 2, 3, 4}};
    UserResponse r;
    r.accepted_values = {0, 1};
    r.rejected_values = {2, 3, 4};
    CHECK(reward(ask, r, next, cfg) == doctest::Approx(-0.28).epsilon(1e-12));

    Action rec{ActionKind::Rec, {7}};
    UserResponse hit;
    hit.accepted_items = {7};
    hit.hit = true;
    next.outcome = Outcome::Success;
    CHECK(reward(rec, hit, next, cfg) == 1.0);

    next.turn = 15;
    next.outcome = Outcome::Fail;
    CHECK(reward(rec, UserResponse{}, next, cfg) == doctest::Approx(-0.4).epsilon(1e-12));
}

TEST_CASE("cumulative return") {
    const double r[] = {-0.1, 1.0};
    CHECK(cumulative_return(r, 0.999, 0) == doctest::Approx(0.899).epsilon(1e-12));
    CHECK(cumulative_return(std::span(r).subspan(1), 0.999, 0) == 1.0);
    const double one[] = {0.3};
    CHECK(cumulative_return(one, 0.5, 0) == 0.3);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> xs(10);
        for (double& x : xs) x = u(rng);
        for (std::size_t start = 0; start < xs.size(); ++start) {
            double expected = 0.0;
            for (std::size_t k = start; k < xs.size(); ++k) expected += std::pow(0.9, static_cast<double>(k - start)) * xs[k];
            CHECK(cumulative_return(xs, 0.9, start) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("single-valued seed types rule out their sibling values") {
    const Catalog c = testing::toy_catalog();
    // seed "red": blue and green become unacceptable
    const ConversationState s = init_session_with_seed(c, 0, 0);
    CHECK(s.accepted_values == std::vector<ValueId>{0});
    CHECK(s.rejected_values == std::vector<ValueId>{1, 2});
    CHECK(s.candidate_values == std::vector<ValueId>{3, 4, 5});
    CHECK(s.candidate_items == c.value_items(0));
    CHECK(s.turn == 0);
    CHECK(s.running());

    // multi-valued tag type: no inference
    const ConversationState t = init_session_with_seed(c, 0, 3);
    CHECK(t.rejected_values.empty());
    CHECK(t.candidate_values == std::vector<ValueId>{0, 1, 2, 4, 5});
    CHECK(t.candidate_items == c.value_items(3));
}

TEST_CASE("a single shared value fixes the seed") {
    const Catalog c = testing::toy_catalog();
    std::mt19937_64 rng(9);
    for (int i = 0; i < 5; ++i) CHECK(init_session(c, 0, {0, 2, 6}, rng).seed_value == 0);
    CHECK(init_session(c, 2, {1, 5}, rng).seed_value == 4);  // items 1, 5 share only b
}

TEST_CASE("seed draws need a shared value and owned targets") {
    const Catalog c = testing::toy_catalog();
    std::mt19937_64 rng(9);
    CHECK_THROWS_AS(init_session(c, 0, {3}, rng), EnvError);  // not an interaction of user 0
    CHECK(init_session(c, 2, {5}, rng).running());
}

TEST_CASE("simulated user answers from the target items") {
    const Catalog c = testing::toy_catalog();
    const ConversationState s = init_session_with_seed(c, 0, 0);
    const std::vector<ItemId> targets{0};  // red, a
    const UserResponse r = simulate_user(c, s, {ActionKind::Ask, {3, 4}}, targets);
    CHECK(r.accepted_values == std::vector<ValueId>{3});
    CHECK(r.rejected_values == std::vector<ValueId>{4});
    CHECK(simulate_user(c, s, {ActionKind::Ask, {4, 5}}, targets).accepted_values.empty());
    CHECK(simulate_user(c, s, {ActionKind::Rec, {6, 0}}, targets).hit);
    CHECK_FALSE(simulate_user(c, s, {ActionKind::Rec, {6, 2}}, targets).hit);
}

TEST_CASE("transition narrows candidates") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    const ConversationState s = init_session_with_seed(c, 0, 0);  // candidates 0 1 2 6
    StepResult miss = step(c, s, {ActionKind::Rec, {1, 2}}, {0}, cfg);
    CHECK(miss.next.rejected_items == std::vector<ItemId>{1, 2});
    CHECK(miss.next.candidate_items == std::vector<ItemId>{0, 6});
    CHECK(miss.reward == doctest::Approx(-0.1));
    CHECK(miss.next.turn == 1);

    // rejecting tag c removes item 6
    StepResult ask = step(c, miss.next, {ActionKind::Ask, {3, 5}}, {0}, cfg);
    CHECK(ask.response.accepted_values == std::vector<ValueId>{3});
    CHECK(ask.next.candidate_items == std::vector<ItemId>{0});
    CHECK(ask.next.candidate_values == std::vector<ValueId>{4});
    CHECK(ask.reward == doctest::Approx(0.01 - 0.1));

    StepResult hit = step(c, ask.next, {ActionKind::Rec, {0}}, {0}, cfg);
    CHECK(hit.next.outcome == Outcome::Success);
    CHECK(hit.reward == 1.0);
    CHECK(is_terminal(hit.next) == Outcome::Success);
    CHECK_THROWS_AS(step(c, hit.next, {ActionKind::Rec, {0}}, {0}, cfg), EnvError);
}

TEST_CASE("emptied candidate set fails with the quit penalty") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    const ConversationState s = init_session_with_seed(c, 1, 1);  // blue: items 3 4 7
    StepResult r = step_with_response(c, s, {ActionKind::Rec, {3, 4, 7}}, UserResponse{}, cfg);
    CHECK(r.next.candidate_items.empty());
    CHECK(r.next.outcome == Outcome::Fail);
    CHECK(r.reward == doctest::Approx(-0.4));
}

TEST_CASE("the turn cap ends the episode") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    cfg.t_max = 2;
    const ConversationState s = init_session_with_seed(c, 0, 3);
    StepResult a = step(c, s, {ActionKind::Ask, {4}}, {0}, cfg);
    CHECK(a.next.running());
    StepResult b = step(c, a.next, {ActionKind::Ask, {0}}, {0}, cfg);
    CHECK(b.next.outcome == Outcome::Fail);
    CHECK(b.next.turn == 2);
    CHECK(b.reward == doctest::Approx(0.01 - 0.3));
}

TEST_CASE("invalid actions and responses are rejected") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    cfg.k_v = 2;
    const ConversationState s = init_session_with_seed(c, 0, 0);
    CHECK_THROWS_AS(validate_action(s, {ActionKind::Ask, {0}}, c, cfg), EnvError);       // not a candidate
    CHECK_THROWS_AS(validate_action(s, {ActionKind::Ask, {3, 4, 5}}, c, cfg), EnvError);  // more than k_p
    CHECK_THROWS_AS(validate_action(s, {ActionKind::Rec, {0, 1, 2}}, c, cfg), EnvError);  // more than k_v
    CHECK_THROWS_AS(validate_action(s, {ActionKind::Rec, {3}}, c, cfg), EnvError);
    CHECK_THROWS_AS(validate_action(s, {ActionKind::Rec, {}}, c, cfg), EnvError);
    CHECK_NOTHROW(validate_action(s, {ActionKind::Ask, {3, 4}}, c, cfg));

    const ConversationState t = init_session_with_seed(c, 0, 3);
    CHECK_THROWS_AS(validate_action(t, {ActionKind::Ask, {0, 4}}, c, cfg), EnvError);  // mixed types

    UserResponse r;
    r.accepted_values = {3};
    CHECK_THROWS_AS(validate_response({ActionKind::Ask, {3, 4}}, r), EnvError);
    r.rejected_values = {4};
    CHECK_NOTHROW(validate_response({ActionKind::Ask, {3, 4}}, r));
    UserResponse h;
    h.accepted_items = {5};
    h.hit = true;
    CHECK_THROWS_AS(validate_response({ActionKind::Rec, {0}}, h), EnvError);
}

TEST_CASE("incremental transitions match the set-builder on random episodes") {
    EpisodeConfig cfg;
    cfg.k_v = 3;
    int episodes = 0;
    for (std::uint64_t seed = 1; episodes < 100; ++seed) {
        SyntheticSpec spec;
        spec.n_users = 6;
        spec.n_items = 30;
        spec.n_types = 4;
        spec.n_values_per_type = 3;
        spec.values_per_item = 5;  // leaves some types multi-valued
        spec.interactions_per_user = 3;
        spec.seed = seed;
        const Catalog c = generate_synthetic(spec);
        std::mt19937_64 rng(seed);
        for (UserId u = 0; u < c.num_users() && episodes < 100; ++u, ++episodes) {
            const auto& targets = c.interactions(u);
            ConversationState s = init_session(c, u, targets, rng);
            Replay h;
            for (const Mention& m : s.mentions) {
                if (m.kind == Mention::Kind::Value && !m.accepted) h.rejected.push_back(m.id);
            }
            check_against_oracle(c, s, h);
            while (s.running()) {
                for (ItemId v : targets) CHECK(testing::contains(s.candidate_items, v));
                const Action a = testing::random_action(c, s, cfg, rng);
                validate_action(s, a, c, cfg);
                const StepResult r = step(c, s, a, targets, cfg);
                CHECK(r.next.turn == s.turn + 1);
                CHECK(r.reward <= cfg.rewards.rec_accept);
                CHECK(r.reward >= cfg.k_p * cfg.rewards.ask_reject + cfg.rewards.quit);
                for (ItemId v : r.next.candidate_items) CHECK(testing::contains(s.candidate_items, v));
                if (r.next.outcome == Outcome::Success) break;
                for (ValueId p : r.response.accepted_values) h.accepted.push_back(p);
                for (ValueId p : r.response.rejected_values) h.rejected.push_back(p);
                if (a.kind == ActionKind::Rec) h.rejected_items.insert(h.rejected_items.end(), a.payload.begin(), a.payload.end());
                check_against_oracle(c, r.next, h);
                s = r.next;
            }
        }
    }
}

TEST_CASE("state keys identify states") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    const ConversationState s = init_session_with_seed(c, 0, 0);
    const auto a = step(c, s, {ActionKind::Ask, {3, 4}}, {0}, cfg).next;
    const auto b = step(c, s, {ActionKind::Ask, {4, 3}}, {0}, cfg).next;
    CHECK(a == b);
    CHECK(a.key() == b.key());
    CHECK(a.key() != s.key());
}

TEST_CASE("trace export records each turn") {
    const Catalog c = testing::toy_catalog();
    EpisodeConfig cfg;
    const ConversationState s = init_session_with_seed(c, 0, 0);
    CHECK(trace_line(seed_record(s)) == R"({"turn":0,"kind":"seed","payload":[0],"accepted":[0],"rejected":[1,2],"reward":0.0})");
    const Action a{ActionKind::Rec, {2, 1}};
    const StepResult r = step(c, s, a, {0}, cfg);
    const auto j = nlohmann::json::parse(trace_line(turn_record(r.next, a, r.response, r.reward)));
    CHECK(j["turn"] == 1);
    CHECK(j["kind"] == "rec");
    CHECK(j["payload"] == std::vector<int>{2, 1});
    CHECK(j["rejected"] == std::vector<int>{1, 2});
    CHECK(j["reward"].get<double>() == doctest::Approx(-0.1));
}
