#pragma once

#include "converse/autodiff.hpp"
#include "converse/catalog.hpp"
#include "converse/env.hpp"
#include "converse/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace converse::testing {

// colour is single-valued (red 0, blue 1, green 2); tag is multi-valued
// (a 3, b 4, c 5)
inline Catalog toy_catalog() {
    return Catalog({"colour", "tag"}, {"red", "blue", "green", "a", "b", "c"}, {0, 0, 0, 1, 1, 1},
                   {{0, 3}, {0, 4}, {0, 3, 4}, {1, 3}, {1, 5}, {2, 4, 5}, {0, 5}, {1, 3, 4}},
                   {{0, 2, 6}, {3, 7}, {1, 5}});
}

inline ModelDims toy_dims() {
    ModelDims d;
    d.d = 4;
    d.heads = 2;
    d.gat_layers = 2;
    d.pos_layers = 1;
    d.neg_layers = 1;
    d.seq_layers = 1;
    d.max_turns = 15;
    return d;
}

/// Perturbs every parameter entry by +-h and compares the central difference
/// of `loss` with the analytic gradient. Returns the largest per-tensor
/// relative error ||g - n|| / max(||g|| + ||n||, 1e-10).
inline double gradient_check(ParameterSet& params, const std::function<ad::Tensor()>& loss, double h = 1e-5,
                             std::string* worst = nullptr) {
    params.zero_grad();
    loss().backward();
    double max_err = 0.0;
    for (auto& e : params.entries()) {
        ad::Matrix analytic = e.tensor.has_grad() ? e.tensor.grad()
                                                  : ad::Matrix::Zero(e.tensor.rows(), e.tensor.cols());
        ad::Matrix numeric(e.tensor.rows(), e.tensor.cols());
        ad::Matrix& w = e.tensor.mutable_value();
        for (ad::Index i = 0; i < w.size(); ++i) {
            const double keep = w.data()[i];
            ad::NoGradGuard guard;
            w.data()[i] = keep + h;
            const double up = loss().item();
            w.data()[i] = keep - h;
            const double down = loss().item();
            w.data()[i] = keep;
            numeric.data()[i] = (up - down) / (2.0 * h);
        }
        const double err = (analytic - numeric).norm() / std::max(analytic.norm() + numeric.norm(), 1e-10);
        if (err > max_err) {
            max_err = err;
            if (worst) *worst = e.name;
        }
    }
    return max_err;
}

inline bool contains(const std::vector<std::int32_t>& v, std::int32_t x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

/// Feedback gathered over an episode, outside the seed turn's inference.
struct Replay {
    std::vector<ValueId> accepted, rejected;
    std::vector<ItemId> rejected_items;
};

struct Rebuilt {
    std::vector<ItemId> items;
    std::vector<ValueId> values, accepted, rejected;
    std::vector<ItemId> rejected_items;
};

// candidate sets rebuilt from the full history by the set-builder rule
inline Rebuilt set_builder(const Catalog& c, ValueId seed, const Replay& h) {
    std::set<ValueId> plus(h.accepted.begin(), h.accepted.end());
    plus.insert(seed);
    std::set<ValueId> minus(h.rejected.begin(), h.rejected.end());
    std::set<ItemId> vminus(h.rejected_items.begin(), h.rejected_items.end());
    Rebuilt r;
    for (ItemId v : c.value_items(seed)) {
        if (vminus.count(v)) continue;
        bool hits_plus = false, hits_minus = false;
        for (ValueId p : c.item_values(v)) {
            hits_plus |= plus.count(p) > 0;
            hits_minus |= minus.count(p) > 0;
        }
        if (hits_plus && !hits_minus) r.items.push_back(v);
    }
    for (ValueId p = 0; p < c.num_values(); ++p) {
        if (!plus.count(p) && !minus.count(p)) r.values.push_back(p);
    }
    r.accepted.assign(plus.begin(), plus.end());
    r.rejected.assign(minus.begin(), minus.end());
    r.rejected_items.assign(vminus.begin(), vminus.end());
    return r;
}

inline bool matches(const ConversationState& s, const Rebuilt& r) {
    return s.candidate_items == r.items && s.candidate_values == r.values && s.accepted_values == r.accepted &&
           s.rejected_values == r.rejected && s.rejected_items == r.rejected_items;
}

/// Uniform ask/rec coin; asks a random type's values, recommends a random subset.
inline Action random_action(const Catalog& c, const ConversationState& s, const EpisodeConfig& cfg,
                            std::mt19937_64& rng) {
    std::bernoulli_distribution ask(0.5);
    Action a;
    if (s.can_ask() && ask(rng)) {
        a.kind = ActionKind::Ask;
        const ValueId first = s.candidate_values[rng() % s.candidate_values.size()];
        for (ValueId p : s.candidate_values) {
            if (c.value_type(p) == c.value_type(first) && static_cast<int>(a.payload.size()) < cfg.k_p) {
                a.payload.push_back(p);
            }
        }
    } else {
        a.kind = ActionKind::Rec;
        std::vector<ItemId> pool = s.candidate_items;
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(std::min<std::size_t>(pool.size(), cfg.k_v));
        a.payload = pool;
    }
    return a;
}

}  // namespace converse::testing
