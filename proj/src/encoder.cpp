#include "converse/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace converse {

using ad::Index;
using ad::Matrix;
using ad::Tensor;

namespace {

template <class Lists>
ad::Csr to_csr(const Lists& lists) {
    ad::Csr csr;
    csr.offsets.reserve(lists.size() + 1);
    csr.offsets.push_back(0);
    for (const auto& list : lists) {
        for (auto j : list) csr.src.push_back(static_cast<Index>(j));
        csr.offsets.push_back(static_cast<Index>(csr.src.size()));
    }
    return csr;
}

Matrix coefficients(const std::vector<double>& c) {
    Matrix m(static_cast<Index>(c.size()), 1);
    for (std::size_t i = 0; i < c.size(); ++i) m(static_cast<Index>(i), 0) = c[i];
    return m;
}

Tensor gather(const Tensor& table, std::span<const std::int32_t> ids) {
    std::vector<Index> rows(ids.begin(), ids.end());
    return ad::gather_rows(table, rows);
}

}  // namespace

GraphIndex build_graph_index(const GlobalGraph& graph) {
    GraphIndex index;
    index.num_users = graph.num_users;
    index.num_items = graph.num_items;
    index.num_values = graph.num_values;
    index.user_items = to_csr(graph.user_neighbours);
    index.value_items = to_csr(graph.value_neighbours);
    index.item_users = to_csr(graph.item_user_neighbours);
    index.item_values = to_csr(graph.item_value_neighbours);
    return index;
}

GlobalEncoding encode_global(const GraphIndex& index, const ParameterSet& params, const ModelDims& dims) {
    // isolated nodes keep their own representation; items with one empty side
    // take the other side whole
    std::vector<double> user_self(index.num_users), value_self(index.num_values);
    std::vector<double> item_from_users(index.num_items), item_from_values(index.num_items), item_self(index.num_items);
    for (int u = 0; u < index.num_users; ++u) user_self[u] = index.user_items.degree(u) == 0 ? 1.0 : 0.0;
    for (int p = 0; p < index.num_values; ++p) value_self[p] = index.value_items.degree(p) == 0 ? 1.0 : 0.0;
    for (int v = 0; v < index.num_items; ++v) {
        const bool has_u = index.item_users.degree(v) > 0;
        const bool has_p = index.item_values.degree(v) > 0;
        item_from_users[v] = has_u ? (has_p ? 0.5 : 1.0) : 0.0;
        item_from_values[v] = has_p ? (has_u ? 0.5 : 1.0) : 0.0;
        item_self[v] = (has_u || has_p) ? 0.0 : 1.0;
    }
    const Matrix cu = coefficients(user_self), cp = coefficients(value_self);
    const Matrix civu = coefficients(item_from_users), civp = coefficients(item_from_values);
    const Matrix civ = coefficients(item_self);

    Tensor hu = params["emb.user"];
    Tensor hv = params["emb.item"];
    Tensor hp = params["emb.value"];
    const Index dk = dims.head_dim();
    for (int l = 0; l < dims.gat_layers; ++l) {
        const std::string pre = "gat." + std::to_string(l) + ".";
        const Tensor& w1 = params[pre + "w1"];
        const Tensor& w2 = params[pre + "w2"];
        const Tensor& a = params[pre + "a"];
        const Tensor u1 = ad::matmul(hu, w1), v1 = ad::matmul(hv, w1), p1 = ad::matmul(hp, w1);
        const Tensor u2 = ad::matmul(hu, w2), v2 = ad::matmul(hv, w2), p2 = ad::matmul(hp, w2);
        std::vector<Tensor> zu, zp, zvu, zvp;
        for (int k = 0; k < dims.heads; ++k) {
            const Index c = k * dk;
            const Tensor ak = ad::slice_rows(a, c, dk);
            const Tensor u1k = ad::slice_cols(u1, c, dk), v1k = ad::slice_cols(v1, c, dk), p1k = ad::slice_cols(p1, c, dk);
            const Tensor u2k = ad::slice_cols(u2, c, dk), v2k = ad::slice_cols(v2, c, dk), p2k = ad::slice_cols(p2, c, dk);
            zu.push_back(ad::graph_attention(u1k, v2k, ak, index.user_items));
            zp.push_back(ad::graph_attention(p1k, v2k, ak, index.value_items));
            zvu.push_back(ad::graph_attention(v1k, u2k, ak, index.item_users));
            zvp.push_back(ad::graph_attention(v1k, p2k, ak, index.item_values));
        }
        const Tensor z_u = ad::concat_cols(zu), z_p = ad::concat_cols(zp);
        const Tensor z_v = ad::add(ad::scale_rows(ad::concat_cols(zvu), civu), ad::scale_rows(ad::concat_cols(zvp), civp));
        hu = ad::leaky_relu(ad::add(z_u, ad::scale_rows(hu, cu)));
        hp = ad::leaky_relu(ad::add(z_p, ad::scale_rows(hp, cp)));
        hv = ad::leaky_relu(ad::add(z_v, ad::scale_rows(hv, civ)));
    }
    return {hu, hv, hp};
}

Tensor matching_scores(const ParameterSet& params, UserId user, std::span<const ValueId> accepted,
                       std::span<const ValueId> rejected, std::span<const ItemId> items) {
    const std::int32_t uid[1] = {user};
    Tensor q = gather(params["emb.user"], uid);
    if (!accepted.empty()) q = ad::add(q, ad::sum_rows(gather(params["emb.value"], accepted)));
    if (!rejected.empty()) q = ad::sub(q, ad::sum_rows(gather(params["emb.value"], rejected)));
    return ad::sigmoid(ad::matmul(gather(params["emb.item"], items), ad::transpose(q)));
}

double matching_score(const ParameterSet& params, const ConversationState& state, ItemId item) {
    ad::NoGradGuard guard;
    const ItemId one[1] = {item};
    return matching_scores(params, state.user, state.accepted_values, state.rejected_values, one).item();
}

int FeedbackGraph::find(FeedbackNode::Kind kind, std::int32_t id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].kind == kind && nodes[i].id == id) return static_cast<int>(i);
    }
    return -1;
}

namespace {

FeedbackGraph build_one(const Catalog& catalog, UserId user, bool positive, const std::vector<ValueId>& feedback_values,
                        const std::vector<ValueId>& candidate_values, const std::vector<ItemId>& items) {
    FeedbackGraph g;
    g.positive = positive;
    g.nodes.push_back({FeedbackNode::Kind::User, user});
    std::vector<int> value_node(static_cast<std::size_t>(catalog.num_values()), -1);
    std::vector<ValueId> values;
    std::set_union(feedback_values.begin(), feedback_values.end(), candidate_values.begin(), candidate_values.end(),
                   std::back_inserter(values));
    for (ValueId p : values) {
        value_node[p] = static_cast<int>(g.nodes.size());
        g.nodes.push_back({FeedbackNode::Kind::Value, p});
    }
    g.edges.nodes = 0;
    auto edge = [&g](int a, int b, Index w) {
        g.edges.a.push_back(a);
        g.edges.b.push_back(b);
        g.edges.weight.push_back(w);
    };
    for (ItemId v : items) {
        const int node = static_cast<int>(g.nodes.size());
        g.nodes.push_back({FeedbackNode::Kind::Item, v});
        g.scored_items.push_back(v);
        edge(0, node, static_cast<Index>(g.scored_items.size()));
        for (ValueId p : catalog.item_values(v)) {
            if (value_node[p] >= 0) edge(node, value_node[p], 0);
        }
    }
    for (ValueId p : feedback_values) edge(0, value_node[p], 0);
    g.edges.nodes = static_cast<Index>(g.nodes.size());
    return g;
}

}  // namespace

std::pair<FeedbackGraph, FeedbackGraph> build_feedback_graphs(const ConversationState& state, const Catalog& catalog) {
    FeedbackGraph pos = build_one(catalog, state.user, true, state.accepted_values, state.candidate_values,
                                  state.candidate_items);
    std::vector<ItemId> neg_items;
    std::set_union(state.rejected_items.begin(), state.rejected_items.end(), state.candidate_items.begin(),
                   state.candidate_items.end(), std::back_inserter(neg_items));
    FeedbackGraph neg = build_one(catalog, state.user, false, state.rejected_values, state.candidate_values, neg_items);
    return {std::move(pos), std::move(neg)};
}

Tensor edge_weights(const FeedbackGraph& graph, const ParameterSet& params, const ConversationState& state) {
    const Tensor one = Tensor::constant(1, 1, 1.0);
    if (graph.scored_items.empty()) return one;
    const Tensor scores =
        matching_scores(params, state.user, state.accepted_values, state.rejected_values, graph.scored_items);
    const Tensor parts[2] = {one, scores};
    return ad::concat_rows(parts);
}

Tensor encode_feedback(const FeedbackGraph& graph, const Tensor& weights, const ParameterSet& params,
                       const std::string& prefix, int layers, std::span<const Index> targets) {
    const Index n = graph.edges.nodes;
    std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
    for (std::size_t e = 0; e < graph.edges.a.size(); ++e) {
        if (weights.value()(graph.edges.weight[e], 0) <= 0.0) continue;
        adj[graph.edges.a[e]].push_back(graph.edges.b[e]);
        adj[graph.edges.b[e]].push_back(graph.edges.a[e]);
    }

    // node sets per layer, outermost first
    std::vector<std::vector<Index>> sets(static_cast<std::size_t>(layers) + 1);
    sets[layers].assign(targets.begin(), targets.end());
    for (int l = layers; l > 0; --l) {
        std::vector<char> seen(static_cast<std::size_t>(n), 0);
        auto& below = sets[l - 1];
        for (Index i : sets[l]) {
            if (seen[i]) throw ModelError("encode_feedback: repeated target node");
            seen[i] = 1;
            below.push_back(i);
        }
        for (Index i : sets[l]) {
            for (Index j : adj[i]) {
                if (!seen[j]) {
                    seen[j] = 1;
                    below.push_back(j);
                }
            }
        }
    }

    // layer-0 rows: gather embeddings class by class, then reorder
    std::vector<std::int32_t> users, values, items;
    std::vector<Index> order;
    for (Index i : sets[0]) {
        const FeedbackNode& node = graph.nodes[i];
        if (node.kind == FeedbackNode::Kind::User) users.push_back(node.id);
        else if (node.kind == FeedbackNode::Kind::Value) values.push_back(node.id);
        else items.push_back(node.id);
    }
    {
        Index u = 0, p = static_cast<Index>(users.size()), v = p + static_cast<Index>(values.size());
        for (Index i : sets[0]) {
            const auto kind = graph.nodes[i].kind;
            order.push_back(kind == FeedbackNode::Kind::User ? u++ : kind == FeedbackNode::Kind::Value ? p++ : v++);
        }
    }
    std::vector<Tensor> parts;
    if (!users.empty()) parts.push_back(gather(params["emb.user"], users));
    if (!values.empty()) parts.push_back(gather(params["emb.value"], values));
    if (!items.empty()) parts.push_back(gather(params["emb.item"], items));
    Tensor x = ad::gather_rows(ad::concat_rows(parts), order);

    std::vector<Index> row_of(static_cast<std::size_t>(n), -1);
    for (std::size_t r = 0; r < sets[0].size(); ++r) row_of[sets[0][r]] = static_cast<Index>(r);
    for (int l = 1; l <= layers; ++l) {
        const Tensor& w = params[prefix + "." + std::to_string(l - 1) + ".w"];
        const auto& out_nodes = sets[l];
        std::vector<Index> self_rows;
        self_rows.reserve(out_nodes.size());
        for (Index i : out_nodes) self_rows.push_back(row_of[i]);
        const Tensor agg = ad::normalized_aggregate(x, weights, graph.edges, out_nodes, row_of);
        x = ad::leaky_relu(ad::add(ad::matmul(agg, w), ad::gather_rows(x, self_rows)));
        std::fill(row_of.begin(), row_of.end(), -1);
        for (std::size_t r = 0; r < out_nodes.size(); ++r) row_of[out_nodes[r]] = static_cast<Index>(r);
    }
    return x;
}

Tensor gate(const Tensor& x, const Tensor& y, const ParameterSet& params) {
    const Tensor xi = ad::sigmoid(
        ad::add_bias(ad::add(ad::matmul(x, params["gate.w1"]), ad::matmul(y, params["gate.w2"])), params["gate.b"]));
    return ad::add(y, ad::mul(xi, ad::sub(x, y)));
}

Tensor encode_sequence(const Tensor& tokens, std::span<const int> turns, const ParameterSet& params,
                       const ModelDims& dims) {
    std::vector<Index> pos;
    pos.reserve(turns.size());
    for (int t : turns) pos.push_back(std::min(t, dims.max_turns));
    Tensor x = ad::add(tokens, ad::gather_rows(params["seq.pos"], pos));
    const Index dk = dims.head_dim();
    const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int l = 0; l < dims.seq_layers; ++l) {
        const std::string pre = "seq." + std::to_string(l) + ".";
        const Tensor q = ad::matmul(x, params[pre + "wq"]);
        const Tensor k = ad::matmul(x, params[pre + "wk"]);
        const Tensor v = ad::matmul(x, params[pre + "wv"]);
        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(dims.heads));
        for (int h = 0; h < dims.heads; ++h) {
            const Index c = h * dk;
            const Tensor scores = ad::scale(ad::matmul(ad::slice_cols(q, c, dk), ad::transpose(ad::slice_cols(k, c, dk))), inv);
            heads.push_back(ad::matmul(ad::softmax_rows(scores), ad::slice_cols(v, c, dk)));
        }
        const Tensor attn = ad::add_bias(ad::matmul(ad::concat_cols(heads), params[pre + "wo"]), params[pre + "bo"]);
        x = ad::layer_norm_rows(ad::add(x, attn), params[pre + "ln1_g"], params[pre + "ln1_b"]);
        const Tensor hidden = ad::leaky_relu(ad::add_bias(ad::matmul(x, params[pre + "ff1_w"]), params[pre + "ff1_b"]));
        const Tensor ff = ad::add_bias(ad::matmul(hidden, params[pre + "ff2_w"]), params[pre + "ff2_b"]);
        x = ad::layer_norm_rows(ad::add(x, ff), params[pre + "ln2_g"], params[pre + "ln2_b"]);
    }
    return ad::mean_rows(x);
}

Tensor encode_state(const Catalog& catalog, const ConversationState& state, const GlobalEncoding& global,
                    const ParameterSet& params, const ModelDims& dims) {
    const auto [pos, neg] = build_feedback_graphs(state, catalog);

    // token rows are laid out as [accepted values | rejected values | rejected items]
    std::vector<std::int32_t> acc, rej_values, rej_items;
    std::vector<Index> pos_targets, neg_targets;
    for (const Mention& m : state.mentions) {
        if (m.kind == Mention::Kind::Value && m.accepted) {
            acc.push_back(m.id);
            pos_targets.push_back(pos.find(FeedbackNode::Kind::Value, m.id));
        }
    }
    for (const Mention& m : state.mentions) {
        if (m.kind == Mention::Kind::Value && !m.accepted) {
            rej_values.push_back(m.id);
            neg_targets.push_back(neg.find(FeedbackNode::Kind::Value, m.id));
        }
    }
    for (const Mention& m : state.mentions) {
        if (m.kind == Mention::Kind::Item) {
            rej_items.push_back(m.id);
            neg_targets.push_back(neg.find(FeedbackNode::Kind::Item, m.id));
        }
    }
    if (acc.empty()) throw ModelError("state has no accepted value to encode");

    std::vector<Tensor> local, globals;
    const Tensor pos_out = encode_feedback(pos, edge_weights(pos, params, state), params, "gcn_pos", dims.pos_layers,
                                           pos_targets);
    local.push_back(ad::add_bias(ad::matmul(pos_out, params["agg.w_acc"]), params["agg.b_acc"]));
    globals.push_back(gather(global.values, acc));
    if (!neg_targets.empty()) {
        const Tensor neg_out = encode_feedback(neg, edge_weights(neg, params, state), params, "gcn_neg",
                                               dims.neg_layers, neg_targets);
        local.push_back(ad::add_bias(ad::matmul(neg_out, params["agg.w_rej"]), params["agg.b_rej"]));
        if (!rej_values.empty()) globals.push_back(gather(global.values, rej_values));
        if (!rej_items.empty()) globals.push_back(gather(global.items, rej_items));
    }
    const Tensor fused = gate(ad::concat_rows(globals), ad::concat_rows(local), params);

    // back to mention order
    std::vector<Index> order;
    std::vector<int> turns;
    Index next_acc = 0, next_rv = static_cast<Index>(acc.size()),
          next_ri = static_cast<Index>(acc.size() + rej_values.size());
    for (const Mention& m : state.mentions) {
        if (m.kind == Mention::Kind::Item) order.push_back(next_ri++);
        else if (m.accepted) order.push_back(next_acc++);
        else order.push_back(next_rv++);
        turns.push_back(m.turn);
    }
    return encode_sequence(ad::gather_rows(fused, order), turns, params, dims);
}

}  // namespace converse
