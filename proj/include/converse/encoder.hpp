#pragma once

#include "converse/autodiff.hpp"
#include "converse/catalog.hpp"
#include "converse/env.hpp"
#include "converse/params.hpp"

#include <span>
#include <utility>
#include <vector>

namespace converse {

/// Destination-grouped adjacency of the global graph, one CSR per
/// (destination class, source class) pair.
struct GraphIndex {
    int num_users = 0;
    int num_items = 0;
    int num_values = 0;
    ad::Csr user_items;
    ad::Csr value_items;
    ad::Csr item_users;
    ad::Csr item_values;
};

GraphIndex build_graph_index(const GlobalGraph& graph);

/// Last-layer GAT representations per entity class.
struct GlobalEncoding {
    ad::Tensor users;
    ad::Tensor items;
    ad::Tensor values;
};

GlobalEncoding encode_global(const GraphIndex& index, const ParameterSet& params, const ModelDims& dims);

/// sigmoid(e_u.e_v + sum_{P+} e_v.e_p - sum_{P-} e_v.e_p) for each item, as an n x 1 tensor.
ad::Tensor matching_scores(const ParameterSet& params, UserId user, std::span<const ValueId> accepted,
                           std::span<const ValueId> rejected, std::span<const ItemId> items);
double matching_score(const ParameterSet& params, const ConversationState& state, ItemId item);

struct FeedbackNode {
    enum class Kind : std::uint8_t { User, Value, Item };
    Kind kind = Kind::User;
    std::int32_t id = 0;
    friend bool operator==(const FeedbackNode&, const FeedbackNode&) = default;
};

/// Local weighted graph around the user. Node 0 is the user. Edge weight
/// row 0 is the constant 1; row k + 1 is the matching score of scored_items[k].
struct FeedbackGraph {
    bool positive = true;
    std::vector<FeedbackNode> nodes;
    std::vector<ItemId> scored_items;
    ad::WeightedEdges edges;

    int find(FeedbackNode::Kind kind, std::int32_t id) const;
};

std::pair<FeedbackGraph, FeedbackGraph> build_feedback_graphs(const ConversationState& state,
                                                              const Catalog& catalog);

/// Edge weight column for `graph` (constant 1 followed by matching scores).
ad::Tensor edge_weights(const FeedbackGraph& graph, const ParameterSet& params, const ConversationState& state);

/// Runs `layers` GCN layers with weights "<prefix>.<l>.w" and returns the
/// rows of `targets` (local node ids). Only the receptive field of the
/// targets is evaluated.
ad::Tensor encode_feedback(const FeedbackGraph& graph, const ad::Tensor& weights, const ParameterSet& params,
                           const std::string& prefix, int layers, std::span<const ad::Index> targets);

/// xi * x + (1 - xi) * y with xi = sigmoid(x W1 + y W2 + b), row-wise.
ad::Tensor gate(const ad::Tensor& x, const ad::Tensor& y, const ParameterSet& params);

/// Adds positional rows for `turns`, runs the self-attention stack, mean-pools.
ad::Tensor encode_sequence(const ad::Tensor& tokens, std::span<const int> turns, const ParameterSet& params,
                           const ModelDims& dims);

/// s_t for a conversation state, 1 x d.
ad::Tensor encode_state(const Catalog& catalog, const ConversationState& state, const GlobalEncoding& global,
                        const ParameterSet& params, const ModelDims& dims);

}  // namespace converse
