#pragma once

// Minimal reverse-mode differentiation over dense row-major
// matrices. Every op returns a Tensor whose node remembers its parents and a
// closure that pushes the output gradient back into them; Tensor::backward()
// walks the resulting DAG in reverse topological order.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace converse::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Matrix value, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor zeros(Index rows, Index cols);
    static Tensor constant(Index rows, Index cols, double v);

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() > 0; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double item() const;

    void zero_grad();
    /// Seeds d(self)/d(self) = 1 and runs reverse accumulation. Self must be 1x1.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<Node> node);

private:
    std::shared_ptr<Node> node_;
};

/// While alive, ops on this thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

inline constexpr double kLeakySlope = 0.2;

// elementwise and linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_bias(const Tensor& a, const Tensor& row);  // row is 1 x a.cols(), broadcast
Tensor scale_rows(const Tensor& a, const Matrix& coeffs);  // coeffs is a.rows() x 1, constant
Tensor transpose(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = kLeakySlope);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);

// reductions
Tensor sum(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // 1 x cols
Tensor sum_rows(const Tensor& a);   // 1 x cols
Tensor log_sum_exp(const Tensor& a);  // over all entries, 1 x 1

// shape
Tensor gather_rows(const Tensor& a, std::span<const Index> rows);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor pick(const Tensor& a, std::span<const Index> rows, std::span<const Index> cols);  // n x 1

// row-wise normalisations
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Destination-grouped adjacency: neighbours of destination i are
/// src[offsets[i] .. offsets[i+1]).
struct Csr {
    std::vector<Index> offsets;
    std::vector<Index> src;

    Index destinations() const { return static_cast<Index>(offsets.size()) - 1; }
    Index degree(Index i) const { return offsets[i + 1] - offsets[i]; }
};

/// Attention in the dynamic form: for destination i with neighbours j,
///   s_ij = a . leaky(dst_i + src_j),  alpha_i = softmax_j(s_ij),
///   out_i = sum_j alpha_ij src_j.
/// Destinations without neighbours produce a zero row.
Tensor graph_attention(const Tensor& dst, const Tensor& src, const Tensor& a, const Csr& adj);

/// The attention coefficients graph_attention would use, in CSR edge order.
std::vector<double> attention_coefficients(const Matrix& dst, const Matrix& src, const Matrix& a,
                                           const Csr& adj);

/// Undirected weighted edge list for symmetric-normalised aggregation.
struct WeightedEdges {
    Index nodes = 0;
    std::vector<Index> a;
    std::vector<Index> b;
    std::vector<Index> weight;  // row into the weight tensor
};

/// out_r = sum_{j ~ i} x_j / sqrt(deg_i deg_j) for i = targets[r], where
/// deg is the weighted degree. `row_of[node]` locates node's row in x.
Tensor normalized_aggregate(const Tensor& x, const Tensor& weights, const WeightedEdges& edges,
                            std::span<const Index> targets, std::span<const Index> row_of);

}  // namespace converse::ad
