#include "converse/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace converse::ad {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(std::initializer_list<const Tensor*> parents) {
    for (const Tensor* p : parents) {
        if (p->requires_grad()) return true;
    }
    return false;
}

template <class Backward>
Tensor record(Matrix value, std::initializer_list<const Tensor*> parents, Backward&& fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled && any_requires_grad(parents)) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Tensor* p : parents) node->parents.push_back(p->node());
        node->backward = std::forward<Backward>(fn);
    }
    return Tensor::from_node(std::move(node));
}

template <class Backward>
Tensor record_many(Matrix value, std::span<const Tensor> parents, Backward&& fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (g_grad_enabled && needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node());
        node->backward = std::forward<Backward>(fn);
    }
    return Tensor::from_node(std::move(node));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

double leaky(double x, double slope) { return x > 0.0 ? x : slope * x; }
double leaky_grad(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor(Matrix::Constant(1, 1, v)); }
Tensor Tensor::zeros(Index rows, Index cols) { return Tensor(Matrix::Zero(rows, cols)); }
Tensor Tensor::constant(Index rows, Index cols, double v) { return Tensor(Matrix::Constant(rows, cols, v)); }

double Tensor::item() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar tensor");
    return node_->value(0, 0);
}

void Tensor::zero_grad() { node_->grad.resize(0, 0); }

void Tensor::backward() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("backward() needs a scalar");
    if (!node_->requires_grad) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() > 0) n->backward(*n);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    return record(a.value() * b.value(), {&a, &b}, [](Node& n) {
        const Matrix& g = n.grad;
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) pa.accumulate(g * pb.value.transpose());
        if (pb.requires_grad) pb.accumulate(pa.value.transpose() * g);
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    return record(a.value() + b.value(), {&a, &b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    return record(a.value() - b.value(), {&a, &b}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(-n.grad);
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    return record(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
        if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
    });
}

Tensor scale(const Tensor& a, double s) {
    return record(a.value() * s, {&a}, [s](Node& n) { n.parents[0]->accumulate(n.grad * s); });
}

Tensor add_bias(const Tensor& a, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_bias: bad bias shape");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return record(std::move(out), {&a, &row}, [](Node& n) {
        n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
    });
}

Tensor scale_rows(const Tensor& a, const Matrix& coeffs) {
    if (coeffs.rows() != a.rows() || coeffs.cols() != 1) throw std::invalid_argument("scale_rows: bad coeffs");
    Matrix out = coeffs.col(0).asDiagonal() * a.value();
    return record(std::move(out), {&a}, [coeffs](Node& n) {
        n.parents[0]->accumulate(coeffs.col(0).asDiagonal() * n.grad);
    });
}

Tensor transpose(const Tensor& a) {
    return record(a.value().transpose(), {&a}, [](Node& n) { n.parents[0]->accumulate(n.grad.transpose()); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    Matrix out = a.value().unaryExpr([slope](double x) { return leaky(x, slope); });
    return record(std::move(out), {&a}, [slope](Node& n) {
        const Matrix& x = n.parents[0]->value;
        n.parents[0]->accumulate(n.grad.cwiseProduct(x.unaryExpr([slope](double v) { return leaky_grad(v, slope); })));
    });
}

Tensor sigmoid(const Tensor& a) {
    Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return record(std::move(out), {&a}, [](Node& n) {
        const Matrix& y = n.value;
        n.parents[0]->accumulate(n.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
}

Tensor log(const Tensor& a) {
    Matrix out = a.value().array().log().matrix();
    return record(std::move(out), {&a}, [](Node& n) {
        n.parents[0]->accumulate(n.grad.cwiseQuotient(n.parents[0]->value));
    });
}

Tensor sum(const Tensor& a) {
    return record(Matrix::Constant(1, 1, a.value().sum()), {&a}, [](Node& n) {
        const Matrix& x = n.parents[0]->value;
        n.parents[0]->accumulate(Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
    });
}

Tensor mean_rows(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.rows());
    Matrix out = a.value().colwise().sum() * inv;
    return record(std::move(out), {&a}, [inv](Node& n) {
        const Index r = n.parents[0]->value.rows();
        n.parents[0]->accumulate(n.grad.replicate(r, 1) * inv);
    });
}

Tensor sum_rows(const Tensor& a) {
    Matrix out = a.value().colwise().sum();
    return record(std::move(out), {&a}, [](Node& n) {
        const Index r = n.parents[0]->value.rows();
        n.parents[0]->accumulate(n.grad.replicate(r, 1));
    });
}

Tensor log_sum_exp(const Tensor& a) {
    const double m = a.value().maxCoeff();
    const double s = (a.value().array() - m).exp().sum();
    const double lse = m + std::log(s);
    return record(Matrix::Constant(1, 1, lse), {&a}, [lse](Node& n) {
        const Matrix& x = n.parents[0]->value;
        n.parents[0]->accumulate(((x.array() - lse).exp() * n.grad(0, 0)).matrix());
    });
}

Tensor gather_rows(const Tensor& a, std::span<const Index> rows) {
    Matrix out(static_cast<Index>(rows.size()), a.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        assert(rows[r] >= 0 && rows[r] < a.rows());
        out.row(static_cast<Index>(r)) = a.value().row(rows[r]);
    }
    std::vector<Index> idx(rows.begin(), rows.end());
    return record(std::move(out), {&a}, [idx = std::move(idx)](Node& n) {
        Node& p = *n.parents[0];
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += n.grad.row(static_cast<Index>(r));
        p.accumulate(g);
    });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
    if (start < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
    Matrix out = a.value().middleRows(start, count);
    return record(std::move(out), {&a}, [start, count](Node& n) {
        Node& p = *n.parents[0];
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleRows(start, count) = n.grad;
        p.accumulate(g);
    });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
    if (start < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
    Matrix out = a.value().middleCols(start, count);
    return record(std::move(out), {&a}, [start, count](Node& n) {
        Node& p = *n.parents[0];
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleCols(start, count) = n.grad;
        p.accumulate(g);
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    Index rows = 0;
    const Index cols = parts.front().cols();
    for (const Tensor& t : parts) {
        if (t.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += t.rows();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const Tensor& t : parts) {
        out.middleRows(at, t.rows()) = t.value();
        at += t.rows();
    }
    return record_many(std::move(out), parts, [](Node& n) {
        Index at = 0;
        for (auto& p : n.parents) {
            const Index r = p->value.rows();
            if (p->requires_grad) p->accumulate(n.grad.middleRows(at, r));
            at += r;
        }
    });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    Index cols = 0;
    const Index rows = parts.front().rows();
    for (const Tensor& t : parts) {
        if (t.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += t.cols();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const Tensor& t : parts) {
        out.middleCols(at, t.cols()) = t.value();
        at += t.cols();
    }
    return record_many(std::move(out), parts, [](Node& n) {
        Index at = 0;
        for (auto& p : n.parents) {
            const Index c = p->value.cols();
            if (p->requires_grad) p->accumulate(n.grad.middleCols(at, c));
            at += c;
        }
    });
}

Tensor pick(const Tensor& a, std::span<const Index> rows, std::span<const Index> cols) {
    if (rows.size() != cols.size()) throw std::invalid_argument("pick: index length mismatch");
    Matrix out(static_cast<Index>(rows.size()), 1);
    for (std::size_t k = 0; k < rows.size(); ++k) out(static_cast<Index>(k), 0) = a.value()(rows[k], cols[k]);
    std::vector<Index> r(rows.begin(), rows.end());
    std::vector<Index> c(cols.begin(), cols.end());
    return record(std::move(out), {&a}, [r = std::move(r), c = std::move(c)](Node& n) {
        Node& p = *n.parents[0];
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        for (std::size_t k = 0; k < r.size(); ++k) g(r[k], c[k]) += n.grad(static_cast<Index>(k), 0);
        p.accumulate(g);
    });
}

Tensor softmax_rows(const Tensor& a) {
    Matrix out = a.value();
    for (Index i = 0; i < out.rows(); ++i) {
        const double m = out.row(i).maxCoeff();
        out.row(i) = (out.row(i).array() - m).exp().matrix();
        out.row(i) /= out.row(i).sum();
    }
    return record(std::move(out), {&a}, [](Node& n) {
        const Matrix& y = n.value;
        Matrix g(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
            const double dot = n.grad.row(i).dot(y.row(i));
            g.row(i) = y.row(i).cwiseProduct((n.grad.row(i).array() - dot).matrix());
        }
        n.parents[0]->accumulate(g);
    });
}

Tensor log_softmax_rows(const Tensor& a) {
    Matrix out = a.value();
    for (Index i = 0; i < out.rows(); ++i) {
        const double m = out.row(i).maxCoeff();
        const double lse = m + std::log((out.row(i).array() - m).exp().sum());
        out.row(i).array() -= lse;
    }
    return record(std::move(out), {&a}, [](Node& n) {
        const Matrix& y = n.value;
        Matrix g(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
            const double total = n.grad.row(i).sum();
            g.row(i) = n.grad.row(i) - (y.row(i).array().exp() * total).matrix();
        }
        n.parents[0]->accumulate(g);
    });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    const Index rows = a.rows();
    const Index cols = a.cols();
    if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
        throw std::invalid_argument("layer_norm_rows: bad affine shape");
    }
    Matrix xhat(rows, cols);
    Eigen::VectorXd inv_std(rows);
    for (Index i = 0; i < rows; ++i) {
        const double mu = a.value().row(i).mean();
        const double var = (a.value().row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = ((a.value().row(i).array() - mu) * inv_std(i)).matrix();
    }
    Matrix out = xhat;
    for (Index i = 0; i < rows; ++i) {
        out.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
    }
    return record(std::move(out), {&a, &gamma, &beta}, [xhat, inv_std](Node& n) {
        const Matrix& g = n.grad;
        Node& px = *n.parents[0];
        Node& pg = *n.parents[1];
        Node& pb = *n.parents[2];
        if (pg.requires_grad) pg.accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (pb.requires_grad) pb.accumulate(g.colwise().sum());
        if (px.requires_grad) {
            const double c = static_cast<double>(xhat.cols());
            Matrix dx(xhat.rows(), xhat.cols());
            for (Index i = 0; i < xhat.rows(); ++i) {
                Eigen::RowVectorXd dxhat = g.row(i).cwiseProduct(pg.value.row(0));
                const double m1 = dxhat.sum() / c;
                const double m2 = dxhat.dot(xhat.row(i)) / c;
                dx.row(i) = ((dxhat.array() - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
            }
            px.accumulate(dx);
        }
    });
}

std::vector<double> attention_coefficients(const Matrix& dst, const Matrix& src, const Matrix& a, const Csr& adj) {
    std::vector<double> alpha(adj.src.size());
    for (Index i = 0; i < adj.destinations(); ++i) {
        const Index begin = adj.offsets[i];
        const Index end = adj.offsets[i + 1];
        if (begin == end) continue;
        double m = -std::numeric_limits<double>::infinity();
        for (Index e = begin; e < end; ++e) {
            const auto pre = (dst.row(i) + src.row(adj.src[e])).unaryExpr([](double x) { return leaky(x, kLeakySlope); });
            alpha[e] = pre.dot(a.col(0).transpose());
            m = std::max(m, alpha[e]);
        }
        double z = 0.0;
        for (Index e = begin; e < end; ++e) {
            alpha[e] = std::exp(alpha[e] - m);
            z += alpha[e];
        }
        for (Index e = begin; e < end; ++e) alpha[e] /= z;
    }
    return alpha;
}

Tensor graph_attention(const Tensor& dst, const Tensor& src, const Tensor& a, const Csr& adj) {
    if (dst.cols() != src.cols() || a.rows() != dst.cols() || a.cols() != 1) {
        throw std::invalid_argument("graph_attention: shape mismatch");
    }
    if (adj.destinations() != dst.rows()) throw std::invalid_argument("graph_attention: adjacency size");
    std::vector<double> alpha = attention_coefficients(dst.value(), src.value(), a.value(), adj);
    Matrix out = Matrix::Zero(dst.rows(), dst.cols());
    for (Index i = 0; i < adj.destinations(); ++i) {
        for (Index e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
            out.row(i) += alpha[e] * src.value().row(adj.src[e]);
        }
    }
    return record(std::move(out), {&dst, &src, &a}, [adj, alpha = std::move(alpha)](Node& n) {
        const Matrix& hd = n.parents[0]->value;
        const Matrix& hs = n.parents[1]->value;
        const Matrix& av = n.parents[2]->value;
        Matrix g_dst = Matrix::Zero(hd.rows(), hd.cols());
        Matrix g_src = Matrix::Zero(hs.rows(), hs.cols());
        Matrix g_a = Matrix::Zero(av.rows(), 1);
        std::vector<double> d_alpha;
        for (Index i = 0; i < adj.destinations(); ++i) {
            const Index begin = adj.offsets[i];
            const Index end = adj.offsets[i + 1];
            if (begin == end) continue;
            const auto gz = n.grad.row(i);
            d_alpha.assign(static_cast<std::size_t>(end - begin), 0.0);
            double weighted = 0.0;
            for (Index e = begin; e < end; ++e) {
                const Index j = adj.src[e];
                g_src.row(j) += alpha[e] * gz;
                d_alpha[e - begin] = gz.dot(hs.row(j));
                weighted += alpha[e] * d_alpha[e - begin];
            }
            for (Index e = begin; e < end; ++e) {
                const Index j = adj.src[e];
                const double ds = alpha[e] * (d_alpha[e - begin] - weighted);
                Eigen::RowVectorXd m = hd.row(i) + hs.row(j);
                Eigen::RowVectorXd u = m.unaryExpr([](double x) { return leaky(x, kLeakySlope); });
                g_a.col(0) += ds * u.transpose();
                Eigen::RowVectorXd dm =
                    (ds * av.col(0).transpose()).cwiseProduct(m.unaryExpr([](double x) { return leaky_grad(x, kLeakySlope); }));
                g_dst.row(i) += dm;
                g_src.row(j) += dm;
            }
        }
        n.parents[0]->accumulate(g_dst);
        n.parents[1]->accumulate(g_src);
        n.parents[2]->accumulate(g_a);
    });
}

Tensor normalized_aggregate(const Tensor& x, const Tensor& weights, const WeightedEdges& edges,
                            std::span<const Index> targets, std::span<const Index> row_of) {
    if (weights.cols() != 1) throw std::invalid_argument("normalized_aggregate: weights must be a column");
    const std::size_t m = edges.a.size();
    std::vector<double> deg(static_cast<std::size_t>(edges.nodes), 0.0);
    for (std::size_t e = 0; e < m; ++e) {
        const double w = weights.value()(edges.weight[e], 0);
        deg[edges.a[e]] += w;
        deg[edges.b[e]] += w;
    }
    // incident edge lists for the requested targets only
    std::vector<Index> slot(static_cast<std::size_t>(edges.nodes), -1);
    for (std::size_t r = 0; r < targets.size(); ++r) slot[targets[r]] = static_cast<Index>(r);
    struct Term {
        Index out_row;
        Index node;
        Index neighbour;
    };
    std::vector<Term> terms;
    for (std::size_t e = 0; e < m; ++e) {
        if (weights.value()(edges.weight[e], 0) <= 0.0) continue;
        if (slot[edges.a[e]] >= 0) terms.push_back({slot[edges.a[e]], edges.a[e], edges.b[e]});
        if (slot[edges.b[e]] >= 0) terms.push_back({slot[edges.b[e]], edges.b[e], edges.a[e]});
    }
    Matrix out = Matrix::Zero(static_cast<Index>(targets.size()), x.cols());
    for (const Term& t : terms) {
        const Index row = row_of[t.neighbour];
        if (row < 0) throw std::logic_error("normalized_aggregate: neighbour row missing");
        out.row(t.out_row) += x.value().row(row) / std::sqrt(deg[t.node] * deg[t.neighbour]);
    }
    std::vector<Index> rows(row_of.begin(), row_of.end());
    return record(std::move(out), {&x, &weights},
                  [edges, deg = std::move(deg), terms = std::move(terms), rows = std::move(rows)](Node& n) {
                      Node& px = *n.parents[0];
                      Node& pw = *n.parents[1];
                      Matrix gx = Matrix::Zero(px.value.rows(), px.value.cols());
                      std::vector<double> g_deg(deg.size(), 0.0);
                      for (const Term& t : terms) {
                          const Index row = rows[t.neighbour];
                          const double norm = 1.0 / std::sqrt(deg[t.node] * deg[t.neighbour]);
                          const auto g = n.grad.row(t.out_row);
                          gx.row(row) += g * norm;
                          const double dot = g.dot(px.value.row(row)) * norm;
                          g_deg[t.node] += -0.5 * dot / deg[t.node];
                          g_deg[t.neighbour] += -0.5 * dot / deg[t.neighbour];
                      }
                      px.accumulate(gx);
                      if (pw.requires_grad) {
                          Matrix gw = Matrix::Zero(pw.value.rows(), 1);
                          for (std::size_t e = 0; e < edges.a.size(); ++e) {
                              gw(edges.weight[e], 0) += g_deg[edges.a[e]] + g_deg[edges.b[e]];
                          }
                          pw.accumulate(gw);
                      }
                  });
}

}  // namespace converse::ad
