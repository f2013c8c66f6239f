#include "support.hpp"

#include <doctest.h>

#include <random>

using namespace converse;
using namespace converse::ad;
using converse::testing::gradient_check;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

ParameterSet params_for(std::initializer_list<std::pair<const char*, std::pair<Index, Index>>> shapes,
                        std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    ParameterSet p;
    for (const auto& [name, shape] : shapes) p.add(name, random_matrix(shape.first, shape.second, rng));
    return p;
}

}  // namespace

TEST_CASE("matmul forward matches Eigen") {
    auto p = params_for({{"a", {2, 3}}, {"b", {3, 4}}});
    Matrix expected = p["a"].value() * p["b"].value();
    CHECK((matmul(p["a"], p["b"]).value() - expected).norm() < 1e-12);
}

TEST_CASE("elementwise and linear ops have exact gradients") {
    auto p = params_for({{"a", {3, 4}}, {"b", {3, 4}}, {"w", {4, 2}}, {"bias", {1, 2}}});
    auto loss = [&] {
        Tensor h = add_bias(matmul(mul(p["a"], sigmoid(p["b"])), p["w"]), p["bias"]);
        h = leaky_relu(sub(h, scale(transpose(transpose(h)), 0.3)));
        return sum(mul(h, h));
    };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("reductions and shape ops") {
    auto p = params_for({{"a", {4, 3}}, {"b", {2, 3}}});
    const Index rows[] = {3, 0, 3};
    const Index pr[] = {0, 1, 2};
    const Index pc[] = {2, 0, 1};
    auto loss = [&] {
        const Tensor parts[] = {gather_rows(p["a"], rows), slice_rows(p["b"], 1, 1)};
        const Tensor c = concat_rows(parts);
        const Tensor cols[] = {slice_cols(c, 0, 2), c};
        const Tensor wide = concat_cols(cols);
        return add(add(sum(mean_rows(wide)), log_sum_exp(sum_rows(wide))), sum(pick(c, pr, pc)));
    };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("softmax rows sum to one and log-softmax agrees") {
    auto p = params_for({{"a", {3, 5}}});
    const Matrix s = softmax_rows(p["a"]).value();
    for (Index i = 0; i < 3; ++i) CHECK(s.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    const Matrix ls = log_softmax_rows(p["a"]).value();
    CHECK((ls.array().exp().matrix() - s).norm() < 1e-12);
    auto loss = [&] {
        const Tensor w = Tensor(Matrix::Constant(3, 5, 0.7));
        return add(sum(mul(softmax_rows(p["a"]), w)), sum(log_softmax_rows(p["a"])));
    };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("layer norm normalises rows and differentiates") {
    auto p = params_for({{"x", {3, 6}}, {"g", {1, 6}}, {"b", {1, 6}}});
    const Tensor ones(Matrix::Ones(1, 6));
    const Tensor zeros(Matrix::Zero(1, 6));
    const Matrix y = layer_norm_rows(p["x"], ones, zeros, 0.0).value();
    for (Index i = 0; i < 3; ++i) {
        CHECK(y.row(i).mean() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(y.row(i).squaredNorm() / 6.0 == doctest::Approx(1.0).epsilon(1e-9));
    }
    auto loss = [&] {
        const Tensor t = layer_norm_rows(p["x"], p["g"], p["b"]);
        return sum(mul(t, sigmoid(t)));
    };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("log is the inverse of exp on positive inputs") {
    Tensor x(Matrix::Constant(1, 1, std::exp(1.5)));
    CHECK(log(x).item() == doctest::Approx(1.5));
}

TEST_CASE("graph attention coefficients match a direct evaluation") {
    std::mt19937_64 rng(11);
    const Matrix dst = random_matrix(3, 4, rng);
    const Matrix src = random_matrix(5, 4, rng);
    const Matrix a = random_matrix(4, 1, rng);
    Csr adj{{0, 2, 2, 5}, {0, 4, 1, 2, 3}};
    const auto alpha = attention_coefficients(dst, src, a, adj);
    REQUIRE(alpha.size() == 5);
    std::vector<double> direct;
    for (Index i = 0; i < 3; ++i) {
        std::vector<double> s;
        for (Index e = adj.offsets[i]; e < adj.offsets[i + 1]; ++e) {
            Matrix z = dst.row(i) + src.row(adj.src[e]);
            z = z.unaryExpr([](double v) { return v > 0 ? v : 0.2 * v; });
            s.push_back((z * a)(0, 0));
        }
        double total = 0.0;
        for (double v : s) total += std::exp(v);
        for (double v : s) direct.push_back(std::exp(v) / total);
    }
    for (std::size_t k = 0; k < 5; ++k) CHECK(alpha[k] == doctest::Approx(direct[k]).epsilon(1e-12));

    const Matrix out = graph_attention(Tensor(dst), Tensor(src), Tensor(a), adj).value();
    CHECK(out.row(1).norm() == 0.0);  // no neighbours
    Matrix row0 = alpha[0] * src.row(0) + alpha[1] * src.row(4);
    CHECK((out.row(0) - row0).norm() < 1e-12);
}

TEST_CASE("graph attention gradient") {
    auto p = params_for({{"dst", {3, 4}}, {"src", {5, 4}}, {"a", {4, 1}}});
    Csr adj{{0, 2, 3, 5}, {0, 4, 1, 2, 3}};
    auto loss = [&] { return sum(mul(graph_attention(p["dst"], p["src"], p["a"], adj), p["dst"])); };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("normalized aggregation matches the symmetric formula") {
    auto p = params_for({{"x", {4, 3}}, {"w", {3, 1}}});
    p["w"].mutable_value() = Matrix::Constant(3, 1, 1.0);
    p["w"].mutable_value()(1, 0) = 0.5;
    p["w"].mutable_value()(2, 0) = 2.0;
    // path 0-1-2 plus 1-3
    WeightedEdges edges{4, {0, 1, 1}, {1, 2, 3}, {1, 2, 0}};
    const Index targets[] = {1, 3};
    const Index row_of[] = {0, 1, 2, 3};
    const Matrix out = normalized_aggregate(p["x"], p["w"], edges, targets, row_of).value();
    const Matrix& x = p["x"].value();
    const double deg0 = 0.5, deg1 = 0.5 + 2.0 + 1.0, deg2 = 2.0, deg3 = 1.0;
    // weights enter through the degrees only
    Matrix row1 = x.row(0) / std::sqrt(deg1 * deg0) + x.row(2) / std::sqrt(deg1 * deg2) +
                  x.row(3) / std::sqrt(deg1 * deg3);
    Matrix row3 = x.row(1) / std::sqrt(deg3 * deg1);
    CHECK((out.row(0) - row1).norm() < 1e-12);
    CHECK((out.row(1) - row3).norm() < 1e-12);
    auto loss = [&] {
        const Tensor t = normalized_aggregate(p["x"], p["w"], edges, targets, row_of);
        return sum(mul(t, t));
    };
    CHECK(gradient_check(p, loss) < 1e-6);
}

TEST_CASE("no-grad guard records no graph") {
    auto p = params_for({{"a", {2, 2}}});
    Tensor out;
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        out = matmul(p["a"], p["a"]);
    }
    CHECK(grad_enabled());
    CHECK_FALSE(out.requires_grad());
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
    auto p = params_for({{"a", {1, 1}}});
    sum(scale(p["a"], 3.0)).backward();
    sum(scale(p["a"], 3.0)).backward();
    CHECK(p["a"].grad()(0, 0) == doctest::Approx(6.0));
    p.zero_grad();
    sum(scale(p["a"], 3.0)).backward();
    CHECK(p["a"].grad()(0, 0) == doctest::Approx(3.0));
}
