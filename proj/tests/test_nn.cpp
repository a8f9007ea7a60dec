#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "avafit/nn.hpp"

using namespace avafit;
using namespace avafit::nn;

namespace {

/// Central finite-difference check of d(f(leaves))/d(leaf[i]) for every
/// element of every leaf. `build` must construct a fresh graph from the
/// current leaf values each call.
void grad_check(const std::vector<Var>& leaves, const std::function<Var()>& build, real tol = 1e-6,
                real h = 1e-5) {
    for (const auto& leaf : leaves) leaf->grad = Array::Zero(leaf->val.size());
    auto out = build();
    REQUIRE(out->numel() == 1);
    backward(out);
    for (const auto& leaf : leaves) {
        REQUIRE(leaf->grad.size() == leaf->val.size());
        for (Eigen::Index i = 0; i < leaf->numel(); ++i) {
            const real x0 = leaf->val[i];
            leaf->val[i] = x0 + h;
            const real fp = scalar_value(build());
            leaf->val[i] = x0 - h;
            const real fm = scalar_value(build());
            leaf->val[i] = x0;
            const real fd = (fp - fm) / (2.0 * h);
            INFO("leaf element ", i, " analytic ", leaf->grad[i], " numeric ", fd);
            CHECK(std::abs(leaf->grad[i] - fd) <= tol * (1.0 + std::abs(fd)));
        }
    }
}

Var rand_leaf(Rng& rng, std::vector<int> shape, real lo = -1.0, real hi = 1.0) {
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    Array a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
    return leaf(std::move(shape), std::move(a));
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(7);
    auto a = rand_leaf(rng, {2, 5});
    auto b = rand_leaf(rng, {2, 5});
    grad_check({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); });
    grad_check({a}, [&] { return sum(scale(add_scalar(a, 0.3), -1.7)); });
    grad_check({a}, [&] { return sum(sigmoid(a)); });
    grad_check({a}, [&] { return sum(tanh_act(a)); });
    // keep inputs away from the relu/lrelu kinks
    auto c = rand_leaf(rng, {2, 5}, 0.2, 1.0);
    auto d = rand_leaf(rng, {2, 5}, -1.0, -0.2);
    grad_check({c, d}, [&] { return sum(add(relu(c), relu(d))); });
    grad_check({c, d}, [&] { return sum(add(lrelu(c), lrelu(d))); });
}

TEST_CASE("linear / concat / slice / reshape gradients") {
    Rng rng(8);
    auto x = rand_leaf(rng, {3, 4});
    auto w = rand_leaf(rng, {2, 4});
    auto b = rand_leaf(rng, {2});
    grad_check({x, w, b}, [&] { return sum(linear(x, w, b)); });
    grad_check({x, w, b}, [&] { return sqdist(linear(x, w, b), constant({3, 2}, Array::Ones(6))); });

    auto y = rand_leaf(rng, {3, 2});
    grad_check({x, y}, [&] { return sum(mul(concat_features({x, y}), concat_features({y, x}))); });
    grad_check({x}, [&] { return sum(mul(slice_features(x, 1, 2), slice_features(x, 2, 2))); });
    grad_check({x}, [&] { return sum(sigmoid(reshape(x, {12}))); });
}

TEST_CASE("linear computes x w^T + b") {
    auto x = constant({1, 3}, (Array(3) << 1.0, 2.0, 3.0).finished());
    auto w = constant({2, 3}, (Array(6) << 1.0, 0.0, 0.0, 0.5, 0.5, -1.0).finished());
    auto b = constant({2}, (Array(2) << 10.0, -1.0).finished());
    auto y = linear(x, w, b);
    CHECK(y->val[0] == doctest::Approx(11.0));
    CHECK(y->val[1] == doctest::Approx(1.0 * 0.5 + 2.0 * 0.5 - 3.0 - 1.0));
}

TEST_CASE("conv2d forward matches a direct loop and gradients check out") {
    Rng rng(9);
    const int N = 2, C = 2, H = 5, W = 5, Co = 3, k = 3, stride = 2, pad = 1;
    auto x = rand_leaf(rng, {N, C, H, W});
    auto w = rand_leaf(rng, {Co, C * k * k});
    auto b = rand_leaf(rng, {Co});
    auto y = conv2d(x, w, b, k, stride, pad);
    const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    REQUIRE(y->shape == std::vector<int>{N, Co, Ho, Wo});

    auto xat = [&](int n, int c, int yy, int xx) -> real {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
        return x->val[((n * C + c) * H + yy) * W + xx];
    };
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    real acc = b->val[co];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                acc += w->val[co * C * k * k + (c * k + ky) * k + kx] *
                                       xat(n, c, oy * stride + ky - pad, ox * stride + kx - pad);
                    CHECK(y->val[((n * Co + co) * Ho + oy) * Wo + ox] == doctest::Approx(acc).epsilon(1e-10));
                }

    grad_check({x, w, b},
               [&] { return sqdist(conv2d(x, w, b, k, stride, pad), constant({N, Co, Ho, Wo}, Array::Ones(N * Co * Ho * Wo) * 0.1)); },
               1e-6, 1e-5);
}

TEST_CASE("upsample2 / avgpool2 / film gradients and semantics") {
    Rng rng(10);
    auto x = rand_leaf(rng, {1, 2, 2, 2});
    auto u = upsample2(x);
    REQUIRE(u->shape == std::vector<int>{1, 2, 4, 4});
    CHECK(u->val[0] == x->val[0]);
    CHECK(u->val[1] == x->val[0]);
    CHECK(u->val[4] == x->val[0]);
    CHECK(u->val[5] == x->val[0]);
    grad_check({x}, [&] { return sum(mul(upsample2(x), upsample2(x))); });

    auto p = rand_leaf(rng, {1, 2, 4, 4});
    auto q = avgpool2(p);
    REQUIRE(q->shape == std::vector<int>{1, 2, 2, 2});
    CHECK(q->val[0] == doctest::Approx((p->val[0] + p->val[1] + p->val[4] + p->val[5]) / 4.0));
    grad_check({p}, [&] { return sum(sigmoid(avgpool2(p))); });

    auto f = rand_leaf(rng, {2, 3, 2, 2});
    auto s = rand_leaf(rng, {2, 6});
    auto fy = film(f, s);
    // y[n,c,:,:] = x * (1 + s[n,c]) + s[n,C+c]
    CHECK(fy->val[0] == doctest::Approx(f->val[0] * (1.0 + s->val[0]) + s->val[3]));
    grad_check({f, s}, [&] { return sum(tanh_act(film(f, s))); });
}

TEST_CASE("reduction and loss op gradients") {
    Rng rng(11);
    auto a = rand_leaf(rng, {2, 6});
    auto b = rand_leaf(rng, {2, 6});
    grad_check({a}, [&] { return mean(a); });
    grad_check({a, b}, [&] { return dot(a, b); });
    grad_check({a, b}, [&] { return l1_mean(a, b); }, 1e-5);  // |.| nondifferentiable only at 0
    grad_check({a, b}, [&] { return sqdist(a, b); });
    grad_check({a}, [&] { return l2_norm(a); });
    grad_check({a, b}, [&] { return cosine_rows_mean(a, b); });
    grad_check({a}, [&] { return sum(mul(unit_rows(a), b)); });
    CHECK(scalar_value(cosine_rows_mean(a, a)) == doctest::Approx(1.0));

    auto row = unit_rows(a);
    for (int n = 0; n < 2; ++n) {
        real s = 0;
        for (int i = 0; i < 6; ++i) s += row->val[n * 6 + i] * row->val[n * 6 + i];
        CHECK(s == doctest::Approx(1.0));
    }
}

TEST_CASE("normalize_channels: unit channel vector per pixel, gradients pass") {
    Rng rng(12);
    auto x = rand_leaf(rng, {1, 3, 2, 2}, 0.1, 1.0);
    auto y = normalize_channels(x);
    for (int p = 0; p < 4; ++p) {
        real s = 0;
        for (int c = 0; c < 3; ++c) s += y->val[c * 4 + p] * y->val[c * 4 + p];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto t = rand_leaf(rng, {1, 3, 2, 2});
    grad_check({x}, [&] { return sqdist(normalize_channels(x), t); }, 1e-5);
}

TEST_CASE("masked_mean_channels matches a direct masked average") {
    Rng rng(13);
    auto x = rand_leaf(rng, {1, 3, 4, 4});
    std::vector<uint8_t> mask(16, 0);
    mask[1] = mask[5] = mask[10] = 1;
    auto m = masked_mean_channels(x, mask);
    REQUIRE(m->shape == std::vector<int>{3});
    for (int c = 0; c < 3; ++c)
        CHECK(m->val[c] == doctest::Approx((x->val[c * 16 + 1] + x->val[c * 16 + 5] + x->val[c * 16 + 10]) / 3.0));
    grad_check({x}, [&] { return sqdist(masked_mean_channels(x, mask), constant({3}, Array::Zero(3))); });
    CHECK_THROWS_AS(masked_mean_channels(x, std::vector<uint8_t>(16, 0)), ArgumentError);
}

TEST_CASE("softmax_rows: simplex rows, beta scaling, gradient") {
    Rng rng(14);
    auto x = rand_leaf(rng, {2, 4}, -2.0, 2.0);
    for (real beta : {1.0, 3.0}) {
        auto y = softmax_rows(x, beta);
        for (int n = 0; n < 2; ++n) {
            real s = 0;
            for (int i = 0; i < 4; ++i) {
                s += y->val[n * 4 + i];
                const real expect = std::exp(beta * x->val[n * 4 + i]);
                real z = 0;
                for (int j = 0; j < 4; ++j) z += std::exp(beta * x->val[n * 4 + j]);
                CHECK(y->val[n * 4 + i] == doctest::Approx(expect / z));
            }
            CHECK(s == doctest::Approx(1.0));
        }
        auto t = rand_leaf(rng, {2, 4});
        grad_check({x}, [&] { return sqdist(softmax_rows(x, beta), t); }, 1e-5);
    }
    auto bad = constant({1, 2}, (Array(2) << 1.0, std::numeric_limits<real>::infinity()).finished());
    CHECK_THROWS_AS(softmax_rows(bad, 1.0), ArgumentError);
}

TEST_CASE("straight_through: one-hot argmax forward, identity backward, ties to lowest") {
    auto x = leaf({2, 3}, (Array(6) << 0.1, 0.7, 0.2, 0.5, 0.5, 0.3).finished());
    auto y = straight_through(x);
    CHECK(y->val[0] == 0.0);
    CHECK(y->val[1] == 1.0);
    CHECK(y->val[2] == 0.0);
    CHECK(y->val[3] == 1.0);  // tie 0.5/0.5 resolves to the lowest index
    CHECK(y->val[4] == 0.0);

    auto w = leaf({2, 3}, (Array(6) << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0).finished());
    auto out = dot(straight_through(x), w);
    backward(out);
    for (int i = 0; i < 6; ++i) CHECK(x->grad[i] == doctest::Approx(w->val[i]));
}

TEST_CASE("cross_entropy_logits matches -log softmax and its gradient") {
    Rng rng(15);
    auto x = rand_leaf(rng, {3, 4}, -1.5, 1.5);
    std::vector<int> labels{2, 0, 3};
    auto loss = cross_entropy_logits(x, labels);
    real expect = 0;
    for (int n = 0; n < 3; ++n) {
        real z = 0;
        for (int j = 0; j < 4; ++j) z += std::exp(x->val[n * 4 + j]);
        expect -= std::log(std::exp(x->val[n * 4 + labels[static_cast<size_t>(n)]]) / z);
    }
    CHECK(scalar_value(loss) == doctest::Approx(expect / 3.0));
    grad_check({x}, [&] { return cross_entropy_logits(x, labels); }, 1e-5);
}

TEST_CASE("backward handles reused subexpressions (diamond graph)") {
    auto x = leaf({2}, (Array(2) << 0.4, -0.3).finished());
    grad_check({x}, [&] {
        auto s = sigmoid(x);
        return sum(mul(s, add(s, x)));
    });
}

TEST_CASE("orthogonal_rows yields orthonormal rows deterministically") {
    Rng r1(42), r2(42);
    auto a = orthogonal_rows(r1, 4, 9);
    auto b = orthogonal_rows(r2, 4, 9);
    CHECK((a - b).abs().maxCoeff() == 0.0);
    Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(a.data(), 4, 9);
    Eigen::MatrixXd g = m * m.transpose();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(g(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
}

TEST_CASE("Adam minimizes a quadratic") {
    auto x = leaf({3}, (Array(3) << 2.0, -1.5, 0.7).finished());
    Adam opt({x}, 0.05);
    for (int it = 0; it < 400; ++it) {
        opt.zero_grad();
        auto loss = sqdist(x, constant({3}, (Array(3) << 1.0, 1.0, 1.0).finished()));
        backward(loss);
        opt.step();
    }
    for (int i = 0; i < 3; ++i) CHECK(x->val[i] == doctest::Approx(1.0).epsilon(1e-3));
}

namespace {
class ToyModule : public Module {
public:
    ToyModule() {
        Rng rng(3);
        w = add_param("w", {2, 3}, he_init(rng, 3, 6));
        b = add_param("b", {2}, Array::Zero(2));
    }
    Var w, b;
};
}  // namespace

TEST_CASE("Module checkpoint round-trip restores parameters exactly") {
    ToyModule m1;
    m1.w->val[0] = 0.123456789;
    io::Checkpoint ckpt;
    ckpt.schema_hash = 77;
    m1.save_params(ckpt, "toy/");
    const auto path = (std::filesystem::temp_directory_path() / "avafit_ckpt_test.bin").string();
    ckpt.save(path);

    ToyModule m2;
    auto loaded = io::Checkpoint::load(path);
    CHECK(loaded.schema_hash == 77);
    m2.load_params(loaded, "toy/");
    CHECK((m1.w->val - m2.w->val).abs().maxCoeff() == 0.0);
    CHECK((m1.b->val - m2.b->val).abs().maxCoeff() == 0.0);
    std::filesystem::remove(path);
}

TEST_CASE("set_trainable(false) freezes parameters under Adam") {
    ToyModule m;
    m.set_trainable(false);
    const Array before = m.w->val;
    Adam opt(m.param_vars(), 0.1);
    auto loss = sqdist(m.w, constant({2, 3}, Array::Ones(6) * 5.0));
    opt.zero_grad();
    backward(loss);
    opt.step();
    CHECK((m.w->val - before).abs().maxCoeff() == 0.0);
}
