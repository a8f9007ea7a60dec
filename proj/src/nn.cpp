#include "avafit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <Eigen/Dense>

namespace avafit::nn {

namespace {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

Eigen::Index numel_of(const std::vector<int>& shape) {
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    return n;
}

Var make_node(std::vector<int> shape, Array vals, std::vector<Var> parents,
              std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(vals);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

bool wants(const Var& p) { return p->requires_grad; }

void accum(Var& p, const Array& g) {
    p->ensure_grad();
    p->grad += g;
}

}  // namespace

Var constant(std::vector<int> shape, Array vals) {
    if (numel_of(shape) != vals.size()) throw ArgumentError("constant: shape/value size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(vals);
    return n;
}

Var constant_scalar(real v) {
    Array a(1);
    a[0] = v;
    return constant({1}, std::move(a));
}

Var leaf(std::vector<int> shape, Array vals, bool requires_grad) {
    if (numel_of(shape) != vals.size()) throw ArgumentError("leaf: shape/value size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(vals);
    n->requires_grad = requires_grad;
    return n;
}

void backward(const Var& out) {
    if (out->numel() != 1) throw ArgumentError("backward: output must be scalar");
    // iterative post-order topo sort
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{out.get(), 0}};
    seen.insert(out.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    out->ensure_grad();
    out->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() == n->val.size()) n->backprop(*n);
    }
}

real scalar_value(const Var& v) {
    if (v->numel() != 1) throw ArgumentError("scalar_value: not a scalar");
    return v->val[0];
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("add: size mismatch");
    return make_node(a->shape, a->val + b->val, {a, b}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad);
        if (wants(n.parents[1])) accum(n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("sub: size mismatch");
    return make_node(a->shape, a->val - b->val, {a, b}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad);
        if (wants(n.parents[1])) accum(n.parents[1], -n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("mul: size mismatch");
    return make_node(a->shape, a->val * b->val, {a, b}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad * n.parents[1]->val);
        if (wants(n.parents[1])) accum(n.parents[1], n.grad * n.parents[0]->val);
    });
}

Var scale(const Var& a, real s) {
    return make_node(a->shape, a->val * s, {a}, [s](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad * s);
    });
}

Var add_scalar(const Var& a, real s) {
    return make_node(a->shape, a->val + s, {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad);
    });
}

Var relu(const Var& a) {
    return make_node(a->shape, a->val.max(0.0), {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad * (n.parents[0]->val > 0.0).cast<real>());
    });
}

Var lrelu(const Var& a, real alpha) {
    Array out = a->val.max(a->val * alpha);
    return make_node(a->shape, std::move(out), {a}, [alpha](Node& n) {
        if (wants(n.parents[0])) {
            Array m = (n.parents[0]->val > 0.0).cast<real>();
            accum(n.parents[0], n.grad * (m + alpha * (1.0 - m)));
        }
    });
}

Var sigmoid(const Var& a) {
    Array out = 1.0 / (1.0 + (-a->val).exp());
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad * n.val * (1.0 - n.val));
    });
}

Var tanh_act(const Var& a) {
    Array out = a->val.tanh();
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad * (1.0 - n.val * n.val));
    });
}

// ---------------------------------------------------------------------------
// structure

Var linear(const Var& x, const Var& w, const Var& b) {
    if (x->shape.size() != 2 || w->shape.size() != 2) throw ArgumentError("linear: need 2-D inputs");
    const int n = x->shape[0], d = x->shape[1];
    const int dout = w->shape[0];
    if (w->shape[1] != d || b->numel() != dout) throw ArgumentError("linear: shape mismatch");
    CMapRM X(x->val.data(), n, d), W(w->val.data(), dout, d);
    Array out(static_cast<Eigen::Index>(n) * dout);
    MapRM Y(out.data(), n, dout);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->val.data(), dout);
    return make_node({n, dout}, std::move(out), {x, w, b}, [n, d, dout](Node& nn) {
        CMapRM dY(nn.grad.data(), n, dout);
        CMapRM X2(nn.parents[0]->val.data(), n, d), W2(nn.parents[1]->val.data(), dout, d);
        if (wants(nn.parents[0])) {
            Array gx(static_cast<Eigen::Index>(n) * d);
            MapRM(gx.data(), n, d).noalias() = dY * W2;
            accum(nn.parents[0], gx);
        }
        if (wants(nn.parents[1])) {
            Array gw(static_cast<Eigen::Index>(dout) * d);
            MapRM(gw.data(), dout, d).noalias() = dY.transpose() * X2;
            accum(nn.parents[1], gw);
        }
        if (wants(nn.parents[2])) {
            Array gb(dout);
            Eigen::Map<Eigen::RowVectorXd>(gb.data(), dout) = dY.colwise().sum();
            accum(nn.parents[2], gb);
        }
    });
}

Var concat_features(const std::vector<Var>& xs) {
    if (xs.empty()) throw ArgumentError("concat: empty");
    const int n = xs[0]->shape[0];
    int dtot = 0;
    for (const auto& x : xs) {
        if (x->shape.size() != 2 || x->shape[0] != n) throw ArgumentError("concat: shape mismatch");
        dtot += x->shape[1];
    }
    Array out(static_cast<Eigen::Index>(n) * dtot);
    int off = 0;
    for (const auto& x : xs) {
        const int d = x->shape[1];
        for (int i = 0; i < n; ++i)
            out.segment(static_cast<Eigen::Index>(i) * dtot + off, d) = x->val.segment(static_cast<Eigen::Index>(i) * d, d);
        off += d;
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node({n, dtot}, std::move(out), std::move(parents), [n, dtot](Node& nn) {
        int off2 = 0;
        for (auto& p : nn.parents) {
            const int d = p->shape[1];
            if (wants(p)) {
                Array g(static_cast<Eigen::Index>(n) * d);
                for (int i = 0; i < n; ++i)
                    g.segment(static_cast<Eigen::Index>(i) * d, d) =
                        nn.grad.segment(static_cast<Eigen::Index>(i) * dtot + off2, d);
                accum(p, g);
            }
            off2 += d;
        }
    });
}

Var slice_features(const Var& x, int from, int len) {
    if (x->shape.size() != 2) throw ArgumentError("slice: need 2-D input");
    const int n = x->shape[0], d = x->shape[1];
    if (from < 0 || from + len > d) throw ArgumentError("slice: out of range");
    Array out(static_cast<Eigen::Index>(n) * len);
    for (int i = 0; i < n; ++i)
        out.segment(static_cast<Eigen::Index>(i) * len, len) = x->val.segment(static_cast<Eigen::Index>(i) * d + from, len);
    return make_node({n, len}, std::move(out), {x}, [n, d, from, len](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g = Array::Zero(static_cast<Eigen::Index>(n) * d);
        for (int i = 0; i < n; ++i)
            g.segment(static_cast<Eigen::Index>(i) * d + from, len) = nn.grad.segment(static_cast<Eigen::Index>(i) * len, len);
        accum(nn.parents[0], g);
    });
}

Var slice_batch(const Var& x, int n) {
    if (x->shape.empty()) throw ArgumentError("slice_batch: need batched input");
    const int nb = x->shape[0];
    if (n < 0 || n >= nb) throw ArgumentError("slice_batch: index out of range");
    const Eigen::Index per = x->numel() / nb;
    std::vector<int> shape = x->shape;
    shape[0] = 1;
    Array out = x->val.segment(static_cast<Eigen::Index>(n) * per, per);
    return make_node(std::move(shape), std::move(out), {x}, [n, nb, per](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g = Array::Zero(static_cast<Eigen::Index>(nb) * per);
        g.segment(static_cast<Eigen::Index>(n) * per, per) = nn.grad;
        accum(nn.parents[0], g);
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    if (numel_of(shape) != x->numel()) throw ArgumentError("reshape: size mismatch");
    return make_node(std::move(shape), x->val, {x}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad);
    });
}

Var transpose2d(const Var& x) {
    if (x->shape.size() != 2) throw ArgumentError("transpose2d: expected a 2-d shape");
    const int r = x->shape[0], c = x->shape[1];
    Array out(x->numel());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<Eigen::Index>(j) * r + i] = x->val[static_cast<Eigen::Index>(i) * c + j];
    return make_node({c, r}, std::move(out), {x}, [r, c](Node& n) {
        if (!wants(n.parents[0])) return;
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                p.grad[static_cast<Eigen::Index>(i) * c + j] += n.grad[static_cast<Eigen::Index>(j) * r + i];
    });
}

// ---------------------------------------------------------------------------
// convolution

namespace {

void im2col(const real* src, int c_in, int h, int w, int k, int stride, int pad, Eigen::MatrixXd& col) {
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    col.resize(c_in * k * k, static_cast<Eigen::Index>(ho) * wo);
    for (int c = 0; c < c_in; ++c) {
        const real* plane = src + static_cast<size_t>(c) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const int row = (c * k + ki) * k + kj;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy * stride + ki - pad;
                    real* dst = col.data() + row + static_cast<size_t>(oy) * wo * col.rows();
                    if (sy < 0 || sy >= h) {
                        for (int ox = 0; ox < wo; ++ox) dst[static_cast<size_t>(ox) * col.rows()] = 0.0;
                        continue;
                    }
                    for (int ox = 0; ox < wo; ++ox) {
                        const int sx = ox * stride + kj - pad;
                        dst[static_cast<size_t>(ox) * col.rows()] =
                            (sx >= 0 && sx < w) ? plane[static_cast<size_t>(sy) * w + sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const Eigen::MatrixXd& col, int c_in, int h, int w, int k, int stride, int pad, real* dst) {
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    for (int c = 0; c < c_in; ++c) {
        real* plane = dst + static_cast<size_t>(c) * h * w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const int row = (c * k + ki) * k + kj;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy * stride + ki - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int sx = ox * stride + kj - pad;
                        if (sx < 0 || sx >= w) continue;
                        plane[static_cast<size_t>(sy) * w + sx] +=
                            col(row, static_cast<Eigen::Index>(oy) * wo + ox);
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int k, int stride, int pad) {
    if (x->shape.size() != 4) throw ArgumentError("conv2d: input must be {N,C,H,W}");
    const int n = x->shape[0], c_in = x->shape[1], h = x->shape[2], wd = x->shape[3];
    const int c_out = w->shape[0];
    if (w->shape.size() != 2 || w->shape[1] != c_in * k * k || b->numel() != c_out)
        throw ArgumentError("conv2d: weight shape mismatch");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    Array out(static_cast<Eigen::Index>(n) * c_out * ho * wo);
    CMapRM W(w->val.data(), c_out, c_in * k * k);
    Eigen::MatrixXd col;
    const Eigen::Index per_in = static_cast<Eigen::Index>(c_in) * h * wd;
    const Eigen::Index per_out = static_cast<Eigen::Index>(c_out) * ho * wo;
    for (int i = 0; i < n; ++i) {
        im2col(x->val.data() + i * per_in, c_in, h, wd, k, stride, pad, col);
        MapRM Y(out.data() + i * per_out, c_out, static_cast<Eigen::Index>(ho) * wo);
        Y.noalias() = W * col;
        Y.colwise() += Eigen::Map<const Eigen::VectorXd>(b->val.data(), c_out);
    }
    return make_node({n, c_out, ho, wo}, std::move(out), {x, w, b},
                     [n, c_in, h, wd, c_out, k, stride, pad, ho, wo, per_in, per_out](Node& nn) {
        CMapRM W2(nn.parents[1]->val.data(), c_out, c_in * k * k);
        const bool want_x = wants(nn.parents[0]);
        const bool want_w = wants(nn.parents[1]);
        const bool want_b = wants(nn.parents[2]);
        Array gx, gw, gb;
        if (want_x) gx = Array::Zero(static_cast<Eigen::Index>(n) * per_in);
        if (want_w) gw = Array::Zero(nn.parents[1]->numel());
        if (want_b) gb = Array::Zero(c_out);
        Eigen::MatrixXd col, dcol;
        for (int i = 0; i < n; ++i) {
            CMapRM dY(nn.grad.data() + i * per_out, c_out, static_cast<Eigen::Index>(ho) * wo);
            if (want_w) {
                im2col(nn.parents[0]->val.data() + i * per_in, c_in, h, wd, k, stride, pad, col);
                MapRM(gw.data(), c_out, c_in * k * k).noalias() += dY * col.transpose();
            }
            if (want_b) Eigen::Map<Eigen::VectorXd>(gb.data(), c_out) += dY.rowwise().sum();
            if (want_x) {
                dcol.noalias() = W2.transpose() * dY;
                col2im(dcol, c_in, h, wd, k, stride, pad, gx.data() + i * per_in);
            }
        }
        if (want_x) accum(nn.parents[0], gx);
        if (want_w) accum(nn.parents[1], gw);
        if (want_b) accum(nn.parents[2], gb);
    });
}

Var upsample2(const Var& x) {
    if (x->shape.size() != 4) throw ArgumentError("upsample2: input must be {N,C,H,W}");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    Array out(static_cast<Eigen::Index>(n) * c * 4 * h * w);
    const int H = 2 * h, W = 2 * w;
    for (int i = 0; i < n * c; ++i) {
        const real* src = x->val.data() + static_cast<size_t>(i) * h * w;
        real* dst = out.data() + static_cast<size_t>(i) * H * W;
        for (int y = 0; y < H; ++y)
            for (int xq = 0; xq < W; ++xq)
                dst[static_cast<size_t>(y) * W + xq] = src[static_cast<size_t>(y / 2) * w + xq / 2];
    }
    return make_node({n, c, H, W}, std::move(out), {x}, [n, c, h, w, H, W](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g = Array::Zero(static_cast<Eigen::Index>(n) * c * h * w);
        for (int i = 0; i < n * c; ++i) {
            const real* src = nn.grad.data() + static_cast<size_t>(i) * H * W;
            real* dst = g.data() + static_cast<size_t>(i) * h * w;
            for (int y = 0; y < H; ++y)
                for (int xq = 0; xq < W; ++xq)
                    dst[static_cast<size_t>(y / 2) * w + xq / 2] += src[static_cast<size_t>(y) * W + xq];
        }
        accum(nn.parents[0], g);
    });
}

Var avgpool2(const Var& x) {
    if (x->shape.size() != 4) throw ArgumentError("avgpool2: input must be {N,C,H,W}");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    const int H = h / 2, W = w / 2;
    Array out(static_cast<Eigen::Index>(n) * c * H * W);
    for (int i = 0; i < n * c; ++i) {
        const real* src = x->val.data() + static_cast<size_t>(i) * h * w;
        real* dst = out.data() + static_cast<size_t>(i) * H * W;
        for (int y = 0; y < H; ++y)
            for (int xq = 0; xq < W; ++xq)
                dst[static_cast<size_t>(y) * W + xq] =
                    0.25 * (src[static_cast<size_t>(2 * y) * w + 2 * xq] + src[static_cast<size_t>(2 * y) * w + 2 * xq + 1] +
                            src[static_cast<size_t>(2 * y + 1) * w + 2 * xq] + src[static_cast<size_t>(2 * y + 1) * w + 2 * xq + 1]);
    }
    return make_node({n, c, H, W}, std::move(out), {x}, [n, c, h, w, H, W](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g = Array::Zero(static_cast<Eigen::Index>(n) * c * h * w);
        for (int i = 0; i < n * c; ++i) {
            const real* src = nn.grad.data() + static_cast<size_t>(i) * H * W;
            real* dst = g.data() + static_cast<size_t>(i) * h * w;
            for (int y = 0; y < H; ++y)
                for (int xq = 0; xq < W; ++xq) {
                    const real gv = 0.25 * src[static_cast<size_t>(y) * W + xq];
                    dst[static_cast<size_t>(2 * y) * w + 2 * xq] += gv;
                    dst[static_cast<size_t>(2 * y) * w + 2 * xq + 1] += gv;
                    dst[static_cast<size_t>(2 * y + 1) * w + 2 * xq] += gv;
                    dst[static_cast<size_t>(2 * y + 1) * w + 2 * xq + 1] += gv;
                }
        }
        accum(nn.parents[0], g);
    });
}

Var global_avgpool(const Var& x) {
    if (x->shape.size() != 4) throw ArgumentError("global_avgpool: input must be {N,C,H,W}");
    const int n = x->shape[0], c = x->shape[1];
    const Eigen::Index hw = static_cast<Eigen::Index>(x->shape[2]) * x->shape[3];
    Array out(static_cast<Eigen::Index>(n) * c);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n) * c; ++i) out[i] = x->val.segment(i * hw, hw).mean();
    return make_node({n, c}, std::move(out), {x}, [n, c, hw](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g(static_cast<Eigen::Index>(n) * c * hw);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n) * c; ++i)
            g.segment(i * hw, hw).setConstant(nn.grad[i] / static_cast<real>(hw));
        accum(nn.parents[0], g);
    });
}

Var film(const Var& x, const Var& s) {
    if (x->shape.size() != 4 || s->shape.size() != 2) throw ArgumentError("film: bad shapes");
    const int n = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    if (s->shape[0] != n || s->shape[1] != 2 * c) throw ArgumentError("film: style size mismatch");
    Array out(x->numel());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const real g = 1.0 + s->val[static_cast<Eigen::Index>(i) * 2 * c + ch];
            const real t = s->val[static_cast<Eigen::Index>(i) * 2 * c + c + ch];
            const Eigen::Index off = (static_cast<Eigen::Index>(i) * c + ch) * hw;
            out.segment(off, hw) = x->val.segment(off, hw) * g + t;
        }
    }
    return make_node(x->shape, std::move(out), {x, s}, [n, c, hw](Node& nn) {
        const bool want_x = wants(nn.parents[0]);
        const bool want_s = wants(nn.parents[1]);
        Array gx, gs;
        if (want_x) gx.resize(nn.parents[0]->numel());
        if (want_s) gs = Array::Zero(nn.parents[1]->numel());
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                const Eigen::Index si = static_cast<Eigen::Index>(i) * 2 * c + ch;
                const Eigen::Index off = (static_cast<Eigen::Index>(i) * c + ch) * hw;
                const real g = 1.0 + nn.parents[1]->val[si];
                if (want_x) gx.segment(off, hw) = nn.grad.segment(off, hw) * g;
                if (want_s) {
                    gs[si] = (nn.grad.segment(off, hw) * nn.parents[0]->val.segment(off, hw)).sum();
                    gs[si + c] = nn.grad.segment(off, hw).sum();
                }
            }
        }
        if (want_x) accum(nn.parents[0], gx);
        if (want_s) accum(nn.parents[1], gs);
    });
}

// ---------------------------------------------------------------------------
// reductions and losses

Var sum(const Var& a) {
    Array out(1);
    out[0] = a->val.sum();
    return make_node({1}, std::move(out), {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], Array::Constant(n.parents[0]->numel(), n.grad[0]));
    });
}

Var mean(const Var& a) {
    const real inv = 1.0 / static_cast<real>(a->numel());
    Array out(1);
    out[0] = a->val.sum() * inv;
    return make_node({1}, std::move(out), {a}, [inv](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], Array::Constant(n.parents[0]->numel(), n.grad[0] * inv));
    });
}

Var dot(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("dot: size mismatch");
    Array out(1);
    out[0] = (a->val * b->val).sum();
    return make_node({1}, std::move(out), {a, b}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad[0] * n.parents[1]->val);
        if (wants(n.parents[1])) accum(n.parents[1], n.grad[0] * n.parents[0]->val);
    });
}

Var l1_mean(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("l1_mean: size mismatch");
    const real inv = 1.0 / static_cast<real>(a->numel());
    Array out(1);
    out[0] = (a->val - b->val).abs().sum() * inv;
    return make_node({1}, std::move(out), {a, b}, [inv](Node& n) {
        Array s = (n.parents[0]->val - n.parents[1]->val).sign() * (n.grad[0] * inv);
        if (wants(n.parents[0])) accum(n.parents[0], s);
        if (wants(n.parents[1])) accum(n.parents[1], -s);
    });
}

Var sqdist(const Var& a, const Var& b) {
    if (a->numel() != b->numel()) throw ArgumentError("sqdist: size mismatch");
    Array out(1);
    out[0] = (a->val - b->val).square().sum();
    return make_node({1}, std::move(out), {a, b}, [](Node& n) {
        Array d = 2.0 * n.grad[0] * (n.parents[0]->val - n.parents[1]->val);
        if (wants(n.parents[0])) accum(n.parents[0], d);
        if (wants(n.parents[1])) accum(n.parents[1], -d);
    });
}

Var l2_norm(const Var& a, real eps) {
    Array out(1);
    out[0] = std::sqrt(a->val.square().sum() + eps);
    return make_node({1}, std::move(out), {a}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad[0] / n.val[0] * n.parents[0]->val);
    });
}

Var unit_rows(const Var& x, real eps) {
    if (x->shape.size() != 2) throw ArgumentError("unit_rows: need 2-D input");
    const int n = x->shape[0], d = x->shape[1];
    Array out(x->numel());
    for (int i = 0; i < n; ++i) {
        const auto row = x->val.segment(static_cast<Eigen::Index>(i) * d, d);
        out.segment(static_cast<Eigen::Index>(i) * d, d) = row / std::sqrt(row.square().sum() + eps);
    }
    return make_node(x->shape, std::move(out), {x}, [n, d, eps](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g(nn.parents[0]->numel());
        for (int i = 0; i < n; ++i) {
            const auto row = nn.parents[0]->val.segment(static_cast<Eigen::Index>(i) * d, d);
            const auto gout = nn.grad.segment(static_cast<Eigen::Index>(i) * d, d);
            const real norm = std::sqrt(row.square().sum() + eps);
            const real proj = (gout * row).sum() / (norm * norm * norm);
            g.segment(static_cast<Eigen::Index>(i) * d, d) = gout / norm - proj * row;
        }
        accum(nn.parents[0], g);
    });
}

Var cosine_rows_mean(const Var& a, const Var& b, real eps) {
    Var ua = unit_rows(a, eps), ub = unit_rows(b, eps);
    Var prod = mul(ua, ub);
    // sum over features, mean over rows
    return scale(sum(prod), 1.0 / static_cast<real>(a->shape[0]));
}

Var normalize_channels(const Var& x, real eps) {
    if (x->shape.size() != 4) throw ArgumentError("normalize_channels: input must be {N,C,H,W}");
    const int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
    Array out(x->numel());
    for (int i = 0; i < n; ++i) {
        const Eigen::Index base = static_cast<Eigen::Index>(i) * c * hw;
        for (Eigen::Index p = 0; p < hw; ++p) {
            real ss = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const real v = x->val[base + ch * hw + p];
                ss += v * v;
            }
            const real inv = 1.0 / std::sqrt(ss + eps);
            for (int ch = 0; ch < c; ++ch) out[base + ch * hw + p] = x->val[base + ch * hw + p] * inv;
        }
    }
    return make_node(x->shape, std::move(out), {x}, [n, c, hw, eps](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g(nn.parents[0]->numel());
        for (int i = 0; i < n; ++i) {
            const Eigen::Index base = static_cast<Eigen::Index>(i) * c * hw;
            for (Eigen::Index p = 0; p < hw; ++p) {
                real ss = 0.0, gd = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const real v = nn.parents[0]->val[base + ch * hw + p];
                    ss += v * v;
                    gd += nn.grad[base + ch * hw + p] * v;
                }
                const real norm = std::sqrt(ss + eps);
                const real inv3 = gd / (norm * norm * norm);
                for (int ch = 0; ch < c; ++ch) {
                    const real v = nn.parents[0]->val[base + ch * hw + p];
                    g[base + ch * hw + p] = nn.grad[base + ch * hw + p] / norm - inv3 * v;
                }
            }
        }
        accum(nn.parents[0], g);
    });
}

Var masked_mean_channels(const Var& x, const std::vector<uint8_t>& mask) {
    if (x->shape.size() != 4 || x->shape[0] != 1) throw ArgumentError("masked_mean_channels: need {1,C,H,W}");
    const int c = x->shape[1];
    const Eigen::Index hw = static_cast<Eigen::Index>(x->shape[2]) * x->shape[3];
    if (static_cast<Eigen::Index>(mask.size()) != hw) throw ArgumentError("masked_mean_channels: mask size mismatch");
    Eigen::Index count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    if (count == 0) throw ArgumentError("masked_mean_channels: empty mask");
    Array out = Array::Zero(c);
    for (int ch = 0; ch < c; ++ch) {
        real s = 0.0;
        for (Eigen::Index p = 0; p < hw; ++p)
            if (mask[static_cast<size_t>(p)]) s += x->val[ch * hw + p];
        out[ch] = s / static_cast<real>(count);
    }
    auto mask_copy = mask;
    return make_node({c}, std::move(out), {x}, [c, hw, count, mask_copy = std::move(mask_copy)](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g = Array::Zero(nn.parents[0]->numel());
        const real inv = 1.0 / static_cast<real>(count);
        for (int ch = 0; ch < c; ++ch) {
            const real gv = nn.grad[ch] * inv;
            for (Eigen::Index p = 0; p < hw; ++p)
                if (mask_copy[static_cast<size_t>(p)]) g[ch * hw + p] += gv;
        }
        accum(nn.parents[0], g);
    });
}

Var softmax_rows(const Var& x, real beta) {
    if (x->shape.size() != 2) throw ArgumentError("softmax: need 2-D input");
    if (!x->val.isFinite().all()) throw ArgumentError("softmax: non-finite logits");
    const int n = x->shape[0], d = x->shape[1];
    Array out(x->numel());
    for (int i = 0; i < n; ++i) {
        const auto row = x->val.segment(static_cast<Eigen::Index>(i) * d, d);
        Array e = (beta * (row - row.maxCoeff())).exp();
        out.segment(static_cast<Eigen::Index>(i) * d, d) = e / e.sum();
    }
    return make_node(x->shape, std::move(out), {x}, [n, d, beta](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g(nn.parents[0]->numel());
        for (int i = 0; i < n; ++i) {
            const auto y = nn.val.segment(static_cast<Eigen::Index>(i) * d, d);
            const auto go = nn.grad.segment(static_cast<Eigen::Index>(i) * d, d);
            const real s = (go * y).sum();
            g.segment(static_cast<Eigen::Index>(i) * d, d) = beta * y * (go - s);
        }
        accum(nn.parents[0], g);
    });
}

Var straight_through(const Var& x) {
    if (x->shape.size() != 2) throw ArgumentError("straight_through: need 2-D input");
    const int n = x->shape[0], d = x->shape[1];
    Array out = Array::Zero(x->numel());
    for (int i = 0; i < n; ++i) {
        const auto row = x->val.segment(static_cast<Eigen::Index>(i) * d, d);
        int best = 0;
        for (int k = 1; k < d; ++k)
            if (row[k] > row[best]) best = k;  // ties -> lowest index
        out[static_cast<Eigen::Index>(i) * d + best] = 1.0;
    }
    return make_node(x->shape, std::move(out), {x}, [](Node& n) {
        if (wants(n.parents[0])) accum(n.parents[0], n.grad);  // pass-through contract
    });
}

Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels) {
    return cross_entropy_logits(logits, labels, {});
}

Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels,
                         const std::vector<real>& sample_weights) {
    if (logits->shape.size() != 2) throw ArgumentError("cross_entropy: need 2-D logits");
    const int n = logits->shape[0], d = logits->shape[1];
    if (static_cast<int>(labels.size()) != n) throw ArgumentError("cross_entropy: label count mismatch");
    if (!sample_weights.empty() && static_cast<int>(sample_weights.size()) != n)
        throw ArgumentError("cross_entropy: weight count mismatch");
    std::vector<real> w = sample_weights.empty() ? std::vector<real>(static_cast<size_t>(n), 1.0) : sample_weights;
    real wsum = 0.0;
    for (const real x : w) {
        if (x < 0) throw ArgumentError("cross_entropy: negative weight");
        wsum += x;
    }
    if (wsum <= 0) throw ArgumentError("cross_entropy: zero total weight");
    Var probs = softmax_rows(logits, 1.0);
    Array out(1);
    real loss = 0.0;
    for (int i = 0; i < n; ++i)
        loss -= w[static_cast<size_t>(i)] *
                std::log(std::max(probs->val[static_cast<Eigen::Index>(i) * d + labels[static_cast<size_t>(i)]], 1e-12));
    out[0] = loss / wsum;
    auto labels_copy = labels;
    return make_node({1}, std::move(out), {probs},
                     [n, d, wsum, labels_copy = std::move(labels_copy), w = std::move(w)](Node& nn) {
        if (!wants(nn.parents[0])) return;
        Array g(nn.parents[0]->numel());
        const real inv = nn.grad[0] / wsum;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < d; ++k)
                g[static_cast<Eigen::Index>(i) * d + k] =
                    -inv * w[static_cast<size_t>(i)] /
                    std::max(nn.parents[0]->val[static_cast<Eigen::Index>(i) * d + k], 1e-12) *
                    (k == labels_copy[static_cast<size_t>(i)] ? 1.0 : 0.0);
        accum(nn.parents[0], g);
    });
}

// ---------------------------------------------------------------------------
// init / module / optimizer

Array he_init(Rng& rng, int fan_in, int count) {
    Array a(count);
    const real s = std::sqrt(2.0 / fan_in);
    for (int i = 0; i < count; ++i) a[i] = rng.gaussian(0.0, s);
    return a;
}

Array xavier_init(Rng& rng, int fan_in, int fan_out, int count) {
    Array a(count);
    const real s = std::sqrt(2.0 / (fan_in + fan_out));
    for (int i = 0; i < count; ++i) a[i] = rng.gaussian(0.0, s);
    return a;
}

Array orthogonal_rows(Rng& rng, int rows, int cols) {
    const int n = std::max(rows, cols);
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = rng.gaussian();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
    // fix signs for determinism across LAPACK variants
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    Array out(static_cast<Eigen::Index>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[static_cast<Eigen::Index>(i) * cols + j] = q(i, j);
    return out;
}

Var Module::add_param(const std::string& name, std::vector<int> shape, Array init) {
    Var v = leaf(std::move(shape), std::move(init), true);
    params_.emplace_back(name, v);
    return v;
}

std::vector<Var> Module::param_vars() const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& [n, v] : params_) out.push_back(v);
    return out;
}

size_t Module::param_count() const {
    size_t n = 0;
    for (const auto& [name, v] : params_) n += static_cast<size_t>(v->numel());
    return n;
}

void Module::set_trainable(bool trainable) {
    trainable_ = trainable;
    for (auto& [n, v] : params_) v->requires_grad = trainable;
}

void Module::save_params(io::Checkpoint& ckpt, const std::string& prefix) const {
    for (const auto& [name, v] : params_) {
        std::vector<real> vals(v->val.data(), v->val.data() + v->numel());
        ckpt.tensors[prefix + name] = std::move(vals);
    }
}

void Module::load_params(const io::Checkpoint& ckpt, const std::string& prefix) {
    for (auto& [name, v] : params_) {
        const auto it = ckpt.tensors.find(prefix + name);
        if (it == ckpt.tensors.end()) throw IoError("checkpoint missing tensor: " + prefix + name);
        if (static_cast<Eigen::Index>(it->second.size()) != v->numel())
            throw IoError("checkpoint tensor size mismatch: " + prefix + name);
        for (Eigen::Index i = 0; i < v->numel(); ++i) v->val[i] = it->second[static_cast<size_t>(i)];
    }
}

Adam::Adam(std::vector<Var> params, real lr, real beta1, real beta2, real eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.push_back(Array::Zero(p->numel()));
        v_.push_back(Array::Zero(p->numel()));
    }
}

void Adam::step() {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (p->grad.size() != p->val.size()) continue;  // no gradient this step
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->grad;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->grad.square();
        p->val -= lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) {
        if (p->grad.size() == p->val.size()) p->grad.setZero();
    }
}

real finite_difference(const std::function<real(real)>& f, real x, real h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace avafit::nn
