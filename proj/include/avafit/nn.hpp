#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "avafit/common.hpp"
#include "avafit/io.hpp"

namespace avafit::nn {

using Array = Eigen::ArrayXd;

/// A node in the dynamically built computation graph. Reverse-mode autodiff
/// over flat double arrays; shapes are bookkeeping on top.
struct Node {
    Array val;
    Array grad;  // lazily sized
    std::vector<int> shape;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pull from this->grad, push to parents
    bool requires_grad = false;

    Eigen::Index numel() const { return val.size(); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad = Array::Zero(val.size());
    }
};

using Var = std::shared_ptr<Node>;

Var constant(std::vector<int> shape, Array vals);
Var constant_scalar(real v);
Var leaf(std::vector<int> shape, Array vals, bool requires_grad = true);

/// Reverse pass from a scalar node; seeds d(out)/d(out) = 1.
void backward(const Var& out);
real scalar_value(const Var& v);

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var add_scalar(const Var& a, real s);
Var relu(const Var& a);
Var lrelu(const Var& a, real alpha = 0.2);
Var sigmoid(const Var& a);
Var tanh_act(const Var& a);

// linear algebra / structure
Var linear(const Var& x, const Var& w, const Var& b);  // x {N,D}, w {Do,D}, b {Do}
Var concat_features(const std::vector<Var>& xs);       // {N,Di} -> {N,sum Di}
Var slice_features(const Var& x, int from, int len);   // {N,D} -> {N,len}
Var slice_batch(const Var& x, int n);                   // {N,rest...} -> {1,rest...}
Var reshape(const Var& x, std::vector<int> shape);
Var transpose2d(const Var& x);  // {R,C} -> {C,R}

// conv stack; x {N,C,H,W}, w {Co, C*k*k}, b {Co}
Var conv2d(const Var& x, const Var& w, const Var& b, int k, int stride, int pad);
Var upsample2(const Var& x);
Var avgpool2(const Var& x);
Var global_avgpool(const Var& x);  // {N,C,H,W} -> {N,C}
/// Per-channel affine modulation from a style vector s {N,2C}:
/// y = x * (1 + s[:, :C]) + s[:, C:]
Var film(const Var& x, const Var& s);

// reductions / losses
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);
Var l1_mean(const Var& a, const Var& b);
Var sqdist(const Var& a, const Var& b);          // sum of squared differences
Var l2_norm(const Var& a, real eps = 1e-12);     // sqrt(sum a^2 + eps)
Var unit_rows(const Var& x, real eps = 1e-8);    // {N,D}, each row normalized
Var cosine_rows_mean(const Var& a, const Var& b, real eps = 1e-8);
/// LPIPS-style per-pixel channel normalization over {N,C,H,W}.
Var normalize_channels(const Var& x, real eps = 1e-8);
/// Mean color over masked pixels: x {1,C,H,W}, mask length H*W -> {C}.
/// mask_count must be > 0.
Var masked_mean_channels(const Var& x, const std::vector<uint8_t>& mask);
Var softmax_rows(const Var& x, real beta = 1.0);
/// Forward: one-hot argmax per row (ties to lowest index).
/// Backward: gradients pass through unchanged.
Var straight_through(const Var& x);
/// Mean cross-entropy of row-softmax(logits {N,K}) against integer labels.
Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels);
/// Weighted variant: per-row weights, loss normalized by total weight.
Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels,
                         const std::vector<real>& sample_weights);

// initializers
Array he_init(Rng& rng, int fan_in, int count);
Array xavier_init(Rng& rng, int fan_in, int fan_out, int count);
/// Random filter bank with orthonormal rows (QR of a Gaussian matrix).
Array orthogonal_rows(Rng& rng, int rows, int cols);

/// A trainable component: owns named parameter leaves.
class Module {
public:
    virtual ~Module() = default;

    Var add_param(const std::string& name, std::vector<int> shape, Array init);
    const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
    std::vector<Var> param_vars() const;
    size_t param_count() const;
    void set_trainable(bool trainable);
    bool trainable() const { return trainable_; }

    void save_params(io::Checkpoint& ckpt, const std::string& prefix) const;
    void load_params(const io::Checkpoint& ckpt, const std::string& prefix);

private:
    std::vector<std::pair<std::string, Var>> params_;
    bool trainable_ = true;
};

class Adam {
public:
    explicit Adam(std::vector<Var> params, real lr = 1e-3, real beta1 = 0.9, real beta2 = 0.999,
                  real eps = 1e-8);
    void step();
    void zero_grad();
    void set_lr(real lr) { lr_ = lr; }
    real lr() const { return lr_; }

private:
    std::vector<Var> params_;
    std::vector<Array> m_, v_;
    real lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

/// Central finite-difference derivative of f at x[i]; used by gradient-check
/// oracles in tests and the acceptance suite.
real finite_difference(const std::function<real(real)>& f, real x, real h = 1e-5);

}  // namespace avafit::nn
