#include "avafit/modules.hpp"

#include <cmath>

namespace avafit::nn {

// ---------------------------------------------------------------- Mlp

Mlp::Mlp(Rng& rng, const std::vector<int>& widths) : widths_(widths) {
    if (widths.size() < 2) throw ArgumentError("Mlp needs at least input and output widths");
    for (size_t l = 0; l + 1 < widths.size(); ++l) {
        const int di = widths[l], dout = widths[l + 1];
        ws_.push_back(add_param("w" + std::to_string(l), {dout, di}, he_init(rng, di, dout * di)));
        bs_.push_back(add_param("b" + std::to_string(l), {dout}, Array::Zero(dout)));
    }
}

Var Mlp::forward(const Var& x) const {
    Var h = x;
    for (size_t l = 0; l < ws_.size(); ++l) {
        h = linear(h, ws_[l], bs_[l]);
        if (l + 1 < ws_.size()) h = lrelu(h);
    }
    return h;
}

// ---------------------------------------------------------- ConvEncoder

ConvEncoder::ConvEncoder(Rng& rng, int image_size, int base_channels, int num_stages, int out_dim,
                         bool global_pool)
    : size_(image_size), stages_(num_stages), out_dim_(out_dim), global_pool_(global_pool) {
    if (image_size % (1 << num_stages) != 0)
        throw ArgumentError("ConvEncoder: image size must be divisible by 2^stages");
    chans_ = {3};
    for (int s = 0; s < num_stages; ++s) chans_.push_back(base_channels << s);
    for (int s = 0; s < num_stages; ++s) {
        const int ci = chans_[static_cast<size_t>(s)], co = chans_[static_cast<size_t>(s) + 1];
        ws_.push_back(add_param("conv_w" + std::to_string(s), {co, ci * 9}, he_init(rng, ci * 9, co * ci * 9)));
        bs_.push_back(add_param("conv_b" + std::to_string(s), {co}, Array::Zero(co)));
    }
    const int side = image_size >> num_stages;
    const int flat = global_pool ? chans_.back() : chans_.back() * side * side;
    head_w_ = add_param("head_w", {out_dim, flat}, xavier_init(rng, flat, out_dim, out_dim * flat));
    head_b_ = add_param("head_b", {out_dim}, Array::Zero(out_dim));
}

Var ConvEncoder::forward(const Var& x) const {
    if (x->shape.size() != 4 || x->shape[2] != size_ || x->shape[3] != size_)
        throw ArgumentError("ConvEncoder: bad input shape");
    Var h = x;
    for (int s = 0; s < stages_; ++s)
        h = lrelu(conv2d(h, ws_[static_cast<size_t>(s)], bs_[static_cast<size_t>(s)], 3, 2, 1));
    const int n = x->shape[0];
    if (global_pool_) return linear(global_avgpool(h), head_w_, head_b_);
    const int flat = static_cast<int>(h->numel() / n);
    return linear(reshape(h, {n, flat}), head_w_, head_b_);
}

// -------------------------------------------------------- StyleGenerator

StyleGenerator::StyleGenerator(Rng& rng, int base_size, int num_blocks, int base_channels, int style_dim)
    : base_(base_size), blocks_(num_blocks), style_dim_(style_dim) {
    // widest at the base, halving per block down to a floor of 8 channels
    for (int b = 0; b <= num_blocks; ++b) chans_.push_back(std::max(8, base_channels >> b));

    Rng init = rng.split(0x47454e);
    Array grid = Array(static_cast<Eigen::Index>(chans_[0]) * base_ * base_);
    for (Eigen::Index i = 0; i < grid.size(); ++i) grid[i] = init.gaussian(0.0, 1.0);
    const_grid_ = add_param("const_grid", {1, chans_[0], base_, base_}, std::move(grid));

    for (int b = 0; b < num_blocks; ++b) {
        const int ci = chans_[static_cast<size_t>(b)], co = chans_[static_cast<size_t>(b) + 1];
        conv_w_.push_back(add_param("conv_w" + std::to_string(b), {co, ci * 9},
                                    he_init(init, ci * 9, co * ci * 9)));
        conv_b_.push_back(add_param("conv_b" + std::to_string(b), {co}, Array::Zero(co)));
        // two FiLM slots per block: pre-conv on ci channels, post-conv on co
        for (int slot = 0; slot < 2; ++slot) {
            const int c = slot == 0 ? ci : co;
            const std::string tag = std::to_string(b) + "_" + std::to_string(slot);
            aff_w_.push_back(add_param("aff_w" + tag, {2 * c, style_dim},
                                       xavier_init(init, style_dim, 2 * c, 2 * c * style_dim)));
            aff_b_.push_back(add_param("aff_b" + tag, {2 * c}, Array::Zero(2 * c)));
        }
    }
    out_w_ = add_param("out_w", {3, chans_.back() * 9}, xavier_init(init, chans_.back() * 9, 3, 3 * chans_.back() * 9));
    out_b_ = add_param("out_b", {3}, Array::Zero(3));
}

Var StyleGenerator::style_affine(int slot, const Var& s, int channels) const {
    (void)channels;
    return linear(s, aff_w_[static_cast<size_t>(slot)], aff_b_[static_cast<size_t>(slot)]);
}

Var StyleGenerator::forward(const std::vector<Var>& styles) const {
    if (static_cast<int>(styles.size()) != num_latent_layers())
        throw ArgumentError("StyleGenerator: expected " + std::to_string(num_latent_layers()) +
                            " style vectors, got " + std::to_string(styles.size()));
    const int n = styles[0]->shape[0];
    // broadcast the learned constant grid across the batch
    Var h = const_grid_;
    if (n > 1) {
        Array rep(static_cast<Eigen::Index>(n) * const_grid_->numel());
        for (int i = 0; i < n; ++i) rep.segment(i * const_grid_->numel(), const_grid_->numel()) = const_grid_->val;
        Var tiled = leaf({n, chans_[0], base_, base_}, std::move(rep), false);
        tiled->requires_grad = const_grid_->requires_grad;
        tiled->parents = {const_grid_};
        tiled->backprop = [n](Node& self) {
            auto& g = *self.parents[0];
            if (!g.requires_grad) return;
            g.ensure_grad();
            const Eigen::Index m = g.val.size();
            for (int i = 0; i < n; ++i) g.grad += self.grad.segment(i * m, m);
        };
        h = tiled;
    }
    size_t slot = 0;
    for (int b = 0; b < blocks_; ++b) {
        h = film(h, style_affine(static_cast<int>(slot), styles[slot], chans_[static_cast<size_t>(b)]));
        ++slot;
        h = upsample2(h);
        h = conv2d(h, conv_w_[static_cast<size_t>(b)], conv_b_[static_cast<size_t>(b)], 3, 1, 1);
        h = film(h, style_affine(static_cast<int>(slot), styles[slot], chans_[static_cast<size_t>(b) + 1]));
        ++slot;
        h = lrelu(h);
    }
    // Gentle slope keeps the bounded activation out of its flat tails (where
    // double-precision sigmoid rounds to exactly 0/1 and gradients die).
    return sigmoid(scale(conv2d(h, out_w_, out_b_, 3, 1, 1), 0.125));
}

// -------------------------------------------------------- Discriminator

Discriminator::Discriminator(Rng& rng, int image_size, int base_channels, int num_stages)
    : size_(image_size), stages_(num_stages) {
    int ci = 3;
    for (int s = 0; s < num_stages; ++s) {
        const int co = base_channels << s;
        ws_.push_back(add_param("conv_w" + std::to_string(s), {co, ci * 9}, he_init(rng, ci * 9, co * ci * 9)));
        bs_.push_back(add_param("conv_b" + std::to_string(s), {co}, Array::Zero(co)));
        ci = co;
    }
    const int side = image_size >> num_stages;
    const int flat = ci * side * side;
    head_w_ = add_param("head_w", {1, flat}, xavier_init(rng, flat, 1, flat));
    head_b_ = add_param("head_b", {1}, Array::Zero(1));
}

Var Discriminator::forward(const Var& x) const {
    if (x->shape.size() != 4 || x->shape[2] != size_ || x->shape[3] != size_)
        throw ArgumentError("Discriminator: bad input shape");
    Var h = x;
    for (size_t s = 0; s < ws_.size(); ++s) h = lrelu(conv2d(h, ws_[s], bs_[s], 3, 2, 1));
    const int n = x->shape[0];
    return linear(reshape(h, {n, static_cast<int>(h->numel() / n)}), head_w_, head_b_);
}

// --------------------------------------------------------------- SegNet

SegNet::SegNet(Rng& rng, int channels, int num_classes, int depth)
    : classes_(num_classes), depth_(depth) {
    int ci = 3;
    for (int d = 0; d < depth; ++d) {
        const int co = d + 1 == depth ? num_classes : channels;
        ws_.push_back(add_param("conv_w" + std::to_string(d), {co, ci * 9}, he_init(rng, ci * 9, co * ci * 9)));
        bs_.push_back(add_param("conv_b" + std::to_string(d), {co}, Array::Zero(co)));
        ci = co;
    }
}

Var SegNet::forward(const Var& x) const {
    Var h = x;
    for (size_t d = 0; d < ws_.size(); ++d) {
        h = conv2d(h, ws_[d], bs_[d], 3, 1, 1);
        if (d + 1 < ws_.size()) h = lrelu(h);
    }
    return h;
}

SegMap SegNet::predict(const Image& img) const {
    auto logits = forward(image_to_var(img));
    SegMap out(img.h, img.w);
    const size_t np = img.pixels();
    for (size_t p = 0; p < np; ++p) {
        int best = 0;
        real bv = logits->val[p];
        for (int k = 1; k < classes_; ++k) {
            const real v = logits->val[static_cast<size_t>(k) * np + p];
            if (v > bv) {
                bv = v;
                best = k;
            }
        }
        out.labels[p] = static_cast<uint8_t>(best);
    }
    return out;
}

// ----------------------------------------------------------- converters

std::pair<int, int> generator_grid(int image_size) {
    int base = image_size, blocks = 0;
    while (base > 8) {
        if (base % 2 != 0) throw ArgumentError("generator_grid: unsupported image size " + std::to_string(image_size));
        base /= 2;
        ++blocks;
    }
    if (base < 4 || blocks < 1) throw ArgumentError("generator_grid: unsupported image size " + std::to_string(image_size));
    return {base, blocks};
}

Var image_to_var(const Image& img) {
    Array a(static_cast<Eigen::Index>(img.data.size()));
    for (size_t i = 0; i < img.data.size(); ++i) a[static_cast<Eigen::Index>(i)] = img.data[i];
    return constant({1, 3, img.h, img.w}, std::move(a));
}

Var images_to_var(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw ArgumentError("images_to_var: empty batch");
    const size_t per = imgs[0].data.size();
    Array a(static_cast<Eigen::Index>(per * imgs.size()));
    for (size_t n = 0; n < imgs.size(); ++n) {
        if (imgs[n].data.size() != per) throw ArgumentError("images_to_var: inconsistent shapes");
        for (size_t i = 0; i < per; ++i) a[static_cast<Eigen::Index>(n * per + i)] = imgs[n].data[i];
    }
    return constant({static_cast<int>(imgs.size()), 3, imgs[0].h, imgs[0].w}, std::move(a));
}

Image var_to_image(const Var& v, int index) {
    if (v->shape.size() != 4 || v->shape[1] != 3) throw ArgumentError("var_to_image: expected {N,3,H,W}");
    const int h = v->shape[2], w = v->shape[3];
    Image img(h, w);
    const Eigen::Index per = 3LL * h * w;
    for (Eigen::Index i = 0; i < per; ++i) {
        const real x = v->val[index * per + i];
        img.data[static_cast<size_t>(i)] = std::min(1.0, std::max(0.0, x));
    }
    return img;
}

}  // namespace avafit::nn
