#include "avafit/losses.hpp"

#include <algorithm>
#include <cmath>

namespace avafit {

using nn::Array;
using nn::Var;

// ---------------------------------------------------------- color matching

namespace {
std::vector<uint8_t> class_mask(const SegMap& seg, SegClass k) {
    std::vector<uint8_t> m(seg.labels.size(), 0);
    for (size_t i = 0; i < seg.labels.size(); ++i) m[i] = seg.labels[i] == static_cast<uint8_t>(k);
    return m;
}
}  // namespace

MeanColor mean_semantic_color(const Image& img, const SegMap& seg, SegClass k) {
    if (static_cast<size_t>(img.h) * img.w != seg.pixels())
        throw ArgumentError("mean_semantic_color: image/segmentation size mismatch");
    MeanColor out;
    size_t count = 0;
    const size_t np = img.pixels();
    for (size_t p = 0; p < np; ++p) {
        if (seg.labels[p] != static_cast<uint8_t>(k)) continue;
        ++count;
        for (int c = 0; c < 3; ++c) out.rgb[static_cast<size_t>(c)] += img.data[static_cast<size_t>(c) * np + p];
    }
    if (count == 0) return out;
    out.present = true;
    for (auto& v : out.rgb) v /= static_cast<real>(count);
    return out;
}

Var mean_semantic_color_var(const Var& img, const SegMap& seg, SegClass k) {
    const auto mask = class_mask(seg, k);
    if (std::find(mask.begin(), mask.end(), uint8_t{1}) == mask.end()) return nullptr;
    return nn::masked_mean_channels(img, mask);
}

real semantic_color_loss(const Image& a, const SegMap& sa, const Image& b, const SegMap& sb) {
    real loss = 0;
    for (SegClass k : kSemanticClasses) {
        const auto ca = mean_semantic_color(a, sa, k);
        const auto cb = mean_semantic_color(b, sb, k);
        if (!ca.present || !cb.present) continue;
        for (int c = 0; c < 3; ++c) {
            const real d = ca.rgb[static_cast<size_t>(c)] - cb.rgb[static_cast<size_t>(c)];
            loss += d * d;
        }
    }
    return loss;
}

Var semantic_color_loss_var(const Var& a, const SegMap& sa, const Var& b, const SegMap& sb) {
    Var loss = nn::constant_scalar(0.0);
    for (SegClass k : kSemanticClasses) {
        const Var ca = mean_semantic_color_var(a, sa, k);
        const Var cb = mean_semantic_color_var(b, sb, k);
        if (!ca || !cb) continue;
        loss = nn::add(loss, nn::sqdist(ca, cb));
    }
    return loss;
}

// -------------------------------------------------------- FeatureExtractor

FeatureExtractor::FeatureExtractor(uint64_t seed, int base_channels, int num_stages)
    : seed_(seed), stages_n_(num_stages) {
    Rng rng(seed);
    chans_ = {3};
    for (int s = 0; s < num_stages; ++s) chans_.push_back(base_channels << s);
    for (int s = 0; s < num_stages; ++s) {
        const int ci = chans_[static_cast<size_t>(s)], co = chans_[static_cast<size_t>(s) + 1];
        // orthonormal rows bound the filter norms (Lipschitz constant <= 1 per tap)
        filters_.push_back(add_param("f" + std::to_string(s), {co, ci * 9}, nn::orthogonal_rows(rng, co, ci * 9)));
    }
    set_trainable(false);
}

std::vector<Var> FeatureExtractor::stages(const Var& x) const {
    std::vector<Var> out;
    Var h = x;
    for (int s = 0; s < stages_n_; ++s) {
        const int co = chans_[static_cast<size_t>(s) + 1];
        Var b = nn::constant({co}, Array::Zero(co));
        h = nn::tanh_act(nn::conv2d(h, filters_[static_cast<size_t>(s)], b, 3, 2, 1));
        out.push_back(h);
    }
    return out;
}

Var FeatureExtractor::distance(const Var& a, const Var& b) const {
    if (a->shape != b->shape) throw ArgumentError("perceptual distance: shape mismatch");
    const auto fa = stages(a), fb = stages(b);
    // Per stage: mean over batch and spatial positions of the squared
    // channel-space distance between unit-normalized feature vectors.
    Var total = nn::constant_scalar(0.0);
    for (size_t s = 0; s < fa.size(); ++s) {
        const Var d = nn::sub(nn::normalize_channels(fa[s]), nn::normalize_channels(fb[s]));
        const Eigen::Index positions = d->numel() / d->shape[1];
        total = nn::add(total, nn::scale(nn::dot(d, d), 1.0 / static_cast<real>(positions)));
    }
    return total;
}

real FeatureExtractor::perceptual_loss(const Image& a, const Image& b) const {
    return nn::scalar_value(distance(nn::image_to_var(a), nn::image_to_var(b)));
}

std::vector<real> FeatureExtractor::pooled_descriptor(const Image& img) const {
    const auto fs = stages(nn::image_to_var(img));
    std::vector<real> out;
    for (const auto& f : fs) {
        const int c = f->shape[1];
        const Eigen::Index hw = f->numel() / c;
        for (int ch = 0; ch < c; ++ch) out.push_back(f->val.segment(ch * hw, hw).mean());
    }
    return out;
}

int FeatureExtractor::descriptor_dim() const {
    int d = 0;
    for (size_t s = 1; s < chans_.size(); ++s) d += chans_[s];
    return d;
}

// -------------------------------------------------------- IdentityEmbedder

IdentityEmbedder::IdentityEmbedder(Rng& rng, int image_size, int embed_dim) : dim_(embed_dim) {
    enc_ = std::make_shared<nn::ConvEncoder>(rng, image_size, 20, 4, embed_dim);
}

Var IdentityEmbedder::embed(const Var& x) const { return nn::unit_rows(enc_->forward(x)); }

std::vector<real> IdentityEmbedder::embed_image(const Image& img) const {
    const Var e = embed(nn::image_to_var(img));
    return {e->val.data(), e->val.data() + e->val.size()};
}

real identity_loss(const IdentityEmbedder& emb, const Image& a, const Image& b) {
    return nn::scalar_value(identity_loss_var(emb, nn::image_to_var(a), nn::image_to_var(b)));
}

Var identity_loss_var(const IdentityEmbedder& emb, const Var& a, const Var& b) {
    return nn::add_scalar(nn::scale(nn::cosine_rows_mean(emb.embed(a), emb.embed(b)), -1.0), 1.0);
}

real train_identity_embedder(IdentityEmbedder& emb, const Renderer& renderer,
                             const IdentityTrainConfig& cfg) {
    Rng rng(cfg.seed);
    // several corrupted views per vector; views sharing a vector are positives
    constexpr int kViews = 4;
    std::vector<std::array<Image, kViews>> views;
    views.reserve(static_cast<size_t>(cfg.num_vectors));
    for (int i = 0; i < cfg.num_vectors; ++i) {
        const auto v = random_strict(renderer.schema(), rng);
        std::array<Image, kViews> group;
        for (auto& img : group) {
            auto c = SelfieCorruption::random(rng, cfg.corruption_strength);
            img = renderer.synth_selfie(v, c);
        }
        views.push_back(std::move(group));
    }

    const int held = std::max(8, cfg.num_vectors / 6);
    const int ntrain = cfg.num_vectors - held;
    const int dim = emb.embed_dim();

    // throwaway cosine classifier head over training identities; views of one
    // vector share a class, which both pulls positives together and pushes
    // all other identities away
    Rng hrng = rng.split(0xC1A55);
    Var head = nn::leaf({ntrain, dim}, nn::xavier_init(hrng, dim, ntrain, ntrain * dim));
    const real logit_scale = 10.0;

    auto params = emb.param_vars();
    params.push_back(head);
    nn::Adam opt(params, cfg.lr);

    std::vector<std::pair<int, int>> items;  // (identity, view)
    for (int i = 0; i < ntrain; ++i)
        for (int v = 0; v < kViews; ++v) items.push_back({i, v});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && epoch % 8 == 0) opt.set_lr(opt.lr() * 0.5);
        for (size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.index(i)]);
        for (size_t at = 0; at < items.size(); at += static_cast<size_t>(cfg.batch_pairs)) {
            const int bn = static_cast<int>(std::min<size_t>(static_cast<size_t>(cfg.batch_pairs), items.size() - at));
            if (bn < 2) break;
            std::vector<Image> imgs;
            std::vector<int> labels;
            for (int i = 0; i < bn; ++i) {
                const auto& [id, view] = items[at + static_cast<size_t>(i)];
                imgs.push_back(views[static_cast<size_t>(id)][static_cast<size_t>(view)]);
                labels.push_back(id);
            }
            const Var e = emb.embed(nn::images_to_var(imgs));
            const Var logits = nn::scale(nn::linear(e, nn::unit_rows(head), nn::constant({ntrain}, Array::Zero(ntrain))), logit_scale);
            Var loss = nn::cross_entropy_logits(logits, labels);
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
        }
    }
    emb.set_trainable(false);

    // held-out triple accuracy: same-vector pair closer than cross pair
    int good = 0, total = 0;
    for (int i = ntrain; i < cfg.num_vectors; ++i) {
        for (int j = ntrain; j < cfg.num_vectors; ++j) {
            if (i == j) continue;
            const real same = identity_loss(emb, views[static_cast<size_t>(i)][0], views[static_cast<size_t>(i)][1]);
            const real diff = identity_loss(emb, views[static_cast<size_t>(i)][0], views[static_cast<size_t>(j)][1]);
            good += same < diff;
            ++total;
        }
    }
    return total > 0 ? static_cast<real>(good) / total : 0.0;
}

// ------------------------------------------------------ SegmentationOracle

SegMap SegmentationOracle::segment(const Image& img) const {
    if (!net_) throw StateError("segmentation oracle: no trained net attached");
    return net_->predict(img);
}

real train_segmentation_net(nn::SegNet& net, const Renderer& renderer, const SegTrainConfig& cfg) {
    Rng rng(cfg.seed);
    std::vector<std::pair<Image, SegMap>> data;
    for (int i = 0; i < cfg.num_samples; ++i) {
        const auto v = random_strict(renderer.schema(), rng);
        auto c = SelfieCorruption::random(rng, 0.8);
        data.push_back(renderer.synth_selfie_with_seg(v, c));
    }
    const int held = std::max(4, cfg.num_samples / 8);
    const int ntrain = cfg.num_samples - held;

    // Inverse-sqrt-frequency class weights: thin classes (glasses, mouth,
    // brows) cover a tiny pixel fraction and an unweighted loss lets the
    // net drop them entirely.
    std::vector<real> class_weight(static_cast<size_t>(net.num_classes()), 0.0);
    {
        std::vector<size_t> counts(class_weight.size(), 0);
        size_t total = 0;
        for (int i = 0; i < ntrain; ++i)
            for (const uint8_t l : data[static_cast<size_t>(i)].second.labels) {
                ++counts[l];
                ++total;
            }
        for (size_t k = 0; k < counts.size(); ++k)
            class_weight[k] = counts[k] > 0
                ? std::sqrt(static_cast<real>(total) / (static_cast<real>(counts.size()) * static_cast<real>(counts[k])))
                : 0.0;
    }

    nn::Adam opt(net.param_vars(), cfg.lr);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = 0; i < ntrain; ++i) {
            const auto& [img, seg] = data[static_cast<size_t>(i)];
            const Var logits = net.forward(nn::image_to_var(img));
            // per-pixel cross entropy: transpose {K, H*W} to pixel rows
            const int k = net.num_classes();
            const int np = img.h * img.w;
            const Var rows = nn::transpose2d(nn::reshape(logits, {k, np}));
            std::vector<int> labels(seg.labels.begin(), seg.labels.end());
            std::vector<real> pw(labels.size());
            for (size_t p = 0; p < labels.size(); ++p) pw[p] = class_weight[static_cast<size_t>(labels[p])];
            Var loss = nn::cross_entropy_logits(rows, labels, pw);
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
        }
    }
    net.set_trainable(false);

    size_t good = 0, total = 0;
    for (int i = ntrain; i < cfg.num_samples; ++i) {
        const auto& [img, seg] = data[static_cast<size_t>(i)];
        const SegMap pred = net.predict(img);
        for (size_t p = 0; p < seg.labels.size(); ++p) good += pred.labels[p] == seg.labels[p];
        total += seg.labels.size();
    }
    return total > 0 ? static_cast<real>(good) / static_cast<real>(total) : 0.0;
}

// ------------------------------------------------------------ adversarial

namespace {
real mean_of(const std::vector<real>& v, real (*f)(real)) {
    if (v.empty()) return 0.0;
    real s = 0;
    for (real x : v) s += f(x);
    return s / static_cast<real>(v.size());
}
}  // namespace

AdvLosses adversarial_losses(const std::vector<real>& real_scores, const std::vector<real>& fake_scores) {
    AdvLosses out;
    out.real_term = mean_of(real_scores, +[](real d) { return std::min(0.0, -1.0 + d); });
    out.fake_term = mean_of(fake_scores, +[](real d) { return std::min(0.0, -1.0 - d); });
    out.disc = out.real_term + out.fake_term;
    out.gen = -mean_of(fake_scores, +[](real d) { return d; });
    return out;
}

Var generator_hinge_var(const Var& fake_scores) { return nn::scale(nn::mean(fake_scores), -1.0); }

Var discriminator_hinge_var(const Var& real_scores, const Var& fake_scores) {
    // minimize -[E min(0,-1+D(y)) + E min(0,-1-D(fake))]; min(0,x) = -relu(-x)
    Var real_term = nn::scale(nn::mean(nn::relu(nn::add_scalar(nn::scale(real_scores, -1.0), 1.0))), 1.0);
    Var fake_term = nn::scale(nn::mean(nn::relu(nn::add_scalar(fake_scores, 1.0))), 1.0);
    return nn::add(real_term, fake_term);
}

nn::Array r1_input_gradient(const nn::Discriminator& disc, const Var& batch) {
    Var x = nn::leaf(batch->shape, batch->val, true);
    Var score_sum = nn::sum(disc.forward(x));
    nn::backward(score_sum);
    return x->grad;
}

real r1_penalty(const nn::Discriminator& disc, const std::vector<Image>& real_batch, real gamma) {
    if (real_batch.empty()) throw ArgumentError("r1_penalty: empty batch");
    const Var batch = nn::images_to_var(real_batch);
    const Array g = r1_input_gradient(disc, batch);
    const Eigen::Index per = g.size() / static_cast<Eigen::Index>(real_batch.size());
    real acc = 0;
    for (size_t n = 0; n < real_batch.size(); ++n)
        acc += g.segment(static_cast<Eigen::Index>(n) * per, per).square().sum();
    return 0.5 * gamma * acc / static_cast<real>(real_batch.size());
}

void accumulate_r1_grads(nn::Discriminator& disc, const Var& real_batch, real gamma, real weight) {
    const Array g = r1_input_gradient(disc, real_batch);
    const real gnorm = std::sqrt(g.square().sum());
    if (gnorm < 1e-12) return;
    const real eps = 1e-4;
    const Array u = g / gnorm;
    const int nb = real_batch->shape[0];
    // grad_theta (gamma/2)||g||^2/N = gamma/N * H_{theta,x} g, estimated by a
    // central difference of the parameter gradients of sum D(x +- eps*u).
    const real coef = weight * gamma * gnorm / (nb * eps);
    auto params = disc.param_vars();
    std::vector<Array> saved;
    for (const auto& p : params)
        saved.push_back(p->grad.size() == p->val.size() ? p->grad : Array::Zero(p->val.size()));
    std::vector<Array> plus, minus;
    for (int sign : {+1, -1}) {
        Var x = nn::constant(real_batch->shape, real_batch->val + sign * eps * u);
        for (auto& p : params) p->grad = Array::Zero(p->val.size());
        nn::backward(nn::sum(disc.forward(x)));
        auto& dst = sign > 0 ? plus : minus;
        for (const auto& p : params) dst.push_back(p->grad);
    }
    for (size_t i = 0; i < params.size(); ++i)
        params[i]->grad = saved[i] + coef * 0.5 * (plus[i] - minus[i]);
}

// ------------------------------------------------------- composite losses

LossTerms mapper_loss(const FeatureExtractor& feat, const IdentityEmbedder& emb, const Var& style_img,
                      const SegMap& style_seg, const Var& imit_img, const SegMap& imit_seg,
                      const MapperLossWeights& w, const TermMask& mask) {
    LossTerms t;
    t.total = nn::constant_scalar(0.0);
    if (mask.id) {
        t.id = identity_loss_var(emb, style_img, imit_img);
        t.total = nn::add(t.total, nn::scale(t.id, w.id));
    }
    if (mask.lpips) {
        t.lpips = feat.distance(style_img, imit_img);
        t.total = nn::add(t.total, nn::scale(t.lpips, w.lpips));
    }
    if (mask.color) {
        t.color = semantic_color_loss_var(style_img, style_seg, imit_img, imit_seg);
        t.total = nn::add(t.total, nn::scale(t.color, w.color));
    }
    return t;
}

LossTerms imitator_loss(const FeatureExtractor& feat, const IdentityEmbedder& emb, const Var& gen_img,
                        const Var& gt_img, const ImitatorLossWeights& w, const TermMask& mask) {
    LossTerms t;
    t.total = nn::constant_scalar(0.0);
    if (mask.color) {  // the pixel term plays the "third slot" role here
        t.color = nn::l1_mean(gen_img, gt_img);
        t.total = nn::add(t.total, nn::scale(t.color, w.l1));
    }
    if (mask.lpips) {
        t.lpips = feat.distance(gen_img, gt_img);
        t.total = nn::add(t.total, nn::scale(t.lpips, w.lpips));
    }
    if (mask.id) {
        t.id = identity_loss_var(emb, gen_img, gt_img);
        t.total = nn::add(t.total, nn::scale(t.id, w.id));
    }
    return t;
}

real stylize_loss(real adv, real sem, real r1, const StylizeLossWeights& w) {
    return w.adv * adv + w.sem * sem + w.r1 * r1;
}

}  // namespace avafit
