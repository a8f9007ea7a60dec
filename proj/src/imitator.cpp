#include "avafit/imitator.hpp"

#include <cmath>
#include <filesystem>

#include "avafit/io.hpp"

namespace avafit {

using nn::Array;
using nn::Var;

namespace {
Var flat_to_var(const AttributeSchema& schema, const std::vector<FlatEncoding>& encs) {
    const int d = static_cast<int>(schema.flat_length());
    Array a(static_cast<Eigen::Index>(encs.size()) * d);
    for (size_t n = 0; n < encs.size(); ++n)
        for (int j = 0; j < d; ++j) a[static_cast<Eigen::Index>(n) * d + j] = encs[n].values[static_cast<size_t>(j)];
    return nn::constant({static_cast<int>(encs.size()), d}, std::move(a));
}
}  // namespace

ImitatorModel::ImitatorModel(Rng& rng, const AttributeSchema& schema, int image_size, int style_dim,
                             int base_channels, int mlp_hidden)
    : schema_(schema) {
    const auto [base, blocks] = nn::generator_grid(image_size);
    gen_ = std::make_shared<nn::StyleGenerator>(rng, base, blocks, base_channels, style_dim);
    const int flat = static_cast<int>(schema.flat_length());
    for (int l = 0; l < gen_->num_latent_layers(); ++l)
        encoders_.push_back(std::make_shared<nn::Mlp>(rng, std::vector<int>{flat, mlp_hidden, style_dim}));
}

std::vector<Var> ImitatorModel::encode_styles(const Var& flat) const {
    std::vector<Var> styles;
    styles.reserve(encoders_.size());
    for (const auto& enc : encoders_) styles.push_back(enc->forward(flat));
    return styles;
}

Var ImitatorModel::forward(const Var& flat) const { return gen_->forward(encode_styles(flat)); }

Var ImitatorModel::imitate_var(const RelaxedAvatarVector& v) const {
    if (!trained_) throw StateError("imitator: model has not been trained");
    v.validate(schema_);
    return forward(flat_to_var(schema_, {flatten(schema_, v)}));
}

Image ImitatorModel::imitate(const RelaxedAvatarVector& v) const { return nn::var_to_image(imitate_var(v)); }

std::vector<Image> ImitatorModel::interpolation_sweep(const StrictAvatarVector& v1,
                                                      const StrictAvatarVector& v2, int steps) const {
    if (steps < 2) throw ArgumentError("interpolation_sweep: need at least 2 steps");
    const auto r1 = relax(schema_, v1), r2 = relax(schema_, v2);
    std::vector<Image> frames;
    frames.reserve(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        frames.push_back(imitate(interpolate(schema_, r1, r2, static_cast<real>(i) / (steps - 1))));
    return frames;
}

std::vector<Var> ImitatorModel::all_params() const {
    std::vector<Var> out;
    for (const auto& enc : encoders_)
        for (const auto& p : enc->param_vars()) out.push_back(p);
    for (const auto& p : gen_->param_vars()) out.push_back(p);
    return out;
}

void ImitatorModel::save(const std::string& path) const {
    io::Checkpoint ckpt;
    ckpt.schema_hash = schema_.hash();
    for (size_t i = 0; i < encoders_.size(); ++i) encoders_[i]->save_params(ckpt, "enc" + std::to_string(i) + "/");
    gen_->save_params(ckpt, "gen/");
    ckpt.tensors["meta/trained"] = {trained_ ? 1.0 : 0.0};
    ckpt.tensors["meta/pretrained"] = {pretrained_ ? 1.0 : 0.0};
    ckpt.save(path);
}

void ImitatorModel::load(const std::string& path) {
    const auto ckpt = io::Checkpoint::load(path);
    if (ckpt.schema_hash != schema_.hash())
        throw SchemaError("imitator checkpoint was produced under a different attribute schema");
    for (size_t i = 0; i < encoders_.size(); ++i) encoders_[i]->load_params(ckpt, "enc" + std::to_string(i) + "/");
    gen_->load_params(ckpt, "gen/");
    const auto it = ckpt.tensors.find("meta/trained");
    trained_ = it != ckpt.tensors.end() && !it->second.empty() && it->second[0] > 0.5;
    const auto ip = ckpt.tensors.find("meta/pretrained");
    pretrained_ = ip != ckpt.tensors.end() && !ip->second.empty() && ip->second[0] > 0.5;
}

// ----------------------------------------------------------- pretraining

namespace {
void check_finite(real loss, const char* stage) {
    if (!std::isfinite(loss))
        throw StateError(std::string(stage) + ": loss diverged (non-finite); aborting training");
}

std::vector<Image> render_corpus(const Renderer& renderer, int n, Rng& rng) {
    std::vector<Image> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(renderer.render(random_strict(renderer.schema(), rng)).image);
    return out;
}

}  // namespace

void pretrain_generator(ImitatorModel& model, const Renderer& renderer, const FeatureExtractor& feat,
                        const ImitatorTrainConfig& cfg) {
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    const int size = model.image_size();
    const int batch = std::max(2, cfg.batch / 2);
    auto& gen = model.generator();
    const int l = model.num_latent_layers(), sd = model.style_dim();

    if (!cfg.adversarial_pretrain) {
        // reconstruction arm: throwaway conv encoder feeds the style stack
        Rng erng = rng.split(1);
        nn::ConvEncoder enc(erng, size, 12, 3, l * sd);
        auto params = gen.param_vars();
        for (auto& p : enc.param_vars()) params.push_back(p);
        nn::Adam opt(params, 2e-3);
        for (int step = 0; step < cfg.pretrain_steps; ++step) {
            std::vector<Image> imgs = render_corpus(renderer, batch, rng);
            const Var x = nn::images_to_var(imgs);
            const Var code = enc.forward(x);
            std::vector<Var> styles;
            for (int i = 0; i < l; ++i) styles.push_back(nn::slice_features(code, i * sd, sd));
            const Var recon = gen.forward(styles);
            Var loss = nn::add(nn::l1_mean(recon, x), nn::scale(feat.distance(recon, x), 0.05));
            check_finite(nn::scalar_value(loss), "generator pretraining");
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
        }
    } else {
        // adversarial arm: hinge GAN with R1 on real batches
        Rng drng = rng.split(2);
        nn::Discriminator disc(drng, size, 12, 3);
        nn::Adam gopt(gen.param_vars(), 1e-3);
        nn::Adam dopt(disc.param_vars(), 1e-3);
        const real gamma = 10.0, r1_weight = 5.0;
        for (int step = 0; step < cfg.pretrain_steps; ++step) {
            std::vector<Image> imgs = render_corpus(renderer, batch, rng);
            const Var reals = nn::images_to_var(imgs);
            std::vector<Var> styles;
            for (int i = 0; i < l; ++i) {
                Array z(static_cast<Eigen::Index>(batch) * sd);
                for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng.gaussian();
                styles.push_back(nn::constant({batch, sd}, std::move(z)));
            }
            const Var fakes = gen.forward(styles);

            // discriminator step
            disc.set_trainable(true);
            gen.set_trainable(false);
            Var dloss = discriminator_hinge_var(disc.forward(reals), disc.forward(nn::constant(fakes->shape, fakes->val)));
            check_finite(nn::scalar_value(dloss), "adversarial pretraining (D)");
            dopt.zero_grad();
            nn::backward(dloss);
            if (step % 4 == 0) accumulate_r1_grads(disc, reals, gamma, r1_weight);
            dopt.step();

            // generator step
            disc.set_trainable(false);
            gen.set_trainable(true);
            Var gloss = generator_hinge_var(disc.forward(gen.forward(styles)));
            check_finite(nn::scalar_value(gloss), "adversarial pretraining (G)");
            gopt.zero_grad();
            nn::backward(gloss);
            gopt.step();
        }
        gen.set_trainable(true);
    }
    model.mark_pretrained();
    if (!cfg.pretrain_checkpoint.empty()) {
        io::Checkpoint ckpt;
        ckpt.schema_hash = renderer.schema().hash();
        model.generator().save_params(ckpt, "gen/");
        ckpt.save(cfg.pretrain_checkpoint);
    }
}

// -------------------------------------------------------------- training

ImitatorTrainReport train_imitator(ImitatorModel& model, const Renderer& renderer,
                                   const FeatureExtractor& feat, const IdentityEmbedder& emb,
                                   const ImitatorTrainConfig& cfg) {
    if (cfg.epochs < 1) throw ArgumentError("train_imitator: epochs must be >= 1");
    if (cfg.lr <= 0) throw ArgumentError("train_imitator: step size must be positive");
    if (cfg.two_step && !model.pretrained()) {
        if (cfg.pretrain_checkpoint.empty() || !std::filesystem::exists(cfg.pretrain_checkpoint))
            throw ArgumentError("train_imitator: two_step requires a pretrained generator "
                                "(run pretrain_generator or point pretrain_checkpoint at one)");
        const auto ckpt = io::Checkpoint::load(cfg.pretrain_checkpoint);
        if (ckpt.schema_hash != renderer.schema().hash())
            throw SchemaError("pretrain checkpoint was produced under a different attribute schema");
        model.generator().load_params(ckpt, "gen/");
        model.mark_pretrained();
    }

    Rng rng(cfg.seed);
    const auto& schema = renderer.schema();
    std::vector<FlatEncoding> flats;
    std::vector<Image> targets;
    const int total = cfg.dataset_size + cfg.holdout;
    for (int i = 0; i < total; ++i) {
        const auto v = random_strict(schema, rng);
        flats.push_back(flatten(schema, v));
        targets.push_back(renderer.render(v).image);
    }

    nn::Adam opt(model.all_params(), cfg.lr);
    std::unique_ptr<io::CsvWriter> csv;
    if (!cfg.curve_csv.empty()) {
        csv = std::make_unique<io::CsvWriter>(cfg.curve_csv, std::vector<std::string>{"epoch", "loss", "lr"});
    }

    ImitatorTrainReport report;
    std::vector<int> order(static_cast<size_t>(cfg.dataset_size));
    for (int i = 0; i < cfg.dataset_size; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && epoch % cfg.decay_every == 0) opt.set_lr(opt.lr() * cfg.lr_decay);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

        real epoch_loss = 0;
        int nbatches = 0;
        for (int at = 0; at < cfg.dataset_size; at += cfg.batch) {
            const int bn = std::min(cfg.batch, cfg.dataset_size - at);
            std::vector<FlatEncoding> fb;
            std::vector<Image> tb;
            for (int i = 0; i < bn; ++i) {
                fb.push_back(flats[static_cast<size_t>(order[static_cast<size_t>(at + i)])]);
                tb.push_back(targets[static_cast<size_t>(order[static_cast<size_t>(at + i)])]);
            }
            const Var out = model.forward(flat_to_var(schema, fb));
            const Var gt = nn::images_to_var(tb);
            const Var loss = imitator_loss(feat, emb, out, gt).total;
            const real lv = nn::scalar_value(loss);
            check_finite(lv, "imitator training");
            epoch_loss += lv;
            ++nbatches;
            opt.zero_grad();
            nn::backward(loss);
            opt.step();
        }
        epoch_loss /= std::max(1, nbatches);
        report.epoch_loss.push_back(epoch_loss);
        if (csv) csv->row({std::to_string(epoch), std::to_string(epoch_loss), std::to_string(opt.lr())});
    }
    model.mark_trained();

    // held-out per-pixel L1
    real l1 = 0;
    for (int i = cfg.dataset_size; i < total; ++i) {
        const Image out = nn::var_to_image(model.forward(flat_to_var(schema, {flats[static_cast<size_t>(i)]})));
        const auto& gt = targets[static_cast<size_t>(i)];
        real acc = 0;
        for (size_t p = 0; p < gt.data.size(); ++p) acc += std::abs(out.data[p] - gt.data[p]);
        l1 += acc / static_cast<real>(gt.data.size());
    }
    report.holdout_l1 = cfg.holdout > 0 ? l1 / cfg.holdout : 0.0;
    return report;
}

}  // namespace avafit
