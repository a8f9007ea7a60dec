#include "avafit/stylizer.hpp"

#include <cmath>

#include "avafit/eval.hpp"
#include "avafit/io.hpp"

namespace avafit {

using nn::Array;
using nn::Var;

// ----------------------------------------------------------- LatentCode

void LatentCode::validate() const {
    if (layers <= 0 || dim <= 0) throw ArgumentError("latent code: non-positive shape");
    if (values.size() != static_cast<size_t>(layers) * dim)
        throw ArgumentError("latent code: value count does not match layers*dim");
    for (const real v : values)
        if (!std::isfinite(v)) throw ArgumentError("latent code: non-finite value");
}

namespace {
Var codes_to_var(const std::vector<LatentCode>& codes) {
    const int d = codes.front().layers * codes.front().dim;
    Array a(static_cast<Eigen::Index>(codes.size()) * d);
    for (size_t n = 0; n < codes.size(); ++n) {
        codes[n].validate();
        for (int j = 0; j < d; ++j) a[static_cast<Eigen::Index>(n) * d + j] = codes[n].values[static_cast<size_t>(j)];
    }
    return nn::constant({static_cast<int>(codes.size()), d}, std::move(a));
}
}  // namespace

// -------------------------------------------------------- StylizerModel

StylizerModel::StylizerModel(Rng& rng, const AttributeSchema& schema, int image_size, int latent_dim,
                             int base_channels, int encoder_channels)
    : schema_(schema) {
    const auto [base, blocks] = nn::generator_grid(image_size);
    dec_ = std::make_shared<nn::StyleGenerator>(rng, base, blocks, base_channels, latent_dim);
    enc_ = std::make_shared<nn::ConvEncoder>(rng, image_size, encoder_channels, blocks + 1,
                                             dec_->num_latent_layers() * latent_dim);
}

Var StylizerModel::encode_var(const Var& images) const { return enc_->forward(images); }

Var StylizerModel::decode_var(const Var& codes) const {
    const int l = num_layers(), d = latent_dim();
    if (codes->shape.size() != 2 || codes->shape[1] != l * d)
        throw ArgumentError("stylizer decode: code width does not match layers*dim");
    std::vector<Var> styles;
    styles.reserve(static_cast<size_t>(l));
    for (int i = 0; i < l; ++i) styles.push_back(nn::slice_features(codes, i * d, d));
    return dec_->forward(styles);
}

LatentCode StylizerModel::encode(const Image& img) const {
    if (!trained_) throw StateError("stylizer: model has not been trained");
    const Var code = encode_var(nn::image_to_var(img));
    LatentCode out;
    out.layers = num_layers();
    out.dim = latent_dim();
    out.values.assign(code->val.data(), code->val.data() + code->val.size());
    return out;
}

Image StylizerModel::decode(const LatentCode& code) const {
    if (!trained_) throw StateError("stylizer: model has not been trained");
    code.validate();
    if (code.layers != num_layers() || code.dim != latent_dim())
        throw ArgumentError("stylizer decode: latent shape does not match model");
    return nn::var_to_image(decode_var(codes_to_var({code})));
}

Image StylizerModel::normalize(const Image& selfie) const { return decode(encode(selfie)); }

std::vector<Var> StylizerModel::all_params() const {
    std::vector<Var> out = enc_->param_vars();
    for (const auto& p : dec_->param_vars()) out.push_back(p);
    return out;
}

void StylizerModel::save(const std::string& path) const {
    io::Checkpoint ckpt;
    ckpt.schema_hash = schema_.hash();
    enc_->save_params(ckpt, "enc/");
    dec_->save_params(ckpt, "dec/");
    ckpt.tensors["meta/trained"] = {trained_ ? 1.0 : 0.0};
    ckpt.save(path);
}

void StylizerModel::load(const std::string& path) {
    const auto ckpt = io::Checkpoint::load(path);
    if (ckpt.schema_hash != schema_.hash())
        throw SchemaError("stylizer checkpoint was produced under a different attribute schema");
    enc_->load_params(ckpt, "enc/");
    dec_->load_params(ckpt, "dec/");
    const auto it = ckpt.tensors.find("meta/trained");
    trained_ = it != ckpt.tensors.end() && !it->second.empty() && it->second[0] > 0.5;
}

// ------------------------------------------------------------ StylePrior

StylePrior::StylePrior(std::vector<LatentCode> codes, real jitter_sigma)
    : codes_(std::move(codes)), sigma_(jitter_sigma) {
    if (jitter_sigma < 0) throw ArgumentError("style prior: negative jitter");
    for (const auto& c : codes_) c.validate();
}

StylePrior StylePrior::build(const StylizerModel& model, const std::vector<Image>& clean_renders,
                             real jitter_sigma) {
    std::vector<LatentCode> codes;
    codes.reserve(clean_renders.size());
    for (const auto& img : clean_renders) codes.push_back(model.encode(img));
    return StylePrior(std::move(codes), jitter_sigma);
}

std::vector<LatentCode> StylePrior::sample(int n, uint64_t seed) const {
    if (codes_.empty()) throw StateError("style prior: no stored codes");
    Rng rng(seed);
    std::vector<LatentCode> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        LatentCode c = codes_[rng.index(codes_.size())];
        if (sigma_ > 0)
            for (auto& v : c.values) v += rng.gaussian(0.0, sigma_);
        out.push_back(std::move(c));
    }
    return out;
}

void StylePrior::save(const std::string& path) const {
    io::Checkpoint ckpt;
    ckpt.tensors["meta/sigma"] = {sigma_};
    ckpt.tensors["meta/shape"] = {codes_.empty() ? 0.0 : static_cast<real>(codes_.front().layers),
                                  codes_.empty() ? 0.0 : static_cast<real>(codes_.front().dim),
                                  static_cast<real>(codes_.size())};
    std::vector<real> flat;
    for (const auto& c : codes_) flat.insert(flat.end(), c.values.begin(), c.values.end());
    ckpt.tensors["codes"] = std::move(flat);
    ckpt.save(path);
}

StylePrior StylePrior::load(const std::string& path) {
    const auto ckpt = io::Checkpoint::load(path);
    const auto& shape = ckpt.tensors.at("meta/shape");
    const int layers = static_cast<int>(shape[0]), dim = static_cast<int>(shape[1]);
    const size_t count = static_cast<size_t>(shape[2]);
    const auto& flat = ckpt.tensors.at("codes");
    std::vector<LatentCode> codes(count);
    const size_t per = static_cast<size_t>(layers) * dim;
    for (size_t i = 0; i < count; ++i) {
        codes[i].layers = layers;
        codes[i].dim = dim;
        codes[i].values.assign(flat.begin() + static_cast<long>(i * per),
                               flat.begin() + static_cast<long>((i + 1) * per));
    }
    return StylePrior(std::move(codes), ckpt.tensors.at("meta/sigma")[0]);
}

// -------------------------------------------------------------- training

namespace {
void check_finite(real loss, const char* stage) {
    if (!std::isfinite(loss))
        throw StateError(std::string(stage) + ": loss diverged (non-finite); aborting training");
}
}  // namespace

StylizerTrainReport train_stylizer(StylizerModel& model, const Renderer& renderer,
                                   const FeatureExtractor& feat, const StylizerTrainConfig& cfg) {
    if (cfg.epochs < 1) throw ArgumentError("train_stylizer: epochs must be >= 1");
    if (cfg.lr <= 0) throw ArgumentError("train_stylizer: step size must be positive");
    if (cfg.detail_weight < 1) throw ArgumentError("train_stylizer: detail weight must be >= 1");
    if (cfg.consist_weight < 0) throw ArgumentError("train_stylizer: negative consistency weight");
    if (cfg.lr_decay <= 0 || cfg.lr_decay > 1) throw ArgumentError("train_stylizer: decay must be in (0, 1]");

    // a quarter of the training pool is rendered corruption-free: warping
    // smooths every corrupted sample, so crisp canonical inputs would
    // otherwise sit outside the training distribution
    const int easy = cfg.dataset_size / 3;
    const int total = cfg.dataset_size - easy + cfg.holdout;
    auto samples = generate_dataset(renderer, total, cfg.seed, "", cfg.corruption_strength);
    {
        auto easy_samples = generate_dataset(renderer, easy, cfg.seed ^ 0xea5f, "", 0.0);
        samples.insert(samples.begin() + (cfg.dataset_size - easy),
                       std::make_move_iterator(easy_samples.begin()),
                       std::make_move_iterator(easy_samples.end()));
    }

    Rng rng(cfg.seed ^ 0x5a5a5a5a5a5a5a5aull);

    // Auxiliary attribute probe: a linear head from the latent to the
    // discrete attribute logits, trained jointly and discarded afterwards.
    // Reconstruction alone lets the encoder drop sparse cues (glasses,
    // brow shape); the probe makes dropping them cost loss directly.
    const auto& disc_attrs = renderer.schema().discrete();
    const int zdim = model.num_layers() * model.latent_dim();
    Rng arng = rng.split(0xa0b);
    std::vector<Var> aux_w, aux_b;
    for (const auto& a : disc_attrs) {
        aux_w.push_back(nn::leaf({a.cardinality, zdim},
                                 nn::xavier_init(arng, zdim, a.cardinality, a.cardinality * zdim)));
        aux_b.push_back(nn::leaf({a.cardinality}, nn::Array::Zero(a.cardinality)));
    }
    const auto& cont_attrs = renderer.schema().continuous();
    const int ncont = static_cast<int>(cont_attrs.size());
    Var aux_cw, aux_cb;
    if (ncont > 0) {
        aux_cw = nn::leaf({ncont, zdim}, nn::xavier_init(arng, zdim, ncont, ncont * zdim));
        aux_cb = nn::leaf({ncont}, nn::Array::Zero(ncont));
    }

    auto params = model.all_params();
    if (cfg.attr_weight > 0) {
        params.insert(params.end(), aux_w.begin(), aux_w.end());
        params.insert(params.end(), aux_b.begin(), aux_b.end());
        if (ncont > 0) {
            params.push_back(aux_cw);
            params.push_back(aux_cb);
        }
    }
    nn::Adam opt(params, cfg.lr);

    std::unique_ptr<nn::Discriminator> disc;
    std::unique_ptr<nn::Adam> dopt;
    if (cfg.adv_weight > 0) {
        Rng drng = rng.split(0xd15c);
        disc = std::make_unique<nn::Discriminator>(drng, model.image_size(), 12, 3);
        dopt = std::make_unique<nn::Adam>(disc->param_vars(), cfg.lr * 0.1);
    }

    std::unique_ptr<io::CsvWriter> csv;
    if (!cfg.curve_csv.empty())
        csv = std::make_unique<io::CsvWriter>(cfg.curve_csv, std::vector<std::string>{"epoch", "loss", "lr"});

    StylizerTrainReport report;
    std::vector<int> order(static_cast<size_t>(cfg.dataset_size));
    for (int i = 0; i < cfg.dataset_size; ++i) order[static_cast<size_t>(i)] = i;

    int adv_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && cfg.lr_step > 0 && epoch % cfg.lr_step == 0) opt.set_lr(opt.lr() * cfg.lr_decay);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        real epoch_loss = 0;
        int nbatches = 0;
        for (int at = 0; at < cfg.dataset_size; at += cfg.batch) {
            const int bn = std::min(cfg.batch, cfg.dataset_size - at);
            std::vector<Image> selfies, cleans;
            std::vector<const DatasetSample*> batch;
            for (int i = 0; i < bn; ++i) {
                const auto& s = samples[static_cast<size_t>(order[static_cast<size_t>(at + i)])];
                batch.push_back(&s);
                selfies.push_back(s.selfie);
                cleans.push_back(s.render.image);
            }
            const Var latent = model.encode_var(nn::images_to_var(selfies));
            const Var decoded = model.decode_var(latent);
            const Var gt = nn::images_to_var(cleans);

            // Per-pixel weights, normalized to mean 1 so the loss scale is
            // independent of how much of the face is fine detail.
            const int S = model.image_size();
            nn::Array wvals(static_cast<Eigen::Index>(bn) * 3 * S * S);
            for (int i = 0; i < bn; ++i) {
                const auto& seg = batch[static_cast<size_t>(i)]->render.seg;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x) {
                        const auto k = static_cast<SegClass>(seg.at(y, x));
                        const bool fine = k == SegClass::eyes || k == SegClass::brows ||
                                          k == SegClass::mouth || k == SegClass::glasses;
                        const real w = fine ? cfg.detail_weight : 1.0;
                        for (int c = 0; c < 3; ++c)
                            wvals[((static_cast<Eigen::Index>(i) * 3 + c) * S + y) * S + x] = w;
                    }
            }
            wvals /= wvals.mean();
            const Var weights = nn::constant({bn, 3, S, S}, wvals);
            Var loss = nn::l1_mean(nn::mul(decoded, weights), nn::mul(gt, weights));
            if (cfg.perc_weight > 0)
                loss = nn::add(loss, nn::scale(feat.distance(decoded, gt), cfg.perc_weight));
            if (cfg.attr_weight > 0) {
                Var attr = nn::constant_scalar(0.0);
                for (size_t a = 0; a < disc_attrs.size(); ++a) {
                    std::vector<int> labels;
                    for (const auto* s : batch) labels.push_back(s->vector.discrete[a]);
                    attr = nn::add(attr, nn::cross_entropy_logits(nn::linear(latent, aux_w[a], aux_b[a]), labels));
                }
                loss = nn::add(loss, nn::scale(attr, cfg.attr_weight / static_cast<real>(disc_attrs.size())));
                if (ncont > 0) {
                    // regress the true normalized continuous controls; the
                    // expression warp otherwise biases the apparent geometry
                    nn::Array tgt(static_cast<Eigen::Index>(bn) * ncont);
                    for (int i = 0; i < bn; ++i)
                        for (int a = 0; a < ncont; ++a) {
                            const auto& ca = cont_attrs[static_cast<size_t>(a)];
                            tgt[static_cast<Eigen::Index>(i) * ncont + a] =
                                (batch[static_cast<size_t>(i)]->vector.continuous[static_cast<size_t>(a)] - ca.min) /
                                (ca.max - ca.min);
                        }
                    const Var d = nn::sub(nn::linear(latent, aux_cw, aux_cb),
                                          nn::constant({bn, ncont}, std::move(tgt)));
                    loss = nn::add(loss, nn::scale(nn::dot(d, d), cfg.attr_weight / static_cast<real>(bn * ncont)));
                }
            }
            if (cfg.consist_weight > 0) {
                // second view: fresh corruption of the same avatars each epoch
                std::vector<Image> alts;
                for (const auto* s : batch)
                    alts.push_back(renderer.synth_selfie(s->vector,
                                                         SelfieCorruption::random(rng, cfg.corruption_strength)));
                const Var d = nn::sub(latent, model.encode_var(nn::images_to_var(alts)));
                loss = nn::add(loss, nn::scale(nn::dot(d, d),
                                               cfg.consist_weight / static_cast<real>(d->numel())));
            }
            if (cfg.sem_weight > 0) {
                // anchor per-class mean colors using the clean render's exact
                // segmentation for both images (the decode target is aligned)
                Var sem = nn::constant_scalar(0.0);
                for (int i = 0; i < bn; ++i) {
                    const auto& seg = batch[static_cast<size_t>(i)]->render.seg;
                    sem = nn::add(sem, semantic_color_loss_var(nn::slice_batch(decoded, i), seg,
                                                               nn::slice_batch(gt, i), seg));
                }
                loss = nn::add(loss, nn::scale(sem, cfg.sem_weight / bn));
            }
            // adversarial arm joins once the reconstruction is warm; from a
            // cold start the hinge gradient collapses training
            if (cfg.adv_weight > 0 && epoch >= cfg.epochs / 2) {
                disc->set_trainable(true);
                const Var dloss = discriminator_hinge_var(
                    disc->forward(gt), disc->forward(nn::constant(decoded->shape, decoded->val)));
                check_finite(nn::scalar_value(dloss), "stylizer training (D)");
                dopt->zero_grad();
                nn::backward(dloss);
                if (adv_step % 4 == 0) accumulate_r1_grads(*disc, gt, cfg.adv_gamma, cfg.adv_r1_weight);
                dopt->step();
                ++adv_step;

                disc->set_trainable(false);
                loss = nn::add(loss, nn::scale(generator_hinge_var(disc->forward(decoded)), cfg.adv_weight));
            }
            const real lv = nn::scalar_value(loss);
            check_finite(lv, "stylizer training");
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

    // held-out normalization quality, on corrupted and zero-corruption inputs
    real l1 = 0, l1_clean = 0;
    for (size_t i = static_cast<size_t>(cfg.dataset_size); i < samples.size(); ++i) {
        const auto& s = samples[i];
        const Image from_selfie = model.normalize(s.selfie);
        SelfieCorruption none;
        none.background_id = s.corruption.background_id;
        const Image from_clean = model.normalize(renderer.synth_selfie(s.vector, none));
        real a = 0, b = 0;
        for (size_t p = 0; p < s.render.image.data.size(); ++p) {
            a += std::abs(from_selfie.data[p] - s.render.image.data[p]);
            b += std::abs(from_clean.data[p] - s.render.image.data[p]);
        }
        l1 += a / static_cast<real>(s.render.image.data.size());
        l1_clean += b / static_cast<real>(s.render.image.data.size());
    }
    report.holdout_l1 = cfg.holdout > 0 ? l1 / cfg.holdout : 0.0;
    report.holdout_clean_l1 = cfg.holdout > 0 ? l1_clean / cfg.holdout : 0.0;
    return report;
}

// ------------------------------------------------- adversarial fine-tune

namespace {
real frechet_to(const FeatureExtractor& feat, const std::vector<Image>& a, const FrechetStats& ref) {
    return frechet_distance(FrechetStats::from_images(feat, a), ref);
}
}  // namespace

FinetuneReport adversarial_finetune(StylizerModel& model, const FeatureExtractor& feat,
                                    const SegmentationOracle& oracle, const StylePrior& prior,
                                    const std::vector<Image>& exemplars, const FinetuneConfig& cfg) {
    if (!model.trained()) throw StateError("adversarial_finetune: stylizer has not been trained");
    if (exemplars.empty()) throw ArgumentError("adversarial_finetune: empty exemplar set");

    auto& dec = model.decoder();
    const auto params = dec.param_vars();
    std::vector<Array> snapshot;
    for (const auto& p : params) snapshot.push_back(p->val);
    const auto restore = [&] {
        for (size_t i = 0; i < params.size(); ++i) params[i]->val = snapshot[i];
    };

    // fixed evaluation draws: decoded by the frozen decoder now, by the
    // tuned decoder afterwards
    const auto eval_codes = prior.sample(cfg.eval_samples, cfg.seed ^ 0xe7a1);
    std::vector<Image> before;
    before.reserve(eval_codes.size());
    for (const auto& c : eval_codes) before.push_back(model.decode(c));
    const auto exemplar_stats = FrechetStats::from_images(feat, exemplars);

    FinetuneReport report;
    report.frechet_before = frechet_to(feat, before, exemplar_stats);

    try {
        Rng rng(cfg.seed);
        nn::Discriminator disc(rng, model.image_size(), 12, 3);
        nn::Adam gopt(params, cfg.lr);
        nn::Adam dopt(disc.param_vars(), cfg.lr);

        for (int step = 0; step < cfg.steps; ++step) {
            // real batch: exemplars; fake batch: tuned decoder on prior draws
            std::vector<Image> reals_v;
            for (int i = 0; i < cfg.batch; ++i) reals_v.push_back(exemplars[rng.index(exemplars.size())]);
            const Var reals = nn::images_to_var(reals_v);
            const auto codes = prior.sample(cfg.batch, cfg.seed + 7919 * static_cast<uint64_t>(step + 1));
            const Var code_var = codes_to_var(codes);
            const Var fakes = model.decode_var(code_var);

            disc.set_trainable(true);
            dec.set_trainable(false);
            Var dloss = discriminator_hinge_var(disc.forward(reals),
                                                disc.forward(nn::constant(fakes->shape, fakes->val)));
            check_finite(nn::scalar_value(dloss), "adversarial fine-tune (D)");
            dopt.zero_grad();
            nn::backward(dloss);
            if (step % 4 == 0) accumulate_r1_grads(disc, reals, cfg.gamma, cfg.weights.r1);
            dopt.step();

            disc.set_trainable(false);
            dec.set_trainable(true);
            const Var tuned = model.decode_var(code_var);
            Var gloss = nn::scale(generator_hinge_var(disc.forward(tuned)), cfg.weights.adv);
            // semantic color tie to the frozen decoder's output; masks come
            // from the segmentation oracle on the frozen images
            {
                for (size_t i = 0; i < params.size(); ++i) std::swap(params[i]->val, snapshot[i]);
                const Var frozen_out = model.decode_var(code_var);
                for (size_t i = 0; i < params.size(); ++i) std::swap(params[i]->val, snapshot[i]);
                Var sem = nn::constant_scalar(0.0);
                for (int i = 0; i < cfg.batch; ++i) {
                    const Image fimg = nn::var_to_image(frozen_out, i);
                    const SegMap fseg = oracle.segment(fimg);
                    const Var fconst = nn::constant({1, 3, fimg.h, fimg.w},
                                                    nn::image_to_var(fimg)->val);
                    sem = nn::add(sem, semantic_color_loss_var(nn::slice_batch(tuned, i), fseg, fconst, fseg));
                }
                gloss = nn::add(gloss, nn::scale(sem, cfg.weights.sem / cfg.batch));
            }
            check_finite(nn::scalar_value(gloss), "adversarial fine-tune (G)");
            gopt.zero_grad();
            nn::backward(gloss);
            gopt.step();
        }
        dec.set_trainable(true);
    } catch (const StateError&) {
        restore();
        throw;
    }

    std::vector<Image> after;
    after.reserve(eval_codes.size());
    for (const auto& c : eval_codes) after.push_back(model.decode(c));
    report.frechet_after = frechet_to(feat, after, exemplar_stats);

    real drift = 0;
    int counted = 0;
    for (size_t i = 0; i < eval_codes.size(); ++i) {
        const SegMap sb = oracle.segment(before[i]);
        const SegMap sa = oracle.segment(after[i]);
        const auto cb = mean_semantic_color(before[i], sb, SegClass::skin);
        const auto ca = mean_semantic_color(after[i], sa, SegClass::skin);
        if (!cb.present || !ca.present) continue;
        real d2 = 0;
        for (int c = 0; c < 3; ++c) d2 += (cb.rgb[c] - ca.rgb[c]) * (cb.rgb[c] - ca.rgb[c]);
        drift += std::sqrt(d2);
        ++counted;
    }
    report.skin_drift = counted > 0 ? drift / counted : 0.0;
    return report;
}

}  // namespace avafit
