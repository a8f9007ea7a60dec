#pragma once

#include <memory>
#include <string>
#include <vector>

#include "avafit/engine.hpp"
#include "avafit/losses.hpp"
#include "avafit/modules.hpp"

namespace avafit {

/// Differentiable stand-in for the engine renderer: a bank of per-layer MLPs
/// maps a flat avatar encoding to a stack of latent style vectors, which a
/// style-conditioned generator turns into an image. Accepts relaxed vectors.
class ImitatorModel {
public:
    ImitatorModel(Rng& rng, const AttributeSchema& schema, int image_size, int style_dim = 64,
                  int base_channels = 48, int mlp_hidden = 96);

    /// flat {N, flat_dim} -> image batch {N,3,S,S}; differentiable.
    nn::Var forward(const nn::Var& flat) const;
    /// Per-layer latent styles for a flat encoding (the mapper's target space).
    std::vector<nn::Var> encode_styles(const nn::Var& flat) const;

    Image imitate(const RelaxedAvatarVector& v) const;  // throws StateError untrained
    nn::Var imitate_var(const RelaxedAvatarVector& v) const;

    std::vector<Image> interpolation_sweep(const StrictAvatarVector& v1, const StrictAvatarVector& v2,
                                           int steps) const;

    const AttributeSchema& schema() const { return schema_; }
    nn::StyleGenerator& generator() { return *gen_; }
    const nn::StyleGenerator& generator() const { return *gen_; }
    int image_size() const { return gen_->image_size(); }
    int style_dim() const { return gen_->style_dim(); }
    int num_latent_layers() const { return gen_->num_latent_layers(); }

    std::vector<nn::Var> all_params() const;
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }
    bool pretrained() const { return pretrained_; }
    void mark_pretrained() { pretrained_ = true; }

    void save(const std::string& path) const;
    /// Model must be constructed with the same architecture; schema hash is
    /// verified against the checkpoint.
    void load(const std::string& path);

private:
    AttributeSchema schema_;
    std::vector<std::shared_ptr<nn::Mlp>> encoders_;
    std::shared_ptr<nn::StyleGenerator> gen_;
    bool trained_ = false;
    bool pretrained_ = false;
};

struct ImitatorTrainConfig {
    int dataset_size = 384;
    int holdout = 48;
    int epochs = 20;      // convergence horizon
    int batch = 8;
    real lr = 0.01;       // initial step size
    real lr_decay = 0.5;  // applied every decay_every epochs
    int decay_every = 2;
    bool two_step = true;          // unconditional pretrain, then conditional fit
    bool adversarial_pretrain = false;
    int pretrain_steps = 300;
    uint64_t seed = 500;
    std::string curve_csv;         // training curve destination, optional
    std::string pretrain_checkpoint;  // persisted generator weights, optional
};

/// Unconditional generator pretraining on engine renders. Default arm is a
/// reconstruction autoencoder (throwaway conv encoder feeding the style
/// stack); the adversarial arm (hinge + R1) sits behind a flag. Aborts with
/// StateError when the loss turns non-finite.
void pretrain_generator(ImitatorModel& model, const Renderer& renderer, const FeatureExtractor& feat,
                        const ImitatorTrainConfig& cfg);

struct ImitatorTrainReport {
    std::vector<real> epoch_loss;
    real holdout_l1 = 0;  // mean per-pixel L1 on held-out strict vectors
};

ImitatorTrainReport train_imitator(ImitatorModel& model, const Renderer& renderer,
                                   const FeatureExtractor& feat, const IdentityEmbedder& emb,
                                   const ImitatorTrainConfig& cfg);

}  // namespace avafit
