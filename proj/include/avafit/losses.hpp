#pragma once

#include <array>
#include <memory>
#include <vector>

#include "avafit/engine.hpp"
#include "avafit/modules.hpp"

namespace avafit {

/// Semantic classes entering the color-matching loss.
inline constexpr std::array<SegClass, 2> kSemanticClasses = {SegClass::hair, SegClass::skin};

/// Mean RGB of a segmentation class; `present` is false when the class has
/// no pixels (e.g. bald avatars have no hair), in which case callers skip
/// the corresponding loss term.
struct MeanColor {
    bool present = false;
    std::array<real, 3> rgb{0, 0, 0};
};

MeanColor mean_semantic_color(const Image& img, const SegMap& seg, SegClass k);
/// Graph version over an image node {1,3,H,W}; null when the class is absent.
nn::Var mean_semantic_color_var(const nn::Var& img, const SegMap& seg, SegClass k);

real semantic_color_loss(const Image& a, const SegMap& sa, const Image& b, const SegMap& sb);
nn::Var semantic_color_loss_var(const nn::Var& a, const SegMap& sa, const nn::Var& b, const SegMap& sb);

/// Fixed multi-scale feature pyramid: 4 stride-2 stages of frozen random
/// filters with orthonormal rows. Stands in for a pretrained perceptual
/// network; deterministic given the seed, which is recorded for checkpoints.
class FeatureExtractor : public nn::Module {
public:
    explicit FeatureExtractor(uint64_t seed, int base_channels = 8, int num_stages = 4);

    std::vector<nn::Var> stages(const nn::Var& x) const;  // x {N,3,H,W}
    /// L2 distance between concatenated per-stage channel-normalized features.
    nn::Var distance(const nn::Var& a, const nn::Var& b) const;
    real perceptual_loss(const Image& a, const Image& b) const;
    /// Per-stage channel-mean pooled descriptor of one image (Fréchet stats).
    std::vector<real> pooled_descriptor(const Image& img) const;
    int descriptor_dim() const;

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    int stages_n_;
    std::vector<int> chans_;
    std::vector<nn::Var> filters_;
};

/// Small convolutional embedder to a unit-norm 64-dim vector; trained once
/// with a contrastive objective (same avatar under two corruptions =
/// positive pair) and frozen. Stands in for a pretrained face-identity net.
class IdentityEmbedder : public nn::Module {
public:
    IdentityEmbedder(Rng& rng, int image_size, int embed_dim = 64);

    nn::Var embed(const nn::Var& x) const;  // {N,3,S,S} -> unit rows {N,dim}
    std::vector<real> embed_image(const Image& img) const;
    int image_size() const { return enc_->image_size(); }
    int embed_dim() const { return dim_; }

    void save(io::Checkpoint& ckpt, const std::string& prefix) const { enc_->save_params(ckpt, prefix); }
    void load(const io::Checkpoint& ckpt, const std::string& prefix) { enc_->load_params(ckpt, prefix); }

private:
    int dim_;
    std::shared_ptr<nn::ConvEncoder> enc_;
};

struct IdentityTrainConfig {
    int num_vectors = 512;
    int epochs = 30;
    int batch_pairs = 16;
    real lr = 1e-3;
    real margin = 0.3;
    real corruption_strength = 0.5;
    uint64_t seed = 401;
};

/// Train the embedder on engine data; returns the fraction of held-out
/// triples where the same-avatar pair scores closer than a cross pair.
real train_identity_embedder(IdentityEmbedder& emb, const Renderer& renderer,
                             const IdentityTrainConfig& cfg);

real identity_loss(const IdentityEmbedder& emb, const Image& a, const Image& b);
nn::Var identity_loss_var(const IdentityEmbedder& emb, const nn::Var& a, const nn::Var& b);

/// Segmentation source: exact labels where the engine provides them, a small
/// trained per-pixel net for corrupted/stylized images.
class SegmentationOracle {
public:
    SegmentationOracle() = default;
    explicit SegmentationOracle(std::shared_ptr<nn::SegNet> net) : net_(std::move(net)) {}

    bool has_net() const { return net_ != nullptr; }
    SegMap segment(const Image& img) const;
    const std::shared_ptr<nn::SegNet>& net() const { return net_; }

private:
    std::shared_ptr<nn::SegNet> net_;
};

struct SegTrainConfig {
    int num_samples = 96;
    int epochs = 12;
    real lr = 2e-3;
    uint64_t seed = 402;
};

/// Train a segmentation net on (selfie, warped exact labels) pairs; returns
/// mean pixel accuracy on a held-out split.
real train_segmentation_net(nn::SegNet& net, const Renderer& renderer, const SegTrainConfig& cfg);

// ------------------------------------------------------------ adversarial

struct AdvLosses {
    real gen = 0;        // generator hinge: -E[D(fake)]
    real disc = 0;       // real_term + fake_term (to be maximized -> minimize -disc)
    real real_term = 0;  // E[min(0, -1 + D(real))]
    real fake_term = 0;  // E[min(0, -1 - D(fake))]
};

AdvLosses adversarial_losses(const std::vector<real>& real_scores, const std::vector<real>& fake_scores);
/// Graph versions over {N,1} score nodes; both are minimization objectives.
nn::Var generator_hinge_var(const nn::Var& fake_scores);
nn::Var discriminator_hinge_var(const nn::Var& real_scores, const nn::Var& fake_scores);

/// (gamma/2) * E[ ||d D(x) / d x||^2 ] over the batch; gamma defaults to 10.
real r1_penalty(const nn::Discriminator& disc, const std::vector<Image>& real_batch, real gamma = 10.0);
/// Input-gradient array (flattened batch) backing the penalty; exposed for
/// the finite-difference Hessian-vector product used during training.
nn::Array r1_input_gradient(const nn::Discriminator& disc, const nn::Var& batch);

/// Adds weighted R1 gradients to the discriminator's parameter grads via a
/// central-difference Hessian-vector product along the input-gradient
/// direction (avoids second-order graph support). Call between zero_grad
/// and step of the discriminator optimizer.
void accumulate_r1_grads(nn::Discriminator& disc, const nn::Var& real_batch, real gamma, real weight);

// ------------------------------------------------------- composite losses

struct MapperLossWeights {
    real id = 0.4;
    real lpips = 0.8;
    real color = 0.8;
};

struct ImitatorLossWeights {
    real l1 = 1.0;
    real lpips = 0.8;
    real id = 1.0;
};

struct StylizeLossWeights {
    real adv = 1.0;
    real sem = 12.0;
    real r1 = 5.0;
};

struct LossTerms {
    nn::Var total;
    nn::Var id;     // may be null when a term is disabled (ablations)
    nn::Var lpips;  // "
    nn::Var color;  // " (mapper) / l1 (imitator)
};

/// Ablation switches: a disabled term contributes nothing and its Var is null.
struct TermMask {
    bool id = true;
    bool lpips = true;
    bool color = true;  // color (mapper) / l1 (imitator)
};

LossTerms mapper_loss(const FeatureExtractor& feat, const IdentityEmbedder& emb, const nn::Var& style_img,
                      const SegMap& style_seg, const nn::Var& imit_img, const SegMap& imit_seg,
                      const MapperLossWeights& w = {}, const TermMask& mask = {});

LossTerms imitator_loss(const FeatureExtractor& feat, const IdentityEmbedder& emb, const nn::Var& gen_img,
                        const nn::Var& gt_img, const ImitatorLossWeights& w = {}, const TermMask& mask = {});

real stylize_loss(real adv, real sem, real r1, const StylizeLossWeights& w = {});

}  // namespace avafit
