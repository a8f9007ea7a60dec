#pragma once

#include <memory>
#include <string>
#include <vector>

#include "avafit/engine.hpp"
#include "avafit/losses.hpp"
#include "avafit/modules.hpp"

namespace avafit {

/// Multi-layer latent code ("w+"-style): one style vector per generator
/// layer, stored row-major as layers x dim.
struct LatentCode {
    int layers = 0;
    int dim = 0;
    std::vector<real> values;

    void validate() const;  // finite values, size == layers*dim
};

/// Normalization model: a convolutional encoder maps a (possibly corrupted)
/// selfie to a multi-layer latent code, and a style-conditioned decoder maps
/// the code back to a clean, neutral avatar-domain image. Trained on
/// synthetic (corrupted selfie, clean render) pairs so that pose, expression
/// and lighting are stripped while the avatar's identity attributes survive.
class StylizerModel {
public:
    StylizerModel(Rng& rng, const AttributeSchema& schema, int image_size, int latent_dim = 128,
                  int base_channels = 48, int encoder_channels = 16);

    nn::Var encode_var(const nn::Var& images) const;  // {N,3,S,S} -> {N, L*D}
    nn::Var decode_var(const nn::Var& codes) const;   // {N, L*D}  -> {N,3,S,S}

    LatentCode encode(const Image& img) const;  // throws StateError untrained
    Image decode(const LatentCode& code) const;
    /// decode(encode(selfie)): the normalized avatar-domain image.
    Image normalize(const Image& selfie) const;

    int num_layers() const { return dec_->num_latent_layers(); }
    int latent_dim() const { return dec_->style_dim(); }
    int image_size() const { return dec_->image_size(); }
    const AttributeSchema& schema() const { return schema_; }
    nn::StyleGenerator& decoder() { return *dec_; }
    const nn::StyleGenerator& decoder() const { return *dec_; }

    std::vector<nn::Var> all_params() const;
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    void save(const std::string& path) const;
    void load(const std::string& path);  // SchemaError on schema-hash mismatch

private:
    AttributeSchema schema_;
    std::shared_ptr<nn::ConvEncoder> enc_;
    std::shared_ptr<nn::StyleGenerator> dec_;
    bool trained_ = false;
};

/// Empirical latent prior: the stored codes of the clean-render training
/// corpus; sampling draws a stored code and adds small Gaussian jitter.
class StylePrior {
public:
    StylePrior() = default;
    StylePrior(std::vector<LatentCode> codes, real jitter_sigma);

    static StylePrior build(const StylizerModel& model, const std::vector<Image>& clean_renders,
                            real jitter_sigma = 0.05);

    std::vector<LatentCode> sample(int n, uint64_t seed) const;  // StateError when empty
    size_t size() const { return codes_.size(); }
    real jitter_sigma() const { return sigma_; }
    const std::vector<LatentCode>& codes() const { return codes_; }

    void save(const std::string& path) const;
    static StylePrior load(const std::string& path);

private:
    std::vector<LatentCode> codes_;
    real sigma_ = 0.0;
};

struct StylizerTrainConfig {
    int dataset_size = 256;
    int holdout = 32;
    int epochs = 8;
    int batch = 8;
    real lr = 2e-3;
    real lr_decay = 0.5;     // multiplier applied every lr_step epochs (1.0 = constant)
    int lr_step = 8;
    real sem_weight = 1.0;   // semantic color anchor between decoded and clean render
    real perc_weight = 0.8;  // perceptual distance between decoded and clean render
    // Latent consistency: the same avatar under two corruptions must encode
    // to the same latent. Without it, corruption noise in the latent swamps
    // small identity cues (glasses, mouth shape) and the decoder learns to
    // ignore them.
    real consist_weight = 4.0;
    // Weight of an auxiliary linear probe predicting the discrete
    // attributes from the latent (training-only scaffolding).
    real attr_weight = 1.0;
    // Hinge-adversarial term against clean renders, with R1 on the
    // discriminator. Off by default: it sharpens decodes but costs
    // reconstruction accuracy at small scales.
    real adv_weight = 0.0;
    real adv_gamma = 10.0;
    real adv_r1_weight = 5.0;
    // Extra L1 weight on fine-detail pixels (eyes, brows, mouth, glasses).
    // These regions are a few pixels wide, so an unweighted L1 lets the
    // decoder blur them away without noticeable loss.
    real detail_weight = 4.0;
    real corruption_strength = 1.0;
    uint64_t seed = 600;
    std::string curve_csv;
};

struct StylizerTrainReport {
    std::vector<real> epoch_loss;
    real holdout_l1 = 0;        // decoded(corrupted selfie) vs clean render
    real holdout_clean_l1 = 0;  // decoded(clean render) vs clean render
};

/// Supervised normalization: reconstruct the clean neutral render from the
/// corrupted selfie (detail-weighted L1 + perceptual + semantic color).
/// The perceptual term is what keeps thin structures (glasses frames,
/// mouth shape) from being averaged away by the pixel loss. Aborts with
/// StateError when the loss turns non-finite.
StylizerTrainReport train_stylizer(StylizerModel& model, const Renderer& renderer,
                                   const FeatureExtractor& feat, const StylizerTrainConfig& cfg);

struct FinetuneConfig {
    int steps = 120;
    int batch = 8;
    real lr = 3e-5;
    int eval_samples = 60;  // prior draws scored before/after (Frechet, drift)
    real gamma = 10.0;      // R1 coefficient
    StylizeLossWeights weights;
    uint64_t seed = 601;
};

struct FinetuneReport {
    real frechet_before = 0;  // decoded prior samples vs exemplar set
    real frechet_after = 0;
    real skin_drift = 0;  // mean skin-color shift between the frozen and tuned decoders
};

/// Optional hinge-adversarial fine-tune of the decoder toward the exemplar
/// set; the semantic color term ties the tuned decoder's output to the
/// frozen pre-finetune decoder on prior samples. On divergence the decoder
/// is restored to its supervised weights and StateError is thrown.
FinetuneReport adversarial_finetune(StylizerModel& model, const FeatureExtractor& feat,
                                    const SegmentationOracle& oracle, const StylePrior& prior,
                                    const std::vector<Image>& exemplars, const FinetuneConfig& cfg);

}  // namespace avafit
