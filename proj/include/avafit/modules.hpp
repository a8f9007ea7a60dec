#pragma once

#include <vector>

#include "avafit/nn.hpp"

namespace avafit::nn {

/// Fully connected stack with leaky-ReLU hidden activations and a linear
/// output layer.
class Mlp : public Module {
public:
    Mlp(Rng& rng, const std::vector<int>& widths);
    Var forward(const Var& x) const;
    int in_dim() const { return widths_.front(); }
    int out_dim() const { return widths_.back(); }

private:
    std::vector<int> widths_;
    std::vector<Var> ws_, bs_;
};

/// Strided conv pyramid: {N,3,S,S} -> flattened features -> linear head.
/// Stages double the channel count and halve the resolution.
class ConvEncoder : public Module {
public:
    /// global_pool averages each final-stage channel over space before the
    /// linear head (translation-robust); otherwise features are flattened.
    ConvEncoder(Rng& rng, int image_size, int base_channels, int num_stages, int out_dim,
                bool global_pool = false);
    Var forward(const Var& x) const;
    int out_dim() const { return out_dim_; }
    int image_size() const { return size_; }

private:
    int size_, stages_, out_dim_;
    bool global_pool_;
    std::vector<int> chans_;
    std::vector<Var> ws_, bs_;
    Var head_w_, head_b_;
};

/// Style-modulated upsampling generator. Starts from a learned constant
/// {C0, base, base} grid; each block is nearest-upsample, 3x3 conv, FiLM
/// from one per-layer style vector, leaky ReLU. Two style slots per block
/// (one before, one after the conv) give latent_layers = 2*blocks.
class StyleGenerator : public Module {
public:
    StyleGenerator(Rng& rng, int base_size, int num_blocks, int base_channels, int style_dim);

    /// styles: one {N, style_dim} vector per latent layer.
    Var forward(const std::vector<Var>& styles) const;

    int num_latent_layers() const { return 2 * blocks_; }
    int style_dim() const { return style_dim_; }
    int image_size() const { return base_ << blocks_; }

private:
    Var style_affine(int slot, const Var& s, int channels) const;

    int base_, blocks_, style_dim_;
    std::vector<int> chans_;  // per block input channels
    Var const_grid_;
    std::vector<Var> conv_w_, conv_b_;
    std::vector<Var> aff_w_, aff_b_;  // style -> 2*C FiLM params, two per block
    Var out_w_, out_b_;
};

/// Patch discriminator: strided convs + mean over the final score map.
class Discriminator : public Module {
public:
    Discriminator(Rng& rng, int image_size, int base_channels, int num_stages);
    Var forward(const Var& x) const;  // {N,3,S,S} -> {N,1} scores

private:
    int size_, stages_;
    std::vector<Var> ws_, bs_;
    Var head_w_, head_b_;
};

/// Small fully convolutional segmentation net producing per-pixel class
/// logits at input resolution (stride-1 3x3 convs).
class SegNet : public Module {
public:
    SegNet(Rng& rng, int channels, int num_classes, int depth = 4);
    Var forward(const Var& x) const;  // {N,3,H,W} -> {N,K,H,W} logits
    SegMap predict(const Image& img) const;
    int num_classes() const { return classes_; }

private:
    int classes_, depth_;
    std::vector<Var> ws_, bs_;
};

/// Factor an image size into (base, blocks) with base in [4,8] such that
/// base * 2^blocks == image_size; throws ArgumentError otherwise.
std::pair<int, int> generator_grid(int image_size);

/// Pack a planar image into a {1,3,H,W} constant graph node.
Var image_to_var(const Image& img);
Var images_to_var(const std::vector<Image>& imgs);
Image var_to_image(const Var& v, int index = 0);

}  // namespace avafit::nn
