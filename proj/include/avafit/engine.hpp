#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avafit/common.hpp"
#include "avafit/schema.hpp"

namespace avafit {

/// Flat RGB color.
struct Rgb {
    real r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

/// Parametric hair silhouette. Regions are built from an enlarged head
/// ellipse clipped by a forehead cutoff, optional side/back lengths, and
/// type-specific extras (spikes, mohawk strip, ponytail blob, wavy fringe).
struct HairAsset {
    bool none = false;
    real rx_scale = 1.12;    // ellipse scale relative to head
    real ry_scale = 1.10;
    real cutoff = -0.16;     // fringe line, relative to face center (negative = above)
    real fringe_slope = 0.0; // asymmetric fringe (side part)
    real side_width = 2.0;   // sides narrower than this fraction of rx keep the cutoff
    real length = 0.0;       // extra side/back length below face center
    real bump_amp = 0.0;     // wavy fringe amplitude
    real bump_freq = 0.0;
    bool mohawk = false;
    bool spikes = false;
    bool ponytail = false;
};

struct BeardAsset {
    enum class Kind { none, full, goatee, mustache, chinstrap, chops } kind = Kind::none;
};

struct BrowAsset {
    real half_len = 0.10;
    real thickness = 0.018;
    real arch = 0.0;   // quadratic arch height
    real tilt = 0.0;   // radians, mirrored between eyes
};

struct GlassesAsset {
    enum class Kind { none, round, square, browline } kind = Kind::none;
};

/// Procedural asset lists, one entry per discrete choice of each attribute.
struct AssetCatalog {
    std::vector<HairAsset> hair;
    std::vector<BeardAsset> beard;
    std::vector<BrowAsset> brows;
    std::vector<GlassesAsset> glasses;
    std::vector<Rgb> skin_tones;
    std::vector<Rgb> eye_colors;
    std::vector<Rgb> hair_colors;

    /// Catalog sized to the schema's cardinalities. The default schema gets
    /// hand-tuned assets; larger cardinalities are filled by parametric
    /// variation so stress configurations stay distinguishable.
    static AssetCatalog for_schema(const AttributeSchema& s);
};

struct RenderOutput {
    Image image;
    SegMap seg;
};

/// Continuous face geometry in unit coordinates, derived from a vector.
/// Exposed for landmark oracles and region metrics in tests/eval.
struct FaceGeometry {
    real cx, cy;              // face center
    real rx, ry;              // face half-axes
    real eye_lx, eye_rx_, eye_y;  // eye centers
    real eye_rx_ax, eye_ry_ax;    // eye half-axes
    real iris_r, pupil_r;
    real mouth_cx, mouth_cy, mouth_rx, mouth_ry;
    real nose_x0, nose_y0, nose_x1, nose_y1;  // nose stroke bounding box
    real brow_y;
};

/// Domain-shift parameters applied when synthesizing a pseudo-selfie.
struct SelfieCorruption {
    real rot_deg = 0.0;       // [-15, 15]
    real tx = 0.0, ty = 0.0;  // [-0.05, 0.05] of width
    real smile = 0.0;         // [0, 1] mouth-corner deformation amplitude
    real mouth_open = 0.0;    // [0, 1]
    real illum_gx = 0.0, illum_gy = 0.0, illum_strength = 0.0;  // strength in [0, 0.4]
    real shadow_cx = 0.5, shadow_cy = 0.5, shadow_r = 0.2, shadow_strength = 0.0;
    int background_id = 0;    // [0, num_backgrounds)
    real noise_sigma = 0.0;   // [0, 0.08]
    uint64_t noise_seed = 0;

    static constexpr int num_backgrounds = 6;
    static SelfieCorruption random(Rng& rng, real strength = 1.0);
    void validate() const;
};

/// Deterministic 2D renderer: strict avatar vector -> image + segmentation.
/// Rendering uses 2x supersampling with box downsample for color and
/// majority vote for labels.
class Renderer {
public:
    Renderer(const AttributeSchema& schema, AssetCatalog catalog, int image_size, int supersample = 2);
    Renderer(const AttributeSchema& schema, int image_size)
        : Renderer(schema, AssetCatalog::for_schema(schema), image_size) {}

    RenderOutput render(const StrictAvatarVector& v) const;
    FaceGeometry geometry(const StrictAvatarVector& v) const;
    Image synth_selfie(const StrictAvatarVector& v, const SelfieCorruption& c) const;
    /// Selfie plus the segmentation transported through the same warps
    /// (used as exact labels for segmentation-net training and landmark oracles).
    std::pair<Image, SegMap> synth_selfie_with_seg(const StrictAvatarVector& v, const SelfieCorruption& c) const;

    Image background_texture(int id) const;

    const AttributeSchema& schema() const { return schema_; }
    const AssetCatalog& catalog() const { return catalog_; }
    int image_size() const { return size_; }

    /// Fraction of pixels that differ (any channel by more than 1/255)
    /// between renders of the canonical base face with attribute `attr`
    /// set to indices i and j. Backs the asset-distinguishability invariant.
    real asset_pixel_difference(int attr, int i, int j) const;
    /// Canonical base face: continuous midpoints, all discrete indices
    /// chosen so every attribute's assets are visible (hair present,
    /// no beard/glasses occlusion beyond defaults).
    StrictAvatarVector base_face() const;

private:
    AttributeSchema schema_;
    AssetCatalog catalog_;
    int size_;
    int ss_;
};

struct DatasetSample {
    StrictAvatarVector vector;
    SelfieCorruption corruption;
    RenderOutput render;
    Image selfie;
    SegMap selfie_seg;
};

/// n reproducible samples; if dir is nonempty the dataset is persisted as
/// PNGs plus a text manifest (images/, selfies/, seg/, manifest.tsv).
std::vector<DatasetSample> generate_dataset(const Renderer& renderer, int n, uint64_t seed,
                                            const std::string& dir = "", real corruption_strength = 1.0);

/// Content hash over all images, labels and vectors (reproducibility checks).
uint64_t dataset_hash(const std::vector<DatasetSample>& samples);

}  // namespace avafit
