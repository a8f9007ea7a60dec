#include "avafit/engine.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "avafit/io.hpp"

namespace avafit {

namespace {

constexpr real kPi = 3.14159265358979323846;

real clampr(real v, real lo, real hi) { return std::clamp(v, lo, hi); }

Rgb scale_color(const Rgb& c, real f) { return {c.r * f, c.g * f, c.b * f}; }

std::vector<Rgb> ramp_palette(int n, real h0, real h1, real sat, real v0, real v1) {
    // simple HSV ramp, used when a schema asks for more colors than the
    // hand-picked palettes carry
    std::vector<Rgb> out;
    for (int i = 0; i < n; ++i) {
        const real t = n > 1 ? static_cast<real>(i) / (n - 1) : 0.0;
        const real h = h0 + (h1 - h0) * t;
        const real v = v0 + (v1 - v0) * t;
        const real c = v * sat;
        const real hp = std::fmod(h, 360.0) / 60.0;
        const real xx = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
        real r = 0, g = 0, b = 0;
        switch (static_cast<int>(hp)) {
            case 0: r = c; g = xx; break;
            case 1: r = xx; g = c; break;
            case 2: g = c; b = xx; break;
            case 3: g = xx; b = c; break;
            case 4: r = xx; b = c; break;
            default: r = c; b = xx; break;
        }
        const real m = v - c;
        out.push_back({r + m, g + m, b + m});
    }
    return out;
}

}  // namespace

AssetCatalog AssetCatalog::for_schema(const AttributeSchema& s) {
    AssetCatalog cat;

    const std::vector<HairAsset> hair12 = {
        {.none = true},
        {.rx_scale = 1.05, .ry_scale = 1.04, .cutoff = -0.24},                                      // buzz rim
        {.rx_scale = 1.12, .ry_scale = 1.10, .cutoff = -0.155},                                     // short cap
        {.rx_scale = 1.16, .ry_scale = 1.12, .cutoff = -0.14, .side_width = 0.80, .length = 0.10},  // bob
        {.rx_scale = 1.18, .ry_scale = 1.14, .cutoff = -0.14, .side_width = 0.72, .length = 0.34},  // long
        {.rx_scale = 1.38, .ry_scale = 1.30, .cutoff = -0.10},                                      // afro
        {.rx_scale = 1.12, .ry_scale = 1.10, .cutoff = -0.15, .fringe_slope = 0.45},                // side part
        {.rx_scale = 1.03, .ry_scale = 1.02, .cutoff = -0.30, .mohawk = true},                      // mohawk
        {.rx_scale = 1.14, .ry_scale = 1.08, .cutoff = -0.115},                                     // bowl
        {.rx_scale = 1.20, .ry_scale = 1.16, .cutoff = -0.13, .side_width = 0.82, .length = 0.06,
         .bump_amp = 0.020, .bump_freq = 7.0},                                                      // curly
        {.rx_scale = 1.10, .ry_scale = 1.08, .cutoff = -0.16, .ponytail = true},                    // ponytail
        {.rx_scale = 1.10, .ry_scale = 1.06, .cutoff = -0.15, .spikes = true},                      // spiky
    };
    const int n_hair = s.discrete()[s.discrete_index("hair_type")].cardinality;
    for (int i = 0; i < n_hair; ++i) {
        if (i < static_cast<int>(hair12.size())) {
            cat.hair.push_back(hair12[static_cast<size_t>(i)]);
        } else {
            // parametric grid for stress configurations
            const int k = i - static_cast<int>(hair12.size());
            HairAsset h;
            h.cutoff = -0.22 + 0.035 * (k % 4);
            h.length = 0.12 * ((k / 4) % 4);
            h.side_width = h.length > 0 ? 0.76 : 2.0;
            h.fringe_slope = -0.5 + 0.5 * ((k / 16) % 3);
            h.rx_scale = 1.10 + 0.02 * (k % 3);
            h.ry_scale = 1.08 + 0.02 * ((k / 3) % 3);
            cat.hair.push_back(h);
        }
    }

    using BK = BeardAsset::Kind;
    const std::vector<BeardAsset> beard6 = {{BK::none}, {BK::full},      {BK::goatee},
                                            {BK::mustache}, {BK::chinstrap}, {BK::chops}};
    const int n_beard = s.discrete()[s.discrete_index("beard_type")].cardinality;
    for (int i = 0; i < n_beard; ++i) cat.beard.push_back(beard6[static_cast<size_t>(i % 6)]);

    const std::vector<BrowAsset> brows5 = {
        {.half_len = 0.085, .thickness = 0.010},
        {.half_len = 0.115, .thickness = 0.030},
        {.half_len = 0.105, .thickness = 0.017, .arch = 0.035},
        {.half_len = 0.105, .thickness = 0.017, .tilt = 0.45},
        {.half_len = 0.050, .thickness = 0.042},
    };
    const int n_brow = s.discrete()[s.discrete_index("brow_type")].cardinality;
    for (int i = 0; i < n_brow; ++i) cat.brows.push_back(brows5[static_cast<size_t>(i % 5)]);

    using GK = GlassesAsset::Kind;
    const std::vector<GlassesAsset> glasses4 = {{GK::none}, {GK::round}, {GK::square}, {GK::browline}};
    const int n_gl = s.discrete()[s.discrete_index("glasses_type")].cardinality;
    for (int i = 0; i < n_gl; ++i) cat.glasses.push_back(glasses4[static_cast<size_t>(i % 4)]);

    const std::vector<Rgb> skin6 = {{0.99, 0.86, 0.76}, {0.94, 0.76, 0.62}, {0.85, 0.64, 0.48},
                                    {0.72, 0.51, 0.36}, {0.55, 0.37, 0.26}, {0.38, 0.26, 0.18}};
    const int n_skin = s.discrete()[s.discrete_index("skin_tone")].cardinality;
    cat.skin_tones = n_skin <= 6 ? std::vector<Rgb>(skin6.begin(), skin6.begin() + n_skin)
                                 : ramp_palette(n_skin, 25, 30, 0.45, 0.95, 0.30);

    const std::vector<Rgb> eye5 = {{0.35, 0.20, 0.10}, {0.25, 0.45, 0.80}, {0.22, 0.55, 0.30},
                                   {0.55, 0.58, 0.60}, {0.80, 0.55, 0.15}};
    const int n_eye = s.discrete()[s.discrete_index("eye_color")].cardinality;
    cat.eye_colors = n_eye <= 5 ? std::vector<Rgb>(eye5.begin(), eye5.begin() + n_eye)
                                : ramp_palette(n_eye, 0, 300, 0.7, 0.75, 0.45);

    const std::vector<Rgb> hair8 = {{0.08, 0.07, 0.07}, {0.30, 0.20, 0.12}, {0.45, 0.30, 0.17},
                                    {0.85, 0.72, 0.40}, {0.62, 0.25, 0.12}, {0.62, 0.62, 0.62},
                                    {0.92, 0.92, 0.90}, {0.25, 0.35, 0.75}};
    const int n_hc = s.discrete()[s.discrete_index("hair_color")].cardinality;
    cat.hair_colors = n_hc <= 8 ? std::vector<Rgb>(hair8.begin(), hair8.begin() + n_hc)
                                : ramp_palette(n_hc, 0, 330, 0.6, 0.85, 0.15);

    return cat;
}

void SelfieCorruption::validate() const {
    if (std::abs(rot_deg) > 15.0 + 1e-9) throw ArgumentError("rotation outside +/-15 degrees");
    if (std::abs(tx) > 0.05 + 1e-9 || std::abs(ty) > 0.05 + 1e-9) throw ArgumentError("translation outside +/-5%");
    if (smile < 0 || smile > 1 || mouth_open < 0 || mouth_open > 1) throw ArgumentError("expression out of range");
    if (illum_strength < 0 || illum_strength > 0.4) throw ArgumentError("illumination strength out of range");
    if (shadow_strength < 0 || shadow_strength > 0.6) throw ArgumentError("shadow strength out of range");
    if (background_id < 0 || background_id >= num_backgrounds) throw ArgumentError("bad background id");
    if (noise_sigma < 0 || noise_sigma > 0.08) throw ArgumentError("noise sigma out of range");
}

SelfieCorruption SelfieCorruption::random(Rng& rng, real strength) {
    SelfieCorruption c;
    c.rot_deg = strength * rng.uniform(-15.0, 15.0);
    c.tx = strength * rng.uniform(-0.05, 0.05);
    c.ty = strength * rng.uniform(-0.05, 0.05);
    c.smile = strength * rng.uniform(0.0, 1.0);
    c.mouth_open = strength * rng.uniform(0.0, 0.8);
    const real ang = rng.uniform(0.0, 2.0 * kPi);
    c.illum_gx = std::cos(ang);
    c.illum_gy = std::sin(ang);
    c.illum_strength = strength * rng.uniform(0.0, 0.35);
    c.shadow_cx = rng.uniform(0.2, 0.8);
    c.shadow_cy = rng.uniform(0.2, 0.8);
    c.shadow_r = rng.uniform(0.1, 0.3);
    c.shadow_strength = strength * rng.uniform(0.0, 0.45);
    c.background_id = static_cast<int>(rng.index(num_backgrounds));
    c.noise_sigma = strength * rng.uniform(0.005, 0.05);
    c.noise_seed = rng.raw();
    return c;
}

// ---------------------------------------------------------------------------
// renderer internals

namespace {

/// Per-render parameters derived once from the vector.
struct Derived {
    real cx, cy, rx, ry, ry_low, p_low;
    real eye_off, eye_y, eye_rx, eye_ry, iris_r, pupil_r, eye_rot;
    real brow_y;
    real mouth_cx, mouth_cy, mouth_rx, mouth_ry;
    real nose_y0, nose_y1;
    Rgb skin, eye, hair, beard_c, brow_c;
    const HairAsset* hair_a;
    const BeardAsset* beard_a;
    const BrowAsset* brow_a;
    const GlassesAsset* glasses_a;
};

Derived derive(const AttributeSchema& schema, const AssetCatalog& cat, const StrictAvatarVector& v) {
    Derived d;
    auto c = [&](const char* n) { return v.continuous[static_cast<size_t>(schema.continuous_index(n))]; };
    auto di = [&](const char* n) { return static_cast<size_t>(v.discrete[static_cast<size_t>(schema.discrete_index(n))]); };

    d.cx = 0.5;
    d.cy = 0.52;
    d.rx = 0.31 * c("head_width");
    d.ry = 0.36;
    const real fr = c("face_roundness");
    d.ry_low = d.ry * (0.92 + 0.16 * fr);
    d.p_low = 1.6 + 1.6 * fr;

    const real es = c("eye_size");
    d.eye_off = 0.10 * c("eye_spacing");
    d.eye_y = d.cy - 0.075;
    d.eye_rx = 0.070 * es;
    d.eye_ry = 0.048 * es;
    d.iris_r = 0.046 * es;
    d.pupil_r = 0.015 * es;
    d.eye_rot = c("eye_rotation");
    d.brow_y = d.eye_y - 0.085;

    d.mouth_cx = d.cx;
    d.mouth_cy = d.cy + 0.185 + c("mouth_y");
    d.mouth_rx = 0.10 * c("mouth_width");
    d.mouth_ry = 0.034;

    d.nose_y0 = d.cy + 0.02 + c("nose_y");
    d.nose_y1 = d.cy + 0.10 + c("nose_y");

    d.skin = cat.skin_tones[di("skin_tone")];
    d.eye = cat.eye_colors[di("eye_color")];
    d.hair = cat.hair_colors[di("hair_color")];
    d.beard_c = scale_color(d.hair, 0.55);
    d.brow_c = scale_color(d.hair, 0.45);
    d.hair_a = &cat.hair[di("hair_type")];
    d.beard_a = &cat.beard[di("beard_type")];
    d.brow_a = &cat.brows[di("brow_type")];
    d.glasses_a = &cat.glasses[di("glasses_type")];
    return d;
}

/// Implicit face value: <= 1 inside the head outline.
real face_value(const Derived& d, real x, real y) {
    const real dx = x - d.cx;
    const real dy = y - d.cy;
    if (dy <= 0.0) {
        const real a = dx / d.rx, b = dy / d.ry;
        return a * a + b * b;
    }
    const real a = std::abs(dx) / d.rx, b = dy / d.ry_low;
    return std::pow(a, d.p_low) + std::pow(b, d.p_low);
}

bool in_face(const Derived& d, real x, real y, real scale = 1.0) {
    const real dx = (x - d.cx) / scale + d.cx;
    const real dy = (y - d.cy) / scale + d.cy;
    return face_value(d, dx, dy) <= 1.0;
}

real triangle_wave(real t) {  // period 1, range [0,1]
    const real f = t - std::floor(t);
    return 1.0 - 2.0 * std::abs(f - 0.5);
}

bool in_hair(const Derived& d, real x, real y) {
    const HairAsset& h = *d.hair_a;
    if (h.none) return false;
    const real hcx = d.cx, hcy = d.cy - 0.02;
    const real dx = x - hcx, dyh = y - hcy;
    const real rxs = d.rx * h.rx_scale, rys = d.ry * h.ry_scale;
    real e = (dx / rxs) * (dx / rxs) + (dyh / rys) * (dyh / rys);

    real fringe = d.cy + h.cutoff + h.fringe_slope * dx;
    if (h.bump_amp > 0.0) fringe += h.bump_amp * std::sin(h.bump_freq * 2.0 * kPi * x);

    real limit = 1.0;
    if (h.spikes && y < d.cy - 0.22) {
        const real amp = 0.16 * triangle_wave(x * 9.0);
        limit = (1.0 + amp) * (1.0 + amp);
    }
    if (e <= limit && y <= fringe) return true;
    if (h.length > 0.0) {
        // side/back strands
        if (std::abs(dx) >= h.side_width * d.rx && std::abs(dx) <= rxs && y >= d.cy - 0.20 &&
            y <= d.cy + h.length && e <= limit * 1.15)
            return true;
        if (std::abs(dx) >= h.side_width * d.rx && std::abs(dx) <= rxs * 1.02 && y > d.cy - 0.20 &&
            y <= d.cy + h.length)
            return true;
    }
    if (h.mohawk && std::abs(dx) <= 0.05 && y >= d.cy - d.ry - 0.13 && y <= d.cy - 0.10) return true;
    if (h.ponytail) {
        const real bx = d.cx + d.rx * 1.12, by = d.cy + 0.02;
        if ((x - bx) * (x - bx) + (y - by) * (y - by) <= 0.075 * 0.075) return true;
    }
    return false;
}

bool in_beard(const Derived& d, real x, real y) {
    using K = BeardAsset::Kind;
    const real dx = x - d.cx, dy = y - d.cy;
    switch (d.beard_a->kind) {
        case K::none: return false;
        case K::full: return in_face(d, x, y, 1.06) && dy >= 0.10;
        case K::goatee: {
            const real gx = dx / 0.065, gy = (y - (d.cy + d.ry_low * 0.88)) / 0.055;
            return gx * gx + gy * gy <= 1.0;
        }
        case K::mustache: {
            const real my = d.mouth_cy - 0.058;
            return std::abs(dx) <= 0.100 && std::abs(y - my) <= 0.026;
        }
        case K::chinstrap: {
            const real f = face_value(d, x, y);
            return f >= 0.78 && f <= 1.0 && dy >= 0.06;
        }
        case K::chops:
            return face_value(d, x, y) <= 1.0 && dy >= 0.0 && dy <= 0.24 && std::abs(dx) >= 0.55 * d.rx;
    }
    return false;
}

bool in_brow(const Derived& d, real x, real y) {
    const BrowAsset& b = *d.brow_a;
    for (int side = 0; side < 2; ++side) {
        const real ex = side == 0 ? d.cx - d.eye_off : d.cx + d.eye_off;
        const real sgn = side == 0 ? 1.0 : -1.0;  // mirror tilt
        const real tilt = b.tilt * sgn;
        const real lx0 = x - ex, ly0 = y - d.brow_y;
        const real ct = std::cos(tilt), st = std::sin(tilt);
        const real lx = ct * lx0 + st * ly0;
        const real ly = -st * lx0 + ct * ly0;
        if (std::abs(lx) > b.half_len) continue;
        const real t = lx / b.half_len;
        const real curve = -b.arch * (1.0 - t * t);
        if (std::abs(ly - curve) <= b.thickness) return true;
    }
    return false;
}

// 0 = none, 1 = sclera, 2 = iris, 3 = pupil
int eye_part(const Derived& d, real x, real y) {
    for (int side = 0; side < 2; ++side) {
        const real ex = side == 0 ? d.cx - d.eye_off : d.cx + d.eye_off;
        const real sgn = side == 0 ? 1.0 : -1.0;
        const real rot = d.eye_rot * sgn;
        const real ct = std::cos(rot), st = std::sin(rot);
        const real lx0 = x - ex, ly0 = y - d.eye_y;
        const real lx = ct * lx0 + st * ly0;
        const real ly = -st * lx0 + ct * ly0;
        const real se = (lx / d.eye_rx) * (lx / d.eye_rx) + (ly / d.eye_ry) * (ly / d.eye_ry);
        if (se > 1.0) continue;
        const real r2 = lx0 * lx0 + ly0 * ly0;
        if (r2 <= d.pupil_r * d.pupil_r) return 3;
        if (r2 <= d.iris_r * d.iris_r) return 2;
        return 1;
    }
    return 0;
}

bool in_mouth(const Derived& d, real x, real y) {
    const real mx = (x - d.mouth_cx) / d.mouth_rx, my = (y - d.mouth_cy) / d.mouth_ry;
    return mx * mx + my * my <= 1.0;
}

bool in_nose(const Derived& d, real x, real y) {
    const real dx = x - d.cx;
    if (std::abs(dx) <= 0.011 && y >= d.nose_y0 && y <= d.nose_y1) return true;
    if (std::abs(y - d.nose_y1) <= 0.009 && std::abs(dx) <= 0.030) return true;
    return false;
}

bool in_glasses(const Derived& d, real x, real y) {
    using K = GlassesAsset::Kind;
    const K kind = d.glasses_a->kind;
    if (kind == K::none) return false;
    const real bar = 0.008;
    // bridge and temples shared by all frames
    if (std::abs(y - d.eye_y) <= bar) {
        const real adx = std::abs(x - d.cx);
        if (adx <= d.eye_off - 0.045) return true;                            // bridge
        if (adx >= d.eye_off + 0.085 && adx <= d.rx + 0.03) return true;      // temples
    }
    for (int side = 0; side < 2; ++side) {
        const real ex = side == 0 ? d.cx - d.eye_off : d.cx + d.eye_off;
        const real lx = x - ex, ly = y - d.eye_y;
        if (kind == K::round) {
            const real r = std::sqrt(lx * lx + ly * ly);
            if (std::abs(r - 0.088) <= 0.013) return true;
        } else if (kind == K::square) {
            const real w = 0.011;
            const bool outer = std::abs(lx) <= 0.085 + w && std::abs(ly) <= 0.066 + w;
            const bool inner = std::abs(lx) <= 0.085 - w && std::abs(ly) <= 0.066 - w;
            if (outer && !inner) return true;
        } else if (kind == K::browline) {
            if (std::abs(lx) <= 0.092 && ly >= -0.078 && ly <= -0.048) return true;
            const real r = std::sqrt(lx * lx + ly * ly);
            if (ly > 0.0 && std::abs(r - 0.085) <= 0.006) return true;
        }
    }
    return false;
}

struct Sampled {
    Rgb color;
    uint8_t label;
};

/// Painter's algorithm at one subpixel, fixed layer order:
/// background -> skin -> beard -> mouth -> eyes/brows -> hair -> glasses.
Sampled sample_point(const Derived& d, real x, real y) {
    Sampled s{{0.82, 0.85, 0.88}, static_cast<uint8_t>(SegClass::background)};
    if (face_value(d, x, y) <= 1.0) {
        s = {d.skin, static_cast<uint8_t>(SegClass::skin)};
        if (in_nose(d, x, y)) s.color = scale_color(d.skin, 0.80);  // still skin-labeled
    }
    if (in_beard(d, x, y)) s = {d.beard_c, static_cast<uint8_t>(SegClass::beard)};
    if (in_mouth(d, x, y)) s = {{0.70, 0.28, 0.30}, static_cast<uint8_t>(SegClass::mouth)};
    switch (eye_part(d, x, y)) {
        case 1: s = {{0.97, 0.97, 0.97}, static_cast<uint8_t>(SegClass::eyes)}; break;
        case 2: s = {d.eye, static_cast<uint8_t>(SegClass::eyes)}; break;
        case 3: s = {{0.05, 0.05, 0.05}, static_cast<uint8_t>(SegClass::eyes)}; break;
        default: break;
    }
    if (in_brow(d, x, y)) s = {d.brow_c, static_cast<uint8_t>(SegClass::brows)};
    if (in_hair(d, x, y)) s = {d.hair, static_cast<uint8_t>(SegClass::hair)};
    if (in_glasses(d, x, y)) s = {{0.12, 0.10, 0.10}, static_cast<uint8_t>(SegClass::glasses)};
    return s;
}

}  // namespace

Renderer::Renderer(const AttributeSchema& schema, AssetCatalog catalog, int image_size, int supersample)
    : schema_(schema), catalog_(std::move(catalog)), size_(image_size), ss_(supersample) {
    if (image_size < 8) throw ArgumentError("image size too small");
    if (supersample < 1) throw ArgumentError("supersample must be >= 1");
}

FaceGeometry Renderer::geometry(const StrictAvatarVector& v) const {
    v.validate(schema_);
    const Derived d = derive(schema_, catalog_, v);
    FaceGeometry g;
    g.cx = d.cx;
    g.cy = d.cy;
    g.rx = d.rx;
    g.ry = d.ry;
    g.eye_lx = d.cx - d.eye_off;
    g.eye_rx_ = d.cx + d.eye_off;
    g.eye_y = d.eye_y;
    g.eye_rx_ax = d.eye_rx;
    g.eye_ry_ax = d.eye_ry;
    g.iris_r = d.iris_r;
    g.pupil_r = d.pupil_r;
    g.mouth_cx = d.mouth_cx;
    g.mouth_cy = d.mouth_cy;
    g.mouth_rx = d.mouth_rx;
    g.mouth_ry = d.mouth_ry;
    g.nose_x0 = d.cx - 0.032;
    g.nose_x1 = d.cx + 0.032;
    g.nose_y0 = d.nose_y0 - 0.002;
    g.nose_y1 = d.nose_y1 + 0.011;
    g.brow_y = d.brow_y;
    return g;
}

RenderOutput Renderer::render(const StrictAvatarVector& v) const {
    v.validate(schema_);
    const Derived d = derive(schema_, catalog_, v);
    RenderOutput out;
    out.image = Image(size_, size_);
    out.seg = SegMap(size_, size_);
    const int S = ss_;
    const real inv = 1.0 / (size_ * S);
    for (int y = 0; y < size_; ++y) {
        for (int x = 0; x < size_; ++x) {
            real r = 0, g = 0, b = 0;
            std::array<uint8_t, 4> labels{};
            std::array<int, kNumSegClasses> counts{};
            int li = 0;
            for (int sy = 0; sy < S; ++sy) {
                for (int sx = 0; sx < S; ++sx) {
                    const real px = (x * S + sx + 0.5) * inv;
                    const real py = (y * S + sy + 0.5) * inv;
                    const Sampled s = sample_point(d, px, py);
                    r += s.color.r;
                    g += s.color.g;
                    b += s.color.b;
                    labels[static_cast<size_t>(li++)] = s.label;
                    counts[s.label]++;
                }
            }
            const real n = static_cast<real>(S * S);
            out.image.at(0, y, x) = r / n;
            out.image.at(1, y, x) = g / n;
            out.image.at(2, y, x) = b / n;
            // majority label, ties resolved by first occurrence in scan order
            int best_count = 0;
            for (int c = 0; c < kNumSegClasses; ++c) best_count = std::max(best_count, counts[static_cast<size_t>(c)]);
            uint8_t lab = labels[0];
            for (int i = 0; i < li; ++i) {
                if (counts[labels[static_cast<size_t>(i)]] == best_count) {
                    lab = labels[static_cast<size_t>(i)];
                    break;
                }
            }
            out.seg.at(y, x) = lab;
        }
    }
    return out;
}

Image Renderer::background_texture(int id) const {
    Image bg(size_, size_);
    for (int y = 0; y < size_; ++y) {
        for (int x = 0; x < size_; ++x) {
            const real u = (x + 0.5) / size_, w = (y + 0.5) / size_;
            Rgb c;
            switch (id) {
                case 0: {
                    const real t = w;
                    c = {0.55 + 0.30 * t, 0.60 + 0.28 * t, 0.68 + 0.24 * t};
                    break;
                }
                case 1: {
                    const real t = u;
                    c = {0.80 + 0.15 * t, 0.70 + 0.20 * t, 0.55 + 0.25 * t};
                    break;
                }
                case 2: {
                    const bool on = (static_cast<int>(u * 8) + static_cast<int>(w * 8)) % 2 == 0;
                    c = on ? Rgb{0.65, 0.72, 0.65} : Rgb{0.78, 0.84, 0.78};
                    break;
                }
                case 3: {
                    const bool on = std::sin(10.0 * kPi * (u + w)) > 0.0;
                    c = on ? Rgb{0.62, 0.58, 0.72} : Rgb{0.75, 0.72, 0.85};
                    break;
                }
                case 4: {
                    const real t = 0.60 + 0.25 * std::sin(5.0 * u + 2.0) * std::sin(4.0 * w + 1.0);
                    c = {t * 0.9, t * 0.75, t};
                    break;
                }
                default: {
                    const uint64_t h = fnv1a(&x, sizeof(x), fnv1a(&y, sizeof(y), 0x9e3779b9ull ^ id));
                    const real t = 0.5 + 0.3 * ((h % 1000) / 999.0);
                    c = {t, t, t};
                    break;
                }
            }
            bg.at(0, y, x) = c.r;
            bg.at(1, y, x) = c.g;
            bg.at(2, y, x) = c.b;
        }
    }
    return bg;
}

namespace {

/// Inverse displacement of the expression deformation at point (x, y),
/// in unit coordinates. Returns the y offset to add when sampling the source.
real expression_dy(const FaceGeometry& g, const SelfieCorruption& c, real x, real y) {
    real dy = 0.0;
    const real mx = g.mouth_cx, my = g.mouth_cy;
    if (c.smile != 0.0) {
        real q = (x - mx) / 0.16;
        q = clampr(q, -1.0, 1.0);
        // x-window keeps the lift local to the mouth corners; without it the
        // warp reaches the face outline and reshapes the jaw
        const real gx = std::exp(-((x - mx) / 0.20) * ((x - mx) / 0.20));
        const real gy = std::exp(-((y - my) / 0.09) * ((y - my) / 0.09));
        dy += c.smile * 0.16 * q * q * gx * gy;  // mouth corners move up
        // slight brow raise
        const real gb = std::exp(-((y - g.brow_y) / 0.05) * ((y - g.brow_y) / 0.05));
        dy += c.smile * 0.025 * gb;
    }
    if (c.mouth_open != 0.0) {
        const real gx = std::exp(-((x - mx) / 0.12) * ((x - mx) / 0.12));
        const real gy = std::exp(-((y - my) / 0.11) * ((y - my) / 0.11));
        dy -= c.mouth_open * 0.09 * std::tanh((y - my) / 0.045) * gx * gy;  // vertical stretch
    }
    return dy;
}

}  // namespace

std::pair<Image, SegMap> Renderer::synth_selfie_with_seg(const StrictAvatarVector& v,
                                                         const SelfieCorruption& c) const {
    v.validate(schema_);
    c.validate();
    const RenderOutput base = render(v);
    const FaceGeometry geo = geometry(v);
    const Image bg = background_texture(c.background_id);

    const real theta = c.rot_deg * kPi / 180.0;
    const real ct = std::cos(theta), st = std::sin(theta);

    Image out(size_, size_);
    SegMap seg(size_, size_, static_cast<uint8_t>(SegClass::background));
    for (int y = 0; y < size_; ++y) {
        for (int x = 0; x < size_; ++x) {
            const real px = (x + 0.5) / size_, py = (y + 0.5) / size_;
            // pose: dst = R*src + t  =>  src = R^-1 (dst - t)
            const real qx = px - 0.5 - c.tx, qy = py - 0.5 - c.ty;
            real sx = ct * qx + st * qy + 0.5;
            real sy = -st * qx + ct * qy + 0.5;
            // expression warp in the pre-pose frame
            sy += expression_dy(geo, c, sx, sy);

            const real fx = sx * size_ - 0.5, fy = sy * size_ - 0.5;
            const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
            const real wx = fx - x0, wy = fy - y0;
            bool outside = x0 < -1 || y0 < -1 || x0 >= size_ || y0 >= size_;

            uint8_t lab = static_cast<uint8_t>(SegClass::background);
            real col[3] = {0, 0, 0};
            if (!outside) {
                auto pix = [&](int c_, int yy, int xx) -> real {
                    yy = std::clamp(yy, 0, size_ - 1);
                    xx = std::clamp(xx, 0, size_ - 1);
                    return base.image.at(c_, yy, xx);
                };
                for (int ch = 0; ch < 3; ++ch) {
                    col[ch] = (1 - wx) * (1 - wy) * pix(ch, y0, x0) + wx * (1 - wy) * pix(ch, y0, x0 + 1) +
                              (1 - wx) * wy * pix(ch, y0 + 1, x0) + wx * wy * pix(ch, y0 + 1, x0 + 1);
                }
                const int nx = std::clamp(static_cast<int>(std::lround(fx)), 0, size_ - 1);
                const int ny = std::clamp(static_cast<int>(std::lround(fy)), 0, size_ - 1);
                lab = base.seg.at(ny, nx);
            }
            if (lab == static_cast<uint8_t>(SegClass::background)) {
                for (int ch = 0; ch < 3; ++ch) col[ch] = bg.at(ch, y, x);
            }
            // illumination gradient + shadow blob
            real f = 1.0 + 2.0 * c.illum_strength * (c.illum_gx * (px - 0.5) + c.illum_gy * (py - 0.5));
            f = clampr(f, 0.4, 1.6);
            if (c.shadow_strength > 0.0) {
                const real ddx = px - c.shadow_cx, ddy = py - c.shadow_cy;
                f *= 1.0 - c.shadow_strength * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * c.shadow_r * c.shadow_r));
            }
            for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = clampr(col[ch] * f, 0.0, 1.0);
            seg.at(y, x) = lab;
        }
    }
    if (c.noise_sigma > 0.0) {
        Rng rng(c.noise_seed);
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < size_; ++y)
                for (int x = 0; x < size_; ++x)
                    out.at(ch, y, x) = clampr(out.at(ch, y, x) + rng.gaussian(0.0, c.noise_sigma), 0.0, 1.0);
    }
    return {std::move(out), std::move(seg)};
}

Image Renderer::synth_selfie(const StrictAvatarVector& v, const SelfieCorruption& c) const {
    return synth_selfie_with_seg(v, c).first;
}

StrictAvatarVector Renderer::base_face() const {
    StrictAvatarVector v;
    for (const auto& c : schema_.continuous()) v.continuous.push_back(0.5 * (c.min + c.max));
    v.discrete.assign(schema_.num_discrete(), 0);
    const int hair = schema_.discrete_index("hair_type");
    const int skin = schema_.discrete_index("skin_tone");
    const int hcol = schema_.discrete_index("hair_color");
    // buzz-rim hair keeps the fringe line above the brows so brow assets stay visible
    if (hair >= 0) v.discrete[static_cast<size_t>(hair)] = std::min(1, schema_.discrete()[hair].cardinality - 1);
    if (skin >= 0) v.discrete[static_cast<size_t>(skin)] = std::min(2, schema_.discrete()[skin].cardinality - 1);
    if (hcol >= 0) v.discrete[static_cast<size_t>(hcol)] = std::min(1, schema_.discrete()[hcol].cardinality - 1);
    return v;
}

real Renderer::asset_pixel_difference(int attr, int i, int j) const {
    StrictAvatarVector a = base_face(), b = base_face();
    a.discrete[static_cast<size_t>(attr)] = i;
    b.discrete[static_cast<size_t>(attr)] = j;
    const RenderOutput ra = render(a), rb = render(b);
    size_t diff = 0;
    for (int y = 0; y < size_; ++y)
        for (int x = 0; x < size_; ++x) {
            bool changed = ra.seg.at(y, x) != rb.seg.at(y, x);
            for (int c = 0; c < 3 && !changed; ++c)
                changed = std::abs(ra.image.at(c, y, x) - rb.image.at(c, y, x)) > 1.0 / 255.0;
            if (changed) ++diff;
        }
    return static_cast<real>(diff) / static_cast<real>(ra.image.pixels());
}

std::vector<DatasetSample> generate_dataset(const Renderer& renderer, int n, uint64_t seed,
                                            const std::string& dir, real corruption_strength) {
    if (n < 1) throw ArgumentError("dataset size must be >= 1");
    namespace fs = std::filesystem;
    const bool persist = !dir.empty();
    std::ostringstream manifest;
    if (persist) {
        std::error_code ec;
        fs::create_directories(fs::path(dir) / "images", ec);
        fs::create_directories(fs::path(dir) / "selfies", ec);
        fs::create_directories(fs::path(dir) / "seg", ec);
        if (ec) throw IoError("cannot create dataset directory: " + dir);
    }
    Rng root(seed);
    std::vector<DatasetSample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = root.split(static_cast<uint64_t>(i));
        DatasetSample s;
        s.vector = random_strict(renderer.schema(), rng);
        s.corruption = SelfieCorruption::random(rng, corruption_strength);
        s.render = renderer.render(s.vector);
        auto [selfie, sseg] = renderer.synth_selfie_with_seg(s.vector, s.corruption);
        s.selfie = std::move(selfie);
        s.selfie_seg = std::move(sseg);
        if (persist) {
            char name[32];
            std::snprintf(name, sizeof(name), "%06d.png", i);
            io::write_png((fs::path(dir) / "images" / name).string(), s.render.image);
            io::write_png((fs::path(dir) / "selfies" / name).string(), s.selfie);
            io::write_png_gray((fs::path(dir) / "seg" / name).string(), s.render.seg);
            const FlatEncoding e = flatten(renderer.schema(), s.vector);
            manifest << i << '\t';
            manifest.precision(17);
            for (size_t k = 0; k < e.values.size(); ++k) manifest << (k ? " " : "") << e.values[k];
            manifest << '\t' << s.corruption.rot_deg << ' ' << s.corruption.tx << ' ' << s.corruption.ty << ' '
                     << s.corruption.smile << ' ' << s.corruption.mouth_open << ' ' << s.corruption.noise_sigma
                     << ' ' << s.corruption.background_id << '\n';
        }
        out.push_back(std::move(s));
    }
    if (persist) io::write_text_file((fs::path(dir) / "manifest.tsv").string(), manifest.str());
    return out;
}

uint64_t dataset_hash(const std::vector<DatasetSample>& samples) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix_img = [&h](const Image& img) {
        for (real v : img.data) {
            const auto q = static_cast<int16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 4095.0));
            h = fnv1a(&q, sizeof(q), h);
        }
    };
    for (const auto& s : samples) {
        for (real v : s.vector.continuous) h = fnv1a(&v, sizeof(v), h);
        for (int v : s.vector.discrete) h = fnv1a(&v, sizeof(v), h);
        mix_img(s.render.image);
        mix_img(s.selfie);
        h = fnv1a(s.render.seg.labels.data(), s.render.seg.labels.size(), h);
        h = fnv1a(s.selfie_seg.labels.data(), s.selfie_seg.labels.size(), h);
    }
    return h;
}

}  // namespace avafit
