#pragma once

#include <string>
#include <vector>

#include "avafit/common.hpp"

namespace avafit {

struct ContinuousAttr {
    std::string name;
    real min = 0.0;
    real max = 1.0;
};

struct DiscreteAttr {
    std::string name;
    int cardinality = 2;
};

/// Declarative description of the avatar parameter space: an ordered list of
/// continuous controls plus an ordered list of categorical attributes.
class AttributeSchema {
public:
    AttributeSchema() = default;
    AttributeSchema(std::vector<ContinuousAttr> cont, std::vector<DiscreteAttr> disc);

    static AttributeSchema default_schema();
    /// Large-cardinality configuration (45 hair types) for stress tests.
    static AttributeSchema stress_schema();
    /// Tiny schema (<=3 attributes, <=4 choices) used by exhaustive joint-search tests.
    static AttributeSchema tiny_schema();

    const std::vector<ContinuousAttr>& continuous() const { return continuous_; }
    const std::vector<DiscreteAttr>& discrete() const { return discrete_; }
    size_t num_continuous() const { return continuous_.size(); }
    size_t num_discrete() const { return discrete_.size(); }

    /// Length of the flat encoding: |continuous| + sum of cardinalities.
    size_t flat_length() const { return flat_length_; }
    /// Offset of discrete block `a` within the flat encoding.
    size_t discrete_offset(size_t a) const { return discrete_offsets_[a]; }

    int discrete_index(const std::string& name) const;
    int continuous_index(const std::string& name) const;

    std::string to_json() const;
    static AttributeSchema from_json(const std::string& text);
    uint64_t hash() const;

    bool operator==(const AttributeSchema& o) const;

private:
    void finish_init();

    std::vector<ContinuousAttr> continuous_;
    std::vector<DiscreteAttr> discrete_;
    std::vector<size_t> discrete_offsets_;
    size_t flat_length_ = 0;
};

/// One-hot discrete selections plus in-range continuous values; the only
/// form the graphics engine accepts.
struct StrictAvatarVector {
    std::vector<real> continuous;  // schema order, raw units
    std::vector<int> discrete;     // one index per discrete attribute

    void validate(const AttributeSchema& s) const;
};

/// Discrete attributes as probability vectors on each attribute's simplex.
struct RelaxedAvatarVector {
    std::vector<real> continuous;
    std::vector<std::vector<real>> discrete;  // one simplex vector per attribute

    void validate(const AttributeSchema& s, real tol = 1e-6) const;
    /// Renormalize each simplex block to sum exactly to 1 (absorbs rounding).
    void renormalize();
};

/// Flat numeric encoding with continuous block first (normalized to [0,1]),
/// then the discrete probability blocks in schema order.
struct FlatEncoding {
    std::vector<real> values;
};

RelaxedAvatarVector relax(const AttributeSchema& s, const StrictAvatarVector& v);
RelaxedAvatarVector interpolate(const AttributeSchema& s, const RelaxedAvatarVector& v1,
                                const RelaxedAvatarVector& v2, real alpha);
FlatEncoding flatten(const AttributeSchema& s, const RelaxedAvatarVector& v);
FlatEncoding flatten(const AttributeSchema& s, const StrictAvatarVector& v);
RelaxedAvatarVector unflatten(const AttributeSchema& s, const FlatEncoding& e);
StrictAvatarVector random_strict(const AttributeSchema& s, uint64_t seed);
StrictAvatarVector random_strict(const AttributeSchema& s, Rng& rng);

/// argmax with ties broken by lowest index.
int argmax_lowest(const std::vector<real>& probs);

/// Text serialization: one "name = ..." line per attribute.
std::string to_text(const AttributeSchema& s, const StrictAvatarVector& v);
std::string to_text(const AttributeSchema& s, const RelaxedAvatarVector& v);
StrictAvatarVector strict_from_text(const AttributeSchema& s, const std::string& text);
RelaxedAvatarVector relaxed_from_text(const AttributeSchema& s, const std::string& text);

}  // namespace avafit
