#include "avafit/schema.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace avafit {

using nlohmann::json;

AttributeSchema::AttributeSchema(std::vector<ContinuousAttr> cont, std::vector<DiscreteAttr> disc)
    : continuous_(std::move(cont)), discrete_(std::move(disc)) {
    finish_init();
}

void AttributeSchema::finish_init() {
    std::set<std::string> names;
    for (const auto& c : continuous_) {
        if (!(c.max > c.min)) throw SchemaError("continuous attribute '" + c.name + "' has empty range");
        if (!names.insert(c.name).second) throw SchemaError("duplicate attribute name '" + c.name + "'");
    }
    flat_length_ = continuous_.size();
    discrete_offsets_.clear();
    for (const auto& d : discrete_) {
        if (d.cardinality < 2) throw SchemaError("discrete attribute '" + d.name + "' needs cardinality >= 2");
        if (!names.insert(d.name).second) throw SchemaError("duplicate attribute name '" + d.name + "'");
        discrete_offsets_.push_back(flat_length_);
        flat_length_ += static_cast<size_t>(d.cardinality);
    }
}

AttributeSchema AttributeSchema::default_schema() {
    std::vector<ContinuousAttr> cont = {
        {"head_width", 0.70, 1.00},   {"eye_size", 0.55, 1.45},   {"eye_spacing", 0.70, 1.30},
        {"eye_rotation", -0.45, 0.45}, {"mouth_width", 0.55, 1.45}, {"mouth_y", -0.06, 0.06},
        {"nose_y", -0.05, 0.05},      {"face_roundness", 0.0, 1.0},
    };
    std::vector<DiscreteAttr> disc = {
        {"hair_type", 12}, {"beard_type", 6}, {"brow_type", 5},  {"glasses_type", 4},
        {"skin_tone", 6},  {"eye_color", 5},  {"hair_color", 8},
    };
    return AttributeSchema(std::move(cont), std::move(disc));
}

AttributeSchema AttributeSchema::stress_schema() {
    auto s = default_schema();
    auto disc = s.discrete();
    disc[0].cardinality = 45;  // the many-hair-types regime
    return AttributeSchema(s.continuous(), std::move(disc));
}

AttributeSchema AttributeSchema::tiny_schema() {
    std::vector<ContinuousAttr> cont = {{"x", 0.0, 1.0}};
    std::vector<DiscreteAttr> disc = {{"a", 3}, {"b", 4}, {"c", 2}};
    return AttributeSchema(std::move(cont), std::move(disc));
}

int AttributeSchema::discrete_index(const std::string& name) const {
    for (size_t i = 0; i < discrete_.size(); ++i)
        if (discrete_[i].name == name) return static_cast<int>(i);
    return -1;
}

int AttributeSchema::continuous_index(const std::string& name) const {
    for (size_t i = 0; i < continuous_.size(); ++i)
        if (continuous_[i].name == name) return static_cast<int>(i);
    return -1;
}

std::string AttributeSchema::to_json() const {
    json j;
    j["version"] = 1;
    j["continuous"] = json::array();
    for (const auto& c : continuous_) j["continuous"].push_back({{"name", c.name}, {"min", c.min}, {"max", c.max}});
    j["discrete"] = json::array();
    for (const auto& d : discrete_) j["discrete"].push_back({{"name", d.name}, {"cardinality", d.cardinality}});
    return j.dump(2);
}

AttributeSchema AttributeSchema::from_json(const std::string& text) {
    json j = json::parse(text);
    if (j.value("version", 0) != 1) throw SchemaError("unsupported schema version");
    std::vector<ContinuousAttr> cont;
    for (const auto& c : j.at("continuous"))
        cont.push_back({c.at("name").get<std::string>(), c.at("min").get<real>(), c.at("max").get<real>()});
    std::vector<DiscreteAttr> disc;
    for (const auto& d : j.at("discrete"))
        disc.push_back({d.at("name").get<std::string>(), d.at("cardinality").get<int>()});
    return AttributeSchema(std::move(cont), std::move(disc));
}

uint64_t AttributeSchema::hash() const { return fnv1a(to_json()); }

bool AttributeSchema::operator==(const AttributeSchema& o) const {
    if (continuous_.size() != o.continuous_.size() || discrete_.size() != o.discrete_.size()) return false;
    for (size_t i = 0; i < continuous_.size(); ++i) {
        const auto& a = continuous_[i];
        const auto& b = o.continuous_[i];
        if (a.name != b.name || a.min != b.min || a.max != b.max) return false;
    }
    for (size_t i = 0; i < discrete_.size(); ++i)
        if (discrete_[i].name != o.discrete_[i].name || discrete_[i].cardinality != o.discrete_[i].cardinality)
            return false;
    return true;
}

void StrictAvatarVector::validate(const AttributeSchema& s) const {
    if (continuous.size() != s.num_continuous() || discrete.size() != s.num_discrete())
        throw SchemaError("strict vector shape does not match schema");
    for (size_t i = 0; i < continuous.size(); ++i) {
        const auto& c = s.continuous()[i];
        if (!(continuous[i] >= c.min && continuous[i] <= c.max))
            throw SchemaError("continuous value out of range for '" + c.name + "'");
    }
    for (size_t a = 0; a < discrete.size(); ++a) {
        if (discrete[a] < 0 || discrete[a] >= s.discrete()[a].cardinality)
            throw SchemaError("discrete index out of range for '" + s.discrete()[a].name + "'");
    }
}

void RelaxedAvatarVector::validate(const AttributeSchema& s, real tol) const {
    if (continuous.size() != s.num_continuous() || discrete.size() != s.num_discrete())
        throw SchemaError("relaxed vector shape does not match schema");
    for (size_t i = 0; i < continuous.size(); ++i) {
        const auto& c = s.continuous()[i];
        if (!(continuous[i] >= c.min - tol && continuous[i] <= c.max + tol))
            throw SchemaError("continuous value out of range for '" + c.name + "'");
    }
    for (size_t a = 0; a < discrete.size(); ++a) {
        if (static_cast<int>(discrete[a].size()) != s.discrete()[a].cardinality)
            throw SchemaError("probability block length mismatch for '" + s.discrete()[a].name + "'");
        real sum = 0.0;
        for (real p : discrete[a]) {
            if (p < -tol) throw SchemaError("negative probability in '" + s.discrete()[a].name + "'");
            sum += p;
        }
        if (std::abs(sum - 1.0) > tol)
            throw SchemaError("probabilities of '" + s.discrete()[a].name + "' do not sum to 1");
    }
}

void RelaxedAvatarVector::renormalize() {
    for (auto& block : discrete) {
        real sum = 0.0;
        for (auto& p : block) {
            if (p < 0.0) p = 0.0;
            sum += p;
        }
        if (sum <= 0.0) {
            for (auto& p : block) p = 1.0 / static_cast<real>(block.size());
        } else {
            for (auto& p : block) p /= sum;
        }
    }
}

RelaxedAvatarVector relax(const AttributeSchema& s, const StrictAvatarVector& v) {
    v.validate(s);
    RelaxedAvatarVector r;
    r.continuous = v.continuous;
    r.discrete.resize(v.discrete.size());
    for (size_t a = 0; a < v.discrete.size(); ++a) {
        r.discrete[a].assign(static_cast<size_t>(s.discrete()[a].cardinality), 0.0);
        r.discrete[a][static_cast<size_t>(v.discrete[a])] = 1.0;
    }
    return r;
}

RelaxedAvatarVector interpolate(const AttributeSchema& s, const RelaxedAvatarVector& v1,
                                const RelaxedAvatarVector& v2, real alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must be in [0,1]");
    v1.validate(s);
    v2.validate(s);
    RelaxedAvatarVector out;
    out.continuous.resize(v1.continuous.size());
    for (size_t i = 0; i < v1.continuous.size(); ++i)
        out.continuous[i] = (1.0 - alpha) * v1.continuous[i] + alpha * v2.continuous[i];
    out.discrete.resize(v1.discrete.size());
    for (size_t a = 0; a < v1.discrete.size(); ++a) {
        out.discrete[a].resize(v1.discrete[a].size());
        for (size_t k = 0; k < v1.discrete[a].size(); ++k)
            out.discrete[a][k] = (1.0 - alpha) * v1.discrete[a][k] + alpha * v2.discrete[a][k];
    }
    return out;
}

FlatEncoding flatten(const AttributeSchema& s, const RelaxedAvatarVector& v) {
    v.validate(s);
    FlatEncoding e;
    e.values.resize(s.flat_length());
    for (size_t i = 0; i < v.continuous.size(); ++i) {
        const auto& c = s.continuous()[i];
        e.values[i] = (v.continuous[i] - c.min) / (c.max - c.min);
    }
    for (size_t a = 0; a < v.discrete.size(); ++a) {
        const size_t off = s.discrete_offset(a);
        for (size_t k = 0; k < v.discrete[a].size(); ++k) e.values[off + k] = v.discrete[a][k];
    }
    return e;
}

FlatEncoding flatten(const AttributeSchema& s, const StrictAvatarVector& v) {
    return flatten(s, relax(s, v));
}

RelaxedAvatarVector unflatten(const AttributeSchema& s, const FlatEncoding& e) {
    if (e.values.size() != s.flat_length()) throw SchemaError("flat encoding length mismatch");
    RelaxedAvatarVector v;
    v.continuous.resize(s.num_continuous());
    for (size_t i = 0; i < v.continuous.size(); ++i) {
        const auto& c = s.continuous()[i];
        v.continuous[i] = c.min + e.values[i] * (c.max - c.min);
    }
    v.discrete.resize(s.num_discrete());
    for (size_t a = 0; a < v.discrete.size(); ++a) {
        const size_t off = s.discrete_offset(a);
        const size_t n = static_cast<size_t>(s.discrete()[a].cardinality);
        v.discrete[a].assign(e.values.begin() + off, e.values.begin() + off + n);
    }
    return v;
}

StrictAvatarVector random_strict(const AttributeSchema& s, Rng& rng) {
    StrictAvatarVector v;
    v.continuous.resize(s.num_continuous());
    for (size_t i = 0; i < v.continuous.size(); ++i) {
        const auto& c = s.continuous()[i];
        v.continuous[i] = rng.uniform(c.min, c.max);
    }
    v.discrete.resize(s.num_discrete());
    for (size_t a = 0; a < v.discrete.size(); ++a)
        v.discrete[a] = static_cast<int>(rng.index(static_cast<uint64_t>(s.discrete()[a].cardinality)));
    return v;
}

StrictAvatarVector random_strict(const AttributeSchema& s, uint64_t seed) {
    Rng rng(seed);
    return random_strict(s, rng);
}

int argmax_lowest(const std::vector<real>& probs) {
    int best = 0;
    for (size_t k = 1; k < probs.size(); ++k)
        if (probs[k] > probs[static_cast<size_t>(best)]) best = static_cast<int>(k);
    return best;
}

std::string to_text(const AttributeSchema& s, const StrictAvatarVector& v) {
    std::ostringstream os;
    os.precision(17);
    for (size_t i = 0; i < s.num_continuous(); ++i) os << s.continuous()[i].name << " = " << v.continuous[i] << "\n";
    for (size_t a = 0; a < s.num_discrete(); ++a) os << s.discrete()[a].name << " = " << v.discrete[a] << "\n";
    return os.str();
}

std::string to_text(const AttributeSchema& s, const RelaxedAvatarVector& v) {
    std::ostringstream os;
    os.precision(17);
    for (size_t i = 0; i < s.num_continuous(); ++i) os << s.continuous()[i].name << " = " << v.continuous[i] << "\n";
    for (size_t a = 0; a < s.num_discrete(); ++a) {
        os << s.discrete()[a].name << " =";
        for (real p : v.discrete[a]) os << " " << p;
        os << "\n";
    }
    return os.str();
}

namespace {

std::vector<std::pair<std::string, std::vector<real>>> parse_lines(const std::string& text) {
    std::vector<std::pair<std::string, std::vector<real>>> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ArgumentError("malformed vector line: " + line);
        std::string name = line.substr(0, eq);
        while (!name.empty() && name.back() == ' ') name.pop_back();
        std::istringstream vs(line.substr(eq + 1));
        std::vector<real> vals;
        real x;
        while (vs >> x) vals.push_back(x);
        if (vals.empty()) throw ArgumentError("no values for attribute '" + name + "'");
        out.emplace_back(std::move(name), std::move(vals));
    }
    return out;
}

const std::vector<real>* find_entry(const std::vector<std::pair<std::string, std::vector<real>>>& entries,
                                    const std::string& name) {
    for (const auto& [n, v] : entries)
        if (n == name) return &v;
    return nullptr;
}

}  // namespace

StrictAvatarVector strict_from_text(const AttributeSchema& s, const std::string& text) {
    const auto entries = parse_lines(text);
    StrictAvatarVector v;
    for (const auto& c : s.continuous()) {
        const auto* e = find_entry(entries, c.name);
        if (!e || e->size() != 1) throw ArgumentError("missing continuous attribute '" + c.name + "'");
        v.continuous.push_back((*e)[0]);
    }
    for (const auto& d : s.discrete()) {
        const auto* e = find_entry(entries, d.name);
        if (!e || e->size() != 1) throw ArgumentError("missing discrete attribute '" + d.name + "'");
        v.discrete.push_back(static_cast<int>(std::llround((*e)[0])));
    }
    v.validate(s);
    return v;
}

RelaxedAvatarVector relaxed_from_text(const AttributeSchema& s, const std::string& text) {
    const auto entries = parse_lines(text);
    RelaxedAvatarVector v;
    for (const auto& c : s.continuous()) {
        const auto* e = find_entry(entries, c.name);
        if (!e || e->size() != 1) throw ArgumentError("missing continuous attribute '" + c.name + "'");
        v.continuous.push_back((*e)[0]);
    }
    for (const auto& d : s.discrete()) {
        const auto* e = find_entry(entries, d.name);
        if (!e) throw ArgumentError("missing discrete attribute '" + d.name + "'");
        if (e->size() == 1 && (*e)[0] == std::floor((*e)[0]) && (*e)[0] >= 0 && d.cardinality > 1) {
            // allow strict-style single index
            std::vector<real> block(static_cast<size_t>(d.cardinality), 0.0);
            block[static_cast<size_t>((*e)[0])] = 1.0;
            v.discrete.push_back(std::move(block));
        } else {
            v.discrete.push_back(*e);
        }
    }
    v.renormalize();
    v.validate(s);
    return v;
}

}  // namespace avafit
