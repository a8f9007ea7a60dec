#include <doctest.h>

#include <cmath>

#include "avafit/schema.hpp"

using namespace avafit;

TEST_CASE("schema invariants") {
    const auto s = AttributeSchema::default_schema();
    CHECK(s.num_continuous() == 8);
    CHECK(s.num_discrete() == 7);
    size_t total = s.num_continuous();
    for (const auto& d : s.discrete()) {
        CHECK(d.cardinality >= 2);
        total += static_cast<size_t>(d.cardinality);
    }
    CHECK(s.flat_length() == total);

    const auto round = AttributeSchema::from_json(s.to_json());
    CHECK(round == s);
    CHECK(round.hash() == s.hash());
}

TEST_CASE("schema rejects bad definitions") {
    CHECK_THROWS_AS(AttributeSchema({{"a", 0, 1}, {"a", 0, 1}}, {}), SchemaError);
    CHECK_THROWS_AS(AttributeSchema({}, {{"d", 1}}), SchemaError);
    CHECK_THROWS_AS(AttributeSchema({{"a", 1, 1}}, {}), SchemaError);
}

TEST_CASE("relax produces one-hot blocks") {
    const auto s = AttributeSchema::default_schema();
    StrictAvatarVector v;
    for (const auto& c : s.continuous()) v.continuous.push_back(c.min);
    v.discrete.assign(s.num_discrete(), 0);
    v.discrete[0] = 2;  // hair_type = 2 of 12

    const auto r = relax(s, v);
    CHECK(r.discrete[0][2] == 1.0);
    for (size_t k = 0; k < r.discrete[0].size(); ++k)
        if (k != 2) CHECK(r.discrete[0][k] == 0.0);
    CHECK(r.continuous == v.continuous);

    // all-zero indices -> e_0 everywhere
    v.discrete[0] = 0;
    const auto r0 = relax(s, v);
    for (const auto& block : r0.discrete) {
        CHECK(block[0] == 1.0);
    }

    // invalid index rejected
    v.discrete[0] = 99;
    CHECK_THROWS_AS(relax(s, v), SchemaError);
}

TEST_CASE("argmax(relax(v)) round-trips on 1000 random vectors") {
    const auto s = AttributeSchema::default_schema();
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        const auto v = random_strict(s, seed);
        const auto r = relax(s, v);
        for (size_t a = 0; a < v.discrete.size(); ++a) CHECK(argmax_lowest(r.discrete[a]) == v.discrete[a]);
    }
}

TEST_CASE("interpolate endpoints and symmetry") {
    const auto s = AttributeSchema::default_schema();
    const auto v1 = relax(s, random_strict(s, 1));
    const auto v2 = relax(s, random_strict(s, 2));

    const auto a0 = interpolate(s, v1, v2, 0.0);
    const auto a1 = interpolate(s, v1, v2, 1.0);
    CHECK(a0.continuous == v1.continuous);
    CHECK(a0.discrete == v1.discrete);
    CHECK(a1.continuous == v2.continuous);
    CHECK(a1.discrete == v2.discrete);

    // e_0 and e_1 at alpha = 0.5 -> (0.5, 0.5, 0, ...)
    StrictAvatarVector s0, s1;
    for (const auto& c : s.continuous()) {
        s0.continuous.push_back(c.min);
        s1.continuous.push_back(c.min);
    }
    s0.discrete.assign(s.num_discrete(), 0);
    s1.discrete.assign(s.num_discrete(), 1);
    const auto mid = interpolate(s, relax(s, s0), relax(s, s1), 0.5);
    CHECK(mid.discrete[0][0] == doctest::Approx(0.5));
    CHECK(mid.discrete[0][1] == doctest::Approx(0.5));
    CHECK(mid.discrete[0][2] == 0.0);

    CHECK_THROWS_AS(interpolate(s, v1, v2, 1.5), ArgumentError);
    CHECK_THROWS_AS(interpolate(s, v1, v2, -0.1), ArgumentError);
}

TEST_CASE("interpolate preserves simplex membership: 1000 random triples") {
    const auto s = AttributeSchema::default_schema();
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
        auto v1 = relax(s, random_strict(s, rng));
        auto v2 = relax(s, random_strict(s, rng));
        // random points on the simplex, not just vertices
        const auto v3 = interpolate(s, v1, v2, rng.uniform());
        const auto v4 = interpolate(s, v3, relax(s, random_strict(s, rng)), rng.uniform());
        CHECK_NOTHROW(v4.validate(s));
    }
}

TEST_CASE("flatten/unflatten round-trip") {
    const auto s = AttributeSchema::default_schema();

    // continuous at min maps to 0 in the flat slot
    StrictAvatarVector v;
    for (const auto& c : s.continuous()) v.continuous.push_back(c.min);
    v.discrete.assign(s.num_discrete(), 0);
    const auto e = flatten(s, v);
    for (size_t i = 0; i < s.num_continuous(); ++i) CHECK(e.values[i] == 0.0);
    // strict vector flattens to a 0/1 pattern in the discrete blocks
    for (size_t i = s.num_continuous(); i < e.values.size(); ++i)
        CHECK((e.values[i] == 0.0 || e.values[i] == 1.0));

    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        auto r1 = relax(s, random_strict(s, rng));
        auto r2 = relax(s, random_strict(s, rng));
        const auto mix = interpolate(s, r1, r2, rng.uniform());
        const auto rt = unflatten(s, flatten(s, mix));
        for (size_t k = 0; k < mix.continuous.size(); ++k)
            CHECK(rt.continuous[k] == doctest::Approx(mix.continuous[k]).epsilon(1e-12));
        for (size_t a = 0; a < mix.discrete.size(); ++a)
            for (size_t k = 0; k < mix.discrete[a].size(); ++k)
                CHECK(rt.discrete[a][k] == mix.discrete[a][k]);
    }

    FlatEncoding bad;
    bad.values.assign(3, 0.0);
    CHECK_THROWS_AS(unflatten(s, bad), SchemaError);
}

TEST_CASE("random_strict determinism and bounds") {
    const auto s = AttributeSchema::default_schema();
    const auto a = random_strict(s, 42);
    const auto b = random_strict(s, 42);
    CHECK(a.continuous == b.continuous);
    CHECK(a.discrete == b.discrete);

    for (uint64_t seed = 0; seed < 10000; ++seed) {
        const auto v = random_strict(s, seed);
        CHECK_NOTHROW(v.validate(s));
    }
}

TEST_CASE("random_strict marginals are uniform (chi-squared, p > 0.01)") {
    const auto s = AttributeSchema::default_schema();
    const int n = 10000;
    std::vector<std::vector<int>> counts(s.num_discrete());
    for (size_t a = 0; a < s.num_discrete(); ++a)
        counts[a].assign(static_cast<size_t>(s.discrete()[a].cardinality), 0);
    Rng rng(2024);
    for (int i = 0; i < n; ++i) {
        const auto v = random_strict(s, rng);
        for (size_t a = 0; a < v.discrete.size(); ++a) counts[a][static_cast<size_t>(v.discrete[a])]++;
    }
    // chi-squared critical values at p = 0.01 for df = N-1
    auto crit = [](int df) {
        // Wilson-Hilferty approximation of the 0.99 quantile
        const double z = 2.326347874;
        const double t = 1.0 - 2.0 / (9.0 * df) + z * std::sqrt(2.0 / (9.0 * df));
        return df * t * t * t;
    };
    for (size_t a = 0; a < counts.size(); ++a) {
        const int k = static_cast<int>(counts[a].size());
        const double expect = static_cast<double>(n) / k;
        double chi2 = 0.0;
        for (int c : counts[a]) chi2 += (c - expect) * (c - expect) / expect;
        CHECK(chi2 < crit(k - 1));
    }
}

TEST_CASE("text serialization round-trip") {
    const auto s = AttributeSchema::default_schema();
    const auto v = random_strict(s, 9);
    const auto v2 = strict_from_text(s, to_text(s, v));
    CHECK(v2.discrete == v.discrete);
    for (size_t i = 0; i < v.continuous.size(); ++i) CHECK(v2.continuous[i] == v.continuous[i]);

    const auto r = relax(s, v);
    const auto r2 = relaxed_from_text(s, to_text(s, r));
    CHECK(r2.discrete == r.discrete);
}

TEST_CASE("stress schema with 45 hair types") {
    const auto s = AttributeSchema::stress_schema();
    CHECK(s.discrete()[0].cardinality == 45);
    const auto v = random_strict(s, 3);
    CHECK_NOTHROW(v.validate(s));
    const auto rt = unflatten(s, flatten(s, relax(s, v)));
    CHECK(argmax_lowest(rt.discrete[0]) == v.discrete[0]);
}
