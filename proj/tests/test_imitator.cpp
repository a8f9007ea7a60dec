#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <vector>

#include "avafit/eval.hpp"
#include "avafit/imitator.hpp"

using namespace avafit;

namespace {

constexpr int kSize = 32;

ImitatorTrainConfig small_config() {
    ImitatorTrainConfig cfg;
    cfg.dataset_size = 128;
    cfg.holdout = 24;
    cfg.epochs = 10;
    cfg.batch = 8;
    cfg.pretrain_steps = 250;
    cfg.seed = 500;
    return cfg;
}

// One small trained imitator shared across test cases (training dominates the
// suite's runtime), plus a one-step arm for the pretraining comparison.
struct Fixture {
    AttributeSchema schema = AttributeSchema::default_schema();
    Renderer renderer{schema, kSize};
    FeatureExtractor feat{777};
    std::unique_ptr<IdentityEmbedder> emb;
    std::unique_ptr<ImitatorModel> two_step;
    std::unique_ptr<ImitatorModel> one_step;
    ImitatorTrainReport two_report, one_report;

    Fixture() {
        Rng erng(11);
        emb = std::make_unique<IdentityEmbedder>(erng, kSize);
        const auto cfg = small_config();

        Rng r1(42);
        two_step = std::make_unique<ImitatorModel>(r1, schema, kSize, 32, 32, 64);
        pretrain_generator(*two_step, renderer, feat, cfg);
        two_report = train_imitator(*two_step, renderer, feat, *emb, cfg);

        Rng r2(42);
        one_step = std::make_unique<ImitatorModel>(r2, schema, kSize, 32, 32, 64);
        auto c1 = cfg;
        c1.two_step = false;
        one_report = train_imitator(*one_step, renderer, feat, *emb, c1);
    }
};

Fixture& fx() {
    static Fixture f;
    return f;
}

real image_l1(const Image& a, const Image& b) {
    REQUIRE(a.same_shape(b));
    real acc = 0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    return acc / static_cast<real>(a.data.size());
}

}  // namespace

TEST_CASE("pretraining the generator improves held-out reconstruction") {
    auto& f = fx();
    CHECK(f.two_step->pretrained());
    CHECK_FALSE(f.one_step->pretrained());
    CHECK(f.two_report.holdout_l1 < f.one_report.holdout_l1);
    CHECK(f.two_report.holdout_l1 <= 0.12);
    // the schedule ran to completion and made progress
    CHECK(f.two_report.epoch_loss.size() == 10);
    CHECK(f.two_report.epoch_loss.back() < f.two_report.epoch_loss.front());
}

TEST_CASE("training is deterministic given the seed") {
    auto& f = fx();
    ImitatorTrainConfig cfg;
    cfg.dataset_size = 24;
    cfg.holdout = 8;
    cfg.epochs = 2;
    cfg.batch = 8;
    cfg.two_step = false;
    cfg.seed = 321;

    std::vector<ImitatorTrainReport> reports;
    for (int run = 0; run < 2; ++run) {
        Rng mrng(7);
        ImitatorModel m(mrng, f.schema, kSize, 32, 32, 64);
        reports.push_back(train_imitator(m, f.renderer, f.feat, *f.emb, cfg));
    }
    REQUIRE(reports[0].epoch_loss.size() == reports[1].epoch_loss.size());
    for (size_t e = 0; e < reports[0].epoch_loss.size(); ++e)
        CHECK(reports[0].epoch_loss[e] == reports[1].epoch_loss[e]);
    CHECK(reports[0].holdout_l1 == reports[1].holdout_l1);
}

TEST_CASE("training curve is written as CSV") {
    auto& f = fx();
    const auto path = (std::filesystem::temp_directory_path() / "avafit_imit_curve.csv").string();
    ImitatorTrainConfig cfg;
    cfg.dataset_size = 16;
    cfg.holdout = 4;
    cfg.epochs = 3;
    cfg.batch = 8;
    cfg.two_step = false;
    cfg.curve_csv = path;
    Rng mrng(8);
    ImitatorModel m(mrng, f.schema, kSize, 32, 32, 64);
    train_imitator(m, f.renderer, f.feat, *f.emb, cfg);

    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss,lr");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    std::filesystem::remove(path);
}

TEST_CASE("config validation and two-step preconditions") {
    auto& f = fx();
    Rng mrng(9);
    ImitatorModel m(mrng, f.schema, kSize, 32, 32, 64);

    ImitatorTrainConfig bad = small_config();
    bad.epochs = 0;
    CHECK_THROWS_AS(train_imitator(m, f.renderer, f.feat, *f.emb, bad), ArgumentError);
    bad = small_config();
    bad.lr = 0;
    CHECK_THROWS_AS(train_imitator(m, f.renderer, f.feat, *f.emb, bad), ArgumentError);

    // two_step on an un-pretrained model with no checkpoint is a config error
    ImitatorTrainConfig cfg = small_config();
    CHECK_THROWS_AS(train_imitator(m, f.renderer, f.feat, *f.emb, cfg), ArgumentError);
}

TEST_CASE("imitate requires a trained model and is deterministic in [0,1]") {
    auto& f = fx();
    Rng mrng(10);
    ImitatorModel fresh(mrng, f.schema, kSize, 32, 32, 64);
    const auto v = relax(f.schema, random_strict(f.schema, 1234));
    CHECK_THROWS_AS(fresh.imitate(v), StateError);

    const Image a = f.two_step->imitate(v);
    const Image b = f.two_step->imitate(v);
    REQUIRE(a.data.size() == b.data.size());
    for (size_t i = 0; i < a.data.size(); ++i) {
        CHECK(a.data[i] == b.data[i]);
        CHECK(a.data[i] >= 0.0);
        CHECK(a.data[i] <= 1.0);
    }
}

TEST_CASE("strict vectors imitate close to the engine render") {
    auto& f = fx();
    real mean_l1 = 0;
    const int n = 16;
    for (int i = 0; i < n; ++i) {
        const auto v = random_strict(f.schema, 50000 + i);  // never seen in training
        const Image out = f.two_step->imitate(relax(f.schema, v));
        const Image gt = f.renderer.render(v).image;
        const real l1 = image_l1(out, gt);
        CHECK(l1 <= 0.25);
        mean_l1 += l1;
    }
    CHECK(mean_l1 / n <= 0.12);
}

TEST_CASE("imitator samples sit far closer to renders than noise (Frechet)") {
    auto& f = fx();
    std::vector<Image> renders, samples, noise;
    Rng nrng(909);
    for (int i = 0; i < 60; ++i) {
        renders.push_back(f.renderer.render(random_strict(f.schema, 9000 + i)).image);
        samples.push_back(f.two_step->imitate(relax(f.schema, random_strict(f.schema, 20000 + i))));
        Image nz(kSize, kSize);
        for (auto& p : nz.data) p = nrng.uniform();
        noise.push_back(nz);
    }
    const auto sr = FrechetStats::from_images(f.feat, renders);
    const real d_samples = frechet_distance(FrechetStats::from_images(f.feat, samples), sr);
    const real d_noise = frechet_distance(FrechetStats::from_images(f.feat, noise), sr);
    CHECK(d_samples * 10.0 <= d_noise);
}

TEST_CASE("composite loss gradients through the imitator match finite differences") {
    auto& f = fx();
    const auto vt = random_strict(f.schema, 600);
    const auto target = f.renderer.render(vt);
    const nn::Var target_var = nn::image_to_var(target.image);
    const int d = static_cast<int>(f.schema.flat_length());

    // start from a relaxed point strictly inside the simplex blocks
    const auto e0 = flatten(f.schema, relax(f.schema, random_strict(f.schema, 601)));
    nn::Array base(d);
    for (int j = 0; j < d; ++j) base[j] = 0.25 + 0.5 * e0.values[static_cast<size_t>(j)];

    const auto loss_at = [&](const nn::Array& x, bool with_grad) {
        nn::Var flat = with_grad ? nn::leaf({1, d}, x) : nn::constant({1, d}, x);
        const nn::Var out = f.two_step->forward(flat);
        const auto terms =
            mapper_loss(f.feat, *f.emb, target_var, target.seg, out, target.seg);
        return std::pair{terms.total, flat};
    };

    auto [loss, flat] = loss_at(base, true);
    nn::backward(loss);
    Rng rng(77);
    const real eps = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
        const int j = static_cast<int>(rng.index(static_cast<size_t>(d)));
        nn::Array plus = base, minus = base;
        plus[j] += eps;
        minus[j] -= eps;
        const real fd = (nn::scalar_value(loss_at(plus, false).first) -
                         nn::scalar_value(loss_at(minus, false).first)) /
                        (2 * eps);
        const real an = flat->grad[j];
        CHECK(std::abs(an - fd) <= 1e-3 * (1.0 + std::abs(fd)));
    }
}

TEST_CASE("interpolation sweeps are smooth with exact endpoints") {
    auto& f = fx();
    CHECK_THROWS_AS(f.two_step->interpolation_sweep(random_strict(f.schema, 1), random_strict(f.schema, 2), 1),
                    ArgumentError);

    const int pairs = 100, steps = 6;
    int monotone = 0;
    for (int p = 0; p < pairs; ++p) {
        const auto v1 = random_strict(f.schema, 30000 + 2 * p);
        const auto v2 = random_strict(f.schema, 30001 + 2 * p);
        const auto frames = f.two_step->interpolation_sweep(v1, v2, steps);
        REQUIRE(static_cast<int>(frames.size()) == steps);

        // endpoints match direct imitate calls exactly
        const Image a = f.two_step->imitate(relax(f.schema, v1));
        const Image b = f.two_step->imitate(relax(f.schema, v2));
        CHECK(frames.front().data == a.data);
        CHECK(frames.back().data == b.data);

        // no consecutive-frame spike beyond 3x the mean consecutive distance
        std::vector<real> consec;
        for (int i = 0; i + 1 < steps; ++i) consec.push_back(image_l1(frames[i], frames[i + 1]));
        real mean = 0, mx = 0;
        for (const real c : consec) {
            mean += c;
            mx = std::max(mx, c);
        }
        mean /= static_cast<real>(consec.size());
        CHECK(mx <= 3.0 * mean);

        // distance from the first frame should grow along the sweep
        bool nondecreasing = true;
        real prev = 0;
        for (int i = 1; i < steps; ++i) {
            const real di = image_l1(frames[i], frames[0]);
            if (di + 1e-9 < prev) nondecreasing = false;
            prev = di;
        }
        if (nondecreasing) ++monotone;
    }
    CHECK(monotone >= 90);
}

TEST_CASE("attribute toggles change the matching image region the most") {
    auto& f = fx();
    int hits = 0, total = 0;
    Rng rng(555);
    for (int s = 0; s < 4; ++s) {
        const auto v = random_strict(f.schema, 40000 + s);
        for (size_t a = 0; a < f.schema.num_discrete(); ++a) {
            auto w = v;
            const int card = f.schema.discrete()[a].cardinality;
            w.discrete[a] = (v.discrete[a] + 1 + static_cast<int>(rng.index(static_cast<size_t>(card - 1)))) % card;

            // region oracle: pixels where the engine renders differ
            const Image ra = f.renderer.render(v).image;
            const Image rb = f.renderer.render(w).image;
            std::vector<bool> region(ra.pixels(), false);
            size_t in_region = 0;
            for (int y = 0; y < ra.h; ++y)
                for (int x = 0; x < ra.w; ++x)
                    for (int c = 0; c < 3; ++c)
                        if (std::abs(ra.at(c, y, x) - rb.at(c, y, x)) > 1.0 / 255.0) {
                            if (!region[static_cast<size_t>(y) * ra.w + x]) ++in_region;
                            region[static_cast<size_t>(y) * ra.w + x] = true;
                        }
            if (in_region == 0 || in_region == ra.pixels()) continue;  // toggle invisible or global

            const Image ia = f.two_step->imitate(relax(f.schema, v));
            const Image ib = f.two_step->imitate(relax(f.schema, w));
            real inside = 0, outside = 0;
            for (int y = 0; y < ia.h; ++y)
                for (int x = 0; x < ia.w; ++x) {
                    real dpx = 0;
                    for (int c = 0; c < 3; ++c) dpx += std::abs(ia.at(c, y, x) - ib.at(c, y, x));
                    (region[static_cast<size_t>(y) * ia.w + x] ? inside : outside) += dpx;
                }
            inside /= static_cast<real>(in_region);
            outside /= static_cast<real>(ia.pixels() - in_region);
            ++total;
            if (inside > outside) ++hits;
        }
    }
    REQUIRE(total >= 20);
    CHECK(static_cast<real>(hits) >= 0.8 * static_cast<real>(total));
}

TEST_CASE("checkpoints round-trip through disk") {
    auto& f = fx();
    const auto path = (std::filesystem::temp_directory_path() / "avafit_imit_ckpt.bin").string();
    f.two_step->save(path);

    Rng mrng(99);
    ImitatorModel loaded(mrng, f.schema, kSize, 32, 32, 64);
    CHECK_FALSE(loaded.trained());
    loaded.load(path);
    CHECK(loaded.trained());
    CHECK(loaded.pretrained());

    const auto v = relax(f.schema, random_strict(f.schema, 777));
    const Image a = f.two_step->imitate(v);
    const Image b = loaded.imitate(v);
    CHECK(a.data == b.data);

    // different schema -> refuse the checkpoint
    Rng srng(100);
    ImitatorModel other(srng, AttributeSchema::stress_schema(), kSize, 32, 32, 64);
    CHECK_THROWS_AS(other.load(path), SchemaError);
    std::filesystem::remove(path);
}

TEST_CASE("pretrain checkpoint feeds a separate training run") {
    auto& f = fx();
    const auto path = (std::filesystem::temp_directory_path() / "avafit_imit_pre.bin").string();
    ImitatorTrainConfig cfg;
    cfg.dataset_size = 16;
    cfg.holdout = 4;
    cfg.epochs = 1;
    cfg.batch = 8;
    cfg.pretrain_steps = 5;
    cfg.pretrain_checkpoint = path;

    Rng r1(13);
    ImitatorModel a(r1, f.schema, kSize, 32, 32, 64);
    pretrain_generator(a, f.renderer, f.feat, cfg);
    REQUIRE(std::filesystem::exists(path));

    // a fresh model can start two-step training from the persisted generator
    Rng r2(14);
    ImitatorModel b(r2, f.schema, kSize, 32, 32, 64);
    const auto rep = train_imitator(b, f.renderer, f.feat, *f.emb, cfg);
    CHECK(b.trained());
    CHECK(b.pretrained());
    CHECK(rep.epoch_loss.size() == 1);
    std::filesystem::remove(path);
}

TEST_CASE("adversarial pretraining arm runs and updates the generator") {
    auto& f = fx();
    ImitatorTrainConfig cfg;
    cfg.adversarial_pretrain = true;
    cfg.pretrain_steps = 6;
    cfg.batch = 8;
    Rng mrng(15);
    ImitatorModel m(mrng, f.schema, kSize, 32, 32, 64);
    const auto params = m.generator().param_vars();
    std::vector<nn::Array> before;
    for (const auto& p : params) before.push_back(p->val);
    pretrain_generator(m, f.renderer, f.feat, cfg);
    CHECK(m.pretrained());
    bool changed = false;
    for (size_t i = 0; i < params.size(); ++i)
        if ((params[i]->val - before[i]).abs().maxCoeff() > 0) changed = true;
    CHECK(changed);
}
