#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "steerlab/archive.hpp"
#include "steerlab/model.hpp"
#include "steerlab/task.hpp"

using namespace steerlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_head = 8;
    mc.d_ff = 24;
    mc.vocab_size = vocab::kSize;
    mc.max_seq_len = 32;
    return mc;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_SUITE("init and config") {
    TEST_CASE("same seed gives bitwise-equal stores") {
        const auto cfg = tiny_config();
        const auto a = init_model(cfg, 0);
        const auto b = init_model(cfg, 0);
        CHECK(store_hash(a) == store_hash(b));
        for (const auto& [name, t] : a) CHECK(bitwise_equal(t, b.at(name)));
        const auto c = init_model(cfg, 1);
        CHECK(store_hash(a) != store_hash(c));
    }

    TEST_CASE("head geometry invariant is enforced") {
        auto cfg = tiny_config();
        cfg.d_head = 6; // 2*6 != 16
        CHECK_THROWS_AS(init_model(cfg, 0), ConfigError);
    }

    TEST_CASE("parameter count matches the closed form") {
        for (auto cfg : {tiny_config(), ModelConfig{.vocab_size = vocab::kSize}}) {
            const auto store = init_model(cfg, 3);
            size_t total = 0;
            for (const auto& [name, t] : store) total += t.numel();
            CHECK(total == param_count(cfg));
            CHECK(store.size() == canonical_param_names(cfg).size());
        }
    }
}

TEST_SUITE("forward semantics") {
    TEST_CASE("empty interventions equal plain forward bitwise") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        const std::vector<int> tokens{1, 10, 2, 12, 3};
        const auto a = forward(store, cfg, tokens, {}, {});
        const auto b = forward(store, cfg, tokens, SteeringSetup{}, {});
        CHECK(bitwise_equal(a.logits, b.logits));
    }

    TEST_CASE("zero additive vector at every site is a bitwise no-op") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        const std::vector<int> tokens{1, 10, 2, 12, 3};
        const auto base = forward(store, cfg, tokens, {}, {});
        for (const Site site : {Site::ResidPost, Site::ResidPostAttn, Site::AfterInputNorm,
                                Site::QIn, Site::KIn, Site::VIn, Site::HeadOut, Site::PreUnembed,
                                Site::MlpOut}) {
            HookSite hs{site, 1, site_needs_head(site) ? 1 : -1};
            SteeringSetup setup;
            setup.adds.push_back({hs, Tensor::zeros({site_vec_len(hs, cfg)})});
            const auto out = forward(store, cfg, tokens, setup, {});
            CAPTURE(site_str(hs));
            CHECK(bitwise_equal(base.logits, out.logits));
        }
    }

    TEST_CASE("additive injection lands exactly on the traced state") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        const std::vector<int> tokens{1, 10, 2};
        Rng rng(5);
        const Tensor s = Tensor::randn({cfg.d_model}, rng, 0.3f);
        TraceRequest req;
        req.resid_post = {0};
        const auto base = forward(store, cfg, tokens, {}, req);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, 0, -1}, s});
        const auto steered = forward(store, cfg, tokens, setup, req);
        const auto& fb = base.trace.resid_post.at(0);
        const auto& fs = steered.trace.resid_post.at(0);
        for (int t = 0; t < fb.dim(0); ++t)
            for (int j = 0; j < cfg.d_model; ++j)
                CHECK(fs.at(t, j) == fb.at(t, j) + s.at(j)); // same addition, same kernel
    }

    TEST_CASE("causality: later tokens cannot move earlier logits") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 9);
        std::vector<int> tokens{1, 10, 2, 12, 3, 15, 4};
        const auto a = forward(store, cfg, tokens, {}, {});
        tokens.back() = 9;
        const auto b = forward(store, cfg, tokens, {}, {});
        for (int t = 0; t + 1 < a.logits.dim(0); ++t)
            for (int v = 0; v < cfg.vocab_size; ++v) CHECK(a.logits.at(t, v) == b.logits.at(t, v));
    }

    TEST_CASE("last-layer intervention shifts the pre-unembed trace by the vector") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        const std::vector<int> tokens{1, 10, 2, 12};
        Rng rng(6);
        const Tensor s = Tensor::randn({cfg.d_model}, rng, 0.5f);
        TraceRequest req;
        req.pre_unembed = true;
        const auto base = forward(store, cfg, tokens, {}, req);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, cfg.n_layers - 1, -1}, s});
        const auto steered = forward(store, cfg, tokens, setup, req);
        for (int t = 0; t < base.trace.pre_unembed.dim(0); ++t)
            for (int j = 0; j < cfg.d_model; ++j)
                CHECK(steered.trace.pre_unembed.at(t, j) ==
                      base.trace.pre_unembed.at(t, j) + s.at(j));
    }

    TEST_CASE("attention rows are probability distributions") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 11);
        const std::vector<int> tokens{1, 10, 2, 12, 3, 15};
        TraceRequest req;
        req.attn_probs = true;
        const auto out = forward(store, cfg, tokens, {}, req);
        for (int l = 0; l < cfg.n_layers; ++l)
            for (int h = 0; h < cfg.n_heads; ++h) {
                const auto& probs = out.trace.attn[static_cast<size_t>(l)][static_cast<size_t>(h)];
                for (int i = 0; i < probs.dim(0); ++i) {
                    double sum = 0.0;
                    for (int j = 0; j < probs.dim(1); ++j) {
                        sum += probs.at(i, j);
                        if (j > i) CHECK(probs.at(i, j) == 0.0f);
                    }
                    CHECK(std::abs(sum - 1.0) < 1e-6);
                }
            }
    }

    TEST_CASE("unknown site and bad tokens are rejected") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, 99, -1}, Tensor::zeros({cfg.d_model})});
        CHECK_THROWS_AS(forward(store, cfg, {1, 2}, setup, {}), UsageError);
        CHECK_THROWS_AS(forward(store, cfg, {vocab::kSize}, {}, {}), UsageError);
        CHECK_THROWS_AS(forward(store, cfg, std::vector<int>(cfg.max_seq_len + 1, 0), {}, {}),
                        LengthError);
    }
}

TEST_SUITE("sampling") {
    TEST_CASE("temperature zero picks the argmax") {
        const auto cfg = tiny_config();
        auto store = init_model(cfg, 7);
        Rng rng(1);
        std::vector<float> lps;
        const auto a = sample(store, cfg, {1, 10, 2}, {0.0f, 3, -1}, rng, {}, &lps);
        Rng rng2(999); // greedy ignores the rng
        const auto b = sample(store, cfg, {1, 10, 2}, {0.0f, 3, -1}, rng2);
        CHECK(a == b);
        for (float lp : lps) CHECK(lp == 0.0f);
    }

    TEST_CASE("same seed reproduces the completion") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        Rng r1(42), r2(42);
        const auto a = sample(store, cfg, {1, 10, 2}, {1.0f, 8, vocab::kEoa}, r1);
        const auto b = sample(store, cfg, {1, 10, 2}, {1.0f, 8, vocab::kEoa}, r2);
        CHECK(a == b);
    }

    TEST_CASE("prompt longer than the context is a length error") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 7);
        Rng rng(1);
        CHECK_THROWS_AS(
            sample(store, cfg, std::vector<int>(cfg.max_seq_len + 1, 1), {1.0f, 4, -1}, rng),
            LengthError);
    }

    TEST_CASE("empirical next-token frequencies match the softmax") {
        ModelConfig mc;
        mc.n_layers = 1;
        mc.d_model = 8;
        mc.n_heads = 2;
        mc.d_head = 4;
        mc.d_ff = 8;
        mc.vocab_size = 6;
        mc.max_seq_len = 4;
        const auto store = init_model(mc, 21);
        const std::vector<int> prompt{1, 3};
        const auto fwd = forward(store, mc, prompt, {}, {});
        // exact probabilities from the same logits the sampler sees
        std::vector<double> p(static_cast<size_t>(mc.vocab_size));
        double mx = -1e30, z = 0.0;
        for (int v = 0; v < mc.vocab_size; ++v)
            mx = std::max(mx, static_cast<double>(fwd.logits.at(1, v)));
        for (int v = 0; v < mc.vocab_size; ++v) {
            p[static_cast<size_t>(v)] = std::exp(fwd.logits.at(1, v) - mx);
            z += p[static_cast<size_t>(v)];
        }
        for (auto& x : p) x /= z;

        const int n = 100000;
        std::vector<int> counts(static_cast<size_t>(mc.vocab_size), 0);
        for (int i = 0; i < n; ++i) {
            Rng rng(derive_seed(7, 1234, static_cast<uint64_t>(i)));
            const auto toks = sample(store, mc, prompt, {1.0f, 1, -1}, rng);
            counts[static_cast<size_t>(toks.at(0))]++;
        }
        for (int v = 0; v < mc.vocab_size; ++v) {
            const double expect = n * p[static_cast<size_t>(v)];
            const double sigma = std::sqrt(n * p[static_cast<size_t>(v)] *
                                           (1.0 - p[static_cast<size_t>(v)]));
            CHECK(std::abs(counts[static_cast<size_t>(v)] - expect) <= 3.0 * sigma + 1.0);
        }
    }
}

TEST_SUITE("weight archive") {
    TEST_CASE("round trip is bitwise identical") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 13);
        const auto path = tmp_path("steerlab_test_model.stlb");
        save_weights(path, store);
        const auto loaded = load_weights(path, cfg);
        CHECK(store_hash(store) == store_hash(loaded));
        for (const auto& [name, t] : store) CHECK(bitwise_equal(t, loaded.at(name)));
    }

    TEST_CASE("corrupt magic is a format error") {
        const auto cfg = tiny_config();
        const auto path = tmp_path("steerlab_test_corrupt.stlb");
        save_weights(path, init_model(cfg, 13));
        {
            std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(2);
            f.put('X');
        }
        CHECK_THROWS_AS(load_weights(path, cfg), FormatError);
    }

    TEST_CASE("payload corruption fails the checksum") {
        const auto cfg = tiny_config();
        const auto path = tmp_path("steerlab_test_crc.stlb");
        save_weights(path, init_model(cfg, 13));
        {
            std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(200);
            f.put('\x7f');
        }
        CHECK_THROWS_AS(load_weights(path, cfg), FormatError);
    }

    TEST_CASE("archive from another depth fails the name-set check") {
        auto cfg = tiny_config();
        const auto path = tmp_path("steerlab_test_depth.stlb");
        save_weights(path, init_model(cfg, 13));
        auto other = cfg;
        other.n_layers = 3;
        CHECK_THROWS_AS(load_weights(path, other), FormatError);
    }
}

TEST_SUITE("pretraining") {
    TEST_CASE("zero steps leave the weights untouched") {
        const auto cfg = tiny_config();
        auto store = init_model(cfg, 3);
        const uint64_t before = store_hash(store);
        PretrainConfig pc;
        pc.steps = 0;
        pretrain(store, cfg, {{1, 10, 2, 15, 3, 16}}, pc);
        CHECK(store_hash(store) == before);
    }

    TEST_CASE("divergent losses raise a training error with the step index") {
        const auto cfg = tiny_config();
        auto store = init_model(cfg, 3);
        PretrainConfig pc;
        pc.steps = 5;
        pc.batch_size = 2;
        pc.adam.lr = 1e12f; // force a blow-up
        pc.holdout_frac = 0.0f;
        try {
            pretrain(store, cfg, {{1, 10, 2, 15, 3, 16}, {2, 10, 2, 15, 4, 16}}, pc);
        } catch (const TrainingError& e) {
            CHECK(std::string(e.what()).find("step") != std::string::npos);
            return;
        }
        CHECK_MESSAGE(false, "expected a training failure");
    }

    TEST_CASE("memorizes a single sequence") {
        ModelConfig mc; // default geometry
        mc.vocab_size = vocab::kSize;
        auto store = init_model(mc, 5);
        const std::vector<int> seq{3, 10, 4, 14, 3, 10, 4, 12, 7, 15, 7, 16};
        // run in chunks so the test stops as soon as the bar is met
        float best = 1e9f;
        int steps_used = 0;
        for (int chunk = 0; chunk < 20 && best >= 0.1f; ++chunk) {
            PretrainConfig pc;
            pc.steps = 100;
            pc.batch_size = 2;
            pc.holdout_frac = 0.0f;
            pc.holdout_every = 0;
            pc.seed = 9 + static_cast<uint64_t>(chunk);
            const auto res = pretrain(store, mc, {seq, seq}, pc);
            for (float l : res.loss_curve) best = std::min(best, l);
            steps_used += pc.steps;
        }
        CAPTURE(steps_used);
        CHECK(best < 0.1f);
        CHECK(steps_used <= 2000);
    }

    TEST_CASE("loss falls on a small mixed corpus") {
        const auto cfg = tiny_config();
        auto store = init_model(cfg, 3);
        const auto corpus = build_corpus({3, 64, 1, {}, 0.25, 0.25});
        PretrainConfig pc;
        pc.steps = 150;
        pc.batch_size = 8;
        pc.seed = 4;
        pc.holdout_every = 0;
        const auto res = pretrain(store, cfg, corpus.lines, pc);
        double head = 0.0, tail = 0.0;
        for (int i = 0; i < 20; ++i) {
            head += res.loss_curve[static_cast<size_t>(i)];
            tail += res.loss_curve[res.loss_curve.size() - 1 - static_cast<size_t>(i)];
        }
        CHECK(tail < head);
    }
}
