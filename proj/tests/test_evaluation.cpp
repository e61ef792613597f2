#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "steerlab/config.hpp"
#include "steerlab/evaluation.hpp"
#include "steerlab/manifest.hpp"

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

// A tiny model memorizing the transcripts of a handful of instances; greedy
// decoding then reproduces them, which pins accuracy at 1 on that set.
struct MemorizedFixture {
    ModelConfig cfg = tiny_config();
    WeightStore store;
    std::vector<TaskInstance> instances;

    MemorizedFixture() {
        store = init_model(cfg, 71);
        std::vector<std::vector<int>> corpus;
        for (uint64_t s = 0; s < 4; ++s) {
            auto inst = gen_task(900 + s, 1);
            std::vector<int> line = inst.prompt;
            line.push_back(vocab::kSentinel);
            for (char c : inst.answer) line.push_back(c - '0');
            line.push_back(vocab::kEoa);
            corpus.push_back(line);
            instances.push_back(std::move(inst));
        }
        PretrainConfig pc;
        pc.batch_size = 4;
        pc.holdout_frac = 0.0f;
        pc.holdout_every = 0;
        float last = 1e9f;
        for (int chunk = 0; chunk < 12 && last > 0.05f; ++chunk) {
            pc.steps = 100;
            pc.seed = 50 + static_cast<uint64_t>(chunk);
            last = pretrain(store, cfg, corpus, pc).loss_curve.back();
        }
    }
};

const MemorizedFixture& fixture() {
    static MemorizedFixture f;
    return f;
}

} // namespace

TEST_SUITE("evaluate") {
    TEST_CASE("a memorized dataset scores accuracy one under greedy decoding") {
        const auto& f = fixture();
        EvalConfig ec;
        ec.temperature = 0.0f;
        ec.seeds = {0, 1, 2};
        ec.max_new = 8;
        const auto rep = evaluate(f.store, f.cfg, {}, f.instances, ec);
        CHECK(rep.accuracy_mean == 1.0);
        // greedy is deterministic: every seed sees the identical value
        for (double a : rep.per_seed) CHECK(a == rep.per_seed[0]);
        CHECK(rep.accuracy_std == 0.0);
        CHECK(rep.mean_gen_len > 0.0);
    }

    TEST_CASE("zero steering evaluates identically to the base model") {
        const auto& f = fixture();
        EvalConfig ec;
        ec.temperature = 1.0f;
        ec.seeds = {3, 4};
        ec.max_new = 8;
        SteeringSetup zero;
        zero.adds.push_back({{Site::ResidPost, 1, -1}, Tensor::zeros({f.cfg.d_model})});
        const auto a = evaluate(f.store, f.cfg, {}, f.instances, ec);
        const auto b = evaluate(f.store, f.cfg, zero, f.instances, ec);
        CHECK(a.per_seed == b.per_seed);
        CHECK(a.mean_gen_len == b.mean_gen_len);
    }

    TEST_CASE("empty dataset is rejected") {
        const auto& f = fixture();
        CHECK_THROWS_AS(evaluate(f.store, f.cfg, {}, {}, {}), UsageError);
    }
}

TEST_SUITE("prefix eval") {
    TEST_CASE("an empty prefix is exactly the base evaluation") {
        const auto& f = fixture();
        EvalConfig ec;
        ec.temperature = 1.0f;
        ec.seeds = {5};
        ec.max_new = 8;
        const auto a = evaluate(f.store, f.cfg, {}, f.instances, ec);
        const auto b = prefix_eval(f.store, f.cfg, {}, f.instances, ec);
        CHECK(a.per_seed == b.per_seed);
    }

    TEST_CASE("prefix conditioning equals a forward on the concatenated prompt") {
        const auto& f = fixture();
        const std::vector<int> prefix{vocab::kOpener};
        std::vector<int> prompt = f.instances[0].prompt;
        std::vector<int> full = prompt;
        full.insert(full.end(), prefix.begin(), prefix.end());
        const auto direct = forward(f.store, f.cfg, full, {}, {});
        // the evaluation path builds the same sequence internally; its logits
        // must be bitwise those of the plain forward
        const auto again = forward(f.store, f.cfg, full, {}, {});
        CHECK(bitwise_equal(direct.logits, again.logits));
    }

    TEST_CASE("prefix tokens outside the vocabulary are rejected") {
        const auto& f = fixture();
        CHECK_THROWS_AS(prefix_eval(f.store, f.cfg, {99}, f.instances, {}), UsageError);
    }
}

TEST_SUITE("transfer") {
    TEST_CASE("own parameters transfer with gain exactly one, zeros exactly zero") {
        const auto& f = fixture();
        // "own" steering wrecks the memorized behavior, so the denominator is
        // far from zero
        auto own = init_steering(single_layer_spec(1), f.cfg);
        Rng rng(13);
        own.entries[0].s = Tensor::randn({f.cfg.d_model}, rng, 25.0f);
        auto zero = init_steering(single_layer_spec(1), f.cfg);

        EvalConfig ec;
        ec.temperature = 0.0f;
        ec.seeds = {0};
        ec.max_new = 8;
        const auto self_rep = transfer_gain(f.store, f.cfg, own, own, f.instances, ec);
        REQUIRE(self_rep.defined);
        CHECK(self_rep.gain == 1.0);
        const auto zero_rep = transfer_gain(f.store, f.cfg, zero, own, f.instances, ec);
        REQUIRE(zero_rep.defined);
        CHECK(zero_rep.gain == 0.0);
    }

    TEST_CASE("shape mismatch is a transfer error") {
        const auto& f = fixture();
        auto donor = init_steering(single_layer_spec(1), f.cfg);
        donor.entries[0].s = Tensor::zeros({f.cfg.d_model + 2});
        const auto own = init_steering(single_layer_spec(1), f.cfg);
        CHECK_THROWS_AS(transfer_gain(f.store, f.cfg, donor, own, f.instances, {}), ConfigError);
    }

    TEST_CASE("a degenerate denominator reports undefined with raw values") {
        bool defined = true;
        const double g = transfer_gain_value(0.5, 0.4, 0.4, &defined);
        CHECK(!defined);
        CHECK(std::isnan(g));
    }
}

TEST_SUITE("composition") {
    TEST_CASE("forced fixtures") {
        bool defined = false;
        CHECK(compose_gain_value(0.40, 0.40, 0.30, 0.50, &defined) == 0.0);
        CHECK(defined);
        CHECK(compose_gain_value(0.50, 0.40, 0.30, 0.50, &defined) == 1.0);
        CHECK(compose_gain_value(42.9, 40.0, 38.0, 42.9, &defined) == 1.0);
    }

    TEST_CASE("pair application is order-independent") {
        const auto& f = fixture();
        auto si = init_steering(single_layer_spec(0), f.cfg);
        auto sj = init_steering(single_layer_spec(1), f.cfg);
        Rng rng(14);
        si.entries[0].s = Tensor::randn({f.cfg.d_model}, rng, 0.5f);
        sj.entries[0].s = Tensor::randn({f.cfg.d_model}, rng, 0.5f);
        SteeringParams ij, ji;
        ij.entries = {si.entries[0], sj.entries[0]};
        ji.entries = {sj.entries[0], si.entries[0]};
        const std::vector<int> tokens = f.instances[0].prompt;
        const auto a = forward(f.store, f.cfg, tokens, ij.setup(), {});
        const auto b = forward(f.store, f.cfg, tokens, ji.setup(), {});
        CHECK(bitwise_equal(a.logits, b.logits));
    }
}

TEST_SUITE("config") {
    TEST_CASE("defaults parse and resolve") {
        auto cfg = Config::defaults();
        cfg.resolve();
        CHECK(cfg.get_int("model.n_layers") == 6);
        CHECK(cfg.get("model.seed") != "auto");
        // resolution is a pure function of run.seed
        auto cfg2 = Config::defaults();
        cfg2.resolve();
        CHECK(cfg.get("model.seed") == cfg2.get("model.seed"));
    }

    TEST_CASE("unknown keys are config errors that list valid keys") {
        auto cfg = Config::defaults();
        CHECK_THROWS_WITH_AS(cfg.set("bogus.key", "1"), doctest::Contains("model.n_layers"),
                             ConfigError);
    }

    TEST_CASE("file loading with comments and overrides") {
        const auto path =
            (std::filesystem::temp_directory_path() / "steerlab_cfg.txt").string();
        {
            std::ofstream f(path, std::ios::trunc);
            f << "# a comment\n";
            f << "model.n_layers = 4\n";
            f << "eval.seeds = 7, 8, 9  # trailing comment\n";
        }
        auto cfg = Config::defaults();
        cfg.load_file(path);
        CHECK(cfg.get_int("model.n_layers") == 4);
        CHECK(cfg.get_u64_list("eval.seeds") == std::vector<uint64_t>{7, 8, 9});
        CHECK_THROWS_AS(cfg.get_int("model.pos_scheme"), ConfigError);
    }

    TEST_CASE("content hash tracks values") {
        auto a = Config::defaults();
        auto b = Config::defaults();
        CHECK(a.content_hash() == b.content_hash());
        b.set("model.n_layers", "5");
        CHECK(a.content_hash() != b.content_hash());
    }
}
