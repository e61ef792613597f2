#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "steerlab/analysis.hpp"
#include "steerlab/kernels.hpp"

using namespace steerlab;

namespace {

// vocab-sized residual stream so the unembedding can be the identity
ModelConfig lens_config() {
    ModelConfig mc;
    mc.n_layers = 1;
    mc.d_model = 18;
    mc.n_heads = 3;
    mc.d_head = 6;
    mc.d_ff = 16;
    mc.vocab_size = vocab::kSize;
    mc.max_seq_len = 16;
    return mc;
}

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.n_layers = 3;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_head = 8;
    mc.d_ff = 24;
    mc.vocab_size = vocab::kSize;
    mc.max_seq_len = 32;
    return mc;
}

} // namespace

TEST_SUITE("cosine helper") {
    TEST_CASE("self-cosine is exactly one") {
        Rng rng(1);
        for (int trial = 0; trial < 200; ++trial) {
            const Tensor u = Tensor::randn({32}, rng, 2.0f);
            CHECK(cosine_guarded(u.data.data(), u.data.data(), 32) == 1.0);
        }
    }

    TEST_CASE("zero vectors report zero with the flag set") {
        const Tensor z = Tensor::zeros({8});
        const Tensor u = Tensor::full({8}, 1.0f);
        bool flag = false;
        CHECK(cosine_guarded(z.data.data(), u.data.data(), 8, &flag) == 0.0);
        CHECK(flag);
    }

    TEST_CASE("centered mean of identical rows returns the row exactly") {
        Rng rng(2);
        const Tensor u = Tensor::randn({16}, rng);
        std::vector<const float*> rows(7, u.data.data());
        const auto mean = mean_rows(rows, 16);
        for (int j = 0; j < 16; ++j) CHECK(mean[static_cast<size_t>(j)] == u.data[static_cast<size_t>(j)]);
    }
}

TEST_SUITE("logit lens") {
    TEST_CASE("identity unembedding maps basis vectors to their tokens") {
        const auto cfg = lens_config();
        auto store = init_model(cfg, 31);
        auto& u = store.at("unembed");
        for (int t = 0; t < cfg.vocab_size; ++t)
            for (int j = 0; j < cfg.d_model; ++j) u.at(t, j) = t == j ? 1.0f : 0.0f;
        for (int k = 0; k < cfg.vocab_size; ++k) {
            Tensor v = Tensor::zeros({cfg.d_model});
            v.at(k) = 1.0f;
            const auto rep = logit_lens(v, store, cfg, 3);
            REQUIRE(!rep.entries.empty());
            CHECK(rep.entries[0].token == k);
            CHECK(rep.entries[0].cosine == doctest::Approx(1.0));
            CHECK(rep.entries[0].dot == doctest::Approx(1.0));
        }
    }

    TEST_CASE("zero probe reports zeros with the flag") {
        const auto cfg = lens_config();
        const auto store = init_model(cfg, 31);
        const auto rep = logit_lens(Tensor::zeros({cfg.d_model}), store, cfg, 5);
        CHECK(rep.zero_vector);
        for (const auto& e : rep.entries) {
            CHECK(e.dot == 0.0);
            CHECK(e.cosine == 0.0);
        }
    }

    TEST_CASE("top-1 by dot equals the exhaustive argmax") {
        const auto cfg = lens_config();
        const auto store = init_model(cfg, 37);
        Rng rng(3);
        for (int trial = 0; trial < 50; ++trial) {
            const Tensor v = Tensor::randn({cfg.d_model}, rng);
            const auto rep = logit_lens(v, store, cfg, 1);
            // brute force over every vocabulary row
            const auto& u = store.at("unembed");
            int best = 0;
            double best_dot = -1e300;
            for (int t = 0; t < cfg.vocab_size; ++t) {
                double dot = 0.0;
                for (int j = 0; j < cfg.d_model; ++j)
                    dot += static_cast<double>(v.at(j)) * u.at(t, j);
                if (dot > best_dot) {
                    best_dot = dot;
                    best = t;
                }
            }
            CHECK(rep.entries[0].token == best);
        }
    }

    TEST_CASE("top_k beyond the vocabulary clamps with a warning flag") {
        const auto cfg = lens_config();
        const auto store = init_model(cfg, 31);
        Rng rng(4);
        const auto rep = logit_lens(Tensor::randn({cfg.d_model}, rng), store, cfg, 999);
        CHECK(rep.top_k_clamped);
        CHECK(rep.entries.size() == static_cast<size_t>(cfg.vocab_size));
    }
}

TEST_SUITE("token probability deltas") {
    TEST_CASE("null steering gives exactly zero deltas") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 41);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, 1, -1}, Tensor::zeros({cfg.d_model})});
        const auto rows = token_prob_delta(store, cfg, setup, {{1, 10, 2}, {3, 10, 4}});
        for (const auto& r : rows) CHECK(r.delta == 0.0);
    }

    TEST_CASE("per-position deltas conserve probability") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 41);
        Rng rng(5);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, 1, -1}, Tensor::randn({cfg.d_model}, rng, 0.5f)});
        const auto rows = token_prob_delta(store, cfg, setup, {{1, 10, 2, 12, 3}});
        std::map<int, double> by_position;
        for (const auto& r : rows) by_position[r.position] += r.delta;
        for (const auto& [pos, sum] : by_position) CHECK(std::abs(sum) < 1e-6);
        // exactly one position is flagged first-generated
        int first_count = 0;
        for (const auto& r : rows) first_count += r.first_generated ? 1 : 0;
        CHECK(first_count == cfg.vocab_size);
    }
}

TEST_SUITE("hidden-state shifts") {
    TEST_CASE("the injection layer returns the vector itself, bit for bit") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 43);
        Rng rng(6);
        const Tensor s = Tensor::randn({cfg.d_model}, rng, 0.3f);
        const std::vector<int> tokens{1, 10, 2, 12};
        const auto df = delta_f(store, cfg, s, 1, tokens, {1});
        const auto& shift = df.at(1);
        for (int t = 0; t < shift.dim(0); ++t)
            for (int j = 0; j < cfg.d_model; ++j) CHECK(shift.at(t, j) == s.at(j));
    }

    TEST_CASE("two-forward subtraction agrees with the exact injection value") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 43);
        Rng rng(6);
        const Tensor s = Tensor::randn({cfg.d_model}, rng, 0.3f);
        const std::vector<int> tokens{1, 10, 2, 12};
        // straight subtraction oracle at the injection layer
        TraceRequest req;
        req.resid_post = {1};
        const auto base = forward(store, cfg, tokens, {}, req);
        SteeringSetup setup;
        setup.adds.push_back({{Site::ResidPost, 1, -1}, s});
        const auto steered = forward(store, cfg, tokens, setup, req);
        for (int t = 0; t < 4; ++t)
            for (int j = 0; j < cfg.d_model; ++j) {
                const float sub = steered.trace.resid_post.at(1).at(t, j) -
                                  base.trace.resid_post.at(1).at(t, j);
                CHECK(std::abs(sub - s.at(j)) < 1e-5f);
            }
    }

    TEST_CASE("zero vector shifts nothing anywhere") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 43);
        const auto df = delta_f(store, cfg, Tensor::zeros({cfg.d_model}), 0, {1, 10, 2}, {0, 1, 2});
        for (const auto& [l, shift] : df)
            for (float v : shift.data) CHECK(v == 0.0f);
    }

    TEST_CASE("doubling the vector doubles the shift at the injection layer") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 43);
        Rng rng(7);
        Tensor s = Tensor::randn({cfg.d_model}, rng, 0.25f);
        Tensor s2 = s;
        for (auto& v : s2.data) v *= 2.0f;
        const auto a = delta_f(store, cfg, s, 1, {1, 10, 2}, {1});
        const auto b = delta_f(store, cfg, s2, 1, {1, 10, 2}, {1});
        for (size_t i = 0; i < a.at(1).data.size(); ++i)
            CHECK(b.at(1).data[i] == 2.0f * a.at(1).data[i]);
    }

    TEST_CASE("target below the injection layer is rejected") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 43);
        CHECK_THROWS_AS(delta_f(store, cfg, Tensor::zeros({cfg.d_model}), 2, {1, 2}, {1}),
                        UsageError);
    }
}

TEST_SUITE("persistence and bias similarity") {
    TEST_CASE("diagonals are exactly one") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 47);
        Rng rng(8);
        std::vector<Tensor> vecs;
        for (int l = 0; l < cfg.n_layers; ++l)
            vecs.push_back(Tensor::randn({cfg.d_model}, rng, 0.3f));
        const auto res = persistence_matrices(store, cfg, vecs, {{1, 10, 2}, {5, 10, 5}});
        for (int i = 0; i < cfg.n_layers; ++i) {
            CHECK(res.diff_diff[static_cast<size_t>(i)][static_cast<size_t>(i)] == 1.0);
            CHECK(res.diff_vector[static_cast<size_t>(i)][static_cast<size_t>(i)] == 1.0);
        }
        // entries below the diagonal stay undefined
        CHECK(std::isnan(res.diff_diff[2][0]));
    }

    TEST_CASE("missing layers are skipped, not fatal") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 47);
        Rng rng(8);
        std::vector<Tensor> vecs(static_cast<size_t>(cfg.n_layers));
        vecs[1] = Tensor::randn({cfg.d_model}, rng, 0.3f);
        const auto res = persistence_matrices(store, cfg, vecs, {{1, 10, 2}});
        CHECK(res.layers_present == std::vector<int>{1});
        CHECK(res.diff_diff[1][1] == 1.0);
        CHECK(std::isnan(res.diff_diff[0][0]));
        // diff-vector against layer 2 is undefined without its vector
        CHECK(std::isnan(res.diff_vector[1][2]));
        CHECK(!std::isnan(res.diff_diff[1][2]));
    }

    TEST_CASE("bias similarity is symmetric with a unit diagonal") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 47);
        Rng rng(9);
        std::vector<Tensor> vecs;
        for (int l = 0; l < cfg.n_layers; ++l)
            vecs.push_back(Tensor::randn({cfg.d_model}, rng, 0.3f));
        const auto res =
            bias_similarity_matrix(store, cfg, vecs, {{1, 10, 2}, {5, 10, 5}, {2, 10, 9}});
        const size_t n = res.layers_present.size();
        REQUIRE(n == 3);
        for (size_t i = 0; i < n; ++i) {
            CHECK(std::abs(res.cosine[i][i] - 1.0) < 1e-6);
            for (size_t j = 0; j < n; ++j) CHECK(res.cosine[i][j] == res.cosine[j][i]);
        }
    }

    TEST_CASE("mean shifts match an independent recomputation from shift dumps") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 47);
        Rng rng(10);
        std::vector<Tensor> vecs(static_cast<size_t>(cfg.n_layers));
        vecs[0] = Tensor::randn({cfg.d_model}, rng, 0.3f);
        const std::vector<std::vector<int>> prompts{{1, 10, 2}, {5, 10, 5}};
        const auto res = bias_similarity_matrix(store, cfg, vecs, prompts);
        REQUIRE(res.mean_shifts.size() == 1);
        // recompute the final-layer mean shift directly
        std::vector<double> acc(static_cast<size_t>(cfg.d_model), 0.0);
        int count = 0;
        for (const auto& prompt : prompts) {
            const auto df = delta_f(store, cfg, vecs[0], 0, prompt, {cfg.n_layers - 1});
            const auto& shift = df.at(cfg.n_layers - 1);
            for (int t = 0; t < shift.dim(0); ++t, ++count)
                for (int j = 0; j < cfg.d_model; ++j) acc[static_cast<size_t>(j)] += shift.at(t, j);
        }
        for (int j = 0; j < cfg.d_model; ++j)
            CHECK(res.mean_shifts[0].at(j) ==
                  doctest::Approx(acc[static_cast<size_t>(j)] / count).epsilon(1e-5));
    }
}

TEST_SUITE("gate traces") {
    TEST_CASE("zero gate row traces all-zero gates") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 53);
        auto params = init_steering(adaptive_spec(1), cfg);
        Rng rng(11);
        params.entries[0].b = Tensor::randn({cfg.d_model}, rng);
        const auto instances = make_task_set(9, 3, 1);
        const auto rows = gate_magnitude_trace(store, cfg, params, instances, 1.0f, 8, 5);
        CHECK(!rows.empty());
        for (const auto& r : rows) CHECK(r.gate == 0.0f);
    }

    TEST_CASE("segments partition each transcript and gates are reproducible") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 53);
        auto params = init_steering(adaptive_spec(1), cfg);
        Rng rng(11);
        params.entries[0].b = Tensor::randn({cfg.d_model}, rng, 0.2f);
        params.entries[0].a = Tensor::randn({cfg.d_model}, rng, 0.2f);
        const auto instances = make_task_set(9, 3, 1);
        const auto rows = gate_magnitude_trace(store, cfg, params, instances, 1.0f, 8, 5);
        const auto rows2 = gate_magnitude_trace(store, cfg, params, instances, 1.0f, 8, 5);
        REQUIRE(rows.size() == rows2.size());
        std::map<uint64_t, int> positions_seen;
        for (size_t i = 0; i < rows.size(); ++i) {
            CHECK(rows[i].gate == rows2[i].gate);
            if (rows[i].position < prompt_len(1))
                CHECK(rows[i].segment == Segment::Instruction);
            positions_seen[rows[i].prompt_id]++;
        }
        CHECK(positions_seen.size() == 3); // every instance contributed
    }

    TEST_CASE("params without an adaptive entry are rejected") {
        const auto cfg = tiny_config();
        const auto store = init_model(cfg, 53);
        const auto params = init_steering(single_layer_spec(0), cfg);
        CHECK_THROWS_AS(gate_magnitude_trace(store, cfg, params, make_task_set(9, 2, 1), 1.0f, 8, 5),
                        UsageError);
    }
}
