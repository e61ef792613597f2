#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "steerlab/analysis.hpp"
#include "steerlab/sae.hpp"

using namespace steerlab;

TEST_SUITE("batch topk") {
    TEST_CASE("one item with k = F is the identity") {
        Rng rng(1);
        const Tensor pre = Tensor::randn({1, 12}, rng);
        const auto z = batch_topk(pre, 12);
        CHECK(bitwise_equal(z, pre));
    }

    TEST_CASE("all-equal inputs keep the lowest flat indices") {
        const Tensor pre = Tensor::full({2, 6}, 3.5f);
        const auto z = batch_topk(pre, 2); // budget 4
        for (size_t i = 0; i < z.data.size(); ++i)
            CHECK(z.data[i] == (i < 4 ? 3.5f : 0.0f));
    }

    TEST_CASE("survivors equal the brute-force selection") {
        Rng rng(2);
        for (int trial = 0; trial < 30; ++trial) {
            const int B = 3 + static_cast<int>(rng.below(4));
            const int F = 8 + static_cast<int>(rng.below(8));
            const int k = 1 + static_cast<int>(rng.below(4));
            const Tensor pre = Tensor::randn({B, F}, rng);
            const auto z = batch_topk(pre, k);
            // sort oracle over (value desc, index asc)
            std::vector<size_t> idx(pre.numel());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
                if (pre.data[a] != pre.data[b]) return pre.data[a] > pre.data[b];
                return a < b;
            });
            std::vector<bool> keep(pre.numel(), false);
            for (size_t i = 0; i < static_cast<size_t>(k) * B; ++i) keep[idx[i]] = true;
            for (size_t i = 0; i < pre.numel(); ++i)
                CHECK(z.data[i] == (keep[i] ? pre.data[i] : 0.0f));
        }
    }

    TEST_CASE("exactly k*batch nonzeros, across many random batches") {
        Rng rng(3);
        for (int trial = 0; trial < 100; ++trial) {
            const int B = 2 + static_cast<int>(rng.below(6));
            const int F = 6 + static_cast<int>(rng.below(20));
            const int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(F)));
            const Tensor pre = Tensor::randn({B, F}, rng);
            const auto z = batch_topk(pre, k);
            size_t nonzeros = 0;
            for (float v : z.data) nonzeros += v != 0.0f;
            const size_t expect = std::min(static_cast<size_t>(k) * B, pre.numel());
            CHECK(nonzeros == expect);
        }
    }
}

TEST_SUITE("losses") {
    TEST_CASE("perfect reconstruction is zero loss") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 4;
        auto params = init_sae(cfg, 1);
        // zero data reconstructs to b_dec = 0 exactly
        const auto loss = sae_loss(params, cfg, Tensor::zeros({4, 8}));
        CHECK(loss.rec == 0.0);
        CHECK(loss.aux == 0.0);
    }

    TEST_CASE("no dead features means no auxiliary loss") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 4;
        auto params = init_sae(cfg, 1);
        Rng rng(5);
        const auto loss = sae_loss(params, cfg, Tensor::randn({6, 8}, rng), {});
        CHECK(loss.aux == 0.0);
        CHECK(loss.rec > 0.0);
    }

    TEST_CASE("reconstruction loss matches an elementwise recomputation") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 4;
        auto params = init_sae(cfg, 1);
        Rng rng(6);
        const Tensor batch = Tensor::randn({5, 8}, rng);
        const auto loss = sae_loss(params, cfg, batch);
        const auto recon = sae_decode(params, batch_topk(sae_preacts(params, batch), cfg.k));
        double rec = 0.0;
        for (size_t i = 0; i < batch.data.size(); ++i) {
            const double e = static_cast<double>(batch.data[i]) - recon.data[i];
            rec += e * e;
        }
        rec /= batch.dim(0);
        CHECK(std::abs(loss.rec - rec) < 1e-6 * std::max(1.0, rec));
    }
}

TEST_SUITE("training") {
    TEST_CASE("zero steps return the initialization") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 2;
        Rng rng(7);
        const Tensor data = Tensor::randn({64, 8}, rng);
        SaeTrainConfig tc;
        tc.steps = 0;
        tc.seed = 3;
        const auto res = train_sae(cfg, data, tc);
        const auto fresh = init_sae(cfg, 3);
        CHECK(bitwise_equal(res.params.w_enc, fresh.w_enc));
        CHECK(bitwise_equal(res.params.w_dec, fresh.w_dec));
    }

    TEST_CASE("same seed twice gives identical loss curves") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 2;
        Rng rng(8);
        const Tensor data = Tensor::randn({128, 8}, rng);
        SaeTrainConfig tc;
        tc.steps = 40;
        tc.batch_size = 16;
        tc.seed = 5;
        const auto a = train_sae(cfg, data, tc);
        const auto b = train_sae(cfg, data, tc);
        CHECK(a.loss_curve == b.loss_curve);
        CHECK(bitwise_equal(a.params.w_dec, b.params.w_dec));
    }

    TEST_CASE("decoder columns stay unit after training steps") {
        SaeConfig cfg;
        cfg.d_in = 8;
        cfg.dict_size = 16;
        cfg.k = 2;
        Rng rng(9);
        const Tensor data = Tensor::randn({128, 8}, rng);
        SaeTrainConfig tc;
        tc.steps = 25;
        tc.batch_size = 16;
        tc.seed = 6;
        const auto res = train_sae(cfg, data, tc);
        for (double n : decoder_column_norms(res.params)) CHECK(std::abs(n - 1.0) < 1e-5);
    }

    TEST_CASE("rank-1 synthetic diffs are explained by one feature") {
        Rng rng(10);
        Tensor dir = Tensor::randn({16}, rng);
        double norm = 0.0;
        for (float v : dir.data) norm += static_cast<double>(v) * v;
        for (auto& v : dir.data) v = static_cast<float>(v / std::sqrt(norm));
        const int n = 1024;
        Tensor data({n, 16});
        for (int i = 0; i < n; ++i) {
            const float alpha = static_cast<float>(rng.normal()) * 2.0f;
            for (int j = 0; j < 16; ++j) data.at(i, j) = alpha * dir.at(j);
        }
        SaeConfig cfg;
        cfg.d_in = 16;
        cfg.dict_size = 32;
        cfg.k = 1;
        SaeTrainConfig tc;
        tc.steps = 1200;
        tc.batch_size = 64;
        tc.seed = 4;
        const auto res = train_sae(cfg, data, tc);
        double best = 0.0;
        for (int f = 0; f < cfg.dict_size; ++f) {
            Tensor col({16});
            for (int j = 0; j < 16; ++j) col.at(j) = res.params.w_dec.at(j, f);
            best = std::max(best,
                            std::abs(cosine_guarded(col.data.data(), dir.data.data(), 16)));
        }
        CHECK(best >= 0.95);
        // holdout variance is almost fully explained
        CHECK(res.holdout_rec_final <= 0.05f * res.holdout_rec_initial + 1e-3f);
    }
}

namespace {

DiffDataset designed_dataset() {
    // 10 correct and 10 incorrect generations, one row each; feature 0 reads
    // coordinate 0, feature 1 reads coordinate 1
    DiffDataset ds;
    const int n = 20;
    ds.data = Tensor({n, 2});
    for (int g = 0; g < n; ++g) {
        const bool correct = g < 10;
        // fire feature 0 on 1 correct and 6 incorrect generations
        const bool fire = correct ? g == 0 : g < 16;
        ds.data.at(g, 0) = fire ? 10.0f : 0.0f;
        ds.data.at(g, 1) = fire ? 0.0f : 10.0f;
        ds.rows.push_back({static_cast<uint64_t>(g), g, 0, correct ? 1 : 0});
    }
    return ds;
}

SaeParams identity_sae() {
    SaeParams p;
    p.w_enc = Tensor({4, 2});
    p.w_enc.at(0, 0) = 1.0f;
    p.w_enc.at(1, 1) = 1.0f;
    p.b_enc = Tensor::zeros({4});
    p.w_dec = Tensor({2, 4});
    p.w_dec.at(0, 0) = 1.0f;
    p.w_dec.at(1, 1) = 1.0f;
    p.b_dec = Tensor::zeros({2});
    return p;
}

} // namespace

TEST_SUITE("correctness association") {
    TEST_CASE("worked fixture: fires on 60% incorrect, 10% correct") {
        CHECK(cas_value(0.1, 0.6) == -0.5);
        const auto ds = designed_dataset();
        SaeConfig cfg;
        cfg.d_in = 2;
        cfg.dict_size = 4;
        cfg.k = 1;
        const auto stats = cas_scores(identity_sae(), cfg, ds);
        // ranked ascending: feature 0 is the most incorrectness-associated
        CHECK(stats.front().feature == 0);
        CHECK(stats.front().r_incorrect == doctest::Approx(0.6));
        CHECK(stats.front().r_correct == doctest::Approx(0.1));
        CHECK(stats.front().cas == doctest::Approx(-0.5));
    }

    TEST_CASE("a feature that never fires has zero score") {
        const auto ds = designed_dataset();
        SaeConfig cfg;
        cfg.d_in = 2;
        cfg.dict_size = 4;
        cfg.k = 1;
        const auto stats = cas_scores(identity_sae(), cfg, ds);
        bool found = false;
        for (const auto& s : stats)
            if (s.feature == 3) {
                CHECK(s.activation_count == 0);
                CHECK(s.cas == 0.0);
                found = true;
            }
        CHECK(found);
    }

    TEST_CASE("scores match a brute-force per-generation scan") {
        Rng rng(11);
        SaeConfig cfg;
        cfg.d_in = 6;
        cfg.dict_size = 12;
        cfg.k = 2;
        const auto params = init_sae(cfg, 2);
        DiffDataset ds;
        const int gens = 40, rows_per_gen = 3;
        ds.data = Tensor({gens * rows_per_gen, 6});
        for (int g = 0; g < gens; ++g)
            for (int r = 0; r < rows_per_gen; ++r) {
                for (int j = 0; j < 6; ++j)
                    ds.data.at(g * rows_per_gen + r, j) = static_cast<float>(rng.normal());
                ds.rows.push_back({static_cast<uint64_t>(g), g, r, g % 3 == 0 ? 1 : 0});
            }
        const auto stats = cas_scores(params, cfg, ds);

        // independent scan from the same latents
        const auto z = batch_topk(sae_preacts(params, ds.data), cfg.k);
        int n_correct = 0, n_incorrect = 0;
        for (int g = 0; g < gens; ++g) (g % 3 == 0 ? n_correct : n_incorrect)++;
        for (const auto& s : stats) {
            int on_c = 0, on_i = 0;
            for (int g = 0; g < gens; ++g) {
                bool fired = false;
                for (int r = 0; r < rows_per_gen; ++r)
                    fired = fired || z.at(g * rows_per_gen + r, s.feature) > 0.0f;
                if (fired) (g % 3 == 0 ? on_c : on_i)++;
            }
            CHECK(s.r_correct == doctest::Approx(static_cast<double>(on_c) / n_correct));
            CHECK(s.r_incorrect == doctest::Approx(static_cast<double>(on_i) / n_incorrect));
        }
    }

    TEST_CASE("scores are invariant to generation order") {
        Rng rng(12);
        SaeConfig cfg;
        cfg.d_in = 6;
        cfg.dict_size = 12;
        cfg.k = 2;
        const auto params = init_sae(cfg, 2);
        DiffDataset ds;
        const int n = 60;
        ds.data = Tensor({n, 6});
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < 6; ++j) ds.data.at(i, j) = static_cast<float>(rng.normal());
            ds.rows.push_back({static_cast<uint64_t>(i), i, 0, i % 2});
        }
        const auto a = cas_scores(params, cfg, ds);
        // reverse the rows
        DiffDataset rev = ds;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < 6; ++j) rev.data.at(i, j) = ds.data.at(n - 1 - i, j);
            rev.rows[static_cast<size_t>(i)] = ds.rows[static_cast<size_t>(n - 1 - i)];
        }
        const auto b = cas_scores(params, cfg, rev);
        REQUIRE(a.size() == b.size());
        std::map<int, double> by_feature;
        for (const auto& s : a) by_feature[s.feature] = s.cas;
        for (const auto& s : b) CHECK(by_feature.at(s.feature) == s.cas);
    }

    TEST_CASE("an empty class is an error that names it") {
        DiffDataset ds;
        ds.data = Tensor({2, 2});
        ds.rows = {{0, 0, 0, 1}, {1, 1, 0, 1}}; // only correct generations
        SaeConfig cfg;
        cfg.d_in = 2;
        cfg.dict_size = 4;
        cfg.k = 1;
        CHECK_THROWS_WITH_AS(cas_scores(identity_sae(), cfg, ds),
                             doctest::Contains("incorrect"), ConfigError);
    }
}

TEST_SUITE("diff dataset io") {
    TEST_CASE("round trip preserves rows and data") {
        DiffDataset ds;
        ds.data = Tensor({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
        ds.rows = {{11, 0, 0, 1}, {11, 0, 1, 1}, {22, 1, 0, 0}};
        ds.inject_layer = 2;
        ds.target_layer = 3;
        const auto path =
            (std::filesystem::temp_directory_path() / "steerlab_diffs.stlb").string();
        save_diff_dataset(path, ds);
        const auto loaded = load_diff_dataset(path);
        CHECK(bitwise_equal(loaded.data, ds.data));
        REQUIRE(loaded.rows.size() == 3);
        CHECK(loaded.rows[2].prompt_id == 22);
        CHECK(loaded.rows[2].correct == 0);
        CHECK(loaded.inject_layer == 2);
        CHECK(loaded.target_layer == 3);
    }
}
