#include "steerlab/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "steerlab/analysis.hpp"
#include "steerlab/archive.hpp"
#include "steerlab/kernels.hpp"
#include "steerlab/tape.hpp"

namespace steerlab {

void SaeConfig::validate() const {
    if (d_in < 1) throw ConfigError("sae: d_in must be positive");
    if (dict_size < d_in) throw ConfigError("sae: dict_size must be >= d_in");
    if (k < 1 || k > dict_size) throw ConfigError("sae: k must be in [1, dict_size]");
    if (dead_window < 1) throw ConfigError("sae: dead_window must be positive");
    if (aux_k < 1) throw ConfigError("sae: aux_k must be positive");
}

SaeParams init_sae(const SaeConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, seed_stream::kSaeInit));
    SaeParams p;
    p.w_dec = Tensor::randn({cfg.d_in, cfg.dict_size}, rng, 1.0f);
    normalize_decoder_columns(p);
    // tied transpose init for the encoder
    p.w_enc = Tensor({cfg.dict_size, cfg.d_in});
    for (int f = 0; f < cfg.dict_size; ++f)
        for (int j = 0; j < cfg.d_in; ++j) p.w_enc.at(f, j) = p.w_dec.at(j, f);
    p.b_enc = Tensor::zeros({cfg.dict_size});
    p.b_dec = Tensor::zeros({cfg.d_in});
    return p;
}

void normalize_decoder_columns(SaeParams& params) {
    const int d = params.w_dec.dim(0), F = params.w_dec.dim(1);
    for (int f = 0; f < F; ++f) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j)
            ss += static_cast<double>(params.w_dec.at(j, f)) * params.w_dec.at(j, f);
        const float inv = ss > 0.0 ? static_cast<float>(1.0 / std::sqrt(ss)) : 1.0f;
        for (int j = 0; j < d; ++j) params.w_dec.at(j, f) *= inv;
    }
}

std::vector<double> decoder_column_norms(const SaeParams& params) {
    const int d = params.w_dec.dim(0), F = params.w_dec.dim(1);
    std::vector<double> out(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j)
            ss += static_cast<double>(params.w_dec.at(j, f)) * params.w_dec.at(j, f);
        out[static_cast<size_t>(f)] = std::sqrt(ss);
    }
    return out;
}

Tensor batch_topk(const Tensor& pre, int k, Tensor* mask_out) {
    if (pre.rank() != 2) throw ShapeError("batch_topk: rank-2 input expected");
    const size_t n = pre.numel();
    const size_t budget = static_cast<size_t>(k) * static_cast<size_t>(pre.dim(0));
    Tensor out = Tensor::zeros(pre.shape);
    Tensor mask = Tensor::zeros(pre.shape);
    if (budget >= n) {
        out.data = pre.data;
        for (auto& m : mask.data) m = 1.0f;
    } else {
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::nth_element(idx.begin(), idx.begin() + static_cast<long>(budget), idx.end(),
                         [&](size_t a, size_t b) {
                             if (pre.data[a] != pre.data[b]) return pre.data[a] > pre.data[b];
                             return a < b; // ties keep the lower flat index
                         });
        for (size_t i = 0; i < budget; ++i) {
            out.data[idx[i]] = pre.data[idx[i]];
            mask.data[idx[i]] = 1.0f;
        }
    }
    if (mask_out) *mask_out = std::move(mask);
    return out;
}

Tensor sae_preacts(const SaeParams& params, const Tensor& batch) {
    if (batch.rank() != 2 || batch.dim(1) != params.w_enc.dim(1))
        throw ShapeError("sae: batch width must equal d_in");
    const int B = batch.dim(0), F = params.w_enc.dim(0), d = params.w_enc.dim(1);
    Tensor pre({B, F});
    kernels::gemm_nt(B, F, d, batch.data.data(), params.w_enc.data.data(), pre.data.data());
    for (int b = 0; b < B; ++b)
        for (int f = 0; f < F; ++f) pre.at(b, f) += params.b_enc.at(f);
    return pre;
}

Tensor sae_decode(const SaeParams& params, const Tensor& z) {
    const int B = z.dim(0), F = z.dim(1), d = params.w_dec.dim(0);
    if (F != params.w_dec.dim(1)) throw ShapeError("sae: latent width must equal dict_size");
    Tensor out({B, d});
    kernels::gemm_nt(B, d, F, z.data.data(), params.w_dec.data.data(), out.data.data());
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < d; ++j) out.at(b, j) += params.b_dec.at(j);
    return out;
}

namespace {

// per-item top-aux_k mask over dead features, by pre-activation value
Tensor aux_mask_for(const Tensor& pre, const std::vector<uint8_t>& dead, int aux_k) {
    const int B = pre.dim(0), F = pre.dim(1);
    Tensor mask = Tensor::zeros(pre.shape);
    std::vector<int> dead_idx;
    for (int f = 0; f < F; ++f)
        if (dead[static_cast<size_t>(f)]) dead_idx.push_back(f);
    if (dead_idx.empty()) return mask;
    const size_t take = std::min(static_cast<size_t>(aux_k), dead_idx.size());
    for (int b = 0; b < B; ++b) {
        std::vector<int> order = dead_idx;
        std::nth_element(order.begin(), order.begin() + static_cast<long>(take), order.end(),
                         [&](int x, int y) {
                             if (pre.at(b, x) != pre.at(b, y)) return pre.at(b, x) > pre.at(b, y);
                             return x < y;
                         });
        for (size_t i = 0; i < take; ++i) mask.at(b, order[i]) = 1.0f;
    }
    return mask;
}

} // namespace

SaeLoss sae_loss(const SaeParams& params, const SaeConfig& cfg, const Tensor& batch,
                 const std::vector<uint8_t>& dead) {
    const int B = batch.dim(0);
    const Tensor pre = sae_preacts(params, batch);
    const Tensor z = batch_topk(pre, cfg.k);
    const Tensor recon = sae_decode(params, z);
    SaeLoss loss;
    for (size_t i = 0; i < batch.data.size(); ++i) {
        const double e = static_cast<double>(batch.data[i]) - recon.data[i];
        loss.rec += e * e;
    }
    loss.rec /= B;

    if (!dead.empty()) {
        const Tensor amask = aux_mask_for(pre, dead, cfg.aux_k);
        Tensor zaux = Tensor::zeros(pre.shape);
        for (size_t i = 0; i < pre.data.size(); ++i) zaux.data[i] = pre.data[i] * amask.data[i];
        const int d = params.w_dec.dim(0);
        Tensor recon_aux({B, d});
        kernels::gemm_nt(B, d, cfg.dict_size, zaux.data.data(), params.w_dec.data.data(),
                         recon_aux.data.data());
        for (size_t i = 0; i < batch.data.size(); ++i) {
            const double resid = static_cast<double>(batch.data[i]) - recon.data[i];
            const double e = resid - static_cast<double>(recon_aux.data[i]);
            loss.aux += e * e;
        }
        loss.aux /= B;
    }
    return loss;
}

SaeTrainResult train_sae(const SaeConfig& cfg, const Tensor& dataset, const SaeTrainConfig& tc) {
    cfg.validate();
    if (dataset.rank() != 2 || dataset.dim(1) != cfg.d_in)
        throw ShapeError("sae train: dataset must be [N, d_in]");
    const int N = dataset.dim(0);
    if (N < 2) throw UsageError("sae train: dataset too small");

    const int holdout_n = std::min(N - 1, static_cast<int>(N * tc.holdout_frac));
    const int train_n = N - holdout_n;
    const int B = std::min(tc.batch_size, train_n);

    SaeTrainResult res;
    res.params = init_sae(cfg, tc.seed);

    auto slice_rows = [&](int begin, int count) {
        Tensor out({count, cfg.d_in});
        for (int i = 0; i < count; ++i)
            for (int j = 0; j < cfg.d_in; ++j) out.at(i, j) = dataset.at(begin + i, j);
        return out;
    };
    const Tensor holdout = holdout_n > 0 ? slice_rows(train_n, holdout_n) : Tensor();

    auto holdout_rec = [&]() {
        if (holdout_n == 0) return 0.0f;
        return static_cast<float>(sae_loss(res.params, cfg, holdout).rec);
    };
    res.holdout_rec_initial = holdout_rec();

    Adam opt(tc.adam);
    std::vector<int> since_fired(static_cast<size_t>(cfg.dict_size), 0);

    for (int step = 0; step < tc.steps; ++step) {
        Rng rng(derive_seed(tc.seed, seed_stream::kSaeBatch, static_cast<uint64_t>(step)));
        Tensor batch({B, cfg.d_in});
        for (int b = 0; b < B; ++b) {
            const int row = static_cast<int>(rng.below(static_cast<uint64_t>(train_n)));
            for (int j = 0; j < cfg.d_in; ++j) batch.at(b, j) = dataset.at(row, j);
        }

        std::vector<uint8_t> dead(static_cast<size_t>(cfg.dict_size), 0);
        bool any_dead = false;
        for (int f = 0; f < cfg.dict_size; ++f)
            if (since_fired[static_cast<size_t>(f)] >= cfg.dead_window) {
                dead[static_cast<size_t>(f)] = 1;
                any_dead = true;
            }

        Tape tape(true);
        const auto w_enc = tape.leaf(res.params.w_enc, true);
        const auto b_enc = tape.leaf(res.params.b_enc, true);
        const auto w_dec = tape.leaf(res.params.w_dec, true);
        const auto b_dec = tape.leaf(res.params.b_dec, true);
        const auto d_in = tape.leaf(batch, false);

        const auto pre = tape.add_rowvec(tape.matmul_nt(d_in, w_enc), b_enc);
        Tensor mask;
        const Tensor z_val = batch_topk(tape.val(pre), cfg.k, &mask);
        // straight-through support: gradient passes only through survivors
        const auto z = tape.mul(pre, tape.leaf(mask, false));
        const auto recon = tape.add_rowvec(tape.matmul_nt(z, w_dec), b_dec);
        const auto err = tape.sub(d_in, recon);
        const auto l_rec = tape.scale(tape.sum(tape.mul(err, err)), 1.0f / static_cast<float>(B));

        auto loss = l_rec;
        if (any_dead) {
            const auto amask = tape.leaf(aux_mask_for(tape.val(pre), dead, cfg.aux_k), false);
            const auto zaux = tape.mul(pre, amask);
            const auto recon_aux = tape.matmul_nt(zaux, w_dec);
            const auto resid = tape.leaf(tape.val(err), false); // detached target
            const auto ediff = tape.sub(resid, recon_aux);
            const auto l_aux =
                tape.scale(tape.sum(tape.mul(ediff, ediff)), 1.0f / static_cast<float>(B));
            loss = tape.add(l_rec, tape.scale(l_aux, cfg.aux_coef));
        }

        const float loss_val = tape.val(loss).at(0);
        if (std::isnan(loss_val))
            throw TrainingError("sae train: NaN loss at step " + std::to_string(step));
        res.loss_curve.push_back(loss_val);

        tape.backward(loss);
        opt.step_begin();
        opt.update("w_enc", res.params.w_enc, tape.grad(w_enc));
        opt.update("b_enc", res.params.b_enc, tape.grad(b_enc));
        opt.update("w_dec", res.params.w_dec, tape.grad(w_dec));
        opt.update("b_dec", res.params.b_dec, tape.grad(b_dec));
        normalize_decoder_columns(res.params);

        for (int f = 0; f < cfg.dict_size; ++f) {
            bool fired = false;
            for (int b = 0; b < B && !fired; ++b) fired = z_val.at(b, f) != 0.0f;
            since_fired[static_cast<size_t>(f)] = fired ? 0 : since_fired[static_cast<size_t>(f)] + 1;
        }
    }

    res.holdout_rec_final = holdout_rec();
    int dead_now = 0;
    for (int f = 0; f < cfg.dict_size; ++f)
        if (since_fired[static_cast<size_t>(f)] >= cfg.dead_window) ++dead_now;
    res.dead_fraction = static_cast<double>(dead_now) / cfg.dict_size;
    return res;
}

// ---------------------------------------------------------------------------

DiffDataset collect_diffs(const WeightStore& store, const ModelConfig& cfg,
                          const SteeringParams& steering, int inject_layer, int target_layer,
                          const std::vector<TaskInstance>& instances, float temperature,
                          int max_new, uint64_t seed) {
    if (steering.entries.size() != 1 || steering.entries[0].kind != SteerKind::Constant ||
        steering.entries[0].site.site != Site::ResidPost ||
        steering.entries[0].site.layer != inject_layer)
        throw UsageError("collect_diffs: expects one constant vector at resid_post of the"
                         " injection layer");
    if (target_layer < inject_layer || target_layer >= cfg.n_layers)
        throw UsageError("collect_diffs: target layer out of range");

    const Tensor& vec = steering.entries[0].s;
    const SteeringSetup setup = steering.setup();

    DiffDataset ds;
    ds.inject_layer = inject_layer;
    ds.target_layer = target_layer;
    std::vector<std::vector<float>> row_data;

    for (size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        Rng rng(derive_seed(seed, seed_stream::kEval, static_cast<uint64_t>(i)));
        SampleConfig sc{temperature, max_new, vocab::kEoa};
        const auto completion = sample(store, cfg, inst.prompt, sc, rng, setup);
        const auto rec = verify(completion, inst);
        std::vector<int> seq = inst.prompt;
        seq.insert(seq.end(), completion.begin(), completion.end());

        const auto df = delta_f(store, cfg, vec, inject_layer, seq, {target_layer});
        const Tensor& shift = df.at(target_layer);
        for (int pos = 0; pos < shift.dim(0); ++pos) {
            DiffDataset::Row r;
            r.prompt_id = inst.seed;
            r.gen_index = static_cast<int>(i);
            r.position = pos;
            r.correct = rec.reward;
            ds.rows.push_back(r);
            row_data.emplace_back(shift.row(pos), shift.row(pos) + cfg.d_model);
        }
    }

    ds.data = Tensor({static_cast<int>(row_data.size()), cfg.d_model});
    for (size_t r = 0; r < row_data.size(); ++r)
        for (int j = 0; j < cfg.d_model; ++j) ds.data.at(static_cast<int>(r), j) = row_data[r][static_cast<size_t>(j)];
    return ds;
}

void save_diff_dataset(const std::string& path, const DiffDataset& ds) {
    save_tensors(path, {{"diffs", ds.data}});
    std::ofstream rf(path + ".rows.csv", std::ios::trunc);
    rf << "gen_index,prompt_id,position,correct\n";
    for (const auto& r : ds.rows)
        rf << r.gen_index << "," << r.prompt_id << "," << r.position << "," << r.correct << "\n";
    nlohmann::json meta{{"inject_layer", ds.inject_layer}, {"target_layer", ds.target_layer}};
    std::ofstream mf(path + ".meta.json", std::ios::trunc);
    mf << meta.dump(2) << "\n";
}

DiffDataset load_diff_dataset(const std::string& path) {
    DiffDataset ds;
    auto tensors = load_tensors(path);
    if (!tensors.count("diffs")) throw FormatError("diff dataset: missing 'diffs' tensor");
    ds.data = std::move(tensors.at("diffs"));
    std::ifstream rf(path + ".rows.csv");
    if (!rf) throw DependencyError("diff dataset: missing rows sidecar for " + path);
    std::string line;
    std::getline(rf, line); // header
    while (std::getline(rf, line)) {
        if (line.empty()) continue;
        DiffDataset::Row r;
        std::istringstream is(line);
        char comma;
        unsigned long long pid = 0;
        is >> r.gen_index >> comma >> pid >> comma >> r.position >> comma >> r.correct;
        r.prompt_id = pid;
        ds.rows.push_back(r);
    }
    if (static_cast<int>(ds.rows.size()) != ds.data.dim(0))
        throw FormatError("diff dataset: row sidecar does not match tensor rows");
    std::ifstream mf(path + ".meta.json");
    if (mf) {
        nlohmann::json meta = nlohmann::json::parse(mf, nullptr, true);
        ds.inject_layer = meta.value("inject_layer", 0);
        ds.target_layer = meta.value("target_layer", 0);
    }
    return ds;
}

// ---------------------------------------------------------------------------

double cas_value(double r_correct, double r_incorrect) { return r_correct - r_incorrect; }

std::vector<FeatureStats> cas_scores(const SaeParams& params, const SaeConfig& cfg,
                                     const DiffDataset& ds) {
    if (ds.rows.empty()) throw UsageError("cas: empty dataset");
    const Tensor pre = sae_preacts(params, ds.data);
    const Tensor z = batch_topk(pre, cfg.k);
    const int N = z.dim(0), F = z.dim(1);

    // generations and their labels
    std::map<int, int> gen_label;
    for (const auto& r : ds.rows) gen_label[r.gen_index] = r.correct;
    int n_correct = 0, n_incorrect = 0;
    for (const auto& [g, c] : gen_label) (c ? n_correct : n_incorrect)++;
    if (n_correct == 0) throw ConfigError("cas: no correct generations in the dataset");
    if (n_incorrect == 0) throw ConfigError("cas: no incorrect generations in the dataset");

    std::map<int, int> gen_slot;
    int slot = 0;
    for (const auto& [g, c] : gen_label) gen_slot[g] = slot++;
    const int G = slot;

    std::vector<uint8_t> fires(static_cast<size_t>(F) * static_cast<size_t>(G), 0);
    std::vector<int> act_count(static_cast<size_t>(F), 0);
    for (int r = 0; r < N; ++r) {
        const int gs = gen_slot.at(ds.rows[static_cast<size_t>(r)].gen_index);
        for (int f = 0; f < F; ++f) {
            if (z.at(r, f) > 0.0f) {
                fires[static_cast<size_t>(f) * static_cast<size_t>(G) + static_cast<size_t>(gs)] = 1;
                ++act_count[static_cast<size_t>(f)];
            }
        }
    }

    std::vector<FeatureStats> out(static_cast<size_t>(F));
    for (int f = 0; f < F; ++f) {
        int on_correct = 0, on_incorrect = 0;
        for (const auto& [g, c] : gen_label) {
            const int gs = gen_slot.at(g);
            if (fires[static_cast<size_t>(f) * static_cast<size_t>(G) + static_cast<size_t>(gs)])
                (c ? on_correct : on_incorrect)++;
        }
        auto& st = out[static_cast<size_t>(f)];
        st.feature = f;
        st.activation_count = act_count[static_cast<size_t>(f)];
        st.r_correct = static_cast<double>(on_correct) / n_correct;
        st.r_incorrect = static_cast<double>(on_incorrect) / n_incorrect;
        st.cas = cas_value(st.r_correct, st.r_incorrect);
    }
    std::stable_sort(out.begin(), out.end(), [](const FeatureStats& a, const FeatureStats& b) {
        if (a.cas != b.cas) return a.cas < b.cas;
        return a.feature < b.feature;
    });
    return out;
}

} // namespace steerlab
