#pragma once

// Dump-directory workflows: Betti and Fisher ranking, cluster diagnostics,
// and the end-to-end demo on the toy network.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <thread>
#include <vector>

#include "adabet/diagnostics.hpp"
#include "adabet/error.hpp"
#include "adabet/fisher.hpp"
#include "adabet/ingest.hpp"
#include "adabet/selection.hpp"
#include "adabet/tinynet.hpp"

namespace adabet {

/// ADABET_THREADS if set, otherwise the hardware concurrency (at least 1).
inline std::size_t worker_count() {
    if (const char* env = std::getenv("ADABET_THREADS"); env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1) throw DataError(std::string("ADABET_THREADS must be a positive integer, got '") + env + "'");
        return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs f(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots by f; if several calls throw, the exception of
/// the lowest index is rethrown, so failures are as deterministic as output.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                f(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
    if (threads == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct PipelineOptions {
    std::size_t threads = 1;
    std::size_t max_batches = 0;  // 0: use every dumped batch
};

namespace detail {

inline void check_meta_covers_dumps(const DumpDirectory& dumps, std::span<const LayerMeta> metas) {
    for (auto layer : dumps.layers())
        if (layer >= metas.size())
            throw DataError("dumps contain layer " + std::to_string(layer) + " which meta.json does not describe");
}

inline std::vector<Tensor> limit_batches(std::vector<Tensor> batches, std::vector<std::string>* ids, std::size_t max) {
    if (max > 0 && batches.size() > max) {
        batches.resize(max);
        if (ids) ids->resize(max);
    }
    return batches;
}

inline ActivationPool load_pool(const DumpDirectory& dumps, const LayerMeta& meta, const SelectionConfig& cfg,
                                std::size_t max_batches) {
    std::vector<std::string> ids;
    auto batches = limit_batches(dumps.load_activations(meta.index, &ids), &ids, max_batches);
    for (const auto& b : batches) check_against_dump(meta, b);
    return accumulate_pool(batches, meta, cfg.pool_cap, cfg.seed, ids);
}

}  // namespace detail

/// Scores each trainable unit's representative layer from its pooled
/// activation dumps and ranks them. Reads activation files only.
inline SelectionManifest betti_rank(const DumpDirectory& dumps, std::span<const LayerMeta> metas,
                                    const SelectionConfig& cfg, const PipelineOptions& opts = {}) {
    cfg.validate();
    detail::check_meta_covers_dumps(dumps, metas);
    const auto units = trainable_units(metas);
    require(!units.empty(), "meta.json describes no trainable layers");

    std::vector<LayerScore> scores(units.size());
    std::vector<PoolRecord> pools(units.size());
    parallel_for(units.size(), opts.threads, [&](std::size_t u) {
        const auto& meta = metas[units[u].representative];
        const auto pool = detail::load_pool(dumps, meta, cfg, opts.max_batches);
        scores[u] = score_layer(pool, meta, cfg);
        pools[u] = {meta.index, pool.rows, pool.sources};
    });
    auto manifest = rank_and_select(scores, metas, cfg);
    manifest.pools = std::move(pools);
    return manifest;
}

/// Fisher baseline from activation and .grad.npy dumps. A group's score sums
/// the deltas and parameter counts of its trainable members.
inline SelectionManifest fisher_rank_dumps(const DumpDirectory& dumps, std::span<const LayerMeta> metas, double rho,
                                           const PipelineOptions& opts = {}) {
    detail::check_meta_covers_dumps(dumps, metas);
    const auto units = trainable_units(metas);
    require(!units.empty(), "meta.json describes no trainable layers");

    auto concat = [](const std::vector<Tensor>& parts) {
        Tensor all = parts.front();
        all.shape[0] = 0;
        all.data.clear();
        for (const auto& p : parts) {
            if (p.per_sample() != parts.front().per_sample())
                throw DataError("batches of one layer disagree in per-sample size");
            all.data.insert(all.data.end(), p.data.begin(), p.data.end());
            all.shape[0] += p.batch();
        }
        return all;
    };

    std::vector<std::pair<FisherScore, LayerMeta>> scored(units.size());
    parallel_for(units.size(), opts.threads, [&](std::size_t u) {
        double delta = 0.0;
        std::size_t params = 0;
        for (auto layer : units[u].members) {
            const auto& meta = metas[layer];
            auto acts = detail::limit_batches(dumps.load_activations(layer), nullptr, opts.max_batches);
            auto grads = detail::limit_batches(dumps.load_gradients(layer), nullptr, opts.max_batches);
            for (const auto& a : acts) check_against_dump(meta, a);
            try {
                delta += fisher_delta(concat(acts), concat(grads));
            } catch (const DataError& e) {
                throw DataError("layer " + std::to_string(layer) + ": " + e.what());
            }
            params += meta.param_count;
        }
        const auto& rep = metas[units[u].representative];
        scored[u] = {make_fisher_score(rep.index, delta, params), rep};
    });
    return fisher_rank(scored, rho, metas);
}

struct DiagnoseOptions {
    std::size_t pca_dim = 2;
    std::optional<double> eps;  // default: half the median pairwise distance after PCA
    std::size_t min_pts = kDefaultMinPts;
};

inline DiagnosticsReport diagnose(const DumpDirectory& dumps, std::span<const LayerMeta> metas,
                                  const SelectionConfig& cfg, const DiagnoseOptions& dopts,
                                  const PipelineOptions& opts = {}) {
    cfg.validate();
    require(dopts.pca_dim >= 1, "--pca must be at least 1");
    detail::check_meta_covers_dumps(dumps, metas);
    const auto units = trainable_units(metas);
    require(!units.empty(), "meta.json describes no trainable layers");

    DiagnosticsReport d;
    d.reports.resize(units.size());
    d.raw_b1.resize(units.size());
    parallel_for(units.size(), opts.threads, [&](std::size_t u) {
        const auto& meta = metas[units[u].representative];
        const auto pool = detail::load_pool(dumps, meta, cfg, opts.max_batches);
        d.raw_b1[u] = score_layer(pool, meta, cfg).raw_b1;
        const auto reduced = pca_reduce(pool, std::min({dopts.pca_dim, pool.rows, pool.cols}));
        const double eps = dopts.eps ? *dopts.eps : default_eps(reduced);
        d.reports[u] = dbscan_count(reduced, eps, dopts.min_pts);
    });
    std::vector<double> clusters, betti;
    for (std::size_t u = 0; u < units.size(); ++u) {
        clusters.push_back(static_cast<double>(d.reports[u].n_clusters));
        betti.push_back(static_cast<double>(d.raw_b1[u]));
    }
    d.spearman = spearman(clusters, betti);
    return d;
}

/// meta.json skeleton inferred from activation dumps: one trainable,
/// ungrouped entry per layer with param_count left at 0 for the user to fill.
inline std::vector<LayerMeta> meta_template(const DumpDirectory& dumps) {
    std::vector<LayerMeta> metas;
    const auto layers = dumps.layers();
    require(!layers.empty(), "no activation dumps found in " + dumps.root().string());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] != i) throw DataError("dump layer indices must be contiguous from 0 (missing layer " + std::to_string(i) + ")");
        const auto batches = dumps.load_activations(i);
        LayerMeta m;
        m.index = i;
        m.name = "layer" + std::to_string(i);
        m.act_elems_per_sample = batches.front().per_sample();
        for (const auto& b : batches)
            if (b.per_sample() != m.act_elems_per_sample)
                throw DataError("layer " + std::to_string(i) + ": batches disagree in per-sample size");
        metas.push_back(std::move(m));
    }
    return metas;
}

// ---------------------------------------------------------------------------
// Demo

/// Writes activations (f32) and per-sample output gradients (.grad.npy, f32)
/// for the first n_batches * batch_size rows of `split`, plus meta.json.
inline void write_dumps(const tinynet::DenseNet& net, const tinynet::Split& split, std::size_t dim,
                        std::size_t n_batches, std::size_t batch_size, const std::filesystem::path& dir,
                        bool with_grads = true) {
    require(n_batches >= 1 && batch_size >= 1, "dump: need at least one batch of at least one row");
    require(split.rows >= n_batches * batch_size,
            "dump: split has " + std::to_string(split.rows) + " rows, need " + std::to_string(n_batches * batch_size));
    std::filesystem::create_directories(dir);
    const std::vector<bool> frozen(net.layers.size(), true);
    for (std::size_t b = 0; b < n_batches; ++b) {
        const std::size_t start = b * batch_size;
        const std::span<const double> x(split.x.data() + start * dim, batch_size * dim);
        const std::span<const int> y(split.y.data() + start, batch_size);
        const auto fwd = tinynet::forward_capture(net, Tensor({batch_size, dim}, DType::f64, {x.begin(), x.end()}));
        std::optional<tinynet::Gradients> g;
        if (with_grads) g = tinynet::backward(net, x, batch_size, y, frozen, true);
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            Tensor a = fwd.activations[i];
            a.dtype = DType::f32;
            write_file(dir / dump_file_name(i, b), write_npy(a));
            if (with_grads)
                write_file(dir / dump_file_name(i, b, true),
                           write_npy(Tensor(a.shape, DType::f32, g->output_grads[i])));
        }
    }
    write_file(dir / "meta.json", to_json(tinynet::layer_metas(net)) + "\n");
}

struct DemoConfig {
    tinynet::SyntheticKind dataset = tinynet::SyntheticKind::circles;
    double rho = 0.33;
    std::size_t epochs = 30;
    std::size_t pretrain_epochs = 30;
    std::uint64_t seed = 1;
    std::size_t samples = 200;
    double noise = 0.05;
    std::vector<std::size_t> widths{2, 8, 16, 32, 64, 128, 2};
    double lr0 = 0.05;
    std::size_t batch_size = 8;
    std::size_t dump_batches = 5;
    SelectionConfig selection;  // rho is taken from DemoConfig::rho
};

struct DemoResult {
    tinynet::DenseNet pretrained;
    tinynet::Dataset target;
    SelectionManifest manifest;
    tinynet::TrainReport pretrain_report;
    tinynet::TrainReport report;
};

inline tinynet::TrainConfig demo_train_config(const DemoConfig& cfg, std::uint64_t salt) {
    tinynet::TrainConfig t;
    t.lr0 = cfg.lr0;
    t.epochs = cfg.epochs;
    t.batch_size = cfg.batch_size;
    t.seed = cfg.seed * 1000003 + salt;
    return t;
}

/// Pre-trains on blobs, then builds the relabeled target dataset.
inline std::pair<tinynet::DenseNet, tinynet::TrainReport> demo_pretrain(const DemoConfig& cfg) {
    auto net = tinynet::DenseNet::make(cfg.widths, cfg.seed);
    const auto source = tinynet::make_synthetic(tinynet::SyntheticKind::blobs, cfg.samples, 0.3, cfg.seed);
    auto t = demo_train_config(cfg, 1);
    t.epochs = cfg.pretrain_epochs;
    auto report = tinynet::train(net, source, t);
    return {std::move(net), std::move(report)};
}

inline tinynet::Dataset demo_target(const DemoConfig& cfg) {
    return tinynet::relabeled(tinynet::make_synthetic(cfg.dataset, cfg.samples, cfg.noise, cfg.seed + 7919));
}

/// Pre-train, dump target activations into `dump_dir`, rank by Betti score,
/// retrain the selected layers on the target.
inline DemoResult run_demo(const DemoConfig& cfg, const std::filesystem::path& dump_dir,
                           const PipelineOptions& opts = {}) {
    DemoResult r;
    std::tie(r.pretrained, r.pretrain_report) = demo_pretrain(cfg);
    r.target = demo_target(cfg);
    write_dumps(r.pretrained, r.target.train, r.target.dim, cfg.dump_batches, cfg.batch_size, dump_dir);
    const DumpDirectory dumps(dump_dir);
    const auto metas = load_layer_meta(read_file(dump_dir / "meta.json"));
    auto scfg = cfg.selection;
    scfg.rho = cfg.rho;
    r.manifest = betti_rank(dumps, metas, scfg, opts);
    auto net = r.pretrained;
    r.report = tinynet::train_selective(net, r.target, r.manifest, demo_train_config(cfg, 2));
    return r;
}

}  // namespace adabet
