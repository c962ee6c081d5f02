#pragma once

// A small fully-connected classifier with explicit forward/backward passes,
// activation capture, per-layer freezing and an SGDW trainer with cosine
// learning-rate decay.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/ingest.hpp"
#include "adabet/json_writer.hpp"
#include "adabet/selection.hpp"

namespace adabet::tinynet {

enum class Activation { relu, identity };

inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw DataError("unknown activation '" + s + "'");
}

struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;  // out x in, row-major
    std::vector<double> bias;     // out
    Activation activation = Activation::relu;

    std::size_t param_count() const { return weights.size() + bias.size(); }
    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct DenseNet {
    std::vector<DenseLayer> layers;
    std::uint64_t seed = 0;

    /// He-normal weights, zero biases, relu on hidden layers and identity on
    /// the last. `widths` lists input dim, hidden widths, and class count.
    static DenseNet make(std::span<const std::size_t> widths, std::uint64_t seed) {
        require(widths.size() >= 2, "DenseNet needs at least an input and an output width");
        DenseNet net;
        net.seed = seed;
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            require(widths[i] >= 1 && widths[i + 1] >= 1, "DenseNet widths must be positive");
            DenseLayer l;
            l.in = widths[i];
            l.out = widths[i + 1];
            l.activation = i + 2 == widths.size() ? Activation::identity : Activation::relu;
            std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(l.in)));
            l.weights.resize(l.in * l.out);
            for (auto& w : l.weights) w = g(rng);
            l.bias.assign(l.out, 0.0);
            net.layers.push_back(std::move(l));
        }
        return net;
    }

    void validate() const {
        require(!layers.empty(), "DenseNet has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            require(l.weights.size() == l.in * l.out && l.bias.size() == l.out,
                    "layer " + std::to_string(i) + ": parameter sizes do not match its shape");
            if (i > 0)
                require(l.in == layers[i - 1].out, "layer " + std::to_string(i) + ": input dim " + std::to_string(l.in) +
                                                       " does not chain from previous output " +
                                                       std::to_string(layers[i - 1].out));
        }
        if (layers.back().activation != Activation::identity)
            throw DataError("final layer must use the identity activation");
    }

    std::size_t input_dim() const { return layers.front().in; }
    std::size_t classes() const { return layers.back().out; }
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.param_count();
        return n;
    }

    friend bool operator==(const DenseNet&, const DenseNet&) = default;
};

/// LayerMeta entries describing a net, one ungrouped trainable unit per layer.
inline std::vector<LayerMeta> layer_metas(const DenseNet& net) {
    std::vector<LayerMeta> metas;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        LayerMeta m;
        m.index = i;
        m.name = "dense" + std::to_string(i);
        m.param_count = net.layers[i].param_count();
        m.act_elems_per_sample = net.layers[i].out;
        metas.push_back(std::move(m));
    }
    return metas;
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SyntheticKind { blobs, moons, circles };

inline SyntheticKind parse_kind(const std::string& s) {
    if (s == "blobs") return SyntheticKind::blobs;
    if (s == "moons") return SyntheticKind::moons;
    if (s == "circles") return SyntheticKind::circles;
    throw DataError("unknown dataset '" + s + "' (expected blobs, moons or circles)");
}

struct Split {
    std::size_t rows = 0;
    std::vector<double> x;  // rows x dim
    std::vector<int> y;

    friend bool operator==(const Split&, const Split&) = default;
};

struct Dataset {
    std::size_t dim = 2;
    std::size_t classes = 2;
    Split train;
    Split test;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline Split gather(const std::vector<double>& x, const std::vector<int>& y, std::size_t dim,
                    std::span<const std::size_t> idx) {
    Split s;
    s.rows = idx.size();
    for (auto i : idx) {
        s.x.insert(s.x.end(), x.begin() + i * dim, x.begin() + (i + 1) * dim);
        s.y.push_back(y[i]);
    }
    return s;
}

}  // namespace detail

/// Two-class 2-D datasets. Class 0 gets n/2 points (rounded up), class 1 the
/// rest. Gaussian noise of std `noise` is added to every coordinate; rows are
/// shuffled with `seed` and split 70/30 into train/test.
///  blobs:   point masses at (-1,-1) and (1,1)
///  moons:   two interleaved half circles
///  circles: concentric rings of radius 1 (class 0) and 0.5 (class 1)
inline Dataset make_synthetic(SyntheticKind kind, std::size_t n, double noise, std::uint64_t seed) {
    require(n >= 4, "make_synthetic: need at least 2 points per class (n >= 4)");
    require(noise >= 0.0 && std::isfinite(noise), "make_synthetic: noise must be a finite non-negative number");
    const std::size_t n0 = (n + 1) / 2, n1 = n - n0;
    std::vector<double> x;
    std::vector<int> y;
    auto push = [&](double a, double b, int label) {
        x.push_back(a);
        x.push_back(b);
        y.push_back(label);
    };
    constexpr double pi = std::numbers::pi;
    for (int label = 0; label < 2; ++label) {
        const std::size_t m = label == 0 ? n0 : n1;
        for (std::size_t k = 0; k < m; ++k) {
            const double f = static_cast<double>(k) / static_cast<double>(m);
            switch (kind) {
                case SyntheticKind::blobs:
                    push(label == 0 ? -1.0 : 1.0, label == 0 ? -1.0 : 1.0, label);
                    break;
                case SyntheticKind::moons: {
                    const double t = pi * static_cast<double>(k) / static_cast<double>(m - 1);
                    if (label == 0)
                        push(std::cos(t), std::sin(t), 0);
                    else
                        push(1.0 - std::cos(t), 0.5 - std::sin(t), 1);
                    break;
                }
                case SyntheticKind::circles: {
                    const double r = label == 0 ? 1.0 : 0.5;
                    push(r * std::cos(2 * pi * f), r * std::sin(2 * pi * f), label);
                    break;
                }
            }
        }
    }

    std::mt19937_64 rng(seed);
    if (noise > 0) {
        std::normal_distribution<double> g(0.0, noise);
        for (auto& v : x) v += g(rng);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_train = n * 7 / 10;
    Dataset ds;
    ds.train = detail::gather(x, y, 2, std::span(order).first(n_train));
    ds.test = detail::gather(x, y, 2, std::span(order).subspan(n_train));
    return ds;
}

/// Swaps class labels y -> classes-1-y in both splits.
inline Dataset relabeled(Dataset ds) {
    for (auto* s : {&ds.train, &ds.test})
        for (auto& v : s->y) v = static_cast<int>(ds.classes) - 1 - v;
    return ds;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardResult {
    Tensor logits;
    std::vector<Tensor> activations;  // post-nonlinearity output of each layer
};

namespace detail {

/// z = x W^T + b for a batch of `rows`.
inline std::vector<double> affine(const DenseLayer& l, std::span<const double> x, std::size_t rows) {
    std::vector<double> z(rows * l.out);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * l.in;
        for (std::size_t o = 0; o < l.out; ++o) {
            const double* w = l.weights.data() + o * l.in;
            double acc = l.bias[o];
            for (std::size_t k = 0; k < l.in; ++k) acc += w[k] * xr[k];
            z[r * l.out + o] = acc;
        }
    }
    return z;
}

inline void apply(Activation a, std::vector<double>& z) {
    if (a == Activation::relu)
        for (auto& v : z) v = v > 0.0 ? v : 0.0;
}

/// Post-activation outputs of every layer; outs[i] belongs to layer i.
inline std::vector<std::vector<double>> forward_all(const DenseNet& net, std::span<const double> x, std::size_t rows) {
    std::vector<std::vector<double>> outs;
    outs.reserve(net.layers.size());
    std::span<const double> cur = x;
    for (const auto& l : net.layers) {
        auto z = affine(l, cur, rows);
        apply(l.activation, z);
        outs.push_back(std::move(z));
        cur = outs.back();
    }
    return outs;
}

inline void check_input(const DenseNet& net, std::size_t cols) {
    if (cols != net.input_dim())
        throw DataError("input has " + std::to_string(cols) + " features per sample, network expects " +
                        std::to_string(net.input_dim()));
}

}  // namespace detail

inline ForwardResult forward_capture(const DenseNet& net, const Tensor& batch) {
    net.validate();
    require(batch.shape.size() >= 1, "forward_capture: batch needs a leading sample dimension");
    detail::check_input(net, batch.per_sample());
    const std::size_t rows = batch.batch();
    auto outs = detail::forward_all(net, batch.data, rows);
    ForwardResult r;
    for (std::size_t i = 0; i < outs.size(); ++i)
        r.activations.emplace_back(std::vector<std::size_t>{rows, net.layers[i].out}, DType::f64, std::move(outs[i]));
    r.logits = r.activations.back();
    return r;
}

struct LayerGrad {
    std::vector<double> weights;
    std::vector<double> bias;
};

struct Gradients {
    double loss = 0.0;                          // mean softmax cross-entropy
    std::vector<std::optional<LayerGrad>> layers;  // empty for frozen layers
    /// dL/da_i per layer output (only filled when requested); L is the summed,
    /// not averaged, per-sample loss so rows are per-sample gradients.
    std::vector<std::vector<double>> output_grads;
};

/// Mean softmax cross-entropy and its gradients by reverse accumulation.
/// Frozen layers get no parameter gradients but still pass the signal down.
inline Gradients backward(const DenseNet& net, std::span<const double> x, std::size_t rows, std::span<const int> labels,
                          const std::vector<bool>& frozen, bool want_output_grads = false) {
    net.validate();
    require(rows >= 1, "backward: empty batch");
    require(x.size() == rows * net.input_dim(), "backward: input size does not match rows x input dim");
    require(labels.size() == rows, "backward: one label per row required");
    require(frozen.size() == net.layers.size(), "backward: frozen mask must have one entry per layer");
    const std::size_t classes = net.classes();
    for (std::size_t r = 0; r < rows; ++r)
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes)
            throw DataError("label " + std::to_string(labels[r]) + " out of range for " + std::to_string(classes) +
                            " classes");

    const auto outs = detail::forward_all(net, x, rows);
    const auto& logits = outs.back();
    Gradients g;
    g.layers.resize(net.layers.size());
    const double inv = 1.0 / static_cast<double>(rows);

    // delta holds dL_sum/dz for the current layer; scaled by 1/rows when used
    // for parameter gradients of the mean loss.
    std::vector<double> delta(rows * classes);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data() + r * classes;
        const double zmax = *std::max_element(z, z + classes);
        double sum = 0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
        const double lse = zmax + std::log(sum);
        g.loss += lse - z[labels[r]];
        for (std::size_t c = 0; c < classes; ++c)
            delta[r * classes + c] = std::exp(z[c] - lse) - (static_cast<std::size_t>(labels[r]) == c ? 1.0 : 0.0);
    }
    g.loss *= inv;

    std::size_t lowest_needed = net.layers.size();
    for (std::size_t i = 0; i < frozen.size(); ++i)
        if (!frozen[i]) {
            lowest_needed = i;
            break;
        }
    if (want_output_grads) {
        lowest_needed = 0;
        g.output_grads.resize(net.layers.size());
    }

    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const auto& l = net.layers[li];
        // delta is dL/d(output) here; turn it into dL/dz through the nonlinearity.
        if (want_output_grads) g.output_grads[li] = delta;
        if (l.activation == Activation::relu)
            for (std::size_t k = 0; k < delta.size(); ++k)
                if (!(outs[li][k] > 0.0)) delta[k] = 0.0;
        if (li < lowest_needed) break;
        const std::span<const double> input = li == 0 ? x : std::span<const double>(outs[li - 1]);
        if (!frozen[li]) {
            LayerGrad lg;
            lg.weights.assign(l.weights.size(), 0.0);
            lg.bias.assign(l.out, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < l.out; ++o) {
                    const double d = delta[r * l.out + o];
                    if (d == 0.0) continue;
                    lg.bias[o] += d;
                    double* gw = lg.weights.data() + o * l.in;
                    const double* xr = input.data() + r * l.in;
                    for (std::size_t k = 0; k < l.in; ++k) gw[k] += d * xr[k];
                }
            for (auto& v : lg.weights) v *= inv;
            for (auto& v : lg.bias) v *= inv;
            g.layers[li] = std::move(lg);
        }
        if (li == 0 || li == lowest_needed) break;
        std::vector<double> down(rows * l.in, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < l.out; ++o) {
                const double d = delta[r * l.out + o];
                if (d == 0.0) continue;
                const double* w = l.weights.data() + o * l.in;
                double* dr = down.data() + r * l.in;
                for (std::size_t k = 0; k < l.in; ++k) dr[k] += d * w[k];
            }
        delta = std::move(down);
    }
    return g;
}

inline double mean_loss(const DenseNet& net, std::span<const double> x, std::size_t rows, std::span<const int> labels) {
    return backward(net, x, rows, labels, std::vector<bool>(net.layers.size(), true)).loss;
}

inline double accuracy(const DenseNet& net, const Split& s) {
    if (s.rows == 0) return 0.0;
    const auto outs = detail::forward_all(net, s.x, s.rows);
    const auto& z = outs.back();
    const std::size_t c = net.classes();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < s.rows; ++r) {
        const auto best = std::max_element(z.begin() + r * c, z.begin() + (r + 1) * c) - (z.begin() + r * c);
        if (best == s.y[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(s.rows);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    double lr0 = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    std::vector<bool> frozen;  // empty means nothing frozen
    std::uint64_t seed = 0;

    void validate(std::size_t n_layers) const {
        require(lr0 > 0.0 && std::isfinite(lr0), "lr0 must be positive");
        require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
        require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight decay must be non-negative");
        require(epochs >= 1, "epochs must be at least 1");
        require(batch_size >= 1, "batch size must be at least 1");
        require(frozen.empty() || frozen.size() == n_layers, "frozen mask must have one entry per layer");
    }
};

inline double cosine_lr(double lr0, std::size_t step, std::size_t total) {
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    std::size_t trainable_params = 0;
    double wall_seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;

    /// One JSON object per epoch. Wall-clock time is only written when asked
    /// for, so that default output is reproducible byte for byte.
    std::string to_jsonl(bool timing = false) const {
        std::string out;
        for (const auto& e : epochs) {
            JsonWriter w;
            w.begin_object()
                .field("epoch", std::uint64_t{e.epoch})
                .field("train_loss", e.train_loss)
                .field("test_accuracy", e.test_accuracy)
                .field("trainable_params", std::uint64_t{e.trainable_params});
            if (timing) w.field("wall_seconds", e.wall_seconds);
            w.end_object();
            out += w.str();
            out += '\n';
        }
        return out;
    }

    double final_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().test_accuracy; }

    /// Equality ignoring wall-clock time.
    bool same_trajectory(const TrainReport& o) const { return to_jsonl() == o.to_jsonl(); }
};

/// SGD with momentum and decoupled weight decay under a cosine schedule:
///   m <- mu m + g;  w <- w (1 - lr_t lambda) - lr_t m
/// Decay applies to weights only. Frozen layers are never touched and keep
/// no momentum. Batches are reshuffled each epoch from cfg.seed.
inline TrainReport train(DenseNet& net, const Dataset& ds, const TrainConfig& cfg) {
    net.validate();
    cfg.validate(net.layers.size());
    detail::check_input(net, ds.dim);
    require(ds.train.rows >= 1, "training split is empty");
    const std::size_t L = net.layers.size();
    const std::vector<bool> frozen = cfg.frozen.empty() ? std::vector<bool>(L, false) : cfg.frozen;

    std::size_t trainable = 0;
    std::vector<LayerGrad> mom(L);
    for (std::size_t i = 0; i < L; ++i)
        if (!frozen[i]) {
            trainable += net.layers[i].param_count();
            mom[i].weights.assign(net.layers[i].weights.size(), 0.0);
            mom[i].bias.assign(net.layers[i].bias.size(), 0.0);
        }

    const std::size_t n = ds.train.rows, dim = ds.dim;
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> bx;
    std::vector<int> by;

    TrainReport report;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t rows = std::min(cfg.batch_size, n - start);
            bx.clear();
            by.clear();
            for (std::size_t k = start; k < start + rows; ++k) {
                const std::size_t r = order[k];
                bx.insert(bx.end(), ds.train.x.begin() + r * dim, ds.train.x.begin() + (r + 1) * dim);
                by.push_back(ds.train.y[r]);
            }
            const auto g = backward(net, bx, rows, by, frozen);
            loss_sum += g.loss * static_cast<double>(rows);
            if (trainable == 0) continue;
            const double lr = cosine_lr(cfg.lr0, step, total);
            const double shrink = 1.0 - lr * cfg.weight_decay;
            for (std::size_t i = 0; i < L; ++i) {
                if (frozen[i]) continue;
                auto& l = net.layers[i];
                const auto& gi = *g.layers[i];
                for (std::size_t k = 0; k < l.weights.size(); ++k) {
                    mom[i].weights[k] = cfg.momentum * mom[i].weights[k] + gi.weights[k];
                    l.weights[k] = l.weights[k] * shrink - lr * mom[i].weights[k];
                }
                for (std::size_t k = 0; k < l.bias.size(); ++k) {
                    mom[i].bias[k] = cfg.momentum * mom[i].bias[k] + gi.bias[k];
                    l.bias[k] -= lr * mom[i].bias[k];
                }
            }
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.test_accuracy = accuracy(net, ds.test);
        rec.trainable_params = trainable;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(rec);
    }
    return report;
}

/// Freezes every layer outside manifest.selected and trains the rest.
inline TrainReport train_selective(DenseNet& net, const Dataset& ds, const SelectionManifest& manifest,
                                   TrainConfig cfg) {
    const std::size_t L = net.layers.size();
    if (manifest.selected.empty() && manifest.config.rho > 0.0)
        throw InvariantError("manifest selects no layers although rho = " + format_double(manifest.config.rho) + " > 0");
    cfg.frozen.assign(L, true);
    for (auto i : manifest.selected) {
        if (i >= L)
            throw DataError("manifest selects layer " + std::to_string(i) + " but the network has " + std::to_string(L) +
                            " layers");
        cfg.frozen[i] = false;
    }
    return train(net, ds, cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints: layerNNNN.weight.npy / layerNNNN.bias.npy plus topology.json

inline void save_checkpoint(const DenseNet& net, const std::filesystem::path& dir) {
    net.validate();
    std::filesystem::create_directories(dir);
    JsonWriter w;
    w.begin_object().field("seed", net.seed).key("layers").begin_array();
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& l = net.layers[i];
        char stem[32];
        std::snprintf(stem, sizeof stem, "layer%04zu", i);
        const std::string wf = std::string(stem) + ".weight.npy", bf = std::string(stem) + ".bias.npy";
        write_file(dir / wf, write_npy(Tensor({l.out, l.in}, DType::f64, l.weights)));
        write_file(dir / bf, write_npy(Tensor({l.out}, DType::f64, l.bias)));
        w.begin_object()
            .field("in", std::uint64_t{l.in})
            .field("out", std::uint64_t{l.out})
            .field("activation", activation_name(l.activation))
            .field("weight", wf)
            .field("bias", bf)
            .end_object();
    }
    w.end_array().end_object();
    write_file(dir / "topology.json", w.str() + "\n");
}

inline DenseNet load_checkpoint(const std::filesystem::path& dir) {
    DenseNet net;
    try {
        const auto j = nlohmann::json::parse(read_file(dir / "topology.json"));
        net.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& jl : j.at("layers")) {
            DenseLayer l;
            l.in = jl.at("in").get<std::size_t>();
            l.out = jl.at("out").get<std::size_t>();
            l.activation = parse_activation(jl.at("activation").get<std::string>());
            const auto wt = read_npy(read_file(dir / jl.at("weight").get<std::string>()));
            const auto bt = read_npy(read_file(dir / jl.at("bias").get<std::string>()));
            require(wt.shape == std::vector<std::size_t>{l.out, l.in}, "checkpoint: weight shape mismatch");
            require(bt.shape == std::vector<std::size_t>{l.out}, "checkpoint: bias shape mismatch");
            l.weights = wt.data;
            l.bias = bt.data;
            net.layers.push_back(std::move(l));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("topology.json: ") + e.what());
    }
    net.validate();
    return net;
}

}  // namespace adabet::tinynet
