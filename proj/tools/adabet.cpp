// adabet: gradient-free layer selection from activation topology.
//
// Exit codes: 0 ok, 1 usage, 2 data/format error, 3 internal invariant.
// Failures print one JSON line {"error":kind,"exit_code":n,"message":...}
// on stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "adabet/homology.hpp"
#include "adabet/pipeline.hpp"

using namespace adabet;
namespace fs = std::filesystem;

namespace {

void print_config(const std::string& command, const std::function<void(JsonWriter&)>& fields) {
    JsonWriter w;
    w.begin_object().field("command", command).key("config").begin_object();
    fields(w);
    w.end_object().end_object();
    std::cout << w.str() << '\n' << std::flush;
}

void write_artifact(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file(path, !text.empty() && text.back() == '\n' ? text : text + "\n");
}

std::vector<LayerMeta> read_meta(const fs::path& p) { return load_layer_meta(read_file(p)); }

int fail(const char* kind, int code, const std::string& message) {
    std::string flat = message;
    for (auto& c : flat)
        if (c == '\n' || c == '\r') c = ' ';
    JsonWriter w;
    w.begin_object().field("error", kind).field("exit_code", code).field("message", flat).end_object();
    std::cerr << w.str() << '\n';
    return code;
}

/// Scratch directory for demo dumps when --dumps-out is not given.
class ScratchDir {
public:
    ScratchDir() {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("adabet_demo_" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

struct Options {
    // homology
    std::string points, out;
    int max_dim = 1;
    std::optional<double> threshold;
    // dumps
    std::string dumps, meta;
    double rho = 0.1;
    std::size_t pool = kDefaultPoolCap;
    double tau = 0.0;
    std::uint64_t seed = 42;
    bool standardize = false;
    std::size_t batches = 0;
    // diagnose
    std::size_t pca = 2;
    std::optional<double> eps;
    std::size_t min_pts = kDefaultMinPts;
    // demo
    std::string dataset = "circles";
    double demo_rho = 0.33;
    std::size_t epochs = 30, pretrain_epochs = 30, dump_batches = 5;
    std::uint64_t demo_seed = 1;
    double lr = 0.05;
    std::string dumps_out, manifest_out, checkpoint_out;
    bool timing = false;
};

SelectionConfig selection_config(const Options& o) {
    SelectionConfig c;
    c.rho = o.rho;
    c.pool_cap = o.pool;
    c.tau = o.tau;
    c.seed = o.seed;
    c.standardize = o.standardize;
    c.validate();
    return c;
}

void config_fields(JsonWriter& w, const Options& o, const SelectionConfig& c) {
    w.field("dumps", o.dumps)
        .field("meta", o.meta)
        .field("rho", c.rho)
        .field("pool", std::uint64_t{c.pool_cap})
        .field("tau", c.tau)
        .field("seed", c.seed)
        .field("metric", "euclidean")
        .field("standardize", c.standardize)
        .field("batches", std::uint64_t{o.batches})
        .field("out", o.out);
}

int cmd_homology(const Options& o) {
    print_config("homology", [&](JsonWriter& w) {
        w.field("points", o.points).field("max_dim", o.max_dim).field("threshold", o.threshold).field("out", o.out);
    });
    const Tensor t = read_npy(read_file(o.points));
    require(t.shape.size() >= 2, "points file must hold an array of shape (N, D)");
    const homology::PointCloud cloud(t.batch(), t.per_sample(), t.data);
    homology::RipsOptions ropts;
    ropts.max_dim = o.max_dim;
    ropts.threshold = o.threshold;
    const auto diag = homology::rips_persistence(homology::pairwise_distances(cloud), ropts);
    write_artifact(o.out, homology::to_json(diag));
    return 0;
}

int cmd_rank(const Options& o) {
    const auto cfg = selection_config(o);
    print_config("rank", [&](JsonWriter& w) { config_fields(w, o, cfg); });
    const DumpDirectory dumps(o.dumps);
    const auto manifest = betti_rank(dumps, read_meta(o.meta), cfg, {worker_count(), o.batches});
    write_artifact(o.out, to_json(manifest));
    return 0;
}

int cmd_fisher(const Options& o) {
    require(o.rho >= 0.0 && o.rho <= 1.0, "rho must lie in [0, 1]");
    print_config("fisher-rank", [&](JsonWriter& w) {
        w.field("dumps", o.dumps)
            .field("meta", o.meta)
            .field("rho", o.rho)
            .field("batches", std::uint64_t{o.batches})
            .field("out", o.out);
    });
    const DumpDirectory dumps(o.dumps);
    write_artifact(o.out, to_json(fisher_rank_dumps(dumps, read_meta(o.meta), o.rho, {worker_count(), o.batches})));
    return 0;
}

int cmd_diagnose(const Options& o) {
    const auto cfg = selection_config(o);
    DiagnoseOptions d;
    d.pca_dim = o.pca;
    d.eps = o.eps;
    d.min_pts = o.min_pts;
    print_config("diagnose", [&](JsonWriter& w) {
        config_fields(w, o, cfg);
        w.field("pca", std::uint64_t{d.pca_dim}).field("eps", d.eps).field("min_pts", std::uint64_t{d.min_pts});
    });
    const DumpDirectory dumps(o.dumps);
    write_artifact(o.out, to_json(diagnose(dumps, read_meta(o.meta), cfg, d, {worker_count(), o.batches})));
    return 0;
}

int cmd_demo(const Options& o) {
    DemoConfig cfg;
    cfg.dataset = tinynet::parse_kind(o.dataset);
    cfg.rho = o.demo_rho;
    cfg.epochs = o.epochs;
    cfg.pretrain_epochs = o.pretrain_epochs;
    cfg.seed = o.demo_seed;
    cfg.lr0 = o.lr;
    cfg.dump_batches = o.dump_batches;
    cfg.selection.pool_cap = o.pool;
    cfg.selection.tau = o.tau;
    cfg.selection.rho = o.demo_rho;
    cfg.selection.validate();
    print_config("demo", [&](JsonWriter& w) {
        w.field("dataset", o.dataset)
            .field("rho", cfg.rho)
            .field("epochs", std::uint64_t{cfg.epochs})
            .field("pretrain_epochs", std::uint64_t{cfg.pretrain_epochs})
            .field("seed", cfg.seed)
            .field("lr0", cfg.lr0)
            .field("momentum", tinynet::TrainConfig{}.momentum)
            .field("weight_decay", tinynet::TrainConfig{}.weight_decay)
            .field("batch_size", std::uint64_t{cfg.batch_size})
            .field("dump_batches", std::uint64_t{cfg.dump_batches})
            .field("pool", std::uint64_t{cfg.selection.pool_cap})
            .field("tau", cfg.selection.tau)
            .key("widths")
            .begin_array();
        for (auto v : cfg.widths) w.value(std::uint64_t{v});
        w.end_array().field("out", o.out);
    });

    std::optional<ScratchDir> scratch;
    fs::path dump_dir;
    if (o.dumps_out.empty()) {
        scratch.emplace();
        dump_dir = scratch->path();
    } else {
        dump_dir = o.dumps_out;
    }
    const auto r = run_demo(cfg, dump_dir, {worker_count(), 0});
    write_artifact(o.out, r.report.to_jsonl(o.timing));
    if (!o.manifest_out.empty()) write_artifact(o.manifest_out, to_json(r.manifest));
    if (!o.checkpoint_out.empty()) tinynet::save_checkpoint(r.pretrained, o.checkpoint_out);

    JsonWriter w;
    w.begin_object().key("selected").begin_array();
    for (auto i : r.manifest.selected) w.value(std::uint64_t{i});
    w.end_array()
        .field("pretrain_accuracy", r.pretrain_report.final_accuracy())
        .field("final_accuracy", r.report.final_accuracy())
        .field("trainable_params", std::uint64_t{r.report.epochs.back().trainable_params})
        .end_object();
    std::cout << w.str() << '\n';
    return 0;
}

int cmd_meta_template(const Options& o) {
    print_config("export-meta-template", [&](JsonWriter& w) { w.field("dumps", o.dumps).field("out", o.out); });
    write_artifact(o.out, to_json(meta_template(DumpDirectory(o.dumps))));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-free layer selection by activation topology"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);
    Options o;

    auto* homology = app.add_subcommand("homology", "Persistence diagram of a point cloud (.npy, shape N x D)");
    homology->add_option("--points", o.points, "Point cloud .npy")->required()->check(CLI::ExistingFile);
    homology->add_option("--max-dim", o.max_dim, "Highest homology dimension")
        ->capture_default_str()
        ->check(CLI::Range(0, 1));
    homology->add_option("--threshold", o.threshold, "Filtration cap (default: enclosing radius)");
    homology->add_option("--out", o.out, "Diagram JSON")->required();

    auto add_dump_inputs = [&](CLI::App* sub) {
        sub->add_option("--dumps", o.dumps, "Dump directory")->required()->check(CLI::ExistingDirectory);
        sub->add_option("--meta", o.meta, "meta.json")->required()->check(CLI::ExistingFile);
        sub->add_option("--batches", o.batches, "Use only the first N batches per layer (0 = all)")->capture_default_str();
        sub->add_option("--out", o.out, "Output JSON")->required();
    };
    auto add_selection = [&](CLI::App* sub) {
        sub->add_option("--rho", o.rho, "Fraction of units to select")->capture_default_str()->check(CLI::Range(0.0, 1.0));
        sub->add_option("--pool", o.pool, "Pool size cap (rows)")->capture_default_str()->check(CLI::Range(1, 512));
        sub->add_option("--tau", o.tau, "Relative persistence cutoff")->capture_default_str()->check(CLI::Range(0.0, 1.0));
        sub->add_option("--seed", o.seed, "Pool subsampling seed")->capture_default_str();
        sub->add_flag("--standardize", o.standardize, "Standardize pool columns before homology");
    };

    auto* rank = app.add_subcommand("rank", "Betti-number layer ranking and selection manifest");
    add_dump_inputs(rank);
    add_selection(rank);

    auto* fisher = app.add_subcommand("fisher-rank", "Fisher-information baseline manifest (reads .grad.npy)");
    add_dump_inputs(fisher);
    fisher->add_option("--rho", o.rho, "Fraction of units to select")->capture_default_str()->check(CLI::Range(0.0, 1.0));

    auto* diag = app.add_subcommand("diagnose", "PCA + DBSCAN cluster counts per layer, with Spearman vs b1");
    add_dump_inputs(diag);
    add_selection(diag);
    diag->add_option("--pca", o.pca, "PCA dimension")->capture_default_str()->check(CLI::PositiveNumber);
    diag->add_option("--eps", o.eps, "DBSCAN radius (default: half the median distance)")->check(CLI::PositiveNumber);
    diag->add_option("--min-pts", o.min_pts, "DBSCAN core threshold")->capture_default_str()->check(CLI::PositiveNumber);

    auto* demo = app.add_subcommand("demo", "Pre-train, dump, rank and selectively retrain the toy network");
    demo->add_option("--dataset", o.dataset, "Target dataset")
        ->capture_default_str()
        ->check(CLI::IsMember({"blobs", "moons", "circles"}));
    demo->add_option("--rho", o.demo_rho, "Fraction of layers to retrain")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    demo->add_option("--epochs", o.epochs, "Retraining epochs")->capture_default_str()->check(CLI::PositiveNumber);
    demo->add_option("--pretrain-epochs", o.pretrain_epochs, "Pre-training epochs")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    demo->add_option("--seed", o.demo_seed, "Seed")->capture_default_str();
    demo->add_option("--lr", o.lr, "Initial learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    demo->add_option("--batches", o.dump_batches, "Batches of 8 dumped for ranking")
        ->capture_default_str()
        ->check(CLI::Range(1, 17));
    demo->add_option("--pool", o.pool, "Pool size cap (rows)")->capture_default_str()->check(CLI::Range(1, 512));
    demo->add_option("--tau", o.tau, "Relative persistence cutoff")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    demo->add_option("--out", o.out, "Training report (JSON lines)")->required();
    demo->add_option("--dumps-out", o.dumps_out, "Keep the activation dumps here");
    demo->add_option("--manifest-out", o.manifest_out, "Write the selection manifest here");
    demo->add_option("--checkpoint-out", o.checkpoint_out, "Save the pre-trained network here");
    demo->add_flag("--timing", o.timing, "Include wall-clock seconds in the report");

    auto* meta_tpl = app.add_subcommand("export-meta-template", "Infer a meta.json skeleton from activation dumps");
    meta_tpl->add_option("--dumps", o.dumps, "Dump directory")->required()->check(CLI::ExistingDirectory);
    meta_tpl->add_option("--out", o.out, "meta.json to write")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", 1, e.what());
    }

    try {
        if (*homology) return cmd_homology(o);
        if (*rank) return cmd_rank(o);
        if (*fisher) return cmd_fisher(o);
        if (*diag) return cmd_diagnose(o);
        if (*demo) return cmd_demo(o);
        if (*meta_tpl) return cmd_meta_template(o);
        return fail("usage", 1, "no subcommand given");
    } catch (const DataError& e) {
        return fail("data", 2, e.what());
    } catch (const fs::filesystem_error& e) {
        return fail("data", 2, e.what());
    } catch (const InvariantError& e) {
        return fail("invariant", 3, e.what());
    } catch (const std::exception& e) {
        return fail("internal", 3, e.what());
    }
}
