// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "adabet/fisher.hpp"
#include "adabet/pipeline.hpp"
#include "test_support.hpp"

using namespace adabet;
using namespace adabet::homology;
namespace fs = std::filesystem;
namespace at = adabet::testing;

namespace {

const fs::path kCli = ADABET_CLI_PATH;
const fs::path kFixtures = ADABET_FIXTURE_DIR;

struct Outcome {
    bool ok = true;
    std::ostringstream detail;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) detail << what;
        ok = ok && cond;
    }
};

struct Criterion {
    std::string name;
    double budget_seconds;  // 0 = untimed
    std::function<void(Outcome&)> body;
};

bool run_criterion(const Criterion& c) {
    Outcome out;
    const auto start = std::chrono::steady_clock::now();
    try {
        c.body(out);
    } catch (const std::exception& e) {
        out.ok = false;
        out.detail << "exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_seconds > 0 && secs >= c.budget_seconds) {
        if (out.ok) out.detail << "runtime " << secs << " s over budget " << c.budget_seconds << " s";
        out.ok = false;
    }
    std::printf("%s  %-28s %6.2fs  %s\n", out.ok ? "PASS" : "FAIL", c.name.c_str(), secs, out.detail.str().c_str());
    std::fflush(stdout);
    return out.ok;
}

bool close_rel(double a, double b, double rel) {
    return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

bool same_bars(const PersistenceDiagram& a, const PersistenceDiagram& b, double tol, double scale = 1.0) {
    if (a.bars.size() != b.bars.size()) return false;
    for (std::size_t i = 0; i < a.bars.size(); ++i) {
        const auto &x = a.bars[i], &y = b.bars[i];
        if (x.dim != y.dim || std::abs(scale * x.birth - y.birth) > tol * scale) return false;
        if (x.infinite() != y.infinite()) return false;
        if (!x.infinite() && std::abs(scale * x.death - y.death) > tol * scale) return false;
    }
    return true;
}

std::vector<double> identity(std::size_t d) {
    std::vector<double> m(d * d, 0.0);
    for (std::size_t k = 0; k < d; ++k) m[k * d + k] = 1.0;
    return m;
}

PointCloud concat(const PointCloud& a, const PointCloud& b) {
    std::vector<double> xs(a.data().begin(), a.data().end());
    xs.insert(xs.end(), b.data().begin(), b.data().end());
    return PointCloud(a.size() + b.size(), a.dim(), std::move(xs));
}

std::vector<double> dominant_persistences(const PersistenceDiagram& d) {
    std::vector<double> p;
    for (const auto& b : d.bars)
        if (b.dim == 1) p.push_back(b.persistence(d.threshold_cap));
    std::sort(p.rbegin(), p.rend());
    return p;
}

// Number of leading H1 bars before the first 10x drop in persistence.
std::size_t count_dominant(const PersistenceDiagram& d) {
    const auto p = dominant_persistences(d);
    for (std::size_t k = 1; k < p.size(); ++k)
        if (p[k - 1] > 10.0 * p[k]) return k;
    return p.size();
}

ActivationPool pool_from(const PointCloud& cloud, std::size_t layer) {
    ActivationPool p;
    p.layer_index = layer;
    p.rows = cloud.size();
    p.cols = cloud.dim();
    p.data.assign(cloud.data().begin(), cloud.data().end());
    return p;
}

std::vector<LayerMeta> plain_metas(std::size_t n, std::mt19937_64& rng) {
    std::vector<LayerMeta> metas(n);
    for (std::size_t i = 0; i < n; ++i) {
        metas[i].index = i;
        metas[i].name = "l" + std::to_string(i);
        metas[i].param_count = 10 + rng() % 100;
        metas[i].act_elems_per_sample = 1 + rng() % 6;
    }
    return metas;
}

// ---------------------------------------------------------------------------

void oracle_equivalence(Outcome& out) {
    std::mt19937_64 rng(50);
    std::uniform_int_distribution<std::size_t> n_dist(1, 10), d_dist(1, 4);
    for (int cloud = 0; cloud < 50; ++cloud) {
        const auto dm = pairwise_distances(at::random_cloud(rng, n_dist(rng), d_dist(rng)));
        const auto diag = rips_persistence(dm);
        std::vector<double> edges;
        for (std::size_t i = 0; i < dm.size(); ++i)
            for (std::size_t j = i + 1; j < dm.size(); ++j) edges.push_back(dm(i, j));
        std::sort(edges.begin(), edges.end());
        std::vector<double> ts{0.0, diag.threshold_cap};
        if (!edges.empty()) {
            ts.push_back(edges[edges.size() / 3]);
            ts.push_back(edges[edges.size() / 2]);
            ts.push_back(0.5 * (edges[edges.size() / 2] + edges.back()));
        } else {
            ts.push_back(0.5);
            ts.push_back(1.0);
            ts.push_back(2.0);
        }
        for (double t : ts) {
            const auto b = betti_at_threshold(dm, t);
            out.expect(diag.alive_at(0, t) == b.b0 && diag.alive_at(1, t) == b.b1,
                       "cloud " + std::to_string(cloud) + " disagrees at t=" + std::to_string(t));
        }
    }
    out.detail << "250 threshold checks";
}

void known_shapes(Outcome& out) {
    const auto sq = rips_persistence(pairwise_distances(at::unit_square()));
    std::size_t sq_h1 = 0;
    for (const auto& b : sq.bars)
        if (b.dim == 1) {
            ++sq_h1;
            out.expect(std::abs(b.birth - 1.0) <= 1e-9 && std::abs(b.death - std::sqrt(2.0)) <= 1e-9,
                       "square bar is not (1, sqrt 2)");
        }
    out.expect(sq_h1 == 1, "square has " + std::to_string(sq_h1) + " H1 bars");

    const auto circle = rips_persistence(pairwise_distances(at::circle(60)));
    const auto cp = dominant_persistences(circle);
    out.expect(!cp.empty() && (cp.size() == 1 || cp[0] > 10.0 * cp[1]), "circle has no dominant loop");
    out.expect(count_dominant(circle) == 1, "circle dominant count != 1");

    const auto two = concat(at::circle(30, 1.0, 0.0, 0.0), at::circle(30, 1.0, 6.0, 0.0));
    const auto dm = pairwise_distances(two);
    const auto both = rips_persistence(dm);
    out.expect(count_dominant(both) == 2, "two circles dominant count " + std::to_string(count_dominant(both)));
    out.expect(betti_at_threshold(dm, 2.0, 0, two.size()).b0 == 2, "two circles b0 at t=2 != 2");
    if (out.ok) out.detail << "circle persistence " << cp[0];
}

void b0_is_pool_size(Outcome& out) {
    std::mt19937_64 rng(20);
    for (int k = 0; k < 20; ++k) {
        const std::size_t n = 8 + rng() % 33, d = 1 + rng() % 8;
        const auto cloud = at::random_cloud(rng, n, d);
        std::set<std::vector<double>> rows;
        for (std::size_t i = 0; i < n; ++i) rows.emplace(cloud.row(i).begin(), cloud.row(i).end());
        out.expect(rows.size() == n, "pool rows not distinct");
        const auto b = betti_at_threshold(pairwise_distances(cloud), 0.0, 1, n);
        out.expect(b.b0 == n, "pool " + std::to_string(k) + ": b0 " + std::to_string(b.b0) + " != " + std::to_string(n));
    }
}

void invariance_suite(Outcome& out) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 8 + 2 * trial, dim = 2 + trial % 3;
        const auto cloud = at::random_cloud(rng, n, dim);
        const auto base = rips_persistence(pairwise_distances(cloud));
        std::vector<double> shift(dim);
        for (auto& s : shift) s = std::uniform_real_distribution<double>(-5, 5)(rng);
        const auto moved = at::transform(cloud, at::random_rotation(rng, dim), shift);
        out.expect(same_bars(base, rips_persistence(pairwise_distances(moved)), 1e-9), "isometry changed a diagram");
        for (double c : {0.5, 3.0, 100.0}) {
            const auto scaled = rips_persistence(pairwise_distances(at::transform(cloud, identity(dim), std::vector<double>(dim, 0.0), c)));
            out.expect(same_bars(base, scaled, 1e-9, c), "scaling by " + std::to_string(c) + " broke equivariance");
        }
    }

    // Manifest under an independent isometry and uniform scale per layer.
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t layers = 6;
        const auto metas = plain_metas(layers, rng);
        std::vector<ActivationPool> pools, moved;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t dim = metas[l].act_elems_per_sample + 1;
            auto cloud = at::random_cloud(rng, 24, dim);
            if (l % 2 == 0) {  // plant loops in some layers
                auto ring = at::circle(16, 1.0 + 0.5 * static_cast<double>(l));
                std::vector<double> xs;
                for (std::size_t i = 0; i < ring.size(); ++i) {
                    xs.push_back(ring.row(i)[0]);
                    xs.push_back(ring.row(i)[1]);
                    for (std::size_t k = 2; k < dim; ++k) xs.push_back(0.0);
                }
                cloud = concat(cloud, PointCloud(ring.size(), dim, std::move(xs)));
            }
            pools.push_back(pool_from(cloud, l));
            std::vector<double> shift(dim);
            for (auto& s : shift) s = std::uniform_real_distribution<double>(-3, 3)(rng);
            const double c = std::uniform_real_distribution<double>(0.2, 50.0)(rng);
            moved.push_back(pool_from(at::transform(cloud, at::random_rotation(rng, dim), shift, c), l));
        }
        for (double tau : {0.0, 0.1}) {
            SelectionConfig cfg;
            cfg.rho = 0.5;
            cfg.tau = tau;
            std::vector<LayerScore> a, b;
            for (std::size_t l = 0; l < layers; ++l) {
                a.push_back(score_layer(pools[l], metas[l], cfg));
                b.push_back(score_layer(moved[l], metas[l], cfg));
            }
            out.expect(to_json(rank_and_select(a, metas, cfg)) == to_json(rank_and_select(b, metas, cfg)),
                       "manifest changed under per-layer isometry and scaling");
        }
    }

    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 3 + trial;
        const auto metas = plain_metas(n, rng);
        std::vector<LayerScore> scores;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t raw = rng() % 4;
            scores.push_back({i, std::nullopt, raw, metas[i].act_elems_per_sample,
                              normalized_betti(raw, metas[i].act_elems_per_sample)});
        }
        std::vector<std::size_t> prev;
        for (int r = 1; r <= 10; ++r) {
            SelectionConfig cfg;
            cfg.rho = 0.1 * r;
            const auto sel = rank_and_select(scores, metas, cfg).selected;
            out.expect(std::includes(sel.begin(), sel.end(), prev.begin(), prev.end()), "budget not monotone");
            prev = sel;
        }
    }
}

Tensor tensor(std::vector<std::size_t> shape, std::vector<double> data) {
    return Tensor(std::move(shape), DType::f64, std::move(data));
}

void fisher_closed_form(Outcome& out) {
    out.expect(fisher_delta(tensor({1, 2}, {1, 2}), tensor({1, 2}, {0, 0})) == 0.0, "zero-gradient example");
    out.expect(close_rel(fisher_delta(tensor({2, 1}, {1, 2}), tensor({2, 1}, {2, 1})), 2.0, 1e-12), "two-sample example");
    out.expect(close_rel(fisher_delta(tensor({1, 2}, {1, 1}), tensor({1, 2}, {3, -1})), 2.0, 1e-12), "dot-product example");

    std::mt19937_64 rng(10);
    std::normal_distribution<double> g;
    for (int k = 0; k < 10; ++k) {
        const std::size_t n = 1 + rng() % 6, d = 1 + rng() % 12;
        std::vector<double> a(n * d), gr(n * d);
        for (auto& v : a) v = g(rng);
        for (auto& v : gr) v = g(rng);
        const double c = std::uniform_real_distribution<double>(-4, 4)(rng);
        const double e = std::uniform_real_distribution<double>(-4, 4)(rng);
        auto ca = a, eg = gr;
        for (auto& v : ca) v *= c;
        for (auto& v : eg) v *= e;
        const double base = fisher_delta(tensor({n, d}, a), tensor({n, d}, gr));
        const double scaled = fisher_delta(tensor({n, d}, ca), tensor({n, d}, eg));
        out.expect(close_rel(scaled, c * c * e * e * base, 1e-9), "scaling law off on tensor " + std::to_string(k));
    }
}

void normalized_bit_exact(Outcome& out) {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 100; ++k) {
        const std::size_t raw = rng() % 1000, act = 1 + rng() % 100000;
        const double expect = static_cast<double>(raw) / static_cast<double>(act);
        out.expect(normalized_betti(raw, act) == expect, "pair " + std::to_string(raw) + "/" + std::to_string(act));
    }
}

double min_hidden_margin(const tinynet::DenseNet& net, const std::vector<double>& x, std::size_t rows) {
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> a(x.begin() + static_cast<std::ptrdiff_t>(r * net.input_dim()),
                              x.begin() + static_cast<std::ptrdiff_t>((r + 1) * net.input_dim()));
        for (const auto& l : net.layers) {
            std::vector<double> z(l.out);
            for (std::size_t o = 0; o < l.out; ++o) {
                z[o] = l.bias[o];
                for (std::size_t i = 0; i < l.in; ++i) z[o] += l.weights[o * l.in + i] * a[i];
                if (l.activation == tinynet::Activation::relu) {
                    margin = std::min(margin, std::abs(z[o]));
                    z[o] = std::max(z[o], 0.0);
                }
            }
            a = std::move(z);
        }
    }
    return margin;
}

void gradient_check(Outcome& out) {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> g;
    const double h = 1e-5;
    double worst = 0.0;
    std::size_t coords = 0;
    int nets = 0;
    while (nets < 20) {
        std::vector<std::size_t> widths{2 + rng() % 4};
        const std::size_t depth = 1 + rng() % 4;
        for (std::size_t i = 0; i < depth; ++i) widths.push_back(2 + rng() % 6);
        widths.push_back(2 + rng() % 3);
        auto net = tinynet::DenseNet::make(widths, rng());
        for (auto& l : net.layers)
            for (auto& b : l.bias) b = 0.3 * g(rng);
        const std::size_t rows = 1 + rng() % 6;
        std::vector<double> x(rows * widths.front());
        for (auto& v : x) v = g(rng);
        std::vector<int> y(rows);
        for (auto& v : y) v = static_cast<int>(rng() % widths.back());
        if (min_hidden_margin(net, x, rows) < 1e-3) continue;
        ++nets;

        const auto grads = tinynet::backward(net, x, rows, y, std::vector<bool>(net.layers.size(), false));
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            auto check = [&](std::vector<double>& params, const std::vector<double>& analytic) {
                for (std::size_t k = 0; k < params.size(); ++k) {
                    const double saved = params[k];
                    params[k] = saved + h;
                    const double up = tinynet::mean_loss(net, x, rows, y);
                    params[k] = saved - h;
                    const double down = tinynet::mean_loss(net, x, rows, y);
                    params[k] = saved;
                    const double numeric = (up - down) / (2 * h);
                    const double rel = std::abs(numeric - analytic[k]) /
                                       std::max({std::abs(numeric), std::abs(analytic[k]), 1e-5});
                    worst = std::max(worst, rel);
                    ++coords;
                }
            };
            check(net.layers[li].weights, grads.layers[li]->weights);
            check(net.layers[li].bias, grads.layers[li]->bias);
        }
    }
    out.expect(worst <= 1e-5, "worst relative error " + std::to_string(worst));
    out.detail << nets << " nets, " << coords << " coordinates, worst rel " << worst;
}

std::size_t selected_params(const tinynet::DenseNet& net, const std::vector<std::size_t>& layers) {
    std::size_t sum = 0;
    for (auto l : layers) sum += net.layers[l].param_count();
    return sum;
}

void end_to_end_demo(Outcome& out) {
    double betti_acc = 0.0, last_acc = 0.0;
    std::ostringstream picks;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        DemoConfig cfg;
        cfg.seed = seed;
        cfg.rho = 1.0 / 3.0;
        at::TempDir dir("accept_demo");
        const auto r = run_demo(cfg, dir.path());
        betti_acc += r.report.final_accuracy();

        SelectionManifest last;
        last.config.rho = cfg.rho;
        last.selected = {r.pretrained.layers.size() - 1};
        auto net = r.pretrained;
        const auto baseline = tinynet::train_selective(net, r.target, last, demo_train_config(cfg, 2));
        last_acc += baseline.final_accuracy();

        std::vector<std::size_t> sizes;
        for (const auto& l : r.pretrained.layers) sizes.push_back(l.param_count());
        std::sort(sizes.rbegin(), sizes.rend());
        const std::size_t k = selection_budget(cfg.rho, sizes.size());
        const std::size_t cap = std::accumulate(sizes.begin(), sizes.begin() + static_cast<std::ptrdiff_t>(k), std::size_t{0});
        const std::size_t used = r.report.epochs.front().trainable_params;
        out.expect(used == selected_params(r.pretrained, r.manifest.selected), "trainable count mismatch");
        out.expect(used <= cap, "seed " + std::to_string(seed) + " trains " + std::to_string(used) + " > " + std::to_string(cap));
        picks << " s" << seed << "=[";
        for (std::size_t i = 0; i < r.manifest.selected.size(); ++i) picks << (i ? "," : "") << r.manifest.selected[i];
        picks << "]";
    }
    betti_acc /= 5.0;
    last_acc /= 5.0;
    out.expect(betti_acc >= last_acc, "Betti mean below last-layer mean");
    out.detail << "betti " << betti_acc << " vs last-layer " << last_acc << picks.str();
}

void pool_ablation(Outcome& out) {
    int agree = 0;
    std::ostringstream log;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        DemoConfig cfg;
        cfg.seed = seed;
        cfg.rho = 1.0 / 3.0;
        const auto net = demo_pretrain(cfg).first;
        const auto target = demo_target(cfg);
        at::TempDir dir("accept_ablation");
        write_dumps(net, target.train, target.dim, 8, cfg.batch_size, dir.path(), false);
        const DumpDirectory dumps(dir.path());
        const auto metas = load_layer_meta(read_file(dir.path() / "meta.json"));
        auto scfg = cfg.selection;
        scfg.rho = cfg.rho;
        const auto five = betti_rank(dumps, metas, scfg, {1, 5}).selected;
        const auto eight = betti_rank(dumps, metas, scfg, {1, 0}).selected;
        agree += five == eight;
        log << " s" << seed << (five == eight ? "=same" : "=diff");
    }
    out.expect(agree >= 4, "only " + std::to_string(agree) + "/5 seeds agree");
    out.detail << agree << "/5 agree;" << log.str();
}

int run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " '" + kCli.string() + "' " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void determinism(Outcome& out) {
    at::TempDir dir("accept_cli");
    const auto dumps = kFixtures / "dumps5x8";
    const std::string on_dumps = "--dumps " + q(dumps) + " --meta " + q(dumps / "meta.json");
    const std::vector<std::pair<std::string, std::string>> commands{
        {"homology", "homology --points " + q(kFixtures / "points" / "circle60.npy")},
        {"rank", "rank " + on_dumps + " --rho 0.33"},
        {"fisher-rank", "fisher-rank " + on_dumps + " --rho 0.33"},
        {"diagnose", "diagnose " + on_dumps},
        {"export-meta-template", "export-meta-template --dumps " + q(dumps)},
        {"demo", "demo --epochs 3 --pretrain-epochs 3"},
    };
    for (const auto& [name, cmd] : commands) {
        std::vector<std::string> outs;
        for (const char* env : {"ADABET_THREADS=1", "ADABET_THREADS=3"}) {
            const auto file = dir / (name + std::to_string(outs.size()));
            out.expect(run_cli(cmd + " --out " + q(file), env) == 0, name + " failed");
            outs.push_back(at::slurp(file));
        }
        out.expect(!outs[0].empty() && outs[0] == outs[1], name + " output differs between runs");
    }

    // Library level: the access log of a Betti ranking holds activation files only.
    const DumpDirectory opened(dumps);
    const auto metas = load_layer_meta(read_file(dumps / "meta.json"));
    SelectionConfig cfg;
    cfg.rho = 0.33;
    betti_rank(opened, metas, cfg);
    std::size_t grads = 0;
    for (const auto& p : opened.opened()) grads += p.filename().string().find(".grad") != std::string::npos;
    out.expect(!opened.opened().empty() && grads == 0, "rank opened a gradient file");

    // Process level: every gradient file replaced by a dangling link.
    const auto broken = dir / "broken";
    fs::copy(dumps, broken);
    std::size_t replaced = 0;
    for (const auto& e : fs::directory_iterator(broken))
        if (e.path().filename().string().find(".grad.npy") != std::string::npos) {
            fs::remove(e.path());
            fs::create_symlink(dir / "missing" / "x.npy", e.path());
            ++replaced;
        }
    const std::string on_broken = "--dumps " + q(broken) + " --meta " + q(broken / "meta.json") + " --rho 0.33 --out ";
    out.expect(replaced > 0, "fixture has no gradient files");
    out.expect(run_cli("rank " + on_broken + q(dir / "broken_rank")) == 0, "rank failed without gradients");
    out.expect(at::slurp(dir / "broken_rank") == at::slurp(dir / "rank0"), "rank output depends on gradient files");
    out.expect(run_cli("fisher-rank " + on_broken + q(dir / "broken_fisher")) == 2, "fisher-rank ignored broken gradients");
    out.detail << commands.size() << " commands; " << opened.opened().size() << " files opened by rank, 0 gradients";
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {"oracle-equivalence", 10, oracle_equivalence},
        {"known-shapes", 5, known_shapes},
        {"b0-equals-pool-size", 0, b0_is_pool_size},
        {"invariance-suite", 0, invariance_suite},
        {"fisher-closed-form", 0, fisher_closed_form},
        {"normalized-betti-bit-exact", 0, normalized_bit_exact},
        {"gradient-check", 30, gradient_check},
        {"end-to-end-demo", 120, end_to_end_demo},
        {"pool-ablation-5-vs-8", 0, pool_ablation},
        {"cli-determinism", 0, determinism},
    };
    std::size_t failed = 0;
    for (const auto& c : criteria) failed += !run_criterion(c);
    std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
