#pragma once

// Cluster-count sanity check for layer pools: PCA to a few dimensions, then
// DBSCAN, with a Spearman rank correlation against the Betti scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/ingest.hpp"
#include "adabet/json_writer.hpp"

namespace adabet {

struct ClusterReport {
    std::size_t layer_index = 0;
    std::size_t n_clusters = 0;
    std::size_t n_noise = 0;
    double eps = 0.0;
    std::size_t min_pts = 1;
};

inline constexpr std::size_t kDefaultMinPts = 4;

/// Projects centered rows onto the top-d principal directions. Directions are
/// found by power iteration with deflation from a fixed seed; directions with
/// (numerically) zero variance come back as all-zero columns.
inline ActivationPool pca_reduce(const ActivationPool& pool, std::size_t d, std::uint64_t seed = 0x9e3779b97f4a7c15ULL) {
    const std::size_t n = pool.rows, dim = pool.cols;
    if (d < 1 || d > std::min(n, dim))
        throw DataError("pca_reduce: target dimension " + std::to_string(d) + " must lie in [1, min(rows, cols) = " +
                        std::to_string(std::min(n, dim)) + "]");

    std::vector<double> x = pool.data;
    for (std::size_t c = 0; c < dim; ++c) {
        double mean = 0;
        for (std::size_t r = 0; r < n; ++r) mean += x[r * dim + c];
        mean /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) x[r * dim + c] -= mean;
    }

    std::vector<double> cov(dim * dim, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < dim; ++i) {
            const double xi = x[r * dim + i];
            if (xi == 0.0) continue;
            for (std::size_t j = 0; j < dim; ++j) cov[i * dim + j] += xi * x[r * dim + j];
        }
    for (auto& v : cov) v /= static_cast<double>(n);
    double trace = 0;
    for (std::size_t i = 0; i < dim; ++i) trace += cov[i * dim + i];

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    std::vector<std::vector<double>> directions;
    std::vector<double> v(dim), next(dim);
    for (std::size_t comp = 0; comp < d; ++comp) {
        for (auto& e : v) e = gauss(rng);
        double lambda = 0.0;
        for (int iter = 0; iter < 200000; ++iter) {
            double norm = 0;
            for (std::size_t i = 0; i < dim; ++i) {
                double acc = 0;
                for (std::size_t j = 0; j < dim; ++j) acc += cov[i * dim + j] * v[j];
                next[i] = acc;
                norm += acc * acc;
            }
            norm = std::sqrt(norm);
            if (norm == 0.0) break;
            double change = 0;
            for (std::size_t i = 0; i < dim; ++i) {
                next[i] /= norm;
                change = std::max(change, std::abs(next[i] - v[i]));
            }
            v.swap(next);
            lambda = norm;
            if (change < 1e-15) break;
        }
        if (!(lambda > 1e-12 * trace) || trace == 0.0) {
            directions.emplace_back(dim, 0.0);
            continue;
        }
        const auto big = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
        if (*big < 0)
            for (auto& e : v) e = -e;
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) cov[i * dim + j] -= lambda * v[i] * v[j];
        directions.push_back(v);
    }

    ActivationPool out;
    out.layer_index = pool.layer_index;
    out.rows = n;
    out.cols = d;
    out.sources = pool.sources;
    out.seed = pool.seed;
    out.data.assign(n * d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < dim; ++k) acc += x[r * dim + k] * directions[c][k];
            out.data[r * d + c] = acc;
        }
    return out;
}

namespace detail {

inline double row_distance(const ActivationPool& p, std::size_t a, std::size_t b) {
    double acc = 0;
    for (std::size_t k = 0; k < p.cols; ++k) {
        const double diff = p.data[a * p.cols + k] - p.data[b * p.cols + k];
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

}  // namespace detail

inline constexpr int kNoise = -1;

/// DBSCAN labels: cluster ids from 0 in discovery order, or kNoise.
/// Neighborhoods are inclusive (distance <= eps) and count the point itself.
inline std::vector<int> dbscan_labels(const ActivationPool& pool, double eps, std::size_t min_pts) {
    require(eps > 0.0, "dbscan: eps must be positive");
    require(min_pts >= 1, "dbscan: min_pts must be at least 1");
    const std::size_t n = pool.rows;
    std::vector<std::vector<std::size_t>> neighbors(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (detail::row_distance(pool, i, j) <= eps) neighbors[i].push_back(j);

    constexpr int kUnvisited = -2;
    std::vector<int> label(n, kUnvisited);
    int next_cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != kUnvisited && label[i] != kNoise) continue;
        if (neighbors[i].size() < min_pts) {
            if (label[i] == kUnvisited) label[i] = kNoise;
            continue;
        }
        const int id = next_cluster++;
        label[i] = id;
        std::deque<std::size_t> frontier(neighbors[i].begin(), neighbors[i].end());
        while (!frontier.empty()) {
            const std::size_t q = frontier.front();
            frontier.pop_front();
            if (label[q] == kNoise) label[q] = id;  // border point
            if (label[q] != kUnvisited) continue;
            label[q] = id;
            if (neighbors[q].size() >= min_pts) frontier.insert(frontier.end(), neighbors[q].begin(), neighbors[q].end());
        }
    }
    return label;
}

inline ClusterReport dbscan_count(const ActivationPool& pool, double eps, std::size_t min_pts) {
    const auto labels = dbscan_labels(pool, eps, min_pts);
    ClusterReport r;
    r.layer_index = pool.layer_index;
    r.eps = eps;
    r.min_pts = min_pts;
    int max_label = -1;
    for (int l : labels) {
        if (l == kNoise)
            ++r.n_noise;
        else
            max_label = std::max(max_label, l);
    }
    r.n_clusters = static_cast<std::size_t>(max_label + 1);
    return r;
}

/// Half the median pairwise distance; falls back to a tiny positive value for
/// degenerate pools so that coincident points still cluster.
inline double default_eps(const ActivationPool& pool) {
    std::vector<double> d;
    for (std::size_t i = 0; i < pool.rows; ++i)
        for (std::size_t j = i + 1; j < pool.rows; ++j) d.push_back(detail::row_distance(pool, i, j));
    if (d.empty()) return 1e-12;
    std::sort(d.begin(), d.end());
    const std::size_t m = d.size() / 2;
    const double median = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
    return std::max(0.5 * median, 1e-12);
}

inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation with average ranks for ties; empty when either
/// side is constant or fewer than two pairs are given.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "spearman: sequences differ in length");
    if (a.size() < 2) return std::nullopt;
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

struct DiagnosticsReport {
    std::vector<ClusterReport> reports;
    std::vector<std::size_t> raw_b1;  // parallel to reports
    std::optional<double> spearman;
};

inline std::string to_json(const DiagnosticsReport& d) {
    JsonWriter w;
    w.begin_object().key("reports").begin_array();
    for (std::size_t i = 0; i < d.reports.size(); ++i) {
        const auto& r = d.reports[i];
        w.begin_object()
            .field("layer", std::uint64_t{r.layer_index})
            .field("n_clusters", std::uint64_t{r.n_clusters})
            .field("n_noise", std::uint64_t{r.n_noise})
            .field("eps", r.eps)
            .field("min_pts", std::uint64_t{r.min_pts})
            .field("raw_b1", std::uint64_t{d.raw_b1.at(i)})
            .end_object();
    }
    w.end_array().field("spearman", d.spearman).end_object();
    return w.str();
}

}  // namespace adabet
