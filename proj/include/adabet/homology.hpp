#pragma once

// Vietoris-Rips persistent homology in dimensions 0 and 1, plus a brute-force
// GF(2) Betti-number oracle that shares no code with the persistence engine.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/json_writer.hpp"

namespace adabet::homology {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();
inline constexpr std::size_t kEngineMaxPoints = 512;
inline constexpr std::size_t kOracleMaxPoints = 64;

/// N points in R^D stored row-major. Every coordinate is finite.
class PointCloud {
public:
    PointCloud(std::size_t n_points, std::size_t dim, std::vector<double> coords)
        : n_(n_points), dim_(dim), coords_(std::move(coords)) {
        require(n_ >= 1, "point cloud must contain at least one point");
        require(dim_ >= 1, "point cloud dimension must be at least 1");
        require(coords_.size() == n_ * dim_, "point cloud data length does not match N x D");
        for (std::size_t i = 0; i < n_; ++i)
            for (std::size_t k = 0; k < dim_; ++k)
                if (!std::isfinite(coords_[i * dim_ + k]))
                    throw DataError("non-finite coordinate in row " + std::to_string(i) +
                                    " (column " + std::to_string(k) + ")");
    }

    static PointCloud from_rows(const std::vector<std::vector<double>>& rows) {
        require(!rows.empty(), "point cloud must contain at least one point");
        const std::size_t dim = rows.front().size();
        std::vector<double> coords;
        coords.reserve(rows.size() * dim);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            require(rows[i].size() == dim, "row " + std::to_string(i) + " has inconsistent dimension");
            coords.insert(coords.end(), rows[i].begin(), rows[i].end());
        }
        return PointCloud(rows.size(), dim, std::move(coords));
    }

    std::size_t size() const { return n_; }
    std::size_t dim() const { return dim_; }
    std::span<const double> row(std::size_t i) const { return {coords_.data() + i * dim_, dim_}; }
    std::span<const double> data() const { return coords_; }

private:
    std::size_t n_;
    std::size_t dim_;
    std::vector<double> coords_;
};

/// Symmetric N x N matrix with zero diagonal and finite nonnegative entries.
/// The triangle inequality is not required.
class DistanceMatrix {
public:
    static DistanceMatrix from_full(std::size_t n, std::vector<double> entries) {
        require(n >= 1, "distance matrix must be at least 1 x 1");
        require(entries.size() == n * n, "distance matrix data length does not match N x N");
        for (std::size_t i = 0; i < n; ++i) {
            if (entries[i * n + i] != 0.0)
                throw DataError("distance matrix diagonal entry " + std::to_string(i) + " is not zero");
            for (std::size_t j = 0; j < n; ++j) {
                const double v = entries[i * n + j];
                if (!std::isfinite(v) || v < 0.0)
                    throw DataError("distance matrix entry (" + std::to_string(i) + "," + std::to_string(j) +
                                    ") is negative or non-finite");
                if (v != entries[j * n + i])
                    throw DataError("distance matrix is not symmetric at (" + std::to_string(i) + "," +
                                    std::to_string(j) + ")");
            }
        }
        return DistanceMatrix(n, std::move(entries));
    }

    std::size_t size() const { return n_; }
    double operator()(std::size_t i, std::size_t j) const { return d_[i * n_ + j]; }
    std::span<const double> data() const { return d_; }

private:
    friend DistanceMatrix pairwise_distances_unchecked(std::size_t, std::vector<double>);
    DistanceMatrix(std::size_t n, std::vector<double> d) : n_(n), d_(std::move(d)) {}

    std::size_t n_;
    std::vector<double> d_;
};

inline DistanceMatrix pairwise_distances_unchecked(std::size_t n, std::vector<double> d) {
    return DistanceMatrix(n, std::move(d));
}

enum class Metric { euclidean };

inline DistanceMatrix pairwise_distances(const PointCloud& cloud, Metric metric = Metric::euclidean) {
    (void)metric;
    const std::size_t n = cloud.size();
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto xi = cloud.row(i);
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto xj = cloud.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < xi.size(); ++k) {
                const double diff = xi[k] - xj[k];
                acc += diff * diff;
            }
            d[i * n + j] = d[j * n + i] = std::sqrt(acc);
        }
    }
    return pairwise_distances_unchecked(n, std::move(d));
}

/// min over i of max over j of d(i, j). Every H1 class of the Rips filtration
/// dies at or before this value.
inline double enclosing_radius(const DistanceMatrix& dm) {
    double best = kInfinity;
    for (std::size_t i = 0; i < dm.size(); ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < dm.size(); ++j) worst = std::max(worst, dm(i, j));
        best = std::min(best, worst);
    }
    return best;
}

struct Bar {
    int dim = 0;
    double birth = 0.0;
    double death = kInfinity;

    bool infinite() const { return std::isinf(death); }
    /// Open bars are measured up to `cap`.
    double persistence(double cap) const { return (infinite() ? cap : death) - birth; }

    friend bool operator==(const Bar&, const Bar&) = default;
};

struct PersistenceDiagram {
    double threshold_cap = 0.0;
    std::vector<Bar> bars;

    std::size_t count(int dim) const {
        return static_cast<std::size_t>(std::count_if(bars.begin(), bars.end(), [&](const Bar& b) { return b.dim == dim; }));
    }

    /// Bars of `dim` with birth <= t < death.
    std::size_t alive_at(int dim, double t) const {
        return static_cast<std::size_t>(std::count_if(bars.begin(), bars.end(), [&](const Bar& b) {
            return b.dim == dim && b.birth <= t && t < b.death;
        }));
    }
};

struct RipsOptions {
    int max_dim = 1;
    std::optional<double> threshold;  // empty = enclosing radius
    std::size_t max_points = kEngineMaxPoints;
};

namespace detail {

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent_[b] = a;
        if (rank_[a] == rank_[b]) ++rank_[a];
        return true;
    }

private:
    std::vector<std::size_t> parent_;
    std::vector<unsigned> rank_;
};

struct Edge {
    double length;
    std::uint32_t u;
    std::uint32_t v;
};

// Symmetric difference of two ascending index lists (GF(2) column addition).
inline void add_column(std::vector<std::uint32_t>& target, const std::vector<std::uint32_t>& source,
                       std::vector<std::uint32_t>& scratch) {
    scratch.clear();
    std::set_symmetric_difference(target.begin(), target.end(), source.begin(), source.end(),
                                  std::back_inserter(scratch));
    target.swap(scratch);
}

}  // namespace detail

/// Persistence diagram of the Rips filtration up to `opts.threshold`.
///
/// Dimension 0 comes from union-find over the sorted edges. Dimension 1 comes
/// from reducing the triangle boundary matrix over GF(2). Rows belonging to
/// edges that merged components are dropped before reduction (they can never
/// be pivots), and reduction stops as soon as every cycle-creating edge has
/// been paired. Zero-persistence bars are omitted.
inline PersistenceDiagram rips_persistence(const DistanceMatrix& dm, const RipsOptions& opts = {}) {
    const std::size_t n = dm.size();
    if (n > opts.max_points)
        throw DataError("rips_persistence: " + std::to_string(n) + " points exceeds the engine cap of " +
                        std::to_string(opts.max_points));
    require(opts.max_dim == 0 || opts.max_dim == 1, "rips_persistence: max_dim must be 0 or 1");
    // Re-check the matrix contract; instances built through from_full already pass.
    for (std::size_t i = 0; i < n; ++i) {
        require(dm(i, i) == 0.0, "rips_persistence: distance matrix has a nonzero diagonal");
        for (std::size_t j = i + 1; j < n; ++j)
            require(dm(i, j) == dm(j, i), "rips_persistence: distance matrix is not symmetric");
    }

    PersistenceDiagram diagram;
    if (opts.threshold) {
        require(std::isfinite(*opts.threshold) && *opts.threshold >= 0.0,
                "rips_persistence: threshold must be finite and nonnegative");
        diagram.threshold_cap = *opts.threshold;
    } else {
        diagram.threshold_cap = enclosing_radius(dm);
    }
    const double cap = diagram.threshold_cap;

    std::vector<detail::Edge> edges;
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = i + 1; j < n; ++j)
            if (dm(i, j) <= cap) edges.push_back({dm(i, j), i, j});
    std::sort(edges.begin(), edges.end(), [](const detail::Edge& a, const detail::Edge& b) {
        return std::tie(a.length, a.u, a.v) < std::tie(b.length, b.u, b.v);
    });

    detail::DisjointSets components(n);
    std::vector<char> merging(edges.size(), 0);
    std::size_t n_components = n;
    for (std::size_t e = 0; e < edges.size(); ++e) {
        if (!components.unite(edges[e].u, edges[e].v)) continue;
        merging[e] = 1;
        --n_components;
        if (edges[e].length > 0.0) diagram.bars.push_back({0, 0.0, edges[e].length});
    }
    for (std::size_t c = 0; c < n_components; ++c) diagram.bars.push_back({0, 0.0, kInfinity});

    if (opts.max_dim >= 1 && !edges.empty()) {
        constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
        std::vector<std::uint32_t> edge_id(n * n, kNone);
        for (std::size_t e = 0; e < edges.size(); ++e)
            edge_id[edges[e].u * n + edges[e].v] = edge_id[edges[e].v * n + edges[e].u] = static_cast<std::uint32_t>(e);

        const std::size_t n_cycle_edges = edges.size() - (n - n_components);
        std::size_t n_paired = 0;
        std::vector<std::uint32_t> pivot_owner(edges.size(), kNone);
        std::vector<std::vector<std::uint32_t>> reduced;
        std::vector<std::uint32_t> column, scratch;
        std::vector<std::array<std::uint32_t, 3>> triangles;

        std::size_t group_begin = 0;
        while (group_begin < edges.size() && n_paired < n_cycle_edges) {
            const double length = edges[group_begin].length;
            std::size_t group_end = group_begin;
            while (group_end < edges.size() && edges[group_end].length == length) ++group_end;

            // Triangles whose diameter is exactly `length`, in vertex-triple order.
            triangles.clear();
            for (std::size_t e = group_begin; e < group_end; ++e) {
                const auto [len, a, b] = edges[e];
                for (std::uint32_t c = 0; c < n; ++c) {
                    if (c == a || c == b) continue;
                    if (dm(a, c) <= length && dm(b, c) <= length) {
                        std::array<std::uint32_t, 3> t{a, b, c};
                        std::sort(t.begin(), t.end());
                        triangles.push_back(t);
                    }
                }
            }
            std::sort(triangles.begin(), triangles.end());
            triangles.erase(std::unique(triangles.begin(), triangles.end()), triangles.end());

            for (const auto& t : triangles) {
                column.clear();
                for (const auto& [x, y] : {std::pair{t[0], t[1]}, std::pair{t[0], t[2]}, std::pair{t[1], t[2]}}) {
                    const std::uint32_t e = edge_id[x * n + y];
                    if (!merging[e]) column.push_back(e);
                }
                std::sort(column.begin(), column.end());
                while (!column.empty() && pivot_owner[column.back()] != kNone)
                    detail::add_column(column, reduced[pivot_owner[column.back()]], scratch);
                if (column.empty()) continue;

                const std::uint32_t pivot = column.back();
                pivot_owner[pivot] = static_cast<std::uint32_t>(reduced.size());
                reduced.push_back(column);
                ++n_paired;
                if (length > edges[pivot].length) diagram.bars.push_back({1, edges[pivot].length, length});
                if (n_paired == n_cycle_edges) break;
            }
            group_begin = group_end;
        }

        for (std::size_t e = 0; e < edges.size(); ++e)
            if (!merging[e] && pivot_owner[e] == kNone) diagram.bars.push_back({1, edges[e].length, kInfinity});
    }

    std::sort(diagram.bars.begin(), diagram.bars.end(), [](const Bar& a, const Bar& b) {
        return std::tie(a.dim, a.birth, a.death) < std::tie(b.dim, b.birth, b.death);
    });
    return diagram;
}

struct CountingRule {
    double tau = 0.0;
};

/// Number of H1 bars whose persistence is at least tau times the largest
/// finite H1 death (or the threshold cap when no H1 bar dies). Open bars are
/// measured up to the cap.
inline std::size_t count_b1(const PersistenceDiagram& diag, CountingRule rule = {}) {
    require(rule.tau >= 0.0 && rule.tau <= 1.0, "count_b1: tau must lie in [0, 1]");
    double reference = -1.0;
    for (const auto& b : diag.bars)
        if (b.dim == 1 && !b.infinite()) reference = std::max(reference, b.death);
    if (reference < 0.0) reference = diag.threshold_cap;
    const double cutoff = rule.tau * reference;

    std::size_t count = 0;
    for (const auto& b : diag.bars)
        if (b.dim == 1 && b.persistence(diag.threshold_cap) >= cutoff) ++count;
    return count;
}

inline std::string to_json(const PersistenceDiagram& diag) {
    JsonWriter w;
    w.begin_object().field("threshold_cap", diag.threshold_cap).key("bars").begin_array();
    for (const auto& b : diag.bars) {
        w.begin_object().field("dim", b.dim).field("birth", b.birth).key("death");
        if (b.infinite())
            w.null();
        else
            w.value(b.death);
        w.end_object();
    }
    w.end_array().end_object();
    return w.str();
}

inline PersistenceDiagram diagram_from_json(const std::string& text) {
    PersistenceDiagram diag;
    try {
        const auto j = nlohmann::json::parse(text);
        diag.threshold_cap = j.at("threshold_cap").get<double>();
        for (const auto& jb : j.at("bars")) {
            Bar b;
            b.dim = jb.at("dim").get<int>();
            b.birth = jb.at("birth").get<double>();
            b.death = jb.at("death").is_null() ? kInfinity : jb.at("death").get<double>();
            diag.bars.push_back(b);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("persistence diagram JSON: ") + e.what());
    }
    return diag;
}

// ---------------------------------------------------------------------------
// Brute-force oracle

struct BettiVector {
    std::size_t b0 = 0;
    std::size_t b1 = 0;
    std::size_t b2 = 0;
    double threshold = 0.0;
    /// Number of simplices of dimension 0..3 in the enumerated complex.
    std::array<std::size_t, 4> simplices{};
};

namespace detail {

// Incremental GF(2) rank over dense bit columns, keyed by highest set bit.
class Gf2Rank {
public:
    explicit Gf2Rank(std::size_t n_rows) : words_((n_rows + 63) / 64), basis_(n_rows) {}

    std::size_t words() const { return words_; }
    std::size_t rank() const { return rank_; }

    void insert(std::vector<std::uint64_t> col) {
        for (;;) {
            std::size_t w = words_;
            while (w > 0 && col[w - 1] == 0) --w;
            if (w == 0) return;
            const std::size_t top = (w - 1) * 64 + (63 - static_cast<std::size_t>(std::countl_zero(col[w - 1])));
            if (basis_[top].empty()) {
                basis_[top] = std::move(col);
                ++rank_;
                return;
            }
            for (std::size_t k = 0; k < w; ++k) col[k] ^= basis_[top][k];
        }
    }

private:
    std::size_t words_;
    std::vector<std::vector<std::uint64_t>> basis_;
    std::size_t rank_ = 0;
};

inline std::vector<std::uint64_t> bit_column(std::size_t words, std::initializer_list<std::size_t> rows) {
    std::vector<std::uint64_t> col(words, 0);
    for (auto r : rows) col[r / 64] ^= std::uint64_t{1} << (r % 64);
    return col;
}

}  // namespace detail

/// Betti numbers of the Rips complex at scale t, from explicit boundary
/// matrices: b_k = dim ker d_k - rank d_{k+1}. Enumerates every simplex of
/// dimension <= max_dim + 1, so it is limited to small inputs. Sparse
/// complexes (small t) can afford a larger `max_points`.
inline BettiVector betti_at_threshold(const DistanceMatrix& dm, double t, int max_dim = 1,
                                      std::size_t max_points = kOracleMaxPoints) {
    const std::size_t n = dm.size();
    if (n > max_points)
        throw DataError("betti_at_threshold: " + std::to_string(n) + " points exceeds the oracle cap of " +
                        std::to_string(max_points) + "; use rips_persistence for larger clouds");
    require(max_dim >= 0 && max_dim <= 2, "betti_at_threshold: max_dim must be 0, 1 or 2");

    auto in = [&](std::size_t i, std::size_t j) { return dm(i, j) <= t; };

    std::vector<std::size_t> edge_of(n * n, 0);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (in(i, j)) {
                edge_of[i * n + j] = edges.size();
                edges.emplace_back(i, j);
            }

    BettiVector out;
    out.threshold = t;
    out.simplices[0] = n;
    out.simplices[1] = edges.size();

    detail::Gf2Rank d1(n);
    for (const auto& [i, j] : edges) d1.insert(detail::bit_column(d1.words(), {i, j}));
    out.b0 = n - d1.rank();
    if (max_dim == 0) return out;

    std::vector<std::array<std::size_t, 3>> triangles;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!in(i, j)) continue;
            for (std::size_t k = j + 1; k < n; ++k)
                if (in(i, k) && in(j, k)) triangles.push_back({i, j, k});
        }
    out.simplices[2] = triangles.size();

    const std::size_t cycles1 = edges.size() - d1.rank();
    detail::Gf2Rank d2(edges.size());
    std::vector<std::size_t> tri_of;
    if (max_dim == 2) tri_of.assign(n * n * n, 0);
    for (std::size_t f = 0; f < triangles.size(); ++f) {
        const auto [i, j, k] = triangles[f];
        if (max_dim == 2) tri_of[(i * n + j) * n + k] = f;
        if (d2.rank() == cycles1 && max_dim < 2) break;
        if (d2.rank() < cycles1)
            d2.insert(detail::bit_column(d2.words(), {edge_of[i * n + j], edge_of[i * n + k], edge_of[j * n + k]}));
    }
    out.b1 = cycles1 - d2.rank();
    if (max_dim == 1) return out;

    const std::size_t cycles2 = triangles.size() - d2.rank();
    detail::Gf2Rank d3(triangles.size());
    for (const auto& [i, j, k] : triangles)
        for (std::size_t l = k + 1; l < n; ++l) {
            if (!(in(i, l) && in(j, l) && in(k, l))) continue;
            ++out.simplices[3];
            if (d3.rank() < cycles2)
                d3.insert(detail::bit_column(d3.words(), {tri_of[(i * n + j) * n + k], tri_of[(i * n + j) * n + l],
                                                          tri_of[(i * n + k) * n + l], tri_of[(j * n + k) * n + l]}));
        }
    out.b2 = cycles2 - d3.rank();
    return out;
}

}  // namespace adabet::homology
