#pragma once

// Layer scoring by normalized first Betti number, budgeted top-k selection,
// and the canonical selection manifest shared by every scorer.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/homology.hpp"
#include "adabet/ingest.hpp"
#include "adabet/json_writer.hpp"

namespace adabet {

inline constexpr const char* kToolVersion = "adabet 0.1.0";

struct SelectionConfig {
    double rho = 0.1;
    std::size_t pool_cap = kDefaultPoolCap;
    double tau = 0.0;
    std::uint64_t seed = 42;
    homology::Metric metric = homology::Metric::euclidean;
    bool standardize = false;

    void validate() const {
        require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
        require(tau >= 0.0 && tau <= 1.0, "tau must lie in [0, 1]");
        require(pool_cap >= 1, "pool cap must be at least 1");
    }

    friend bool operator==(const SelectionConfig&, const SelectionConfig&) = default;
};

struct LayerScore {
    std::size_t layer_index = 0;
    std::optional<std::string> group_id;
    std::size_t raw_b1 = 0;
    std::size_t act_elems = 1;
    double normalized = 0.0;
};

inline double normalized_betti(std::size_t raw_b1, std::size_t act_elems) {
    return static_cast<double>(raw_b1) / static_cast<double>(act_elems);
}

/// One ranked unit in a manifest. `raw` is b1 (Betti) or the Fisher delta;
/// `size` is the activation element count (Betti) or parameter count (Fisher).
struct ScoreEntry {
    std::size_t layer = 0;
    std::optional<std::string> group;
    double raw = 0.0;
    std::size_t size = 1;
    double normalized = 0.0;

    friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

struct PoolRecord {
    std::size_t layer = 0;
    std::size_t rows = 0;
    std::vector<PoolSource> sources;

    friend bool operator==(const PoolRecord& a, const PoolRecord& b) {
        if (a.layer != b.layer || a.rows != b.rows || a.sources.size() != b.sources.size()) return false;
        for (std::size_t i = 0; i < a.sources.size(); ++i)
            if (a.sources[i].id != b.sources[i].id || a.sources[i].batch_size != b.sources[i].batch_size) return false;
        return true;
    }
};

struct SelectionManifest {
    std::string version = kToolVersion;
    std::string scorer = "betti";
    SelectionConfig config;
    std::vector<ScoreEntry> scores;  // ranked
    std::vector<std::size_t> selected;  // ascending layer indices
    std::vector<PoolRecord> pools;

    friend bool operator==(const SelectionManifest&, const SelectionManifest&) = default;
};

// ---------------------------------------------------------------------------
// Units: ungrouped trainable layers, or all trainable members of a group.

struct SelectionUnit {
    std::size_t representative = 0;
    std::optional<std::string> group;
    std::vector<std::size_t> members;
};

inline std::vector<SelectionUnit> trainable_units(std::span<const LayerMeta> metas) {
    std::vector<SelectionUnit> units;
    std::map<std::string, std::vector<const LayerMeta*>> groups;
    for (const auto& m : metas) {
        if (!m.trainable) continue;
        if (m.group_id)
            groups[*m.group_id].push_back(&m);
        else
            units.push_back({m.index, std::nullopt, {m.index}});
    }
    for (const auto& [gid, members] : groups) {
        SelectionUnit u;
        u.group = gid;
        std::size_t outputs = 0;
        for (const auto* m : members) {
            u.members.push_back(m->index);
            if (m->group_output) {
                u.representative = m->index;
                ++outputs;
            }
        }
        if (outputs != 1)
            throw DataError("group '" + gid + "' must have exactly one designated output sublayer (found " +
                            std::to_string(outputs) + ")");
        std::sort(u.members.begin(), u.members.end());
        units.push_back(std::move(u));
    }
    std::sort(units.begin(), units.end(),
              [](const SelectionUnit& a, const SelectionUnit& b) { return a.representative < b.representative; });
    return units;
}

/// ceil(rho * units), with rho = 0 selecting nothing. A 1e-9 slack absorbs
/// representation error such as 0.7 * 10 = 7.000000000000001.
inline std::size_t selection_budget(double rho, std::size_t units) {
    if (rho <= 0.0 || units == 0) return 0;
    const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(units) - 1e-9));
    return std::clamp<std::size_t>(k, 1, units);
}

inline void sort_ranked(std::vector<ScoreEntry>& entries) {
    std::sort(entries.begin(), entries.end(), [](const ScoreEntry& a, const ScoreEntry& b) {
        if (a.normalized != b.normalized) return a.normalized > b.normalized;
        if (a.raw != b.raw) return a.raw > b.raw;
        return a.layer < b.layer;
    });
}

/// Ranks one entry per unit and fills `scores` and `selected`.
inline void rank_entries(SelectionManifest& manifest, std::vector<ScoreEntry> entries, std::span<const LayerMeta> metas) {
    require(!entries.empty(), "cannot rank an empty score list");
    const auto units = trainable_units(metas);
    std::map<std::size_t, const SelectionUnit*> by_rep;
    for (const auto& u : units) by_rep[u.representative] = &u;

    std::map<std::size_t, int> seen;
    for (const auto& e : entries) {
        const auto it = by_rep.find(e.layer);
        if (it == by_rep.end())
            throw DataError("score for layer " + std::to_string(e.layer) + " does not correspond to a trainable unit");
        if (++seen[e.layer] > 1) throw DataError("duplicate score for layer " + std::to_string(e.layer));
    }
    for (const auto& u : units)
        if (!seen.count(u.representative))
            throw DataError("missing score for trainable unit at layer " + std::to_string(u.representative));

    sort_ranked(entries);
    const std::size_t k = selection_budget(manifest.config.rho, units.size());
    manifest.selected.clear();
    for (std::size_t i = 0; i < k; ++i) {
        const auto& members = by_rep.at(entries[i].layer)->members;
        manifest.selected.insert(manifest.selected.end(), members.begin(), members.end());
    }
    std::sort(manifest.selected.begin(), manifest.selected.end());
    manifest.scores = std::move(entries);
}

// ---------------------------------------------------------------------------
// Betti scoring

inline LayerScore score_layer(const ActivationPool& pool, const LayerMeta& meta, const SelectionConfig& cfg) {
    if (!meta.trainable) throw DataError("layer " + std::to_string(meta.index) + " is not trainable and cannot be scored");
    if (pool.layer_index != meta.index)
        throw DataError("pool for layer " + std::to_string(pool.layer_index) + " passed with meta for layer " +
                        std::to_string(meta.index));
    LayerScore score;
    score.layer_index = meta.index;
    score.group_id = meta.group_id;
    score.act_elems = meta.act_elems_per_sample;
    try {
        const auto cloud = cfg.standardize ? standardize_columns(pool).cloud() : pool.cloud();
        const auto diagram = homology::rips_persistence(homology::pairwise_distances(cloud, cfg.metric));
        score.raw_b1 = homology::count_b1(diagram, {cfg.tau});
    } catch (const DataError& e) {
        throw DataError("layer " + std::to_string(meta.index) + ": " + e.what());
    }
    score.normalized = normalized_betti(score.raw_b1, score.act_elems);
    return score;
}

inline SelectionManifest rank_and_select(std::span<const LayerScore> scores, std::span<const LayerMeta> metas,
                                         const SelectionConfig& cfg) {
    cfg.validate();
    SelectionManifest manifest;
    manifest.scorer = "betti";
    manifest.config = cfg;
    std::vector<ScoreEntry> entries;
    for (const auto& s : scores)
        entries.push_back({s.layer_index, s.group_id, static_cast<double>(s.raw_b1), s.act_elems, s.normalized});
    rank_entries(manifest, std::move(entries), metas);
    return manifest;
}

// ---------------------------------------------------------------------------
// Manifest serialization

inline std::string to_json(const SelectionManifest& m) {
    const bool betti = m.scorer == "betti";
    JsonWriter w;
    w.begin_object().field("version", m.version).field("scorer", m.scorer);
    w.key("config")
        .begin_object()
        .field("rho", m.config.rho)
        .field("pool_cap", std::uint64_t{m.config.pool_cap})
        .field("tau", m.config.tau)
        .field("seed", m.config.seed)
        .field("metric", "euclidean")
        .field("standardize", m.config.standardize)
        .end_object();
    w.key("scores").begin_array();
    for (const auto& s : m.scores) {
        w.begin_object().field("layer", std::uint64_t{s.layer}).field("group", s.group);
        if (betti)
            w.field("raw_b1", static_cast<std::uint64_t>(s.raw)).field("act_elems", std::uint64_t{s.size});
        else
            w.field("delta", s.raw).field("param_count", std::uint64_t{s.size});
        w.field("normalized", s.normalized).end_object();
    }
    w.end_array();
    w.key("selected").begin_array();
    for (auto i : m.selected) w.value(std::uint64_t{i});
    w.end_array();
    w.key("pools").begin_array();
    for (const auto& p : m.pools) {
        w.begin_object().field("layer", std::uint64_t{p.layer}).field("rows", std::uint64_t{p.rows});
        w.key("sources").begin_array();
        for (const auto& s : p.sources)
            w.begin_object().field("id", s.id).field("batch_size", std::uint64_t{s.batch_size}).end_object();
        w.end_array().end_object();
    }
    w.end_array();
    w.end_object();
    return w.str();
}

inline SelectionManifest manifest_from_json(std::string_view text) {
    SelectionManifest m;
    try {
        const auto j = nlohmann::json::parse(text);
        m.version = j.at("version").get<std::string>();
        m.scorer = j.value("scorer", std::string("betti"));
        const auto& c = j.at("config");
        m.config.rho = c.at("rho").get<double>();
        m.config.pool_cap = c.value("pool_cap", kDefaultPoolCap);
        m.config.tau = c.value("tau", 0.0);
        m.config.seed = c.value("seed", std::uint64_t{42});
        m.config.standardize = c.value("standardize", false);
        const bool betti = m.scorer == "betti";
        for (const auto& js : j.at("scores")) {
            ScoreEntry e;
            e.layer = js.at("layer").get<std::size_t>();
            if (!js.at("group").is_null()) e.group = js.at("group").get<std::string>();
            e.raw = js.at(betti ? "raw_b1" : "delta").get<double>();
            e.size = js.at(betti ? "act_elems" : "param_count").get<std::size_t>();
            e.normalized = js.at("normalized").get<double>();
            m.scores.push_back(std::move(e));
        }
        m.selected = j.at("selected").get<std::vector<std::size_t>>();
        if (j.contains("pools"))
            for (const auto& jp : j.at("pools")) {
                PoolRecord p;
                p.layer = jp.at("layer").get<std::size_t>();
                p.rows = jp.at("rows").get<std::size_t>();
                for (const auto& s : jp.at("sources"))
                    p.sources.push_back({s.at("id").get<std::string>(), s.at("batch_size").get<std::size_t>()});
                m.pools.push_back(std::move(p));
            }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest JSON: ") + e.what());
    }
    m.config.validate();
    return m;
}

}  // namespace adabet
