#pragma once

// Fisher-information baseline scorer: delta = 1/(2N) * sum_n (a_n . g_n)^2,
// normalized by the unit's parameter count.

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "adabet/error.hpp"
#include "adabet/ingest.hpp"
#include "adabet/selection.hpp"

namespace adabet {

/// a_n . g_n is the inner product over every non-batch element of sample n,
/// reduced before squaring.
inline double fisher_delta(const Tensor& acts, const Tensor& grads) {
    if (acts.shape != grads.shape) throw DataError("fisher_delta: activation and gradient shapes differ");
    require(!acts.shape.empty() && acts.batch() >= 1, "fisher_delta: need at least one sample");
    const std::size_t n = acts.batch(), d = acts.per_sample();
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += acts.data[s * d + k] * grads.data[s * d + k];
        sum += dot * dot;
    }
    return sum / (2.0 * static_cast<double>(n));
}

struct FisherScore {
    std::size_t layer_index = 0;
    double delta = 0.0;
    std::size_t param_count = 0;
    std::optional<double> normalized;  // empty when param_count == 0
};

inline FisherScore make_fisher_score(std::size_t layer, double delta, std::size_t param_count) {
    FisherScore s{layer, delta, param_count, std::nullopt};
    if (param_count > 0) s.normalized = delta / static_cast<double>(param_count);
    return s;
}

/// Ranks Fisher scores with the same budget and tie rules as rank_and_select.
/// `all_metas` supplies group membership; when empty, the metas paired with
/// the scores are the full layer list.
inline SelectionManifest fisher_rank(std::span<const std::pair<FisherScore, LayerMeta>> layers, double rho,
                                     std::span<const LayerMeta> all_metas = {}) {
    SelectionManifest manifest;
    manifest.scorer = "fisher";
    manifest.config.rho = rho;
    manifest.config.validate();

    std::vector<LayerMeta> paired;
    std::vector<ScoreEntry> entries;
    for (const auto& [score, meta] : layers) {
        if (!score.normalized)
            throw DataError("layer " + std::to_string(score.layer_index) +
                            ": Fisher normalization needs a nonzero parameter count");
        entries.push_back({score.layer_index, meta.group_id, score.delta, score.param_count, *score.normalized});
        paired.push_back(meta);
    }
    rank_entries(manifest, std::move(entries), all_metas.empty() ? std::span<const LayerMeta>(paired) : all_metas);
    return manifest;
}

}  // namespace adabet
