#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "pftrace/common.hpp"

namespace pftrace {

// Non-owning view of an N x m row-major float matrix.
struct RowMatrixView {
    const float* data = nullptr;
    std::size_t n = 0;
    std::size_t m = 0;

    std::span<const float> row(std::size_t i) const { return {data + i * m, m}; }
};

struct KMeansConfig {
    std::size_t k = 2;
    std::size_t batch_size = 256;
    std::size_t max_batches = 1000;
    std::size_t n_init = 3;  // k-means++ candidates scored on the init sample
    std::uint64_t seed = 0;
    double convergence_tol = 1e-4;
    // Full-batch Lloyd steps applied after the mini-batch phase.
    std::size_t polish_iterations = 10;

    void validate() const {
        require(k == 2, "kmeans: only k = 2 is supported");
        require(batch_size >= k, "kmeans: batch_size must be >= k");
        require(max_batches >= 1, "kmeans: max_batches must be >= 1");
        require(n_init >= 1, "kmeans: n_init must be >= 1");
    }
};

struct ClusterAssignment {
    std::vector<std::uint8_t> labels;
    std::vector<double> centroids;  // k x m
    double inertia = 0;
    double initial_inertia = 0;
    std::size_t iterations_used = 0;
    bool degenerate = false;
    bool converged = false;

    std::size_t count(std::uint8_t c) const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
    }
};

namespace detail {

inline double sq_dist(std::span<const float> x, const double* c) {
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double d = static_cast<double>(x[j]) - c[j];
        s += d * d;
    }
    return s;
}

// Nearest centroid; ties go to the lower index.
inline std::size_t nearest(std::span<const float> x, const std::vector<double>& centroids, std::size_t k,
                           double* best_out = nullptr) {
    const std::size_t m = x.size();
    std::size_t best = 0;
    double best_d = sq_dist(x, centroids.data());
    for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(x, centroids.data() + c * m);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (best_out != nullptr) *best_out = best_d;
    return best;
}

inline double full_inertia(const RowMatrixView& rows, const std::vector<double>& centroids, std::size_t k,
                           std::vector<std::uint8_t>* labels = nullptr) {
    double total = 0;
    if (labels != nullptr) labels->resize(rows.n);
    for (std::size_t i = 0; i < rows.n; ++i) {
        double d = 0;
        const auto c = nearest(rows.row(i), centroids, k, &d);
        total += d;
        if (labels != nullptr) (*labels)[i] = static_cast<std::uint8_t>(c);
    }
    return total;
}

inline std::vector<double> kmeanspp(const RowMatrixView& rows, const std::vector<std::size_t>& sample,
                                    std::size_t k, Rng& rng) {
    const std::size_t m = rows.m;
    std::vector<double> centroids(k * m);
    const std::size_t first = sample[static_cast<std::size_t>(rng() % sample.size())];
    for (std::size_t j = 0; j < m; ++j) centroids[j] = rows.row(first)[j];
    std::vector<double> d2(sample.size(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (std::size_t s = 0; s < sample.size(); ++s) {
            d2[s] = std::min(d2[s], sq_dist(rows.row(sample[s]), centroids.data() + (c - 1) * m));
            total += d2[s];
        }
        std::size_t pick = sample.back();
        if (total > 0) {
            double u = uniform01(rng) * total;
            for (std::size_t s = 0; s < sample.size(); ++s) {
                u -= d2[s];
                if (u < 0) {
                    pick = sample[s];
                    break;
                }
            }
        }
        for (std::size_t j = 0; j < m; ++j) centroids[c * m + j] = rows.row(pick)[j];
    }
    return centroids;
}

inline bool all_rows_identical(const RowMatrixView& rows) {
    for (std::size_t i = 1; i < rows.n; ++i) {
        if (!std::equal(rows.row(i).begin(), rows.row(i).end(), rows.row(0).begin())) return false;
    }
    return true;
}

}  // namespace detail

namespace detail {

// One mini-batch run from `centroids`, followed by the Lloyd polish.
inline ClusterAssignment minibatch_run(const RowMatrixView& rows, const KMeansConfig& cfg,
                                       std::vector<double> centroids, double threshold, Rng& rng) {
    const std::size_t k = cfg.k;
    const std::size_t m = rows.m;
    ClusterAssignment out;
    const auto initial = centroids;
    out.initial_inertia = full_inertia(rows, initial, k);

    std::vector<std::size_t> order(rows.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> counts(k, 0.0);
    std::vector<std::size_t> batch_labels;
    std::size_t batches = 0;
    while (batches < cfg.max_batches && !out.converged) {
        shuffle_in_place(order, rng);
        const auto sweep_start = centroids;
        for (std::size_t start = 0; start < rows.n && batches < cfg.max_batches; start += cfg.batch_size) {
            const std::size_t end = std::min(rows.n, start + cfg.batch_size);
            batch_labels.resize(end - start);
            for (std::size_t b = start; b < end; ++b) {
                batch_labels[b - start] = nearest(rows.row(order[b]), centroids, k);
            }
            for (std::size_t b = start; b < end; ++b) {
                const std::size_t c = batch_labels[b - start];
                counts[c] += 1.0;
                const double eta = 1.0 / counts[c];
                double* cen = centroids.data() + c * m;
                auto x = rows.row(order[b]);
                for (std::size_t j = 0; j < m; ++j) cen[j] += eta * (x[j] - cen[j]);
            }
            ++batches;
        }
        double max_move = 0;
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const double d = centroids[c * m + j] - sweep_start[c * m + j];
                s += d * d;
            }
            max_move = std::max(max_move, std::sqrt(s));
        }
        out.converged = max_move < threshold;
    }
    out.iterations_used = batches;

    out.inertia = full_inertia(rows, centroids, k, &out.labels);
    if (out.inertia > out.initial_inertia) {
        centroids = initial;
        out.inertia = full_inertia(rows, centroids, k, &out.labels);
    }

    for (std::size_t it = 0; it < cfg.polish_iterations; ++it) {
        std::vector<double> sum(k * m, 0.0);
        std::vector<std::size_t> cnt(k, 0);
        for (std::size_t i = 0; i < rows.n; ++i) {
            const std::size_t c = out.labels[i];
            ++cnt[c];
            auto x = rows.row(i);
            for (std::size_t j = 0; j < m; ++j) sum[c * m + j] += x[j];
        }
        auto next = centroids;
        for (std::size_t c = 0; c < k; ++c) {
            if (cnt[c] == 0) continue;
            for (std::size_t j = 0; j < m; ++j) next[c * m + j] = sum[c * m + j] / static_cast<double>(cnt[c]);
        }
        std::vector<std::uint8_t> labels;
        const double inertia = full_inertia(rows, next, k, &labels);
        if (!(inertia < out.inertia)) break;
        const bool same = labels == out.labels;
        centroids = std::move(next);
        out.inertia = inertia;
        out.labels = std::move(labels);
        if (same) break;
    }
    out.centroids = std::move(centroids);
    return out;
}

}  // namespace detail

// Mini-batch k-means with per-centre learning rates:
//   count[c] += 1;  c += (x - c) / count[c]
// followed by a few full-batch Lloyd steps. Each of n_init k-means++ seedings
// (drawn on a sample of min(N, 10 * batch_size) rows) is run to the end; the
// lowest full inertia wins. A run stops when the largest centroid move over one
// sweep falls below tol * mean row norm, or after max_batches batches.
inline ClusterAssignment minibatch_kmeans(const RowMatrixView& rows, const KMeansConfig& cfg) {
    cfg.validate();
    require(rows.n >= 1, "kmeans: no rows");
    const std::size_t k = cfg.k;
    const std::size_t m = rows.m;

    if (rows.n < 2 || detail::all_rows_identical(rows)) {
        ClusterAssignment out;
        out.degenerate = true;
        out.labels.assign(rows.n, 0);
        out.centroids.assign(k * m, 0.0);
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t j = 0; j < m; ++j) out.centroids[c * m + j] = rows.row(0)[j];
        }
        return out;
    }

    Rng rng(derive_seed(cfg.seed, "kmeans"));
    std::vector<std::size_t> sample(rows.n);
    std::iota(sample.begin(), sample.end(), std::size_t{0});
    shuffle_in_place(sample, rng);
    sample.resize(std::min(rows.n, 10 * cfg.batch_size));
    std::sort(sample.begin(), sample.end());

    double mean_norm = 0;
    for (std::size_t i = 0; i < rows.n; ++i) {
        double s = 0;
        for (float v : rows.row(i)) s += static_cast<double>(v) * v;
        mean_norm += std::sqrt(s);
    }
    mean_norm /= static_cast<double>(rows.n);
    const double threshold = cfg.convergence_tol * mean_norm;

    ClusterAssignment out;
    bool have = false;
    for (std::size_t trial = 0; trial < cfg.n_init; ++trial) {
        auto seedc = detail::kmeanspp(rows, sample, k, rng);
        Rng run_rng(derive_seed(cfg.seed, "kmeans.run", trial));
        auto r = detail::minibatch_run(rows, cfg, std::move(seedc), threshold, run_rng);
        if (!have || r.inertia < out.inertia) {
            out = std::move(r);
            have = true;
        }
    }
    auto centroids = std::move(out.centroids);

    // Empty-cluster repair: move the empty centre to the row farthest from the
    // surviving one.
    for (std::size_t c = 0; c < k; ++c) {
        if (out.count(static_cast<std::uint8_t>(c)) != 0) continue;
        const std::size_t other = 1 - c;
        std::size_t far = 0;
        double far_d = -1;
        for (std::size_t i = 0; i < rows.n; ++i) {
            const double d = detail::sq_dist(rows.row(i), centroids.data() + other * m);
            if (d > far_d) {
                far_d = d;
                far = i;
            }
        }
        for (std::size_t j = 0; j < m; ++j) centroids[c * m + j] = rows.row(far)[j];
        out.inertia = detail::full_inertia(rows, centroids, k, &out.labels);
    }
    out.centroids = std::move(centroids);
    out.degenerate = out.count(0) == 0 || out.count(1) == 0;
    return out;
}

// Ground-truth centroid geometry, as distances normalised by the mean row
// norm. Poison-related fields are empty when the mask has no poison rows.
struct CentroidDiagnostics {
    double mean_row_norm = 0;
    double benign_spread = 0;  // mean benign-row distance to the benign centroid
    std::optional<double> poison_to_benign_centroid;
    std::optional<double> poison_to_poison_centroid;
    std::optional<double> benign_to_poison_centroid;
    std::optional<double> centroid_distance;
    // poison_to_benign_centroid / benign_to_poison_centroid; 1 for mirrored clusters.
    std::optional<double> symmetry_ratio;
};

inline CentroidDiagnostics centroid_diagnostics(const RowMatrixView& rows, std::span<const std::uint8_t> mask) {
    require(mask.size() == rows.n, "centroid_diagnostics: mask size != row count");
    const std::size_t m = rows.m;
    CentroidDiagnostics out;
    std::vector<double> cb(m, 0.0);
    std::vector<double> cp(m, 0.0);
    std::size_t nb = 0;
    std::size_t np = 0;
    for (std::size_t i = 0; i < rows.n; ++i) {
        auto r = rows.row(i);
        double s = 0;
        for (float v : r) s += static_cast<double>(v) * v;
        out.mean_row_norm += std::sqrt(s);
        auto& acc = mask[i] ? cp : cb;
        for (std::size_t j = 0; j < m; ++j) acc[j] += r[j];
        (mask[i] ? np : nb) += 1;
    }
    out.mean_row_norm /= std::max<std::size_t>(rows.n, 1);
    const double norm = out.mean_row_norm > 0 ? out.mean_row_norm : 1.0;
    if (nb > 0) for (auto& v : cb) v /= static_cast<double>(nb);
    if (np > 0) for (auto& v : cp) v /= static_cast<double>(np);

    double spread = 0;
    double p_to_b = 0;
    double p_to_p = 0;
    double b_to_p = 0;
    for (std::size_t i = 0; i < rows.n; ++i) {
        auto r = rows.row(i);
        if (mask[i]) {
            p_to_b += std::sqrt(detail::sq_dist(r, cb.data()));
            p_to_p += std::sqrt(detail::sq_dist(r, cp.data()));
        } else {
            spread += std::sqrt(detail::sq_dist(r, cb.data()));
            if (np > 0) b_to_p += std::sqrt(detail::sq_dist(r, cp.data()));
        }
    }
    if (nb > 0) out.benign_spread = spread / static_cast<double>(nb) / norm;
    if (np > 0 && nb > 0) {
        out.poison_to_benign_centroid = p_to_b / static_cast<double>(np) / norm;
        out.poison_to_poison_centroid = p_to_p / static_cast<double>(np) / norm;
        out.benign_to_poison_centroid = b_to_p / static_cast<double>(nb) / norm;
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) s += (cb[j] - cp[j]) * (cb[j] - cp[j]);
        out.centroid_distance = std::sqrt(s) / norm;
        if (*out.benign_to_poison_centroid > 0) {
            out.symmetry_ratio = *out.poison_to_benign_centroid / *out.benign_to_poison_centroid;
        }
    }
    return out;
}

}  // namespace pftrace
