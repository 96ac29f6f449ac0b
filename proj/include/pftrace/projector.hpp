#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"
#include "pftrace/nn.hpp"

namespace pftrace {

// The "no knowledge learned" target: uniform over K classes.
inline std::vector<double> null_target(std::size_t num_classes) {
    require(num_classes >= 1, "null_target: K must be >= 1");
    return std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes));
}

struct ProjectionConfig {
    double rho_percent = 100.0;
    std::uint64_t subsample_seed = 0;
    bool normalize = true;

    void validate() const {
        require(rho_percent > 0.0 && rho_percent <= 100.0, "projection: rho must be in (0, 100]");
    }
};

struct ProjectionMatrix {
    std::size_t cols = 0;
    std::vector<float> rows;                  // size() x cols, row-major
    std::vector<std::size_t> row_index_map;   // dataset index of each row
    std::vector<std::size_t> coordinates;     // selected final-layer weight positions
    ProjectionConfig config;
    std::string model_digest;

    std::size_t size() const { return row_index_map.size(); }
    std::span<const float> row(std::size_t r) const { return {rows.data() + r * cols, cols}; }
};

inline std::size_t selected_coordinate_count(double rho_percent, std::size_t weight_count) {
    const auto m = static_cast<std::size_t>(std::llround(rho_percent / 100.0 * static_cast<double>(weight_count)));
    return std::max<std::size_t>(1, std::min(m, weight_count));
}

// Sorted subset of final-layer weight positions (biases excluded). Depends only
// on the seed and the layer shape.
inline std::vector<std::size_t> select_coordinates(std::size_t weight_count, const ProjectionConfig& cfg) {
    cfg.validate();
    const std::size_t m = selected_coordinate_count(cfg.rho_percent, weight_count);
    std::vector<std::size_t> all(weight_count);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (m == weight_count) return all;
    Rng rng(derive_seed(cfg.subsample_seed, "projector.subsample"));
    shuffle_in_place(all, rng);
    all.resize(m);
    std::sort(all.begin(), all.end());
    return all;
}

// Row i: gradient of loss_ce(forward(x_i), uniform) w.r.t. the final-layer
// weight matrix, i.e. (p - u) h^T, restricted to the selected coordinates.
inline ProjectionMatrix project(const Classifier& model, const LabeledDataset& ds, const DatasetSlice& slice,
                                const ProjectionConfig& cfg) {
    require(model.num_classes() == ds.num_classes, "project: model K != dataset K");
    require(model.input_dim() == ds.d, "project: model input dim != dataset d");
    const auto& last = model.final_layer();
    const std::size_t weight_count = last.weight.size();

    ProjectionMatrix pm;
    pm.config = cfg;
    pm.coordinates = select_coordinates(weight_count, cfg);
    pm.cols = pm.coordinates.size();
    pm.row_index_map = slice.indices;
    pm.rows.resize(pm.size() * pm.cols);
    pm.model_digest = model_digest(model);

    const float uniform = 1.0f / static_cast<float>(ds.num_classes);
    Activations<float> act;
    std::vector<float> delta(ds.num_classes);
    for (std::size_t r = 0; r < pm.size(); ++r) {
        forward_into(model, ds.row(slice.indices[r]), act);
        const auto& p = act.post.back();
        const auto& h = act.post[act.post.size() - 2];
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = p[k] - uniform;
        float* out = pm.rows.data() + r * pm.cols;
        double norm2 = 0;
        for (std::size_t c = 0; c < pm.cols; ++c) {
            const std::size_t pos = pm.coordinates[c];
            out[c] = delta[pos / last.in] * h[pos % last.in];
            norm2 += static_cast<double>(out[c]) * out[c];
        }
        if (cfg.normalize && norm2 > 0) {
            const auto inv = static_cast<float>(1.0 / std::sqrt(norm2));
            for (std::size_t c = 0; c < pm.cols; ++c) out[c] *= inv;
        }
    }
    return pm;
}

// Rows of `pm` restricted to the dataset indices in `slice` (which must be a
// subset of pm.row_index_map).
inline ProjectionMatrix restrict_rows(const ProjectionMatrix& pm, const DatasetSlice& slice) {
    ProjectionMatrix out;
    out.cols = pm.cols;
    out.coordinates = pm.coordinates;
    out.config = pm.config;
    out.model_digest = pm.model_digest;
    out.row_index_map = slice.indices;
    out.rows.reserve(slice.size() * pm.cols);
    std::size_t r = 0;
    for (auto idx : slice.indices) {
        while (r < pm.row_index_map.size() && pm.row_index_map[r] < idx) ++r;
        require(r < pm.row_index_map.size() && pm.row_index_map[r] == idx,
                "restrict_rows: slice index not present in projection");
        auto src = pm.row(r);
        out.rows.insert(out.rows.end(), src.begin(), src.end());
    }
    return out;
}

inline void write_projection_csv(std::ostream& os, const ProjectionMatrix& pm) {
    os << "index";
    for (std::size_t c = 0; c < pm.cols; ++c) os << ",w" << pm.coordinates[c];
    os << "\n";
    for (std::size_t r = 0; r < pm.size(); ++r) {
        os << pm.row_index_map[r];
        for (float v : pm.row(r)) os << "," << v;
        os << "\n";
    }
}

// ---- PCA diagnostics ----

struct PcaResult {
    std::vector<double> coords;  // N x 2
    double eigenvalue[2] = {0, 0};
    double explained_ratio[2] = {0, 0};
    bool rank_deficient = false;
};

namespace detail {

inline std::vector<double> power_iteration(const std::vector<double>& cov, std::size_t m, Rng& rng,
                                           double* eigenvalue) {
    std::vector<double> v(m);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& x : v) x = g(rng);
    std::vector<double> w(m);
    double lambda = 0;
    for (int it = 0; it < 1000; ++it) {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) s += cov[i * m + j] * v[j];
            w[i] = s;
        }
        double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
        if (norm == 0) {
            lambda = 0;
            break;
        }
        for (auto& x : w) x /= norm;
        double delta = 0;
        for (std::size_t i = 0; i < m; ++i) delta = std::max(delta, std::abs(std::abs(w[i]) - std::abs(v[i])));
        v.swap(w);
        lambda = norm;
        if (delta < 1e-12) break;
    }
    *eigenvalue = lambda;
    return v;
}

}  // namespace detail

// Top-2 principal components by power iteration with deflation.
inline PcaResult pca_2d(const ProjectionMatrix& pm, std::uint64_t seed = 0) {
    const std::size_t n = pm.size();
    const std::size_t m = pm.cols;
    PcaResult res;
    res.coords.assign(n * 2, 0.0);
    if (n == 0) return res;

    std::vector<double> mean(m, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        auto row = pm.row(r);
        for (std::size_t c = 0; c < m; ++c) mean[c] += row[c];
    }
    for (auto& v : mean) v /= static_cast<double>(n);
    std::vector<double> cov(m * m, 0.0);
    std::vector<double> centered(m);
    for (std::size_t r = 0; r < n; ++r) {
        auto row = pm.row(r);
        for (std::size_t c = 0; c < m; ++c) centered[c] = row[c] - mean[c];
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = i; j < m; ++j) cov[i * m + j] += centered[i] * centered[j];
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i; j < m; ++j) {
            cov[i * m + j] /= static_cast<double>(n);
            cov[j * m + i] = cov[i * m + j];
        }
    }
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) total += cov[i * m + i];

    Rng rng(derive_seed(seed, "pca"));
    auto v1 = detail::power_iteration(cov, m, rng, &res.eigenvalue[0]);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) cov[i * m + j] -= res.eigenvalue[0] * v1[i] * v1[j];
    }
    std::vector<double> v2(m, 0.0);
    if (m >= 2) v2 = detail::power_iteration(cov, m, rng, &res.eigenvalue[1]);
    if (m < 2 || res.eigenvalue[1] <= 1e-9 * std::max(res.eigenvalue[0], 1e-300)) {
        res.rank_deficient = true;
        res.eigenvalue[1] = 0;
        std::fill(v2.begin(), v2.end(), 0.0);
    }
    if (total > 0) {
        res.explained_ratio[0] = res.eigenvalue[0] / total;
        res.explained_ratio[1] = res.eigenvalue[1] / total;
    }
    for (std::size_t r = 0; r < n; ++r) {
        auto row = pm.row(r);
        double a = 0;
        double b = 0;
        for (std::size_t c = 0; c < m; ++c) {
            const double x = row[c] - mean[c];
            a += x * v1[c];
            b += x * v2[c];
        }
        res.coords[r * 2] = a;
        res.coords[r * 2 + 1] = b;
    }
    return res;
}

inline void write_pca_csv(std::ostream& os, const ProjectionMatrix& pm, const PcaResult& pca,
                          const LabeledDataset* ds = nullptr) {
    os << "index,pc1,pc2";
    if (ds != nullptr) os << ",is_poison";
    os << "\n";
    for (std::size_t r = 0; r < pm.size(); ++r) {
        os << pm.row_index_map[r] << "," << pca.coords[r * 2] << "," << pca.coords[r * 2 + 1];
        if (ds != nullptr) os << "," << static_cast<int>(ds->poison_mask[pm.row_index_map[r]]);
        os << "\n";
    }
}

}  // namespace pftrace
