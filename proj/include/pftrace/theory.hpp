#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "pftrace/common.hpp"

namespace pftrace::theory {

// Gaussian blobs in R^d. With `fixed_label` set every draw carries that label
// and is displaced by `shift` (a poison distribution built on the same means).
struct BlobSource {
    std::uint32_t num_classes = 3;
    std::size_t dim = 8;
    double separation = 3.0;
    double sigma = 1.0;
    std::uint64_t means_seed = 1;
    std::optional<std::uint32_t> fixed_label;
    std::vector<double> shift;

    void validate() const {
        require(num_classes >= 2 && dim >= 1, "blob source: need K >= 2 and d >= 1");
        require(sigma >= 0 && separation >= 0, "blob source: negative scale");
        require(shift.empty() || shift.size() == dim, "blob source: shift has the wrong dimension");
        if (fixed_label) require(*fixed_label < num_classes, "blob source: fixed label out of range");
    }
};

struct Samples {
    std::size_t dim = 0;
    std::vector<double> x;  // n x dim
    std::vector<std::uint32_t> y;

    std::size_t size() const { return y.size(); }
    std::span<const double> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
    void append(const Samples& o, std::size_t count) {
        require(o.dim == dim && count <= o.size(), "samples: append out of range");
        x.insert(x.end(), o.x.begin(), o.x.begin() + static_cast<std::ptrdiff_t>(count * dim));
        y.insert(y.end(), o.y.begin(), o.y.begin() + static_cast<std::ptrdiff_t>(count));
    }
};

inline std::vector<double> blob_means(const BlobSource& s) {
    Rng rng(derive_seed(s.means_seed, "theory.means"));
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> m(s.num_classes * s.dim);
    for (auto& v : m) v = g(rng);
    double min_dist = std::numeric_limits<double>::infinity();
    for (std::uint32_t a = 0; a < s.num_classes; ++a) {
        for (std::uint32_t b = a + 1; b < s.num_classes; ++b) {
            double acc = 0;
            for (std::size_t j = 0; j < s.dim; ++j) acc += std::pow(m[a * s.dim + j] - m[b * s.dim + j], 2);
            min_dist = std::min(min_dist, std::sqrt(acc));
        }
    }
    if (min_dist > 0) {
        for (auto& v : m) v *= s.separation / min_dist;
    }
    return m;
}

// n i.i.d. draws; classes of the underlying blob are uniform.
inline Samples draw(const BlobSource& s, std::size_t n, std::uint64_t stream_seed) {
    s.validate();
    const auto means = blob_means(s);
    Rng rng(derive_seed(stream_seed, "theory.draw"));
    std::normal_distribution<double> g(0.0, 1.0);
    Samples out;
    out.dim = s.dim;
    out.x.resize(n * s.dim);
    out.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::uint32_t>(rng() % s.num_classes);
        for (std::size_t j = 0; j < s.dim; ++j) {
            double v = means[c * s.dim + j] + s.sigma * g(rng);
            if (!s.shift.empty()) v += s.shift[j];
            out.x[i * s.dim + j] = v;
        }
        out.y[i] = s.fixed_label.value_or(c);
    }
    return out;
}

// D = alpha * benign + (1 - alpha) * poison.
struct MixtureSpec {
    double alpha = 0.9;
    BlobSource benign;
    BlobSource poison;
    std::size_t sample_count = 2000;

    void validate() const {
        require(alpha >= 0.0 && alpha <= 1.0, "mixture: alpha must be in [0, 1]");
        require(benign.dim == poison.dim, "mixture: benign and poison dimensionality differ");
        require(benign.num_classes == poison.num_classes, "mixture: benign and poison label spaces differ");
        benign.validate();
        poison.validate();
    }
    std::size_t benign_count() const {
        return static_cast<std::size_t>(std::llround(alpha * static_cast<double>(sample_count)));
    }
};

// Default pair: benign blobs, and poison = benign inputs shifted along the
// last coordinates and relabelled to class 0.
inline MixtureSpec default_mixture(double alpha, std::size_t n, std::uint64_t seed) {
    MixtureSpec m;
    m.alpha = alpha;
    m.sample_count = n;
    m.benign.means_seed = derive_seed(seed, "benign");
    m.poison = m.benign;
    m.poison.fixed_label = 0;
    m.poison.shift.assign(m.poison.dim, 0.0);
    for (std::size_t j = m.poison.dim - 2; j < m.poison.dim; ++j) m.poison.shift[j] = 3.0;
    return m;
}

// Prefixes of two fixed pools, so mixtures at different alpha share draws.
inline Samples sample_mixture(const MixtureSpec& m, std::uint64_t seed) {
    m.validate();
    const std::size_t nb = m.benign_count();
    const std::size_t np = m.sample_count - nb;
    Samples s;
    s.dim = m.benign.dim;
    s.append(draw(m.benign, m.sample_count, derive_seed(seed, "pool.benign")), nb);
    s.append(draw(m.poison, m.sample_count, derive_seed(seed, "pool.poison")), np);
    return s;
}

// Multinomial logistic regression; W is K x (d + 1), last column the bias.
struct LinearModel {
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    std::vector<double> w;

    double norm() const { return std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0)); }

    void probabilities(std::span<const double> x, std::vector<double>& p) const {
        p.assign(num_classes, 0.0);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < num_classes; ++k) {
            const double* row = w.data() + k * (dim + 1);
            double z = row[dim];
            for (std::size_t j = 0; j < dim; ++j) z += row[j] * x[j];
            p[k] = z;
            mx = std::max(mx, z);
        }
        double sum = 0;
        for (auto& v : p) sum += (v = std::exp(v - mx));
        for (auto& v : p) v /= sum;
    }

    double loss(std::span<const double> x, std::uint32_t y) const {
        std::vector<double> p;
        probabilities(x, p);
        return -std::log(std::max(p[y], 1e-300));
    }
};

struct ConvexTrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
};

inline void project_to_ball(std::vector<double>& w, double radius) {
    const double n = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    if (n > radius) {
        const double s = radius > 0 ? radius / n : 0.0;
        for (auto& v : w) v *= s;
    }
}

// Projected minibatch SGD onto the L2 ball of radius B (all of W, bias included).
inline LinearModel train_convex(const Samples& data, std::uint32_t num_classes, double B,
                                const ConvexTrainConfig& cfg) {
    require(B >= 0, "train_convex: B must be >= 0");
    require(cfg.batch_size >= 1, "train_convex: batch_size must be >= 1");
    require(data.size() >= 1, "train_convex: empty sample");
    LinearModel m{num_classes, data.dim, std::vector<double>(num_classes * (data.dim + 1), 0.0)};
    if (B == 0) return m;
    const std::size_t cols = data.dim + 1;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> grad(m.w.size());
    std::vector<double> p;
    Rng rng(derive_seed(cfg.seed, "train_convex"));
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        shuffle_in_place(order, rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t b = start; b < end; ++b) {
                const auto x = data.row(order[b]);
                m.probabilities(x, p);
                p[data.y[order[b]]] -= 1.0;
                for (std::size_t k = 0; k < num_classes; ++k) {
                    double* g = grad.data() + k * cols;
                    for (std::size_t j = 0; j < data.dim; ++j) g[j] += p[k] * x[j];
                    g[data.dim] += p[k];
                }
            }
            const double step = cfg.learning_rate / static_cast<double>(end - start);
            for (std::size_t i = 0; i < m.w.size(); ++i) m.w[i] -= step * grad[i];
            project_to_ball(m.w, B);
        }
    }
    return m;
}

inline std::vector<double> per_sample_losses(const LinearModel& m, const Samples& s) {
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = m.loss(s.row(i), s.y[i]);
    return out;
}

inline double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Bootstrap standard error of the mean of v.
inline double bootstrap_se(const std::vector<double>& v, std::size_t reps, std::uint64_t seed) {
    require(!v.empty() && reps >= 2, "bootstrap_se: need data and >= 2 replicates");
    Rng rng(derive_seed(seed, "bootstrap"));
    std::vector<double> means(reps);
    for (auto& mu : means) {
        double s = 0;
        for (std::size_t i = 0; i < v.size(); ++i) s += v[rng() % v.size()];
        mu = s / static_cast<double>(v.size());
    }
    const double mbar = mean(means);
    double var = 0;
    for (double mu : means) var += (mu - mbar) * (mu - mbar);
    return std::sqrt(var / static_cast<double>(reps - 1));
}

// Max ||(x, 1)|| over the sample: bounds the logistic-loss gradient scale.
inline double estimate_lipschitz(const Samples& s) {
    double best = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        auto r = s.row(i);
        best = std::max(best, std::sqrt(std::inner_product(r.begin(), r.end(), r.begin(), 1.0)));
    }
    return best;
}

struct TheoryInstance {
    double B = 5.0;
    double lipschitz_rho = 1.0;
    double epsilon = 0;
    double epsilon_minus = 0;
    double alpha = 0.9;
    double alpha_minus = 0.7;

    static double slack_bound(double B, double rho, std::size_t n) {
        return B * B * rho * rho / static_cast<double>(n);
    }
    void validate(std::size_t n, std::size_t n_minus) const {
        require(alpha != alpha_minus, "theory instance: alpha == alpha_minus is excluded");
        require(epsilon >= slack_bound(B, lipschitz_rho, n) * (1 - 1e-12), "theory instance: epsilon below B^2 rho^2 / |D|");
        require(epsilon_minus >= slack_bound(B, lipschitz_rho, n_minus) * (1 - 1e-12),
                "theory instance: epsilon_minus below B^2 rho^2 / |D-|");
    }
};

// ---- sign-product check on large samples ----

struct GridPoint {
    double alpha = 0;
    double alpha_minus = 0;
    double loss_p = 0;
    double loss_p_minus = 0;
    double product = 0;
    double se = 0;  // bootstrap SE of the product
    bool nonnegative = false;
};

struct Theorem1Config {
    std::vector<double> alphas{0.6, 0.7, 0.8, 0.9, 0.95};
    std::size_t sample_count = 50000;
    std::size_t poison_eval_count = 5000;
    double B = 10.0;
    ConvexTrainConfig train{5, 64, 0.1, 0};
    std::size_t bootstrap_reps = 200;
    std::uint64_t seed = 0;
};

struct Theorem1Report {
    std::vector<GridPoint> grid;
    double nonnegative_rate = 0;
};

// One model per alpha, all trained on prefixes of the same pools with the same
// shuffle seed; every grid point compares two of them on a shared held-out
// poison sample.
inline Theorem1Report check_theorem1(const Theorem1Config& cfg) {
    require(!cfg.alphas.empty(), "theorem1: empty alpha grid");
    const auto base = default_mixture(cfg.alphas.front(), cfg.sample_count, cfg.seed);
    const auto poison_eval = draw(base.poison, cfg.poison_eval_count, derive_seed(cfg.seed, "poison.eval"));
    std::vector<std::vector<double>> losses;
    for (double a : cfg.alphas) {
        auto mix = base;
        mix.alpha = a;
        auto data = sample_mixture(mix, cfg.seed);
        auto tc = cfg.train;
        tc.seed = derive_seed(cfg.seed, "theorem1.train");
        losses.push_back(per_sample_losses(train_convex(data, base.benign.num_classes, cfg.B, tc), poison_eval));
    }
    Theorem1Report rep;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < cfg.alphas.size(); ++i) {
        for (std::size_t j = 0; j < cfg.alphas.size(); ++j) {
            GridPoint g;
            g.alpha = cfg.alphas[i];
            g.alpha_minus = cfg.alphas[j];
            g.loss_p = mean(losses[i]);
            g.loss_p_minus = mean(losses[j]);
            std::vector<double> diff(losses[i].size());
            for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = losses[i][k] - losses[j][k];
            const double da = g.alpha - g.alpha_minus;
            g.product = da * mean(diff);
            g.se = std::abs(da) * bootstrap_se(diff, cfg.bootstrap_reps, derive_seed(cfg.seed, "se", i * 64 + j));
            g.nonnegative = g.product >= -2.0 * g.se;
            ok += g.nonnegative;
            rep.grid.push_back(g);
        }
    }
    rep.nonnegative_rate = static_cast<double>(ok) / static_cast<double>(rep.grid.size());
    return rep;
}

// ---- finite-sample condition check ----

struct Theorem2Config {
    double alpha = 0.9;
    double alpha_minus = 0.7;
    std::size_t sample_count = 2000;
    std::size_t poison_eval_count = 5000;
    double B = 5.0;
    ConvexTrainConfig train{10, 32, 0.1, 0};
    std::size_t bootstrap_reps = 200;
    std::size_t instances = 20;
    std::uint64_t seed = 0;
};

struct Theorem2Outcome {
    std::uint64_t seed = 0;
    TheoryInstance instance;
    std::size_t n = 0;
    std::size_t n_minus = 0;
    double lhs = 0;  // L_p(F) - L_p(F-)
    double rhs = 0;  // -(alpha eps- + alpha- eps) / (alpha - alpha-)
    double se = 0;
    bool condition = false;
    bool implication_holds = false;
};

struct Theorem2Report {
    std::vector<Theorem2Outcome> outcomes;
    std::size_t holds = 0;
};

// D is drawn at alpha; D- is the subset of D that keeps every poison row and
// just enough benign rows to reach alpha_minus.
inline Theorem2Outcome check_theorem2_instance(const Theorem2Config& cfg, std::uint64_t seed) {
    if (cfg.alpha == cfg.alpha_minus) throw PreconditionError("theorem2: alpha == alpha_minus is excluded");
    require(cfg.alpha_minus < cfg.alpha, "theorem2: D- must be a subset with alpha_minus < alpha");
    auto mix = default_mixture(cfg.alpha, cfg.sample_count, seed);
    const auto data = sample_mixture(mix, seed);
    const std::size_t nb = mix.benign_count();
    const std::size_t np = cfg.sample_count - nb;
    const auto nm_total = static_cast<std::size_t>(std::llround(static_cast<double>(np) / (1.0 - cfg.alpha_minus)));
    const std::size_t nb_minus = std::min(nb, nm_total - np);
    Samples sub;
    sub.dim = data.dim;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (i < nb_minus || i >= nb) {
            auto r = data.row(i);
            sub.x.insert(sub.x.end(), r.begin(), r.end());
            sub.y.push_back(data.y[i]);
        }
    }
    auto tc = cfg.train;
    tc.seed = derive_seed(seed, "theorem2.train");
    const auto f = train_convex(data, mix.benign.num_classes, cfg.B, tc);
    const auto f_minus = train_convex(sub, mix.benign.num_classes, cfg.B, tc);
    const auto eval = draw(mix.poison, cfg.poison_eval_count, derive_seed(seed, "poison.eval"));
    const auto l = per_sample_losses(f, eval);
    const auto lm = per_sample_losses(f_minus, eval);
    std::vector<double> diff(l.size());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = l[k] - lm[k];

    Theorem2Outcome o;
    o.seed = seed;
    o.n = data.size();
    o.n_minus = sub.size();
    o.instance.B = cfg.B;
    o.instance.lipschitz_rho = estimate_lipschitz(data);
    o.instance.alpha = cfg.alpha;
    o.instance.alpha_minus = static_cast<double>(nb_minus) / static_cast<double>(sub.size());
    o.instance.epsilon = TheoryInstance::slack_bound(cfg.B, o.instance.lipschitz_rho, o.n);
    o.instance.epsilon_minus = TheoryInstance::slack_bound(cfg.B, o.instance.lipschitz_rho, o.n_minus);
    o.instance.validate(o.n, o.n_minus);
    const auto& in = o.instance;
    o.lhs = mean(diff);
    o.rhs = -(in.alpha * in.epsilon_minus + in.alpha_minus * in.epsilon) / (in.alpha - in.alpha_minus);
    o.se = bootstrap_se(diff, cfg.bootstrap_reps, derive_seed(seed, "se"));
    o.condition = o.lhs >= o.rhs - 2.0 * o.se;
    o.implication_holds = o.condition && in.alpha > in.alpha_minus;
    return o;
}

inline Theorem2Report check_theorem2(const Theorem2Config& cfg) {
    Theorem2Report rep;
    for (std::size_t i = 0; i < cfg.instances; ++i) {
        rep.outcomes.push_back(check_theorem2_instance(cfg, derive_seed(cfg.seed, "instance", i)));
        rep.holds += rep.outcomes.back().implication_holds;
    }
    return rep;
}

inline nlohmann::json to_json(const Theorem1Report& r) {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& g : r.grid) {
        grid.push_back({{"alpha", g.alpha},
                        {"alpha_minus", g.alpha_minus},
                        {"loss_p", g.loss_p},
                        {"loss_p_minus", g.loss_p_minus},
                        {"product", g.product},
                        {"se", g.se},
                        {"pass", g.nonnegative}});
    }
    return {{"grid", grid}, {"nonnegative_rate", r.nonnegative_rate}};
}

inline nlohmann::json to_json(const Theorem2Report& r) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& o : r.outcomes) {
        out.push_back({{"seed", o.seed},
                       {"n", o.n},
                       {"n_minus", o.n_minus},
                       {"B", o.instance.B},
                       {"lipschitz_rho", o.instance.lipschitz_rho},
                       {"epsilon", o.instance.epsilon},
                       {"epsilon_minus", o.instance.epsilon_minus},
                       {"alpha", o.instance.alpha},
                       {"alpha_minus", o.instance.alpha_minus},
                       {"lhs", o.lhs},
                       {"rhs", o.rhs},
                       {"se", o.se},
                       {"condition", o.condition},
                       {"pass", o.implication_holds}});
    }
    return {{"instances", out}, {"holds", r.holds}, {"total", r.outcomes.size()}};
}

}  // namespace pftrace::theory
