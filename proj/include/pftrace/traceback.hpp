#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/cluster.hpp"
#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"
#include "pftrace/nn.hpp"
#include "pftrace/poison.hpp"
#include "pftrace/projector.hpp"

namespace pftrace {

struct UnlearnConfig {
    std::size_t epochs = 5;
    std::optional<double> learning_rate;   // default: the model's training rate
    std::optional<std::size_t> batch_size; // default: the model's batch size
    double epsilon_margin = 0.0;
    // Caps the number of retained (D \ D1) samples visited per epoch.
    std::optional<std::size_t> benign_sample_cap;
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1, "unlearn: epochs must be >= 1");
        require(epsilon_margin >= 0.0, "unlearn: epsilon_margin must be >= 0");
        if (learning_rate) require(*learning_rate > 0, "unlearn: learning_rate must be > 0");
        if (batch_size) require(*batch_size >= 1, "unlearn: batch_size must be >= 1");
    }
};

struct TracebackConfig {
    UnlearnConfig unlearn;
    KMeansConfig kmeans;
    ProjectionConfig projection;
    std::size_t min_set_size = 4;
    std::size_t max_iterations = 30;
    std::uint64_t seed = 0;
    // Evaluate the two candidate clusters on separate threads.
    bool parallel = false;
};

// Fine-tunes a copy of `model` on sum_{D1} l(F(x), NULL) + sum_{D \ D1} l(F(x), y).
// Each epoch interleaves both terms in one shuffled pass, so minibatches mix
// them in proportion. The shuffle seed depends on the slice content only.
inline Classifier unlearn(const Classifier& model, const LabeledDataset& ds, const DatasetSlice& forget,
                          const UnlearnConfig& cfg) {
    cfg.validate();
    require(!forget.empty(), "unlearn: D1 must be non-empty");
    require(forget.indices.back() < ds.n, "unlearn: D1 index out of range");
    require(model.num_classes() == ds.num_classes, "unlearn: model K != dataset K");

    TrainConfig tc = model.train_config;
    tc.epochs = cfg.epochs;
    if (cfg.learning_rate) tc.learning_rate = *cfg.learning_rate;
    if (cfg.batch_size) tc.batch_size = *cfg.batch_size;

    const auto retain = complement(ds, forget).indices;
    const std::uint64_t seed = derive_seed(cfg.seed, "unlearn", slice_hash(forget));
    auto uniform = std::make_shared<const std::vector<double>>(null_target(ds.num_classes));

    EpochPlan plan = [&, uniform, seed](std::size_t epoch) {
        Rng rng(derive_seed(seed, "epoch", epoch));
        std::vector<std::size_t> kept = retain;
        if (cfg.benign_sample_cap && kept.size() > *cfg.benign_sample_cap) {
            shuffle_in_place(kept, rng);
            kept.resize(*cfg.benign_sample_cap);
        }
        // Tag forget rows by offsetting them past n.
        std::vector<std::size_t> order;
        order.reserve(forget.size() + kept.size());
        for (auto i : forget.indices) order.push_back(i + ds.n);
        order.insert(order.end(), kept.begin(), kept.end());
        shuffle_in_place(order, rng);

        std::vector<Batch> batches;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            Batch b;
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t tag = order[k];
                if (tag >= ds.n) {
                    b.push_back({ds.row(tag - ds.n), Target::soft(*uniform)});
                } else {
                    b.push_back({ds.row(tag), Target::hard(ds.labels[tag])});
                }
            }
            batches.push_back(std::move(b));
        }
        return batches;
    };
    return fine_tune(model, plan, tc);
}

// Memoises unlearned models by forget-slice so traces of several events
// against one (model, dataset, config) reuse identical work. unlearn() is a
// pure function of its inputs, so hits are bitwise identical to recomputation.
class UnlearnCache {
public:
    std::shared_ptr<const Classifier> get_or_compute(const Classifier& model, const LabeledDataset& ds,
                                                     const DatasetSlice& forget, const UnlearnConfig& cfg) {
        std::uint64_t key = slice_hash(forget);
        key = fnv1a(model_digest(model), key);
        key = fnv1a(ds.id, key);
        const std::uint64_t cfg_words[4] = {cfg.epochs, cfg.seed, cfg.batch_size.value_or(0),
                                            cfg.benign_sample_cap.value_or(0)};
        key = fnv1a(cfg_words, sizeof(cfg_words), key);
        const double lr = cfg.learning_rate.value_or(0.0);
        key = fnv1a(&lr, sizeof(lr), key);
        {
            std::lock_guard lock(mu_);
            if (auto it = entries_.find(key); it != entries_.end()) {
                ++hits_;
                return it->second;
            }
        }
        auto result = std::make_shared<const Classifier>(unlearn(model, ds, forget, cfg));
        std::lock_guard lock(mu_);
        ++misses_;
        return entries_.emplace(key, std::move(result)).first->second;
    }

    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    std::mutex mu_;
    std::map<std::uint64_t, std::shared_ptr<const Classifier>> entries_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

struct PruneDecision {
    std::size_t cluster_id = 0;
    std::size_t cluster_size = 0;
    double loss_before = 0;
    double loss_after = 0;
    bool pruned = false;  // loss_before >= loss_after - epsilon_margin
    bool diverged = false;
};

struct PruneStepResult {
    std::array<PruneDecision, 2> decisions{};
    std::optional<std::size_t> pruned_cluster;
    std::array<DatasetSlice, 2> clusters;
    DatasetSlice unmarked;
    bool degenerate = false;
    bool diverged = false;
    double seconds = 0;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// One cluster-and-prune iteration over `unmarked`. `projections` must cover
// every unmarked index and come from the original model.
inline PruneStepResult prune_step(const Classifier& model, const LabeledDataset& ds, const DatasetSlice& unmarked,
                                  const ProjectionMatrix& projections, const MisclassificationEvent& event,
                                  const TracebackConfig& cfg, UnlearnCache* cache = nullptr) {
    require(unmarked.size() >= 2, "prune_step: need at least 2 unmarked rows");
    const auto t0 = std::chrono::steady_clock::now();
    PruneStepResult res;
    res.unmarked = unmarked;

    const auto rows = restrict_rows(projections, unmarked);
    KMeansConfig kc = cfg.kmeans;
    kc.seed = derive_seed(cfg.seed, "cluster", slice_hash(unmarked));
    const auto assignment = minibatch_kmeans({rows.rows.data(), rows.size(), rows.cols}, kc);
    if (assignment.degenerate) {
        res.degenerate = true;
        res.seconds = detail::seconds_since(t0);
        return res;
    }

    std::array<DatasetSlice, 2> clusters{DatasetSlice{unmarked.parent, {}}, DatasetSlice{unmarked.parent, {}}};
    for (std::size_t r = 0; r < unmarked.size(); ++r) {
        clusters[assignment.labels[r]].indices.push_back(unmarked.indices[r]);
    }

    const double loss_before = event_loss(model, event.x, event.observed_label);
    UnlearnConfig uc = cfg.unlearn;
    uc.seed = derive_seed(cfg.seed, "unlearn");

    auto evaluate = [&](std::size_t c) {
        PruneDecision d;
        d.cluster_id = c;
        d.cluster_size = clusters[c].size();
        d.loss_before = loss_before;
        try {
            std::shared_ptr<const Classifier> reduced =
                cache != nullptr ? cache->get_or_compute(model, ds, clusters[c], uc)
                                 : std::make_shared<const Classifier>(unlearn(model, ds, clusters[c], uc));
            d.loss_after = event_loss(*reduced, event.x, event.observed_label);
            d.pruned = d.loss_before >= d.loss_after - uc.epsilon_margin;
        } catch (const TrainingDiverged&) {
            d.diverged = true;
            d.loss_after = std::numeric_limits<double>::quiet_NaN();
        }
        return d;
    };

    if (cfg.parallel) {
        auto f1 = std::async(std::launch::async, evaluate, std::size_t{1});
        res.decisions[0] = evaluate(0);
        res.decisions[1] = f1.get();
    } else {
        res.decisions[0] = evaluate(0);
        res.decisions[1] = evaluate(1);
    }
    res.diverged = res.decisions[0].diverged || res.decisions[1].diverged;

    const auto& a = res.decisions[0];
    const auto& b = res.decisions[1];
    if (a.pruned && b.pruned) {
        // Lower loss_after wins; then the larger cluster; then the lower id.
        if (a.loss_after != b.loss_after) {
            res.pruned_cluster = a.loss_after < b.loss_after ? 0 : 1;
        } else {
            res.pruned_cluster = a.cluster_size >= b.cluster_size ? 0 : 1;
        }
    } else if (a.pruned) {
        res.pruned_cluster = 0;
    } else if (b.pruned) {
        res.pruned_cluster = 1;
    }
    if (res.pruned_cluster) res.unmarked = clusters[1 - *res.pruned_cluster];
    res.clusters = std::move(clusters);
    res.seconds = detail::seconds_since(t0);
    return res;
}

enum class Verdict { poison_identified, non_poison_event, inconclusive };

NLOHMANN_JSON_SERIALIZE_ENUM(Verdict, {{Verdict::poison_identified, "poison_identified"},
                                       {Verdict::non_poison_event, "non_poison_event"},
                                       {Verdict::inconclusive, "inconclusive"}})

struct IterationRecord {
    std::size_t iteration = 0;
    std::size_t unmarked_size = 0;
    std::array<PruneDecision, 2> decisions{};
    std::optional<std::size_t> pruned_cluster;
    bool degenerate = false;
    double seconds = 0;
    std::array<DatasetSlice, 2> clusters;  // not serialised
};

enum class StopReason { no_prunable_cluster, below_min_set_size, degenerate_clustering, max_iterations, diverged };

NLOHMANN_JSON_SERIALIZE_ENUM(StopReason, {{StopReason::no_prunable_cluster, "no_prunable_cluster"},
                                          {StopReason::below_min_set_size, "below_min_set_size"},
                                          {StopReason::degenerate_clustering, "degenerate_clustering"},
                                          {StopReason::max_iterations, "max_iterations"},
                                          {StopReason::diverged, "diverged"}})

struct TracebackReport {
    std::string event_id;
    Verdict verdict = Verdict::inconclusive;
    StopReason stop_reason = StopReason::max_iterations;
    // Final unmarked set. Empty for non_poison_event; for inconclusive it is
    // the unmarked set at the point the loop gave up.
    DatasetSlice identified;
    std::vector<IterationRecord> iterations;
    double total_seconds = 0;
    TracebackConfig config;
};

// Everything a trace needs that does not depend on the event: the original
// model's projections and the unlearning cache.
struct TraceContext {
    const Classifier& model;
    const LabeledDataset& dataset;
    TracebackConfig config;
    ProjectionMatrix projections;
    UnlearnCache cache;

    TraceContext(const Classifier& m, const LabeledDataset& ds, const TracebackConfig& cfg)
        : model(m), dataset(ds), config(cfg), projections(project(m, ds, full_slice(ds), cfg.projection)) {}
};

inline void check_event_reproduces(const Classifier& model, const MisclassificationEvent& event) {
    require(event.x.size() == model.input_dim(), "trace: event input has the wrong dimension");
    if (predict<float>(model, event.x) != event.observed_label) {
        throw PreconditionError("trace: event " + event.event_id + " does not reproduce on the model");
    }
}

inline TracebackReport trace(TraceContext& ctx, const MisclassificationEvent& event) {
    const auto& cfg = ctx.config;
    check_event_reproduces(ctx.model, event);
    const auto t0 = std::chrono::steady_clock::now();

    TracebackReport rep;
    rep.event_id = event.event_id;
    rep.config = cfg;
    DatasetSlice unmarked = full_slice(ctx.dataset);

    bool finished = false;
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        if (unmarked.size() < std::max<std::size_t>(cfg.min_set_size, 2)) {
            rep.verdict = Verdict::poison_identified;
            rep.stop_reason = StopReason::below_min_set_size;
            finished = true;
            break;
        }
        auto step = prune_step(ctx.model, ctx.dataset, unmarked, ctx.projections, event, cfg, &ctx.cache);
        rep.iterations.push_back({it, unmarked.size(), step.decisions, step.pruned_cluster, step.degenerate,
                                  step.seconds, step.clusters});
        if (step.pruned_cluster) {
            unmarked = std::move(step.unmarked);
            continue;
        }
        finished = true;
        if (step.diverged) {
            rep.verdict = Verdict::inconclusive;
            rep.stop_reason = StopReason::diverged;
        } else if (step.degenerate) {
            rep.verdict = it == 1 ? Verdict::inconclusive : Verdict::poison_identified;
            rep.stop_reason = StopReason::degenerate_clustering;
        } else {
            rep.verdict = it == 1 ? Verdict::non_poison_event : Verdict::poison_identified;
            rep.stop_reason = StopReason::no_prunable_cluster;
        }
        break;
    }
    if (!finished) {
        rep.verdict = Verdict::inconclusive;
        rep.stop_reason = StopReason::max_iterations;
    }
    if (rep.verdict != Verdict::non_poison_event) rep.identified = unmarked;
    else rep.identified = DatasetSlice{unmarked.parent, {}};
    rep.total_seconds = detail::seconds_since(t0);
    return rep;
}

inline TracebackReport trace(const Classifier& model, const LabeledDataset& ds, const MisclassificationEvent& event,
                             const TracebackConfig& cfg) {
    TraceContext ctx(model, ds, cfg);
    return trace(ctx, event);
}

enum class EventKind { poison_suspected, non_poison_event };

NLOHMANN_JSON_SERIALIZE_ENUM(EventKind, {{EventKind::poison_suspected, "poison_suspected"},
                                         {EventKind::non_poison_event, "non_poison_event"}})

// A single prune step over the full training set: if neither cluster can be
// pruned the event is not attributed to poisoning.
inline EventKind identify_event_kind(TraceContext& ctx, const MisclassificationEvent& event,
                                     PruneStepResult* step_out = nullptr) {
    check_event_reproduces(ctx.model, event);
    auto step = prune_step(ctx.model, ctx.dataset, full_slice(ctx.dataset), ctx.projections, event, ctx.config,
                           &ctx.cache);
    const auto kind = step.pruned_cluster ? EventKind::poison_suspected : EventKind::non_poison_event;
    if (step_out != nullptr) *step_out = std::move(step);
    return kind;
}

// ---- JSON ----

inline nlohmann::json to_json(const UnlearnConfig& c) {
    nlohmann::json j{{"epochs", c.epochs}, {"epsilon_margin", c.epsilon_margin}, {"seed", c.seed}};
    j["learning_rate"] = c.learning_rate ? nlohmann::json(*c.learning_rate) : nlohmann::json(nullptr);
    j["batch_size"] = c.batch_size ? nlohmann::json(*c.batch_size) : nlohmann::json(nullptr);
    j["benign_sample_cap"] = c.benign_sample_cap ? nlohmann::json(*c.benign_sample_cap) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const TracebackConfig& c) {
    return {{"unlearn", to_json(c.unlearn)},
            {"kmeans",
             {{"k", c.kmeans.k},
              {"batch_size", c.kmeans.batch_size},
              {"max_batches", c.kmeans.max_batches},
              {"n_init", c.kmeans.n_init},
              {"polish_iterations", c.kmeans.polish_iterations},
              {"convergence_tol", c.kmeans.convergence_tol}}},
            {"projection",
             {{"rho_percent", c.projection.rho_percent},
              {"subsample_seed", c.projection.subsample_seed},
              {"normalize", c.projection.normalize}}},
            {"min_set_size", c.min_set_size},
            {"max_iterations", c.max_iterations},
            {"seed", c.seed}};
}

inline TracebackConfig traceback_config_from_json(const nlohmann::json& j, TracebackConfig c = {}) {
    if (j.contains("unlearn")) {
        const auto& u = j.at("unlearn");
        c.unlearn.epochs = u.value("epochs", c.unlearn.epochs);
        c.unlearn.epsilon_margin = u.value("epsilon_margin", c.unlearn.epsilon_margin);
        if (u.contains("learning_rate") && !u.at("learning_rate").is_null()) c.unlearn.learning_rate = u.at("learning_rate").get<double>();
        if (u.contains("batch_size") && !u.at("batch_size").is_null()) c.unlearn.batch_size = u.at("batch_size").get<std::size_t>();
        if (u.contains("benign_sample_cap") && !u.at("benign_sample_cap").is_null()) {
            c.unlearn.benign_sample_cap = u.at("benign_sample_cap").get<std::size_t>();
        }
    }
    if (j.contains("kmeans")) {
        const auto& k = j.at("kmeans");
        c.kmeans.batch_size = k.value("batch_size", c.kmeans.batch_size);
        c.kmeans.max_batches = k.value("max_batches", c.kmeans.max_batches);
        c.kmeans.n_init = k.value("n_init", c.kmeans.n_init);
        c.kmeans.polish_iterations = k.value("polish_iterations", c.kmeans.polish_iterations);
        c.kmeans.convergence_tol = k.value("convergence_tol", c.kmeans.convergence_tol);
    }
    if (j.contains("projection")) {
        const auto& p = j.at("projection");
        c.projection.rho_percent = p.value("rho_percent", c.projection.rho_percent);
        c.projection.subsample_seed = p.value("subsample_seed", c.projection.subsample_seed);
        c.projection.normalize = p.value("normalize", c.projection.normalize);
    }
    c.min_set_size = j.value("min_set_size", c.min_set_size);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline nlohmann::json to_json(const PruneDecision& d) {
    nlohmann::json j{{"cluster_id", d.cluster_id},
                     {"cluster_size", d.cluster_size},
                     {"loss_before", d.loss_before},
                     {"pruned", d.pruned},
                     {"diverged", d.diverged}};
    j["loss_after"] = d.diverged ? nlohmann::json(nullptr) : nlohmann::json(d.loss_after);
    return j;
}

// Timing values are kept under "timings" so that the rest of the document is
// reproducible byte for byte.
inline nlohmann::json to_json(const TracebackReport& r, const LabeledDataset& ds) {
    nlohmann::json j;
    j["event_id"] = r.event_id;
    j["verdict"] = r.verdict;
    j["stop_reason"] = r.stop_reason;
    j["dataset_id"] = ds.id;
    j["identified_indices"] = r.identified.indices;
    auto& prov = j["identified_provenance"] = nlohmann::json::array();
    for (auto i : r.identified.indices) prov.push_back(ds.provenance[i]);
    auto& its = j["iterations"] = nlohmann::json::array();
    std::vector<double> iteration_seconds;
    for (const auto& it : r.iterations) {
        nlohmann::json e{{"iteration", it.iteration},
                         {"unmarked_size", it.unmarked_size},
                         {"degenerate", it.degenerate},
                         {"decisions", {to_json(it.decisions[0]), to_json(it.decisions[1])}}};
        e["pruned_cluster"] = it.pruned_cluster ? nlohmann::json(*it.pruned_cluster) : nlohmann::json(nullptr);
        its.push_back(std::move(e));
        iteration_seconds.push_back(it.seconds);
    }
    j["config"] = to_json(r.config);
    j["timings"] = {{"total_seconds", r.total_seconds}, {"iteration_seconds", iteration_seconds}};
    return j;
}

inline void write_iteration_csv(std::ostream& os, const TracebackReport& r) {
    os << "iteration,unmarked_size,cluster,cluster_size,loss_before,loss_after,pruned\n";
    for (const auto& it : r.iterations) {
        for (const auto& d : it.decisions) {
            os << it.iteration << "," << it.unmarked_size << "," << d.cluster_id << "," << d.cluster_size << ","
               << d.loss_before << "," << d.loss_after << "," << (d.pruned ? 1 : 0) << "\n";
        }
    }
}

}  // namespace pftrace
