#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"
#include "pftrace/eval.hpp"
#include "pftrace/nn.hpp"
#include "pftrace/poison.hpp"
#include "pftrace/traceback.hpp"

namespace pftrace {

struct BlobTask {
    std::uint32_t num_classes = 10;
    std::size_t dim = 64;
    std::size_t per_class = 600;
    double separation = 6.0;
    double sigma = 1.0;
    std::size_t train_count = 5000;
};

struct VictimSpec {
    std::vector<std::size_t> hidden{32};
    TrainConfig train{5, 32, 0.01, 0, 0};

    Architecture architecture(const BlobTask& t) const {
        Architecture a;
        a.layer_sizes.push_back(t.dim);
        a.layer_sizes.insert(a.layer_sizes.end(), hidden.begin(), hidden.end());
        a.layer_sizes.push_back(t.num_classes);
        return a;
    }
};

enum class CampaignKind { dirty_label, overlapping, clean_label, benign, pgd };

NLOHMANN_JSON_SERIALIZE_ENUM(CampaignKind, {{CampaignKind::dirty_label, "dirty_label"},
                                            {CampaignKind::overlapping, "overlapping"},
                                            {CampaignKind::clean_label, "clean_label"},
                                            {CampaignKind::benign, "benign"},
                                            {CampaignKind::pgd, "pgd"}})

struct CampaignConfig {
    CampaignKind kind = CampaignKind::dirty_label;
    BlobTask task;
    VictimSpec victim;
    TracebackConfig traceback;
    double injection_rate = 0.10;
    std::size_t events = 20;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    // clean-label
    double perturb_budget = 0.05;
    std::size_t fine_tune_epochs = 10;
    std::size_t max_attempts = 80;
    // pgd
    double pgd_epsilon = 0.05;
    std::size_t pgd_steps = 100;
    // benign / pgd: only the first prune step is run.
    bool first_step_only = false;
};

// Desk-scale defaults per kind.
inline CampaignConfig default_campaign(CampaignKind kind) {
    CampaignConfig c;
    c.kind = kind;
    c.traceback.unlearn.epsilon_margin = 0.05;
    switch (kind) {
        case CampaignKind::dirty_label:
        case CampaignKind::overlapping:
            break;
        case CampaignKind::clean_label:
            c.task.separation = 0.18;
            c.task.sigma = 0.03;
            c.victim.train = TrainConfig{20, 32, 0.05, 0, 0};
            c.injection_rate = 0.05;
            break;
        case CampaignKind::benign:
        case CampaignKind::pgd:
            c.task.separation = 0.25;
            c.task.sigma = 0.1;
            c.task.per_class = 700;
            c.victim.train = TrainConfig{40, 32, 0.2, 0, 0};
            c.events = 50;
            c.seeds = {1};
            c.first_step_only = true;
            break;
    }
    return c;
}

struct Scenario {
    LabeledDataset train;  // possibly poisoned
    LabeledDataset test;
    AttackPlan plan;
    Classifier victim;
    std::vector<MisclassificationEvent> events;
};

inline SplitResult forge_task(const BlobTask& t, std::uint64_t seed) {
    auto all = forge_blobs(t.num_classes, t.per_class, t.dim, t.separation, t.sigma, derive_seed(seed, "forge"));
    const double frac = static_cast<double>(t.train_count) / static_cast<double>(all.n);
    return split(all, frac, derive_seed(seed, "split"));
}

inline std::uint32_t pick_target(std::uint64_t seed, std::uint32_t k) {
    return static_cast<std::uint32_t>(derive_seed(seed, "target") % k);
}

inline Scenario make_trigger_scenario(const CampaignConfig& c, std::uint64_t seed) {
    require(c.kind == CampaignKind::dirty_label || c.kind == CampaignKind::overlapping,
            "make_trigger_scenario: not a trigger campaign");
    auto sp = forge_task(c.task, seed);
    Scenario s;
    s.test = std::move(sp.test);
    s.plan.injection_rate = c.injection_rate;
    s.plan.seed = derive_seed(seed, "attack");
    s.plan.attack_id = "s" + std::to_string(seed);
    const auto target = pick_target(seed, c.task.num_classes);
    s.plan.target_label = target;
    if (c.kind == CampaignKind::dirty_label) {
        s.plan.kind = AttackKind::dirty_label_trigger;
        s.plan.triggers.push_back(patch_trigger(sp.train, target));
        s.train = inject_dirty_label(sp.train, s.plan);
    } else {
        s.plan.kind = AttackKind::overlapping_triggers;
        const std::size_t w = (c.task.dim + 9) / 10;
        s.plan.triggers.push_back(patch_trigger(sp.train, target, w, 0));
        s.plan.triggers.push_back(patch_trigger(sp.train, target, w, w));
        s.train = inject_overlapping(sp.train, s.plan);
    }
    s.victim = train(s.train, c.victim.architecture(c.task), c.victim.train, derive_seed(seed, "victim"));
    s.events = mint_trigger_events(s.victim, s.test, s.plan, c.events);
    return s;
}

// Clean model; events are its own test-set mistakes or PGD evasions.
inline Scenario make_clean_scenario(const CampaignConfig& c, std::uint64_t seed) {
    require(c.kind == CampaignKind::benign || c.kind == CampaignKind::pgd, "make_clean_scenario: wrong kind");
    auto sp = forge_task(c.task, seed);
    Scenario s;
    s.train = std::move(sp.train);
    s.test = std::move(sp.test);
    s.victim = train(s.train, c.victim.architecture(c.task), c.victim.train, derive_seed(seed, "victim"));
    if (c.kind == CampaignKind::benign) {
        s.events = benign_misclassifications(s.victim, s.test, c.events);
    } else {
        for (std::size_t i = 0; i < s.test.n && s.events.size() < c.events; ++i) {
            if (predict<float>(s.victim, s.test.row(i)) != s.test.labels[i]) continue;
            auto e = pgd_evasion(s.victim, s.test.row(i), s.test.labels[i], c.pgd_epsilon, c.pgd_steps,
                                 "pgd-" + s.test.provenance[i]);
            if (e) s.events.push_back(std::move(*e));
        }
    }
    if (s.events.empty()) throw NoSuccessfulEvent("clean scenario produced no events");
    return s;
}

// Transfer setting: the extractor is trained on clean data, the victim
// fine-tunes only its final layer on the poisoned set.
struct CollisionAttempt {
    LabeledDataset train;
    AttackPlan plan;
    Classifier victim;
    std::optional<MisclassificationEvent> event;
};

inline Classifier train_extractor(const CampaignConfig& c, const LabeledDataset& clean, std::uint64_t seed) {
    return train(clean, c.victim.architecture(c.task), c.victim.train, derive_seed(seed, "extractor"));
}

inline CollisionAttempt collision_attempt(const CampaignConfig& c, const Classifier& extractor,
                                          const LabeledDataset& clean, const LabeledDataset& test, std::size_t row,
                                          std::uint64_t seed) {
    CollisionAttempt a;
    a.plan.kind = AttackKind::clean_label_collision;
    a.plan.injection_rate = c.injection_rate;
    a.plan.perturb_budget = c.perturb_budget;
    a.plan.seed = derive_seed(seed, "collision", row);
    a.plan.attack_id = "s" + std::to_string(seed) + "c" + std::to_string(row);
    a.plan.collision_target.assign(test.row(row).begin(), test.row(row).end());
    a.plan.collision_true_label = test.labels[row];
    // Runner-up class of the extractor is the attack target.
    auto p = forward<float>(extractor, test.row(row)).probabilities;
    p[test.labels[row]] = -1.0f;
    a.plan.target_label = static_cast<std::uint32_t>(std::max_element(p.begin(), p.end()) - p.begin());
    a.train = inject_clean_label_collision(clean, a.plan, extractor);

    TrainConfig ft = extractor.train_config;
    ft.epochs = c.fine_tune_epochs;
    ft.frozen_layers = extractor.layers.size() - 1;
    a.victim = fine_tune(extractor,
                         shuffled_plan(a.train, full_slice(a.train).indices, ft.batch_size,
                                       derive_seed(a.plan.seed, "fine_tune")),
                         ft);
    a.victim.train_config = ft;
    try {
        a.event = mint_collision_event(a.victim, a.plan);
    } catch (const NoSuccessfulEvent&) {
    }
    return a;
}

struct CampaignResult {
    EvalSummary summary;
    nlohmann::json reports = nlohmann::json::array();
    std::size_t attempts = 0;  // clean-label only
};

namespace detail {

inline std::string seeded_id(std::uint64_t seed, const std::string& id) {
    std::string s = std::to_string(seed);
    return std::string(4 - std::min<std::size_t>(4, s.size()), '0') + s + "/" + id;
}

}  // namespace detail

inline CampaignResult run_campaign(const CampaignConfig& c) {
    CampaignResult out;
    std::vector<EventScore> scores;
    auto record = [&](const TracebackReport& rep, const LabeledDataset& ds, std::uint64_t seed) {
        auto s = score_report(rep, ds);
        s.event_id = detail::seeded_id(seed, s.event_id);
        scores.push_back(s);
        auto j = to_json(rep, ds);
        j["event_id"] = s.event_id;
        out.reports.push_back(std::move(j));
    };
    auto single_step = [](TraceContext& ctx, const MisclassificationEvent& ev) {
        const auto t0 = std::chrono::steady_clock::now();
        PruneStepResult st;
        const auto kind = identify_event_kind(ctx, ev, &st);
        TracebackReport rep;
        rep.event_id = ev.event_id;
        rep.config = ctx.config;
        rep.iterations.push_back({1, st.clusters[0].size() + st.clusters[1].size(), st.decisions, st.pruned_cluster,
                                  st.degenerate, st.seconds, st.clusters});
        rep.verdict = kind == EventKind::non_poison_event ? Verdict::non_poison_event : Verdict::inconclusive;
        rep.stop_reason = kind == EventKind::non_poison_event ? StopReason::no_prunable_cluster : StopReason::max_iterations;
        rep.identified = kind == EventKind::non_poison_event ? DatasetSlice{ctx.dataset.id, {}} : st.unmarked;
        rep.total_seconds = detail::seconds_since(t0);
        return rep;
    };

    for (auto seed : c.seeds) {
        TracebackConfig tc = c.traceback;
        tc.seed = derive_seed(seed, "traceback");
        switch (c.kind) {
            case CampaignKind::dirty_label:
            case CampaignKind::overlapping: {
                auto s = make_trigger_scenario(c, seed);
                TraceContext ctx(s.victim, s.train, tc);
                for (const auto& ev : s.events) record(trace(ctx, ev), s.train, seed);
                break;
            }
            case CampaignKind::benign:
            case CampaignKind::pgd: {
                auto s = make_clean_scenario(c, seed);
                TraceContext ctx(s.victim, s.train, tc);
                for (const auto& ev : s.events) {
                    record(c.first_step_only ? single_step(ctx, ev) : trace(ctx, ev), s.train, seed);
                }
                break;
            }
            case CampaignKind::clean_label: {
                auto sp = forge_task(c.task, seed);
                const auto extractor = train_extractor(c, sp.train, seed);
                std::size_t found = 0;
                for (std::size_t row = 0; row < sp.test.n && found < c.events && out.attempts < c.max_attempts;
                     ++row) {
                    if (predict<float>(extractor, sp.test.row(row)) != sp.test.labels[row]) continue;
                    ++out.attempts;
                    auto a = collision_attempt(c, extractor, sp.train, sp.test, row, seed);
                    if (!a.event) continue;
                    ++found;
                    record(trace(a.victim, a.train, *a.event, tc), a.train, seed);
                }
                break;
            }
        }
    }
    std::string label = nlohmann::json(c.kind).get<std::string>();
    out.summary = summarize(label, std::move(scores));
    std::stable_sort(out.reports.begin(), out.reports.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
        return a.at("event_id").get<std::string>() < b.at("event_id").get<std::string>();
    });
    return out;
}

inline nlohmann::json to_json(const BlobTask& t) {
    return {{"num_classes", t.num_classes}, {"dim", t.dim},     {"per_class", t.per_class},
            {"separation", t.separation},   {"sigma", t.sigma}, {"train_count", t.train_count}};
}

inline nlohmann::json to_json(const CampaignConfig& c) {
    return {{"kind", c.kind},
            {"task", to_json(c.task)},
            {"victim", {{"hidden", c.victim.hidden}, {"train", to_json(c.victim.train)}}},
            {"traceback", to_json(c.traceback)},
            {"injection_rate", c.injection_rate},
            {"events", c.events},
            {"seeds", c.seeds},
            {"perturb_budget", c.perturb_budget},
            {"fine_tune_epochs", c.fine_tune_epochs},
            {"max_attempts", c.max_attempts},
            {"pgd_epsilon", c.pgd_epsilon},
            {"pgd_steps", c.pgd_steps},
            {"first_step_only", c.first_step_only}};
}

// Fields absent from `j` keep the kind's defaults.
inline CampaignConfig campaign_config_from_json(const nlohmann::json& j) {
    auto c = default_campaign(j.value("kind", CampaignKind::dirty_label));
    if (j.contains("task")) {
        const auto& t = j.at("task");
        c.task.num_classes = t.value("num_classes", c.task.num_classes);
        c.task.dim = t.value("dim", c.task.dim);
        c.task.per_class = t.value("per_class", c.task.per_class);
        c.task.separation = t.value("separation", c.task.separation);
        c.task.sigma = t.value("sigma", c.task.sigma);
        c.task.train_count = t.value("train_count", c.task.train_count);
    }
    if (j.contains("victim")) {
        const auto& v = j.at("victim");
        c.victim.hidden = v.value("hidden", c.victim.hidden);
        if (v.contains("train")) c.victim.train = train_config_from_json(v.at("train"), c.victim.train);
    }
    if (j.contains("traceback")) c.traceback = traceback_config_from_json(j.at("traceback"), c.traceback);
    c.injection_rate = j.value("injection_rate", c.injection_rate);
    c.events = j.value("events", c.events);
    c.seeds = j.value("seeds", c.seeds);
    c.perturb_budget = j.value("perturb_budget", c.perturb_budget);
    c.fine_tune_epochs = j.value("fine_tune_epochs", c.fine_tune_epochs);
    c.max_attempts = j.value("max_attempts", c.max_attempts);
    c.pgd_epsilon = j.value("pgd_epsilon", c.pgd_epsilon);
    c.pgd_steps = j.value("pgd_steps", c.pgd_steps);
    c.first_step_only = j.value("first_step_only", c.first_step_only);
    return c;
}

inline nlohmann::json to_json(const CampaignResult& r, const CampaignConfig& c) {
    auto summary = to_json(r.summary);
    nlohmann::json timings = summary["timings"];
    summary.erase("timings");
    nlohmann::json reports = r.reports;
    nlohmann::json report_timings = nlohmann::json::array();
    for (auto& rep : reports) {
        report_timings.push_back({{"event_id", rep["event_id"]}, {"timings", rep["timings"]}});
        rep.erase("timings");
    }
    return {{"format_version", 1},
            {"config", to_json(c)},
            {"summary", summary},
            {"attempts", r.attempts},
            {"reports", reports},
            {"timings", {{"summary", timings}, {"reports", report_timings}}}};
}

}  // namespace pftrace
