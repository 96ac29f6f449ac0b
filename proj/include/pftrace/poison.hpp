#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"
#include "pftrace/nn.hpp"

namespace pftrace {

struct TriggerSpec {
    std::vector<std::size_t> feature_indices;
    std::vector<float> trigger_values;
    std::uint32_t target_label = 0;

    void validate(std::size_t dim) const {
        require(feature_indices.size() == trigger_values.size(),
                "trigger: indices and values differ in length");
        require(!feature_indices.empty(), "trigger: empty trigger");
        auto sorted = feature_indices;
        std::sort(sorted.begin(), sorted.end());
        require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                "trigger: duplicate feature index");
        if (sorted.back() >= dim) {
            throw ContractViolation("trigger: feature index " + std::to_string(sorted.back()) +
                                    " out of range for d=" + std::to_string(dim));
        }
        for (float v : trigger_values) require(std::isfinite(v), "trigger: non-finite value");
    }
};

inline void apply_trigger(std::span<float> x, const TriggerSpec& t) {
    for (std::size_t k = 0; k < t.feature_indices.size(); ++k) {
        x[t.feature_indices[k]] = t.trigger_values[k];
    }
}

inline std::vector<float> triggered(std::span<const float> x, const TriggerSpec& t) {
    std::vector<float> out(x.begin(), x.end());
    apply_trigger(out, t);
    return out;
}

// 99th percentile over every input value of the dataset.
inline float feature_percentile(const LabeledDataset& ds, double q) {
    require(!ds.inputs.empty(), "percentile: empty dataset");
    auto v = ds.inputs;
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

// Patch of `width` coordinates ending `offset` coordinates before the last
// one, all set to the dataset's 99th-percentile value. width defaults to
// ceil(d/10).
inline TriggerSpec patch_trigger(const LabeledDataset& ds, std::uint32_t target_label,
                                 std::size_t width = 0, std::size_t offset = 0) {
    if (width == 0) width = (ds.d + 9) / 10;
    require(width + offset <= ds.d, "patch_trigger: patch exceeds input dimension");
    const float value = feature_percentile(ds, 0.99);
    TriggerSpec t;
    t.target_label = target_label;
    for (std::size_t k = 0; k < width; ++k) {
        t.feature_indices.push_back(ds.d - offset - width + k);
        t.trigger_values.push_back(value);
    }
    return t;
}

enum class AttackKind { dirty_label_trigger, clean_label_collision, overlapping_triggers };

NLOHMANN_JSON_SERIALIZE_ENUM(AttackKind, {{AttackKind::dirty_label_trigger, "dirty_label_trigger"},
                                          {AttackKind::clean_label_collision, "clean_label_collision"},
                                          {AttackKind::overlapping_triggers, "overlapping_triggers"}})

struct AttackPlan {
    AttackKind kind = AttackKind::dirty_label_trigger;
    double injection_rate = 0.10;
    std::vector<TriggerSpec> triggers;
    double perturb_budget = 0.0;  // L-infinity, clean-label only
    std::uint64_t seed = 0;
    std::string attack_id = "a0";
    std::uint32_t target_label = 0;
    // Clean-label only: the input the poison should make the victim misclassify.
    std::vector<float> collision_target;
    std::uint32_t collision_true_label = 0;
    std::size_t collision_steps = 100;
    // Filled in by the generators.
    std::vector<std::string> warnings;
    double collision_initial_distance = 0.0;
    double collision_final_distance = 0.0;

    void validate() const {
        require(injection_rate > 0.0 && injection_rate <= 0.5,
                "attack plan: injection_rate must be in (0, 0.5]");
        require(perturb_budget >= 0.0, "attack plan: negative perturbation budget");
        switch (kind) {
            case AttackKind::dirty_label_trigger:
                require(triggers.size() == 1, "attack plan: dirty-label attack needs exactly one trigger");
                break;
            case AttackKind::overlapping_triggers:
                require(triggers.size() >= 2, "attack plan: overlapping attack needs >= 2 triggers");
                for (const auto& t : triggers) {
                    require(t.target_label == triggers.front().target_label,
                            "attack plan: overlapping triggers must share the target label");
                }
                break;
            case AttackKind::clean_label_collision:
                require(!collision_target.empty(), "attack plan: collision attack needs a target input");
                break;
        }
    }

    std::uint32_t target() const {
        return triggers.empty() ? target_label : triggers.front().target_label;
    }
};

struct MisclassificationEvent {
    std::vector<float> x;          // attack input x_a
    std::uint32_t observed_label;  // y_a
    std::uint32_t true_label;
    std::string event_id;
};

inline std::size_t poison_budget(double rate, std::size_t n) {
    return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
}

namespace detail {

inline std::vector<std::size_t> rows_where(const LabeledDataset& ds, bool want_label,
                                           std::uint32_t label) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.n; ++i) {
        if ((ds.labels[i] == label) == want_label) out.push_back(i);
    }
    return out;
}

inline std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool,
                                                           std::size_t count, Rng& rng) {
    require(count <= pool.size(), "not enough candidate rows for the requested poison count");
    shuffle_in_place(pool, rng);
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Appends triggered copies of `sources` labelled with the trigger target.
inline void append_triggered(LabeledDataset& out, const LabeledDataset& src,
                             const std::vector<std::size_t>& sources, const TriggerSpec& t,
                             const std::string& attack_id, std::size_t first_ordinal) {
    std::size_t ordinal = first_ordinal;
    for (auto i : sources) {
        auto x = triggered(src.row(i), t);
        out.inputs.insert(out.inputs.end(), x.begin(), x.end());
        out.labels.push_back(t.target_label);
        out.poison_mask.push_back(1);
        out.provenance.push_back("atk-" + attack_id + "-" + std::to_string(ordinal++));
        ++out.n;
    }
}

}  // namespace detail

// BadNet-style: round(rate * N) triggered copies of non-target rows are
// appended with the target label.
inline LabeledDataset inject_dirty_label(const LabeledDataset& ds, const AttackPlan& plan) {
    require(plan.kind == AttackKind::dirty_label_trigger, "inject_dirty_label: wrong attack kind");
    plan.validate();
    const auto& t = plan.triggers.front();
    t.validate(ds.d);
    require(t.target_label < ds.num_classes, "inject_dirty_label: target label out of range");

    const std::size_t count = poison_budget(plan.injection_rate, ds.n);
    Rng rng(derive_seed(plan.seed, "poison.dirty"));
    const auto sources =
        detail::sample_without_replacement(detail::rows_where(ds, false, t.target_label), count, rng);
    LabeledDataset out = ds;
    detail::append_triggered(out, ds, sources, t, plan.attack_id, 0);
    seal(out);
    return out;
}

// Two or more triggers with the same target; the poison budget is split as
// evenly as possible into disjoint source sets.
inline LabeledDataset inject_overlapping(const LabeledDataset& ds, const AttackPlan& plan) {
    require(plan.kind == AttackKind::overlapping_triggers, "inject_overlapping: wrong attack kind");
    plan.validate();
    for (const auto& t : plan.triggers) t.validate(ds.d);
    const std::uint32_t target = plan.target();
    require(target < ds.num_classes, "inject_overlapping: target label out of range");

    const std::size_t total = poison_budget(plan.injection_rate, ds.n);
    Rng rng(derive_seed(plan.seed, "poison.overlap"));
    auto sources = detail::rows_where(ds, false, target);
    require(total <= sources.size(), "inject_overlapping: not enough non-target rows");
    shuffle_in_place(sources, rng);

    LabeledDataset out = ds;
    const std::size_t parts = plan.triggers.size();
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < parts; ++k) {
        const std::size_t share = total / parts + (k < total % parts ? 1 : 0);
        std::vector<std::size_t> mine(sources.begin() + static_cast<std::ptrdiff_t>(cursor),
                                      sources.begin() + static_cast<std::ptrdiff_t>(cursor + share));
        std::sort(mine.begin(), mine.end());
        detail::append_triggered(out, ds, mine, plan.triggers[k],
                                 plan.attack_id + "t" + std::to_string(k), 0);
        cursor += share;
    }
    seal(out);
    return out;
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s;
}

struct CollisionResult {
    std::vector<float> poison;
    double initial_distance = 0;
    double final_distance = 0;
};

// Projected signed-gradient descent on ||h(p) - h(target)||^2 with
// ||p - base||_inf <= budget. Returns the best iterate seen.
inline CollisionResult collide_features(const Classifier& extractor, std::span<const float> base,
                                        std::span<const float> target_features, double budget,
                                        std::size_t steps) {
    CollisionResult r;
    r.poison.assign(base.begin(), base.end());
    auto fwd = forward<float>(extractor, base);
    r.initial_distance = std::sqrt(squared_distance(fwd.penultimate, target_features));
    r.final_distance = r.initial_distance;
    if (budget <= 0.0 || steps == 0) return r;

    const float step = static_cast<float>(budget / 10.0);
    std::vector<float> p = r.poison;
    std::vector<float> diff(target_features.size());
    for (std::size_t it = 0; it < steps; ++it) {
        auto h = forward<float>(extractor, p).penultimate;
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = 2.0f * (h[i] - target_features[i]);
        const auto g = vjp_penultimate<float>(extractor, p, diff);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float s = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
            const float lo = base[i] - static_cast<float>(budget);
            const float hi = base[i] + static_cast<float>(budget);
            p[i] = std::clamp(p[i] - step * s, lo, hi);
        }
        const double dist = std::sqrt(squared_distance(forward<float>(extractor, p).penultimate,
                                                       target_features));
        if (dist < r.final_distance) {
            r.final_distance = dist;
            r.poison = p;
        }
    }
    return r;
}

// Feature-collision clean-label poisoning: round(rate * N) randomly chosen
// rows of the target class are perturbed (within the L-inf budget) so their
// extractor features approach those of plan.collision_target. Labels are kept.
// Mean initial/final feature distances and any warnings are written back to
// `plan`.
inline LabeledDataset inject_clean_label_collision(const LabeledDataset& ds, AttackPlan& plan,
                                                   const Classifier& extractor) {
    require(plan.kind == AttackKind::clean_label_collision,
            "inject_clean_label_collision: wrong attack kind");
    plan.validate();
    require(plan.collision_target.size() == ds.d, "collision target has wrong dimension");
    require(plan.target_label < ds.num_classes, "collision: target label out of range");
    require(extractor.input_dim() == ds.d, "collision: extractor input dim != d");

    const std::size_t count = poison_budget(plan.injection_rate, ds.n);
    Rng rng(derive_seed(plan.seed, "poison.collision"));
    const auto chosen =
        detail::sample_without_replacement(detail::rows_where(ds, true, plan.target_label), count, rng);
    const auto target_features = forward<float>(extractor, plan.collision_target).penultimate;

    LabeledDataset out = ds;
    double init_sum = 0;
    double final_sum = 0;
    std::size_t ordinal = 0;
    for (auto i : chosen) {
        auto r = collide_features(extractor, ds.row(i), target_features, plan.perturb_budget,
                                  plan.collision_steps);
        std::copy(r.poison.begin(), r.poison.end(), out.row(i).begin());
        out.poison_mask[i] = 1;
        out.provenance[i] = "atk-" + plan.attack_id + "-" + std::to_string(ordinal++);
        init_sum += r.initial_distance;
        final_sum += r.final_distance;
    }
    if (!chosen.empty()) {
        plan.collision_initial_distance = init_sum / static_cast<double>(chosen.size());
        plan.collision_final_distance = final_sum / static_cast<double>(chosen.size());
        if (plan.perturb_budget > 0 &&
            plan.collision_final_distance > 0.5 * plan.collision_initial_distance) {
            plan.warnings.push_back("collision reduced mean feature distance by less than 50%");
        }
    }
    seal(out);
    return out;
}

// Trigger attacks: x_a = candidate + trigger(s), accepted when the victim
// predicts the target. Candidates whose true label is the target are skipped.
inline MisclassificationEvent mint_trigger_event(const Classifier& victim, const LabeledDataset& candidates,
                                                 const AttackPlan& plan, std::size_t start,
                                                 std::size_t* next = nullptr) {
    require(plan.kind != AttackKind::clean_label_collision, "mint_trigger_event: not a trigger attack");
    const std::uint32_t target = plan.target();
    for (std::size_t k = start; k < candidates.n; ++k) {
        if (candidates.labels[k] == target) continue;
        std::vector<float> x(candidates.row(k).begin(), candidates.row(k).end());
        for (const auto& t : plan.triggers) apply_trigger(x, t);
        if (predict<float>(victim, x) == target) {
            if (next != nullptr) *next = k + 1;
            return {std::move(x), target, candidates.labels[k],
                    plan.attack_id + "-ev-" + candidates.provenance[k]};
        }
    }
    throw NoSuccessfulEvent("no candidate input was misclassified into the target label");
}

inline std::vector<MisclassificationEvent> mint_trigger_events(const Classifier& victim,
                                                               const LabeledDataset& candidates,
                                                               const AttackPlan& plan,
                                                               std::size_t count) {
    std::vector<MisclassificationEvent> out;
    std::size_t cursor = 0;
    while (out.size() < count) {
        try {
            out.push_back(mint_trigger_event(victim, candidates, plan, cursor, &cursor));
        } catch (const NoSuccessfulEvent&) {
            if (out.empty()) throw;
            break;
        }
    }
    return out;
}

inline MisclassificationEvent mint_collision_event(const Classifier& victim, const AttackPlan& plan) {
    require(plan.kind == AttackKind::clean_label_collision, "mint_collision_event: wrong attack kind");
    if (predict<float>(victim, plan.collision_target) != plan.target_label) {
        throw NoSuccessfulEvent("collision target is not misclassified by the victim");
    }
    return {plan.collision_target, plan.target_label, plan.collision_true_label,
            plan.attack_id + "-ev-collision"};
}

// Untargeted L-inf PGD evasion on a fixed model, all steps taken; returns
// nullopt when the final iterate is still classified correctly.
inline std::optional<MisclassificationEvent> pgd_evasion(const Classifier& model, std::span<const float> x,
                                                         std::uint32_t true_label, double epsilon,
                                                         std::size_t steps, const std::string& id) {
    std::vector<float> adv(x.begin(), x.end());
    const float step = static_cast<float>(2.5 * epsilon / static_cast<double>(steps));
    for (std::size_t it = 0; it < steps; ++it) {
        const auto g = grad_input<float>(model, adv, Target::hard(true_label));
        for (std::size_t i = 0; i < adv.size(); ++i) {
            const float s = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
            adv[i] = std::clamp(adv[i] + step * s, x[i] - static_cast<float>(epsilon),
                                x[i] + static_cast<float>(epsilon));
        }
    }
    const auto pred = predict<float>(model, adv);
    if (pred != true_label) return MisclassificationEvent{adv, static_cast<std::uint32_t>(pred), true_label, id};
    return std::nullopt;
}

// Test rows the model gets wrong, as events (no attack involved).
inline std::vector<MisclassificationEvent> benign_misclassifications(const Classifier& model,
                                                                     const LabeledDataset& test,
                                                                     std::size_t max_count) {
    std::vector<MisclassificationEvent> out;
    for (std::size_t i = 0; i < test.n && out.size() < max_count; ++i) {
        const auto pred = predict<float>(model, test.row(i));
        if (pred != test.labels[i]) {
            out.push_back({std::vector<float>(test.row(i).begin(), test.row(i).end()),
                           static_cast<std::uint32_t>(pred), test.labels[i],
                           "benign-ev-" + test.provenance[i]});
        }
    }
    return out;
}

// ---- JSON ----

inline nlohmann::json to_json(const TriggerSpec& t) {
    return {{"feature_indices", t.feature_indices},
            {"trigger_values", t.trigger_values},
            {"target_label", t.target_label}};
}

inline TriggerSpec trigger_from_json(const nlohmann::json& j) {
    return {j.at("feature_indices").get<std::vector<std::size_t>>(),
            j.at("trigger_values").get<std::vector<float>>(), j.at("target_label").get<std::uint32_t>()};
}

inline nlohmann::json to_json(const AttackPlan& p) {
    nlohmann::json j{{"kind", p.kind},
                     {"injection_rate", p.injection_rate},
                     {"perturb_budget", p.perturb_budget},
                     {"seed", p.seed},
                     {"attack_id", p.attack_id},
                     {"target_label", p.target()},
                     {"warnings", p.warnings}};
    auto& ts = j["triggers"] = nlohmann::json::array();
    for (const auto& t : p.triggers) ts.push_back(to_json(t));
    if (p.kind == AttackKind::clean_label_collision) {
        j["collision_target"] = p.collision_target;
        j["collision_true_label"] = p.collision_true_label;
        j["collision_steps"] = p.collision_steps;
        j["collision_initial_distance"] = p.collision_initial_distance;
        j["collision_final_distance"] = p.collision_final_distance;
    }
    return j;
}

inline AttackPlan attack_plan_from_json(const nlohmann::json& j) {
    AttackPlan p;
    p.kind = j.at("kind").get<AttackKind>();
    p.injection_rate = j.value("injection_rate", p.injection_rate);
    p.perturb_budget = j.value("perturb_budget", p.perturb_budget);
    p.seed = j.value("seed", p.seed);
    p.attack_id = j.value("attack_id", p.attack_id);
    p.target_label = j.value("target_label", p.target_label);
    if (j.contains("triggers")) {
        for (const auto& t : j.at("triggers")) p.triggers.push_back(trigger_from_json(t));
    }
    p.collision_target = j.value("collision_target", std::vector<float>{});
    p.collision_true_label = j.value("collision_true_label", 0u);
    p.collision_steps = j.value("collision_steps", p.collision_steps);
    p.warnings = j.value("warnings", std::vector<std::string>{});
    p.validate();
    return p;
}

inline nlohmann::json to_json(const MisclassificationEvent& e) {
    return {{"event_id", e.event_id}, {"x_a", e.x}, {"y_a", e.observed_label}, {"true_label", e.true_label}};
}

inline MisclassificationEvent event_from_json(const nlohmann::json& j) {
    MisclassificationEvent e{j.at("x_a").get<std::vector<float>>(), j.at("y_a").get<std::uint32_t>(),
                             j.at("true_label").get<std::uint32_t>(), j.value("event_id", std::string("ev"))};
    require(e.observed_label != e.true_label, "event: y_a must differ from the true label");
    return e;
}

}  // namespace pftrace
