#include <gtest/gtest.h>

#include "pftrace/poison.hpp"

using namespace pftrace;

namespace {

LabeledDataset blobs() { return forge_blobs(4, 50, 20, 5.0, 1.0, 21); }

AttackPlan dirty_plan(const LabeledDataset& ds, double rate = 0.1) {
    AttackPlan p;
    p.kind = AttackKind::dirty_label_trigger;
    p.injection_rate = rate;
    p.seed = 5;
    p.attack_id = "t";
    p.triggers.push_back(patch_trigger(ds, 2));
    return p;
}

}  // namespace

TEST(Trigger, PatchGeometry) {
    const auto ds = blobs();
    const auto t = patch_trigger(ds, 1);
    ASSERT_EQ(t.feature_indices.size(), 2u);
    EXPECT_EQ(t.feature_indices.front(), 18u);
    EXPECT_EQ(t.feature_indices.back(), 19u);
    EXPECT_FLOAT_EQ(t.trigger_values[0], feature_percentile(ds, 0.99));
    const auto t2 = patch_trigger(ds, 1, 3, 3);
    EXPECT_EQ(t2.feature_indices, (std::vector<std::size_t>{14, 15, 16}));
    EXPECT_THROW(patch_trigger(ds, 1, 15, 10), ContractViolation);
}

TEST(Trigger, ValidateRejectsBadSpecs) {
    TriggerSpec t{{0, 25}, {1.0f, 1.0f}, 0};
    EXPECT_THROW(t.validate(20), ContractViolation);
    TriggerSpec dup{{3, 3}, {1.0f, 1.0f}, 0};
    EXPECT_THROW(dup.validate(20), ContractViolation);
    TriggerSpec len{{3}, {1.0f, 1.0f}, 0};
    EXPECT_THROW(len.validate(20), ContractViolation);
}

TEST(DirtyLabel, ExactBudgetAndLabels) {
    const auto ds = blobs();
    const auto plan = dirty_plan(ds);
    const auto out = inject_dirty_label(ds, plan);
    EXPECT_EQ(out.n, ds.n + 20);
    EXPECT_EQ(out.poison_count(), poison_budget(0.1, ds.n));
    for (std::size_t i = ds.n; i < out.n; ++i) {
        EXPECT_EQ(out.labels[i], 2u);
        EXPECT_EQ(out.poison_mask[i], 1);
        EXPECT_FLOAT_EQ(out.row(i)[19], plan.triggers[0].trigger_values[0]);
        EXPECT_EQ(out.provenance[i].rfind("atk-t-", 0), 0u);
    }
    EXPECT_EQ(inject_dirty_label(ds, plan).id, out.id);
}

TEST(DirtyLabel, RejectsBadPlans) {
    const auto ds = blobs();
    auto plan = dirty_plan(ds, 0.6);
    EXPECT_THROW(inject_dirty_label(ds, plan), ContractViolation);
    plan = dirty_plan(ds);
    plan.triggers.front().target_label = 9;
    EXPECT_THROW(inject_dirty_label(ds, plan), ContractViolation);
    plan = dirty_plan(ds);
    plan.kind = AttackKind::overlapping_triggers;
    EXPECT_THROW(inject_dirty_label(ds, plan), ContractViolation);
}

TEST(Overlapping, EvenSplitDisjointPatches) {
    const auto ds = blobs();
    AttackPlan p;
    p.kind = AttackKind::overlapping_triggers;
    p.injection_rate = 0.105;
    p.attack_id = "o";
    p.triggers.push_back(patch_trigger(ds, 1, 2, 0));
    p.triggers.push_back(patch_trigger(ds, 1, 2, 2));
    const auto out = inject_overlapping(ds, p);
    std::size_t a = 0;
    std::size_t b = 0;
    for (std::size_t i = ds.n; i < out.n; ++i) {
        a += out.provenance[i].rfind("atk-ot0-", 0) == 0;
        b += out.provenance[i].rfind("atk-ot1-", 0) == 0;
    }
    EXPECT_EQ(a + b, poison_budget(0.105, ds.n));
    EXPECT_LE(a > b ? a - b : b - a, 1u);
    p.triggers[1].target_label = 3;
    EXPECT_THROW(inject_overlapping(ds, p), ContractViolation);
}

TEST(Collision, StaysInBudgetAndKeepsLabels) {
    const auto ds = blobs();
    const auto extractor = train(ds, Architecture{{20, 8, 4}}, {3, 16, 0.05, 0, 0}, 2);
    AttackPlan p;
    p.kind = AttackKind::clean_label_collision;
    p.injection_rate = 0.05;
    p.perturb_budget = 0.5;
    p.target_label = 1;
    p.seed = 3;
    p.collision_target.assign(ds.row(0).begin(), ds.row(0).end());
    p.collision_true_label = ds.labels[0];
    const auto out = inject_clean_label_collision(ds, p, extractor);
    EXPECT_EQ(out.n, ds.n);
    EXPECT_EQ(out.labels, ds.labels);
    EXPECT_EQ(out.poison_count(), poison_budget(0.05, ds.n));
    for (std::size_t i = 0; i < out.n; ++i) {
        if (!out.poison_mask[i]) {
            EXPECT_TRUE(std::equal(out.row(i).begin(), out.row(i).end(), ds.row(i).begin()));
            continue;
        }
        EXPECT_EQ(out.labels[i], 1u);
        for (std::size_t j = 0; j < ds.d; ++j) EXPECT_LE(std::abs(out.row(i)[j] - ds.row(i)[j]), 0.5f + 1e-6f);
    }
    EXPECT_LT(p.collision_final_distance, p.collision_initial_distance);
}

TEST(Collision, ZeroBudgetIsNoOpWithWarning) {
    const auto ds = blobs();
    const auto extractor = train(ds, Architecture{{20, 8, 4}}, {1, 16, 0.05, 0, 0}, 2);
    AttackPlan p;
    p.kind = AttackKind::clean_label_collision;
    p.injection_rate = 0.05;
    p.perturb_budget = 0.0;
    p.target_label = 1;
    p.collision_target.assign(ds.row(0).begin(), ds.row(0).end());
    const auto out = inject_clean_label_collision(ds, p, extractor);
    EXPECT_EQ(out.inputs, ds.inputs);
    EXPECT_DOUBLE_EQ(p.collision_final_distance, p.collision_initial_distance);
}

TEST(Events, TriggerEventsReproduce) {
    const auto all = blobs();
    const auto sp = split(all, 0.8, 1);
    const auto plan = dirty_plan(sp.train, 0.2);
    const auto ds = inject_dirty_label(sp.train, plan);
    const auto victim = train(ds, Architecture{{20, 16, 4}}, {10, 16, 0.05, 0, 0}, 4);
    const auto evs = mint_trigger_events(victim, sp.test, plan, 3);
    ASSERT_FALSE(evs.empty());
    for (const auto& e : evs) {
        EXPECT_EQ(predict<float>(victim, e.x), 2u);
        EXPECT_EQ(e.observed_label, 2u);
        EXPECT_NE(e.true_label, 2u);
    }
}

TEST(Events, PgdRespectsBudget) {
    const auto ds = forge_blobs(2, 50, 4, 0.5, 0.5, 3);
    const auto m = train(ds, Architecture{{4, 6, 2}}, {5, 16, 0.05, 0, 0}, 4);
    EXPECT_FALSE(pgd_evasion(m, ds.row(0), ds.labels[0], 0.0, 10, "z").has_value());
    std::size_t found = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        if (predict<float>(m, ds.row(i)) != ds.labels[i]) continue;
        auto e = pgd_evasion(m, ds.row(i), ds.labels[i], 0.3, 20, "p");
        if (!e) continue;
        ++found;
        EXPECT_NE(predict<float>(m, e->x), ds.labels[i]);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_LE(std::abs(e->x[j] - ds.row(i)[j]), 0.3f + 1e-6f);
    }
    EXPECT_GT(found, 0u);
}

TEST(Events, BenignAreModelMistakes) {
    const auto ds = forge_blobs(3, 40, 4, 0.5, 1.0, 3);
    const auto m = train(ds, Architecture{{4, 3}}, {2, 16, 0.05, 0, 0}, 4);
    const auto evs = benign_misclassifications(m, ds, 5);
    ASSERT_EQ(evs.size(), 5u);
    for (const auto& e : evs) EXPECT_NE(e.observed_label, e.true_label);
}

TEST(Json, PlanAndEventRoundTrip) {
    const auto ds = blobs();
    const auto plan = dirty_plan(ds);
    const auto back = attack_plan_from_json(to_json(plan));
    EXPECT_EQ(back.triggers.front().feature_indices, plan.triggers.front().feature_indices);
    EXPECT_EQ(back.target(), 2u);
    const MisclassificationEvent e{{1.0f, 2.0f}, 1, 0, "x"};
    const auto eb = event_from_json(to_json(e));
    EXPECT_EQ(eb.x, e.x);
    EXPECT_EQ(eb.event_id, "x");
    auto bad = to_json(e);
    bad["y_a"] = 0;
    EXPECT_THROW(event_from_json(bad), ContractViolation);
}
