#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pftrace/pftrace.hpp"

using namespace pftrace;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: dirty-label campaign ----
Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto c = default_campaign(CampaignKind::dirty_label);
    const auto r = run_campaign(c);
    const double secs = elapsed(t0);
    const auto& s = r.summary;
    const bool ok = s.events.size() >= 60 && s.precision.mean >= 0.95 && s.recall.mean >= 0.90 && secs <= 300;
    return {ok, fmt("events=%zu precision=%.3f recall=%.3f non_poison=%zu runtime=%.1fs (need P>=0.95 R>=0.90 <=300s)",
                    s.events.size(), s.precision.mean, s.recall.mean, s.non_poison_count, secs)};
}

// ---- 2: loss separation on the criterion-1 runs ----
Outcome criterion2() {
    const auto c = default_campaign(CampaignKind::dirty_label);
    const double eps = c.traceback.unlearn.epsilon_margin;
    std::size_t benign_clusters = 0;
    std::size_t violations = 0;
    double worst = -1e300;
    std::vector<double> ratios;
    for (auto seed : c.seeds) {
        auto s = make_trigger_scenario(c, seed);
        TracebackConfig tc = c.traceback;
        tc.seed = derive_seed(seed, "traceback");
        TraceContext ctx(s.victim, s.train, tc);
        std::vector<std::size_t> poison_idx;
        for (std::size_t i = 0; i < s.train.n; ++i) {
            if (s.train.poison_mask[i]) poison_idx.push_back(i);
        }
        const auto full_poison = make_slice(s.train, poison_idx);
        auto unlearn_cfg = tc.unlearn;
        unlearn_cfg.seed = tc.seed;
        const auto without_poison = unlearn(s.victim, s.train, full_poison, unlearn_cfg);
        for (const auto& ev : s.events) {
            const auto rep = trace(ctx, ev);
            for (const auto& it : rep.iterations) {
                for (std::size_t k = 0; k < 2; ++k) {
                    const auto& cl = it.clusters[k];
                    if (cl.empty()) continue;
                    bool pure = true;
                    for (auto i : cl.indices) pure = pure && !s.train.poison_mask[i];
                    if (!pure) continue;
                    const auto& d = it.decisions[k];
                    ++benign_clusters;
                    worst = std::max(worst, d.loss_after - d.loss_before);
                    violations += d.loss_after > d.loss_before + eps;
                }
            }
            const double before = event_loss(s.victim, ev.x, ev.observed_label);
            const double after = event_loss(without_poison, ev.x, ev.observed_label);
            ratios.push_back(after / std::max(before, 1e-12));
        }
    }
    double mean_ratio = 0;
    for (double r : ratios) mean_ratio += r;
    mean_ratio /= static_cast<double>(std::max<std::size_t>(ratios.size(), 1));
    const bool ok = benign_clusters > 0 && violations == 0 && mean_ratio >= 5.0;
    return {ok, fmt("pure-benign clusters=%zu over-margin=%zu max(after-before)=%.4f eps=%.2f; "
                    "full-poison unlearn loss ratio mean=%.1f (need 0 over-margin, ratio>=5)",
                    benign_clusters, violations, worst, eps, mean_ratio)};
}

// ---- 3: clean-label collision ----
Outcome criterion3() {
    auto c = default_campaign(CampaignKind::clean_label);
    const auto main = run_campaign(c);
    auto recall_at = [&](double budget) {
        auto cb = c;
        cb.perturb_budget = budget;
        return run_campaign(cb).summary;
    };
    const auto lo = recall_at(0.01);
    const auto hi = recall_at(0.09);
    const auto& s = main.summary;
    const bool ok = s.events.size() >= 20 && s.precision.mean >= 0.90 && s.recall.mean >= 0.85 &&
                    lo.recall.mean <= hi.recall.mean;
    return {ok, fmt("budget 0.05: events=%zu attempts=%zu precision=%.3f recall=%.3f; recall@0.01=%.3f (%zu ev) "
                    "recall@0.09=%.3f (%zu ev) (need P>=0.90 R>=0.85, monotone)",
                    s.events.size(), main.attempts, s.precision.mean, s.recall.mean, lo.recall.mean,
                    lo.events.size(), hi.recall.mean, hi.events.size())};
}

// ---- 4: non-poison identification ----
Outcome criterion4() {
    const auto b = run_campaign(default_campaign(CampaignKind::benign)).summary;
    const auto p = run_campaign(default_campaign(CampaignKind::pgd)).summary;
    const bool ok = b.events.size() >= 50 && p.events.size() >= 50 && b.non_poison_count * 10 >= b.events.size() * 9 &&
                    p.non_poison_count * 10 >= p.events.size() * 9;
    return {ok, fmt("benign non_poison=%zu/%zu pgd non_poison=%zu/%zu (need >=90%% each)", b.non_poison_count,
                    b.events.size(), p.non_poison_count, p.events.size())};
}

// ---- 5: overlapping triggers ----
Outcome criterion5() {
    const auto s = run_campaign(default_campaign(CampaignKind::overlapping)).summary;
    const bool ok = s.precision.mean >= 0.90 && s.recall.mean >= 0.90;
    return {ok, fmt("events=%zu precision=%.3f recall=%.3f non_poison=%zu (need both >=0.90)", s.events.size(),
                    s.precision.mean, s.recall.mean, s.non_poison_count)};
}

// ---- 6: rho sensitivity ----
Outcome criterion6() {
    std::vector<double> p;
    std::vector<double> r;
    std::string d;
    for (double rho : {1.0, 10.0, 100.0}) {
        auto c = default_campaign(CampaignKind::dirty_label);
        c.traceback.projection.rho_percent = rho;
        const auto s = run_campaign(c).summary;
        p.push_back(s.precision.mean);
        r.push_back(s.recall.mean);
        d += fmt("rho=%g P=%.3f R=%.3f; ", rho, s.precision.mean, s.recall.mean);
    }
    const double dp = *std::max_element(p.begin(), p.end()) - *std::min_element(p.begin(), p.end());
    const double dr = *std::max_element(r.begin(), r.end()) - *std::min_element(r.begin(), r.end());
    return {dp <= 0.02 && dr <= 0.02, d + fmt("spread P=%.3f R=%.3f (need <=0.02)", dp, dr)};
}

// ---- 7: unlearning vs retraining ----
// Slices are clusters produced by traceback on small poisoned instances. The
// retrained model starts from the victim's initialisation and visits the
// surviving rows in the victim's epoch order.
Outcome criterion7() {
    const double eps = 0.05;
    const Architecture arch{{16, 16, 4}};
    const TrainConfig tc{10, 32, 0.05, 0, 0};
    std::size_t agree = 0;
    std::size_t total = 0;
    std::size_t max_n = 0;
    for (std::uint64_t inst = 0; total < 40 && inst < 100; ++inst) {
        const std::uint64_t seed = derive_seed(77, "inst", inst);
        auto all = forge_blobs(4, 125, 16, 6.0, 1.0, derive_seed(seed, "forge"));
        auto sp = split(all, 0.8, derive_seed(seed, "split"));
        AttackPlan plan;
        plan.seed = derive_seed(seed, "atk");
        plan.triggers.push_back(patch_trigger(sp.train, 0));
        const auto ds = inject_dirty_label(sp.train, plan);
        max_n = std::max(max_n, ds.n);
        const std::uint64_t vs = derive_seed(seed, "victim");
        const auto victim = train(ds, arch, tc, vs);
        const auto ev = mint_trigger_events(victim, sp.test, plan, 1).front();
        const double before = event_loss(victim, ev.x, ev.observed_label);

        TracebackConfig cfg;
        cfg.unlearn.epsilon_margin = eps;
        cfg.unlearn.seed = seed;
        cfg.seed = seed;
        const auto rep = trace(victim, ds, ev, cfg);
        std::vector<DatasetSlice> pool;
        for (const auto& it : rep.iterations) {
            for (const auto& cl : it.clusters) {
                if (!cl.empty()) pool.push_back(cl);
            }
        }
        Rng rng(seed);
        shuffle_in_place(pool, rng);
        for (std::size_t k = 0; k < 4 && k < pool.size() && total < 40; ++k) {
            const auto& forget = pool[k];
            const double unlearned = event_loss(unlearn(victim, ds, forget, cfg.unlearn), ev.x, ev.observed_label);
            std::vector<std::uint8_t> drop(ds.n, 0);
            for (auto i : forget.indices) drop[i] = 1;
            EpochPlan coupled = [&](std::size_t epoch) {
                auto order = full_slice(ds).indices;
                Rng r(derive_seed(tc.shuffle_seed ^ vs, "sgd.shuffle", epoch));
                shuffle_in_place(order, r);
                std::vector<std::size_t> kept;
                for (auto i : order) {
                    if (!drop[i]) kept.push_back(i);
                }
                return make_batches(ds, kept, tc.batch_size);
            };
            const auto retrained = run_sgd(initialize<float>(arch, vs, tc), coupled, tc);
            const double oracle = event_loss(retrained, ev.x, ev.observed_label);
            agree += (before >= unlearned - eps) == (before >= oracle - eps);
            ++total;
        }
    }
    const bool ok = total >= 40 && max_n <= 500 && agree * 100 >= total * 95;
    return {ok, fmt("agreement=%zu/%zu N=%zu (need >=95%%, N<=500)", agree, total, max_n)};
}

// ---- 8: numerics ----
double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0;
    double den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den = std::max(den, std::max(a[i] * a[i], b[i] * b[i]));
    }
    return std::sqrt(num) / std::max(std::sqrt(den) * std::sqrt(static_cast<double>(a.size())), 1e-300);
}

double oracle_inertia(const RowMatrixView& rows, std::uint64_t seed) {
    double best = std::numeric_limits<double>::infinity();
    Rng rng(seed);
    for (int restart = 0; restart < 100; ++restart) {
        std::size_t a = rng() % rows.n;
        std::size_t b = rng() % rows.n;
        std::vector<double> c(2 * rows.m);
        for (std::size_t j = 0; j < rows.m; ++j) {
            c[j] = rows.row(a)[j];
            c[rows.m + j] = rows.row(b)[j];
        }
        std::vector<std::uint8_t> lab(rows.n, 0);
        for (int it = 0; it < 100; ++it) {
            bool changed = false;
            for (std::size_t i = 0; i < rows.n; ++i) {
                const auto l = static_cast<std::uint8_t>(detail::nearest(rows.row(i), c, 2, nullptr));
                changed = changed || l != lab[i];
                lab[i] = l;
            }
            std::vector<double> sum(2 * rows.m, 0.0);
            std::size_t cnt[2] = {0, 0};
            for (std::size_t i = 0; i < rows.n; ++i) {
                ++cnt[lab[i]];
                for (std::size_t j = 0; j < rows.m; ++j) sum[lab[i] * rows.m + j] += rows.row(i)[j];
            }
            for (int k = 0; k < 2; ++k) {
                if (cnt[k] == 0) continue;
                for (std::size_t j = 0; j < rows.m; ++j) c[k * rows.m + j] = sum[k * rows.m + j] / cnt[k];
            }
            if (!changed && it > 0) break;
        }
        best = std::min(best, detail::full_inertia(rows, c, 2, nullptr));
    }
    return best;
}

Outcome criterion8() {
    std::size_t grad_ok = 0;
    double worst = 0;
    const std::size_t instances = 100;
    for (std::size_t t = 0; t < instances; ++t) {
        Rng rng(derive_seed(8, "fd", t));
        const std::size_t d = 3 + rng() % 6;
        const std::size_t h = 2 + rng() % 6;
        const std::uint32_t k = 2 + static_cast<std::uint32_t>(rng() % 4);
        Architecture arch{t % 3 == 0 ? std::vector<std::size_t>{d, k} : std::vector<std::size_t>{d, h, k}};
        auto m = initialize<double>(arch, rng());
        for (auto& l : m.layers) {
            for (auto& b : l.bias) b = 0.1 * (2 * uniform01(rng) - 1);
        }
        std::vector<double> x(d);
        for (auto& v : x) v = 2 * uniform01(rng) - 1;
        const auto label = static_cast<std::uint32_t>(rng() % k);
        std::vector<double> soft(k);
        double z = 0;
        for (auto& v : soft) z += (v = uniform01(rng));
        for (auto& v : soft) v /= z;
        const Target target = t % 2 ? Target::hard(label) : Target::soft(soft);
        auto loss = [&](const BasicClassifier<double>& mm, const std::vector<double>& xx) {
            return loss_ce<double>(forward<double>(mm, xx).probabilities, target);
        };
        const double step = 1e-6;
        const auto gw = grad_weights<double>(m, x, target).flat();
        auto p = m.flat_parameters();
        std::vector<double> fw(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto q = p;
            q[i] += step;
            auto mp = m;
            mp.set_flat_parameters(q);
            q[i] -= 2 * step;
            auto mn = m;
            mn.set_flat_parameters(q);
            fw[i] = (loss(mp, x) - loss(mn, x)) / (2 * step);
        }
        const auto gi = grad_input<double>(m, x, target);
        std::vector<double> fi(d);
        for (std::size_t i = 0; i < d; ++i) {
            auto xp = x;
            xp[i] += step;
            auto xn = x;
            xn[i] -= step;
            fi[i] = (loss(m, xp) - loss(m, xn)) / (2 * step);
        }
        const double e = std::max(rel_err(gw, fw), rel_err(gi, fi));
        worst = std::max(worst, e);
        grad_ok += e <= 1e-4;
    }

    std::size_t km_ok = 0;
    double worst_ratio = 0;
    const std::size_t km_instances = 50;
    for (std::size_t t = 0; t < km_instances; ++t) {
        Rng rng(derive_seed(8, "kmeans", t));
        const std::size_t n = 16 + rng() % 49;
        const std::size_t mdim = 2 + rng() % 6;
        std::vector<float> data(n * mdim);
        std::normal_distribution<double> g(0.0, 1.0);
        const double shift = 3.0 * uniform01(rng);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < mdim; ++j) {
                data[i * mdim + j] = static_cast<float>(g(rng) + (i % 2 ? shift : 0.0));
            }
        }
        const RowMatrixView rows{data.data(), n, mdim};
        KMeansConfig kc;
        kc.seed = rng();
        const auto res = minibatch_kmeans(rows, kc);
        const double oracle = oracle_inertia(rows, rng());
        const double ratio = res.inertia / oracle;
        worst_ratio = std::max(worst_ratio, ratio);
        km_ok += ratio <= 1.05;
    }
    const bool ok = grad_ok == instances && km_ok == km_instances;
    return {ok, fmt("gradients %zu/%zu within 1e-4 (worst %.2e); k-means %zu/%zu within 5%% (worst ratio %.4f)",
                    grad_ok, instances, worst, km_ok, km_instances, worst_ratio)};
}

// ---- 9: theory ----
Outcome criterion9() {
    theory::Theorem1Config c1;
    c1.seed = derive_seed(9, "theorem1");
    const auto r1 = theory::check_theorem1(c1);
    theory::Theorem2Config c2;
    c2.seed = derive_seed(9, "theorem2");
    const auto r2 = theory::check_theorem2(c2);
    const bool ok = r1.grid.size() == 25 && r1.nonnegative_rate >= 0.9 && r2.outcomes.size() == 20 && r2.holds >= 18;
    return {ok, fmt("theorem1 grid=%zu nonnegative rate=%.2f; theorem2 holds %zu/%zu (need >=0.9, >=18/20)",
                    r1.grid.size(), r1.nonnegative_rate, r2.holds, r2.outcomes.size())};
}

// ---- 10: determinism of the eval command ----
Outcome criterion10() {
    const std::string dir = std::filesystem::temp_directory_path() / ("pftrace_acc10_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    std::vector<std::string> bodies;
    for (int run = 0; run < 2; ++run) {
        const std::string out = dir + "/run" + std::to_string(run) + ".json";
        const std::string cmd = std::string(PFTRACE_CLI) + " --seed 11 eval --kind dirty_label --out " + out +
                                " --table " + dir + "/table" + std::to_string(run) + ".txt";
        if (std::system(cmd.c_str()) != 0) return {false, "eval command failed: " + cmd};
        std::ifstream in(out);
        std::stringstream ss;
        ss << in.rdbuf();
        bodies.push_back(ss.str());
    }
    auto strip = [](const std::string& s) {
        auto j = json::parse(s);
        j.erase("timings");
        return j.dump(2);
    };
    const bool raw_differs = bodies[0] != bodies[1];
    const bool ok = strip(bodies[0]) == strip(bodies[1]);
    std::filesystem::remove_all(dir);
    return {ok, fmt("reports %s outside timings (raw files %s, %zu bytes)", ok ? "identical" : "differ",
                    raw_differs ? "differ only in timings" : "identical", bodies[0].size())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    int only = 0;
    app.add_option("--criterion", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const std::map<int, std::function<Outcome()>> checks{
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},  {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}};
    bool all = true;
    for (const auto& [n, fn] : checks) {
        if (only != 0 && n != only) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << o.detail
                  << fmt(" [%.1fs]", elapsed(t0)) << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
