#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pftrace/pftrace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pftrace;

namespace {

// Input problems detected after parsing (unreadable or malformed files).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

template <class F>
auto load_input(const std::string& what, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const FormatError& e) {
        throw UsageError(what + ": " + e.what());
    } catch (const json::exception& e) {
        throw UsageError(what + ": " + e.what());
    }
}

LabeledDataset read_dataset(const std::string& p) {
    return load_input(p, [&] { return load_dataset(p); });
}
Classifier read_model(const std::string& p) {
    return load_input(p, [&] { return load_model(p); });
}

std::vector<MisclassificationEvent> read_events(const std::string& p) {
    return load_input(p, [&] {
        auto j = read_json_file(p);
        if (j.contains("events")) j = j.at("events");
        std::vector<MisclassificationEvent> out;
        if (j.is_array()) {
            for (const auto& e : j) out.push_back(event_from_json(e));
        } else {
            out.push_back(event_from_json(j));
        }
        return out;
    });
}

// Scalars in the --config file replace the matching --flags of the chosen
// subcommand; keys are flag names with '-' or '_'.
std::vector<std::string> config_args(const json& cfg, const CLI::App* sub) {
    std::vector<std::string> args;
    for (const auto& [key, value] : cfg.items()) {
        if (value.is_object()) continue;
        std::string name = key;
        std::replace(name.begin(), name.end(), '_', '-');
        const CLI::Option* opt = nullptr;
        try {
            opt = sub->get_option("--" + name);
        } catch (const CLI::OptionNotFound&) {
            throw UsageError("config: unknown key '" + key + "' for " + sub->get_name());
        }
        auto push = [&](const json& v) {
            args.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        };
        if (opt->get_type_size() == 0) {
            if (value.get<bool>()) args.push_back("--" + name);
            continue;
        }
        args.push_back("--" + name);
        if (value.is_array()) {
            for (const auto& v : value) push(v);
        } else {
            push(value);
        }
    }
    return args;
}

struct TraceFlags {
    double epsilon = -1;
    std::size_t unlearn_epochs = 0;
    double rho = 100;
    bool no_normalize = false;
    std::size_t min_set_size = 4;
    std::size_t max_iterations = 30;
    bool parallel = false;

    void add(CLI::App* a) {
        a->add_option("--epsilon", epsilon, "Margin for the prune test (default 0)");
        a->add_option("--unlearn-epochs", unlearn_epochs, "Unlearning epochs (default 5)");
        a->add_option("--rho", rho, "Percent of final-layer weights used for projection")->check(CLI::Range(0.0, 100.0));
        a->add_flag("--no-normalize", no_normalize, "Keep projection rows unnormalised");
        a->add_option("--min-set-size", min_set_size, "Stop below this many unmarked rows");
        a->add_option("--max-iterations", max_iterations, "Iteration cap");
        a->add_flag("--parallel", parallel, "Evaluate both clusters concurrently");
    }

    TracebackConfig build(std::uint64_t seed, const json& nested) const {
        TracebackConfig c;
        if (epsilon >= 0) c.unlearn.epsilon_margin = epsilon;
        if (unlearn_epochs > 0) c.unlearn.epochs = unlearn_epochs;
        c.projection.rho_percent = rho;
        c.projection.normalize = !no_normalize;
        c.projection.subsample_seed = derive_seed(seed, "projection");
        c.min_set_size = min_set_size;
        c.max_iterations = max_iterations;
        c.seed = seed;
        c.parallel = parallel;
        if (nested.is_object()) c = traceback_config_from_json(nested, c);
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Poison forensics: forge data, train victims, mount attacks, trace events"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    std::uint64_t seed = 1;
    app.add_option("--config", config_path, "JSON file whose keys override flags")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Root seed");

    // forge
    auto* forge = app.add_subcommand("forge", "Generate a Gaussian-blob dataset");
    std::uint32_t classes = 10;
    std::size_t per_class = 600, dim = 64;
    double separation = 6.0, sigma = 1.0, train_fraction = 0;
    std::string out, test_out, manifest;
    forge->add_option("--classes", classes)->check(CLI::Range(2u, 100000u));
    forge->add_option("--per-class", per_class)->check(CLI::PositiveNumber);
    forge->add_option("--dim", dim)->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
    forge->add_option("--separation", separation)->check(CLI::NonNegativeNumber);
    forge->add_option("--sigma", sigma)->check(CLI::NonNegativeNumber);
    forge->add_option("--train-fraction", train_fraction, "Also split; --out gets the train part")
        ->check(CLI::Range(0.0, 1.0));
    forge->add_option("--out", out, "Output .pfds")->required();
    forge->add_option("--test-out", test_out, "Test split output (with --train-fraction)");
    forge->add_option("--manifest", manifest, "Write a JSON manifest");

    // train
    auto* trn = app.add_subcommand("train", "Train a classifier");
    std::string data, model_path;
    std::vector<std::size_t> hidden{32};
    TrainConfig tcfg{5, 32, 0.01, 0, 0};
    trn->add_option("--data", data)->required()->check(CLI::ExistingFile);
    trn->add_option("--out", model_path)->required();
    trn->add_option("--hidden", hidden, "Hidden layer sizes");
    trn->add_option("--epochs", tcfg.epochs);
    trn->add_option("--batch-size", tcfg.batch_size)->check(CLI::PositiveNumber);
    trn->add_option("--lr", tcfg.learning_rate)->check(CLI::PositiveNumber);

    // poison
    auto* poison = app.add_subcommand("poison", "Inject poison into a dataset");
    std::string kind = "dirty_label", plan_out, extractor_path, target_data;
    double rate = 0.10, budget = 0.05;
    int target = -1;
    std::size_t target_row = 0;
    poison->add_option("--data", data)->required()->check(CLI::ExistingFile);
    poison->add_option("--out", out)->required();
    poison->add_option("--plan-out", plan_out, "Write the attack plan JSON");
    poison->add_option("--kind", kind)->check(CLI::IsMember({"dirty_label", "overlapping", "clean_label"}));
    poison->add_option("--rate", rate);
    poison->add_option("--target", target, "Target label (default: derived from seed)");
    poison->add_option("--budget", budget, "L-inf budget (clean_label)");
    poison->add_option("--extractor", extractor_path, "Feature extractor model (clean_label)")->check(CLI::ExistingFile);
    poison->add_option("--target-data", target_data, "Dataset holding the collision target (clean_label)")
        ->check(CLI::ExistingFile);
    poison->add_option("--target-row", target_row, "Row of --target-data to collide with");

    // attack
    auto* attack = app.add_subcommand("attack", "Mint misclassification events");
    std::string plan_path, mode = "trigger";
    std::size_t count = 20;
    double pgd_eps = 0.05;
    attack->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    attack->add_option("--data", data, "Candidate inputs")->check(CLI::ExistingFile);
    attack->add_option("--plan", plan_path)->check(CLI::ExistingFile);
    attack->add_option("--mode", mode)->check(CLI::IsMember({"trigger", "collision", "benign", "pgd"}));
    attack->add_option("--count", count)->check(CLI::PositiveNumber);
    attack->add_option("--pgd-epsilon", pgd_eps)->check(CLI::NonNegativeNumber);
    attack->add_option("--out", out)->required();

    // trace
    auto* trace_cmd = app.add_subcommand("trace", "Trace an event back to training rows");
    std::string event_path, csv_out;
    std::size_t event_index = 0;
    TraceFlags tflags;
    trace_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    trace_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    trace_cmd->add_option("--event", event_path)->required()->check(CLI::ExistingFile);
    trace_cmd->add_option("--event-index", event_index);
    trace_cmd->add_option("--out", out, "Report JSON (default stdout)");
    trace_cmd->add_option("--csv", csv_out, "Iteration log CSV");
    tflags.add(trace_cmd);

    // identify
    auto* identify = app.add_subcommand("identify", "Poison or not: a single prune step");
    identify->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    identify->add_option("--data", data)->required()->check(CLI::ExistingFile);
    identify->add_option("--event", event_path)->required()->check(CLI::ExistingFile);
    identify->add_option("--out", out);
    tflags.add(identify);

    // eval
    auto* eval = app.add_subcommand("eval", "Run a campaign and score it against the ground truth");
    std::string ekind = "dirty_label";
    std::size_t events = 20;
    std::vector<std::uint64_t> seeds;
    std::string table_out;
    eval->add_option("--kind", ekind)->check(CLI::IsMember({"dirty_label", "overlapping", "clean_label", "benign", "pgd"}));
    eval->add_option("--events", events)->check(CLI::PositiveNumber);
    eval->add_option("--seeds", seeds, "Campaign seeds (default: 3 derived from --seed)");
    eval->add_option("--epsilon", tflags.epsilon);
    eval->add_option("--out", out, "Campaign JSON");
    eval->add_option("--table", table_out, "Plain-text table (default stdout)");

    // theory-check
    auto* theory_cmd = app.add_subcommand("theory-check", "Empirical checks of the convex responsibility theorems");
    std::string which = "all";
    theory_cmd->add_option("--theorem", which)->check(CLI::IsMember({"1", "2", "all"}));
    theory_cmd->add_option("--out", out);

    // export-pca
    auto* pca_cmd = app.add_subcommand("export-pca", "Export projections and their 2-D PCA");
    std::string projection_out;
    double rho = 100;
    bool no_normalize = false;
    pca_cmd->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    pca_cmd->add_option("--data", data)->required()->check(CLI::ExistingFile);
    pca_cmd->add_option("--out", out, "PCA CSV")->required();
    pca_cmd->add_option("--projection-out", projection_out, "Projection matrix CSV");
    pca_cmd->add_option("--rho", rho)->check(CLI::Range(0.0, 100.0));
    pca_cmd->add_flag("--no-normalize", no_normalize);

    json config_nested;
    try {
        app.parse(argc, argv);
        if (!config_path.empty()) {
            const json cfg = read_json_file(config_path);
            if (!cfg.is_object()) throw UsageError("config: top level must be an object");
            CLI::App* sub = app.get_subcommands().front();
            std::vector<std::string> extra = config_args(cfg, sub);
            if (cfg.contains("seed")) seed = cfg.at("seed").get<std::uint64_t>();
            for (const auto& [k, v] : cfg.items()) {
                if (v.is_object()) config_nested[k] = v;
            }
            // Re-parse with config values appended so they take precedence.
            std::vector<std::string> all(argv + 1, argv + argc);
            all.insert(all.end(), extra.begin(), extra.end());
            std::vector<std::string> rev(all.rbegin(), all.rend());
            app.parse(rev);
            if (cfg.contains("seed")) seed = cfg.at("seed").get<std::uint64_t>();
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "usage error: config: " << e.what() << "\n";
        return 2;
    }

    try {
        if (forge->parsed()) {
            auto ds = forge_blobs(classes, per_class, dim, separation, sigma, derive_seed(seed, "forge"));
            if (train_fraction > 0) {
                auto sp = split(ds, train_fraction, derive_seed(seed, "split"));
                save_dataset(out, sp.train);
                if (!test_out.empty()) save_dataset(test_out, sp.test);
                ds = std::move(sp.train);
            } else {
                save_dataset(out, ds);
            }
            if (!manifest.empty()) write_json(manifest, manifest_json(ds));
            std::cout << json{{"dataset_id", ds.id}, {"n", ds.n}, {"path", out}}.dump() << "\n";
        } else if (trn->parsed()) {
            auto ds = read_dataset(data);
            Architecture arch;
            arch.layer_sizes.push_back(ds.d);
            arch.layer_sizes.insert(arch.layer_sizes.end(), hidden.begin(), hidden.end());
            arch.layer_sizes.push_back(ds.num_classes);
            auto m = train(ds, arch, tcfg, derive_seed(seed, "train"));
            save_model(model_path, m);
            std::cout << json{{"model_digest", model_digest(m)}, {"train_accuracy", accuracy(m, ds)}}.dump() << "\n";
        } else if (poison->parsed()) {
            auto ds = read_dataset(data);
            AttackPlan plan;
            plan.injection_rate = rate;
            plan.seed = derive_seed(seed, "attack");
            plan.attack_id = "a" + hex64(plan.seed).substr(0, 6);
            plan.target_label = target >= 0 ? static_cast<std::uint32_t>(target) : pick_target(seed, ds.num_classes);
            LabeledDataset poisoned;
            if (kind == "dirty_label") {
                plan.kind = AttackKind::dirty_label_trigger;
                plan.triggers.push_back(patch_trigger(ds, plan.target_label));
                poisoned = inject_dirty_label(ds, plan);
            } else if (kind == "overlapping") {
                plan.kind = AttackKind::overlapping_triggers;
                const std::size_t w = (ds.d + 9) / 10;
                plan.triggers.push_back(patch_trigger(ds, plan.target_label, w, 0));
                plan.triggers.push_back(patch_trigger(ds, plan.target_label, w, w));
                poisoned = inject_overlapping(ds, plan);
            } else {
                if (extractor_path.empty() || target_data.empty()) {
                    std::cerr << "usage error: clean_label needs --extractor and --target-data\n";
                    return 2;
                }
                plan.kind = AttackKind::clean_label_collision;
                plan.perturb_budget = budget;
                auto ext = read_model(extractor_path);
                auto tds = read_dataset(target_data);
                require(target_row < tds.n, "--target-row out of range");
                plan.collision_target.assign(tds.row(target_row).begin(), tds.row(target_row).end());
                plan.collision_true_label = tds.labels[target_row];
                poisoned = inject_clean_label_collision(ds, plan, ext);
            }
            save_dataset(out, poisoned);
            if (!plan_out.empty()) write_json(plan_out, to_json(plan));
            std::cout << json{{"dataset_id", poisoned.id}, {"poison_count", poisoned.poison_count()},
                              {"warnings", plan.warnings}}.dump()
                      << "\n";
        } else if (attack->parsed()) {
            auto m = read_model(model_path);
            std::vector<MisclassificationEvent> evs;
            if (mode == "trigger" || mode == "collision") {
                if (plan_path.empty()) {
                    std::cerr << "usage error: --plan is required for mode " << mode << "\n";
                    return 2;
                }
                auto plan = load_input(plan_path, [&] { return attack_plan_from_json(read_json_file(plan_path)); });
                if (mode == "collision") {
                    evs.push_back(mint_collision_event(m, plan));
                } else {
                    if (data.empty()) {
                        std::cerr << "usage error: --data is required for mode trigger\n";
                        return 2;
                    }
                    evs = mint_trigger_events(m, read_dataset(data), plan, count);
                }
            } else {
                if (data.empty()) {
                    std::cerr << "usage error: --data is required for mode " << mode << "\n";
                    return 2;
                }
                auto ds = read_dataset(data);
                if (mode == "benign") {
                    evs = benign_misclassifications(m, ds, count);
                } else {
                    for (std::size_t i = 0; i < ds.n && evs.size() < count; ++i) {
                        if (predict<float>(m, ds.row(i)) != ds.labels[i]) continue;
                        auto e = pgd_evasion(m, ds.row(i), ds.labels[i], pgd_eps, 100, "pgd-" + ds.provenance[i]);
                        if (e) evs.push_back(std::move(*e));
                    }
                }
                if (evs.empty()) throw NoSuccessfulEvent("no " + mode + " events found");
            }
            json arr = json::array();
            for (const auto& e : evs) arr.push_back(to_json(e));
            write_json(out, json{{"events", arr}});
            std::cout << json{{"event_count", evs.size()}}.dump() << "\n";
        } else if (trace_cmd->parsed() || identify->parsed()) {
            auto m = read_model(model_path);
            auto ds = read_dataset(data);
            auto evs = read_events(event_path);
            if (event_index >= evs.size()) {
                std::cerr << "usage error: --event-index out of range\n";
                return 2;
            }
            const auto cfg = tflags.build(seed, config_nested.is_object() && config_nested.contains("traceback") ? config_nested["traceback"] : json());
            TraceContext ctx(m, ds, cfg);
            if (trace_cmd->parsed()) {
                auto rep = trace(ctx, evs[event_index]);
                auto j = to_json(rep, ds);
                if (ds.poison_count() > 0) {
                    auto sc = score_report(rep, ds);
                    j["evaluation"] = {{"precision", sc.precision ? json(*sc.precision) : json(nullptr)},
                                       {"recall", sc.recall}};
                }
                write_json(out, j);
                if (!csv_out.empty()) {
                    std::ostringstream os;
                    write_iteration_csv(os, rep);
                    write_text(csv_out, os.str());
                }
            } else {
                PruneStepResult st;
                auto k = identify_event_kind(ctx, evs[event_index], &st);
                write_json(out, {{"event_id", evs[event_index].event_id},
                                 {"kind", k},
                                 {"decisions", {to_json(st.decisions[0]), to_json(st.decisions[1])}}});
            }
        } else if (eval->parsed()) {
            CampaignConfig c = default_campaign(json(ekind).get<CampaignKind>());
            if (config_nested.is_object() && config_nested.contains("campaign")) {
                json nested = config_nested["campaign"];
                nested["kind"] = ekind;
                c = campaign_config_from_json(nested);
            }
            if (eval->get_option("--events")->count() > 0) c.events = events;
            const bool nested_seeds = config_nested.is_object() && config_nested.contains("campaign") &&
                                      config_nested["campaign"].contains("seeds");
            if (!seeds.empty()) {
                c.seeds = seeds;
            } else if (!nested_seeds) {
                // One campaign seed per default seed, derived from --seed.
                for (std::size_t i = 0; i < c.seeds.size(); ++i) c.seeds[i] = derive_seed(seed, "eval", i) % 100000;
            }
            if (tflags.epsilon >= 0) c.traceback.unlearn.epsilon_margin = tflags.epsilon;
            auto r = run_campaign(c);
            if (!out.empty()) write_json(out, to_json(r, c));
            write_text(table_out, format_table({r.summary}));
        } else if (theory_cmd->parsed()) {
            json j;
            if (which == "1" || which == "all") {
                theory::Theorem1Config c1;
                c1.seed = derive_seed(seed, "theorem1");
                j["theorem1"] = to_json(theory::check_theorem1(c1));
            }
            if (which == "2" || which == "all") {
                theory::Theorem2Config c2;
                c2.seed = derive_seed(seed, "theorem2");
                j["theorem2"] = to_json(theory::check_theorem2(c2));
            }
            write_json(out, j);
        } else if (pca_cmd->parsed()) {
            auto m = read_model(model_path);
            auto ds = read_dataset(data);
            ProjectionConfig pc;
            pc.rho_percent = rho;
            pc.normalize = !no_normalize;
            pc.subsample_seed = derive_seed(seed, "projection");
            auto pm = project(m, ds, full_slice(ds), pc);
            auto pca = pca_2d(pm, derive_seed(seed, "pca"));
            std::ostringstream os;
            write_pca_csv(os, pm, pca, &ds);
            write_text(out, os.str());
            if (!projection_out.empty()) {
                std::ostringstream ps;
                write_projection_csv(ps, pm);
                write_text(projection_out, ps.str());
            }
            std::cout << json{{"rows", pm.size()},
                              {"explained_ratio", {pca.explained_ratio[0], pca.explained_ratio[1]}},
                              {"rank_deficient", pca.rank_deficient}}.dump()
                      << "\n";
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
