#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/dataset.hpp"
#include "pftrace/traceback.hpp"

namespace pftrace {

struct EventScore {
    std::string event_id;
    Verdict verdict = Verdict::inconclusive;
    std::size_t identified_count = 0;
    std::size_t true_positives = 0;
    std::optional<double> precision;  // null when nothing was identified
    double recall = 0;
    std::size_t iterations = 0;
    double seconds = 0;
};

struct MeanStd {
    double mean = 0;
    double std = 0;
    std::size_t count = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    r.count = v.size();
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double s = 0;
        for (double x : v) s += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
    }
    return r;
}

struct EvalSummary {
    std::string label;
    std::vector<EventScore> events;  // sorted by event_id
    MeanStd precision;               // over events with a defined precision
    MeanStd recall;
    MeanStd seconds;
    std::size_t non_poison_count = 0;
    std::size_t inconclusive_count = 0;
};

inline EventScore score_report(const TracebackReport& r, const LabeledDataset& ds) {
    EventScore s;
    s.event_id = r.event_id;
    s.verdict = r.verdict;
    s.identified_count = r.identified.size();
    for (auto i : r.identified.indices) {
        require(i < ds.n, "score_report: identified index out of range");
        s.true_positives += ds.poison_mask[i];
    }
    const std::size_t total_poison = ds.poison_count();
    if (s.identified_count > 0) {
        s.precision = static_cast<double>(s.true_positives) / static_cast<double>(s.identified_count);
    }
    s.recall = total_poison > 0 ? static_cast<double>(s.true_positives) / static_cast<double>(total_poison) : 0.0;
    s.iterations = r.iterations.size();
    s.seconds = r.total_seconds;
    return s;
}

inline EvalSummary summarize(std::string label, std::vector<EventScore> scores) {
    std::stable_sort(scores.begin(), scores.end(),
                     [](const EventScore& a, const EventScore& b) { return a.event_id < b.event_id; });
    EvalSummary s;
    s.label = std::move(label);
    std::vector<double> p;
    std::vector<double> r;
    std::vector<double> t;
    for (const auto& e : scores) {
        if (e.precision) p.push_back(*e.precision);
        r.push_back(e.recall);
        t.push_back(e.seconds);
        s.non_poison_count += e.verdict == Verdict::non_poison_event;
        s.inconclusive_count += e.verdict == Verdict::inconclusive;
    }
    s.precision = mean_std(p);
    s.recall = mean_std(r);
    s.seconds = mean_std(t);
    s.events = std::move(scores);
    return s;
}

inline EvalSummary evaluate(const std::vector<TracebackReport>& reports, const LabeledDataset& ds,
                            std::string label = "") {
    std::vector<EventScore> scores;
    scores.reserve(reports.size());
    for (const auto& r : reports) scores.push_back(score_report(r, ds));
    return summarize(std::move(label), std::move(scores));
}

inline nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"count", m.count}}; }

inline nlohmann::json to_json(const EvalSummary& s) {
    nlohmann::json events = nlohmann::json::array();
    std::vector<double> secs;
    for (const auto& e : s.events) {
        nlohmann::json j{{"event_id", e.event_id},
                         {"verdict", e.verdict},
                         {"identified_count", e.identified_count},
                         {"true_positives", e.true_positives},
                         {"recall", e.recall},
                         {"iterations", e.iterations}};
        j["precision"] = e.precision ? nlohmann::json(*e.precision) : nlohmann::json(nullptr);
        events.push_back(std::move(j));
        secs.push_back(e.seconds);
    }
    return {{"label", s.label},
            {"event_count", s.events.size()},
            {"precision", to_json(s.precision)},
            {"recall", to_json(s.recall)},
            {"non_poison_count", s.non_poison_count},
            {"inconclusive_count", s.inconclusive_count},
            {"events", events},
            {"timings", {{"event_seconds", secs}, {"mean_seconds", s.seconds.mean}}}};
}

inline std::string format_table(const std::vector<EvalSummary>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(28) << "task" << std::setw(8) << "events" << std::setw(20) << "precision"
       << std::setw(20) << "recall" << "runtime (s/event)\n";
    for (const auto& s : rows) {
        std::ostringstream p;
        std::ostringstream r;
        p << std::fixed << std::setprecision(3) << s.precision.mean << " +- " << s.precision.std;
        r << std::fixed << std::setprecision(3) << s.recall.mean << " +- " << s.recall.std;
        os << std::left << std::setw(28) << s.label << std::setw(8) << s.events.size() << std::setw(20) << p.str()
           << std::setw(20) << r.str() << s.seconds.mean << "\n";
    }
    return os.str();
}

}  // namespace pftrace
