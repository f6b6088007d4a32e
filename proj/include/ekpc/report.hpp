#ifndef EKPC_REPORT_HPP
#define EKPC_REPORT_HPP

// Metric records (one JSON object per line) and the ablation aggregate table.

#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ekpc/bench.hpp"
#include "ekpc/error.hpp"
#include "ekpc/trainer.hpp"

namespace ekpc {

using ojson = nlohmann::ordered_json;

namespace detail {
inline ojson optional_number(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }
}  // namespace detail

struct RunSummary {
    std::string variant;
    std::uint64_t seed = 0;
    double a_last = 0.0;
    double a_avg = 0.0;
    std::optional<double> af;
    std::optional<double> sdv_mean;
};

inline RunSummary summarize_run(const RunResult& r, const std::string& variant, std::uint64_t seed) {
    return {variant, seed, r.a_last, r.a_avg, r.af, r.sdv_mean};
}

inline std::vector<ojson> session_records(const RunResult& r, const std::string& variant, std::uint64_t seed) {
    std::vector<ojson> out;
    for (std::size_t t = 0; t < r.acc.size(); ++t) {
        ojson acc = ojson::array();
        for (std::size_t j = 0; j <= t; ++j) acc.push_back(r.acc[t][j]);
        out.push_back({
            {"record", "session"},
            {"variant", variant},
            {"seed", seed},
            {"session", t},
            {"accuracy", acc},
            {"all_seen", r.session_acc[t]},
            {"sdv", detail::optional_number(r.sdv[t])},
        });
    }
    return out;
}

inline ojson summary_record(const RunSummary& s) {
    return {
        {"record", "summary"},
        {"variant", s.variant},
        {"seed", s.seed},
        {"a_last", s.a_last},
        {"a_avg", s.a_avg},
        {"af", detail::optional_number(s.af)},
        {"sdv_mean", detail::optional_number(s.sdv_mean)},
    };
}

struct MetricAggregate {
    std::optional<MeanStd> value;  // absent when no run reported the metric
    std::size_t runs = 0;
};

struct VariantAggregate {
    std::string variant;
    std::size_t runs = 0;
    MetricAggregate a_last, a_avg, af, sdv;
};

namespace detail {
inline MetricAggregate aggregate_metric(const std::vector<double>& v) {
    MetricAggregate a;
    a.runs = v.size();
    if (!v.empty()) a.value = mean_std(v);
    return a;
}
}  // namespace detail

// Per-variant mean and sample std over seeds, in first-seen variant order.
inline std::vector<VariantAggregate> aggregate_runs(const std::vector<RunSummary>& runs) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunSummary*>> by;
    for (const auto& r : runs) {
        if (!by.contains(r.variant)) order.push_back(r.variant);
        by[r.variant].push_back(&r);
    }
    std::vector<VariantAggregate> out;
    for (const auto& name : order) {
        std::vector<double> last, avg, af, sdv;
        for (const RunSummary* r : by[name]) {
            last.push_back(r->a_last);
            avg.push_back(r->a_avg);
            if (r->af) af.push_back(*r->af);
            if (r->sdv_mean) sdv.push_back(*r->sdv_mean);
        }
        out.push_back({name, by[name].size(), detail::aggregate_metric(last), detail::aggregate_metric(avg),
                       detail::aggregate_metric(af), detail::aggregate_metric(sdv)});
    }
    return out;
}

inline ojson aggregate_record(const VariantAggregate& a) {
    auto metric = [](const MetricAggregate& m) -> ojson {
        if (!m.value) return nullptr;
        return {{"mean", m.value->mean}, {"std", m.value->std}, {"runs", m.runs}};
    };
    return {
        {"record", "aggregate"}, {"variant", a.variant},   {"runs", a.runs},     {"a_last", metric(a.a_last)},
        {"a_avg", metric(a.a_avg)}, {"af", metric(a.af)}, {"sdv", metric(a.sdv)},
    };
}

// Fixed-width text table; std is blank for a single run.
inline std::string format_aggregate_table(const std::vector<VariantAggregate>& rows) {
    auto cell = [](const MetricAggregate& m, const char* fmt) {
        if (!m.value) return std::string("-");
        char buf[64];
        std::snprintf(buf, sizeof buf, fmt, m.value->mean, m.value->std);
        return std::string(buf);
    };
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %5s %16s %16s %16s %20s\n", "variant", "runs", "A_Last", "A_Avg", "AF",
                  "SDV");
    out += line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-10s %5zu %16s %16s %16s %20s\n", r.variant.c_str(), r.runs,
                      cell(r.a_last, "%6.2f +- %5.2f").c_str(), cell(r.a_avg, "%6.2f +- %5.2f").c_str(),
                      cell(r.af, "%6.2f +- %5.2f").c_str(), cell(r.sdv, "%.5f +- %.5f").c_str());
        out += line;
    }
    return out;
}

// Summary records from a metrics stream; other record kinds are skipped.
inline std::vector<RunSummary> read_summaries(std::istream& in) {
    std::vector<RunSummary> out;
    std::string line;
    std::size_t lineno = 0;
    auto opt = [](const nlohmann::json& j, const char* k) -> std::optional<double> {
        if (!j.contains(k) || j[k].is_null()) return std::nullopt;
        return j[k].get<double>();
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw Error("metrics line " + std::to_string(lineno) + " is not a JSON object");
        }
        if (j.value("record", "") != "summary") continue;
        try {
            out.push_back({j.at("variant").get<std::string>(), j.at("seed").get<std::uint64_t>(),
                           j.at("a_last").get<double>(), j.at("a_avg").get<double>(), opt(j, "af"),
                           opt(j, "sdv_mean")});
        } catch (const nlohmann::json::exception& e) {
            throw Error("metrics line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace ekpc

#endif  // EKPC_REPORT_HPP
