#ifndef EKPC_TOOLS_CLI_HPP
#define EKPC_TOOLS_CLI_HPP

// Command implementations for the ekpc tool. Kept in a header so tests can drive them in-process.
// Exit codes: 0 success or --help, 1 runtime failure, 2 usage or configuration error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ekpc/config.hpp"
#include "ekpc/persist.hpp"
#include "ekpc/report.hpp"
#include "ekpc/trainer.hpp"

namespace ekpc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

struct Options {
    std::string config_path;
    std::vector<std::string> overrides;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> variants;
    std::string out;
    std::string checkpoint;
    std::string importance;
    std::string metrics;
    bool full = false;
};

struct LoadedConfig {
    std::string text;  // file contents, verbatim
    ExperimentConfig config;
};

inline LoadedConfig load_config(const Options& o) {
    LoadedConfig lc;
    lc.text = read_text_file(o.config_path);
    nlohmann::json root = parse_config_text(lc.text, o.config_path);
    for (const auto& ov : o.overrides) apply_override(root, ov);
    lc.config = config_from_json(root);
    return lc;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + p.string() + " for writing");
    out << s;
    if (!out) throw Error("write failed: " + p.string());
}

inline std::string to_lines(const std::vector<ojson>& records) {
    std::string s;
    for (const auto& r : records) s += r.dump() + "\n";
    return s;
}

inline ojson manifest(const std::string& command, const Options& o, const LoadedConfig& lc) {
    ojson overrides = o.overrides;
    return {
        {"tool", "ekpc"},
        {"command", command},
        {"config_path", o.config_path},
        {"config_text", lc.text},
        {"overrides", overrides},
        {"resolved_config", ojson::parse(config_to_json(lc.config).dump())},
        {"formats", {{"checkpoint", kCheckpointVersion}, {"prototypes", kPrototypeVersion},
                     {"importance", kImportanceVersion}}},
    };
}

inline int cmd_run(const Options& o, std::ostream& out) {
    LoadedConfig lc = load_config(o);
    ExperimentConfig& c = lc.config;
    if (!o.seeds.empty()) c.seed = o.seeds.front();
    if (!o.variants.empty()) c.variant = parse_variant(o.variants.front());

    const TaskStream stream = build_stream(c, c.seed);
    const RunResult r = run_stream(stream, run_train_config(c, c.variant, c.seed));

    const std::filesystem::path dir = o.out.empty() ? "." : o.out;
    std::filesystem::create_directories(dir);
    ojson m = manifest("run", o, lc);
    m["variant"] = variant_name(c.variant);
    m["seed"] = c.seed;
    write_text(dir / "manifest.json", m.dump(2) + "\n");

    const std::string variant = variant_name(c.variant);
    std::vector<ojson> records = session_records(r, variant, c.seed);
    records.push_back(summary_record(summarize_run(r, variant, c.seed)));
    write_text(dir / "metrics.ndjson", to_lines(records));

    save_checkpoint((dir / "checkpoint.ekpc").string(), Checkpoint::from_state(r.state));
    save_prototypes((dir / "prototypes.ekpp").string(), r.state.prototypes, stream.dim);
    save_importance((dir / "importance.ekpi").string(), r.state.importance);

    out << records.back().dump() << "\n";
    return kExitOk;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
    LoadedConfig lc = load_config(o);
    ExperimentConfig& c = lc.config;
    if (!o.seeds.empty()) c.seeds = o.seeds;
    if (!o.variants.empty()) {
        c.variants.clear();
        for (const auto& v : o.variants) c.variants.push_back(parse_variant(v));
    }

    std::vector<ojson> records;
    std::vector<RunSummary> summaries;
    for (Variant v : c.variants) {
        for (std::uint64_t seed : c.seeds) {
            const TaskStream stream = build_stream(c, seed);
            const RunResult r = run_stream(stream, run_train_config(c, v, seed));
            for (auto& rec : session_records(r, variant_name(v), seed)) records.push_back(std::move(rec));
            summaries.push_back(summarize_run(r, variant_name(v), seed));
            records.push_back(summary_record(summaries.back()));
        }
    }
    const auto agg = aggregate_runs(summaries);
    for (const auto& a : agg) records.push_back(aggregate_record(a));
    const std::string table = format_aggregate_table(agg);

    if (!o.out.empty()) {
        const std::filesystem::path dir = o.out;
        std::filesystem::create_directories(dir);
        ojson m = manifest("ablate", o, lc);
        write_text(dir / "manifest.json", m.dump(2) + "\n");
        write_text(dir / "metrics.ndjson", to_lines(records));
        write_text(dir / "table.txt", table);
    }
    out << table;
    return kExitOk;
}

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void stats_lines(std::ostream& os, const std::string& key, std::span<const double> v) {
    double lo = 0.0, hi = 0.0, sum = 0.0;
    if (!v.empty()) {
        lo = *std::min_element(v.begin(), v.end());
        hi = *std::max_element(v.begin(), v.end());
        for (double x : v) sum += x;
    }
    const double mean = v.empty() ? 0.0 : sum / static_cast<double>(v.size());
    os << key << ".min=" << fmt17(lo) << "\n" << key << ".mean=" << fmt17(mean) << "\n" << key << ".max=" << fmt17(hi) << "\n";
}

inline void values_line(std::ostream& os, const std::string& key, std::span<const double> v) {
    os << key << ".values=";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << fmt17(v[i]);
    os << "\n";
}

}  // namespace detail

// Text report: a header block, then one block per layer separated by blank lines.
inline std::string importance_report(const ImportanceState& s, std::size_t d, std::size_t d_h, bool full) {
    std::ostringstream os;
    os << "format=ekpc-importance-report\nversion=1\n";
    os << "layers=" << s.n_layers() << "\ndim=" << d << "\nhidden=" << d_h << "\nlast_task=" << s.last_task << "\n";
    detail::stats_lines(os, "G", s.global);
    if (full) detail::values_line(os, "G", s.global);
    for (std::size_t l = 0; l < s.n_layers(); ++l) {
        const auto& L = s.layers[l];
        os << "\nlayer=" << l << "\n";
        detail::stats_lines(os, "I_dm", L.fused.down.flat());
        detail::stats_lines(os, "I_um", L.fused.up.flat());
        detail::stats_lines(os, "L_dm", L.local_down);
        detail::stats_lines(os, "L_um", L.local_up);
        if (full) {
            os << "I_dm.rows=" << L.fused.down.rows() << "\nI_dm.cols=" << L.fused.down.cols() << "\n";
            detail::values_line(os, "I_dm", L.fused.down.flat());
            os << "I_um.rows=" << L.fused.up.rows() << "\nI_um.cols=" << L.fused.up.cols() << "\n";
            detail::values_line(os, "I_um", L.fused.up.flat());
            detail::values_line(os, "L_dm", L.local_down);
            detail::values_line(os, "L_um", L.local_up);
        }
    }
    return os.str();
}

inline int cmd_importance_dump(const Options& o, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const auto& bb = ck.backbone;
    ImportanceState s = ImportanceState::zeros(bb.dim, bb.hidden, bb.n_layers());
    if (!o.importance.empty()) {
        s = load_importance(o.importance);
        if (s.global.size() != bb.dim || s.n_layers() != bb.n_layers() ||
            (s.n_layers() > 0 && s.layers[0].local_down.size() != bb.hidden)) {
            throw DimensionError("importance store " + o.importance + " does not match checkpoint " + o.checkpoint);
        }
    }
    const std::string report = importance_report(s, bb.dim, bb.hidden, o.full);
    if (o.out.empty()) out << report;
    else write_text(o.out, report);
    return kExitOk;
}

inline int cmd_report(const Options& o, std::ostream& out) {
    std::ifstream in(o.metrics, std::ios::binary);
    if (!in) throw Error("cannot open " + o.metrics);
    const auto summaries = read_summaries(in);
    if (summaries.empty()) throw Error("no summary records in " + o.metrics);
    const std::string table = format_aggregate_table(aggregate_runs(summaries));
    if (o.out.empty()) out << table;
    else write_text(o.out, table);
    return kExitOk;
}

// Parses args (without the program name) and dispatches. Data goes to out, diagnostics to err.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Continual-learning engine with importance-aware regularization and drift compensation", "ekpc"};
    app.require_subcommand(1);
    Options o;

    auto* run = app.add_subcommand("run", "Train one continual run and write metrics, checkpoint and stores");
    run->add_option("--config", o.config_path, "JSON config file")->required();
    run->add_option("--seed", o.seeds, "run seed (overrides config)")->expected(1);
    run->add_option("--variant", o.variants, "baseline, ipr, tsdc, ekpc or static")->expected(1);
    run->add_option("--out", o.out, "output directory")->default_str(".");
    run->add_option("--override", o.overrides, "section.key=value, repeatable");

    auto* ablate = app.add_subcommand("ablate", "Run the variant x seed grid and print the aggregate table");
    ablate->add_option("--config", o.config_path, "JSON config file")->required();
    ablate->add_option("--seed", o.seeds, "seed, repeatable (overrides config seeds)");
    ablate->add_option("--variant", o.variants, "variant, repeatable (overrides config variants)");
    ablate->add_option("--out", o.out, "output directory (optional)");
    ablate->add_option("--override", o.overrides, "section.key=value, repeatable");

    auto* dump = app.add_subcommand("importance-dump", "Print per-layer importance statistics");
    dump->add_option("--checkpoint", o.checkpoint, "checkpoint file (.ekpc)")->required();
    dump->add_option("--importance", o.importance, "importance store (.ekpi); all zeros when omitted");
    dump->add_option("--out", o.out, "output file (default stdout)");
    dump->add_flag("--full", o.full, "include full matrices");

    auto* report = app.add_subcommand("report", "Aggregate summary records of a metrics file");
    report->add_option("--metrics", o.metrics, "metrics.ndjson")->required();
    report->add_option("--out", o.out, "output file (default stdout)");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "ekpc: " << e.what() << "\n\n";
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        err << (sub ? sub->help() : app.help());
        return kExitUsage;
    }

    try {
        if (run->parsed()) return cmd_run(o, out);
        if (ablate->parsed()) return cmd_ablate(o, out);
        if (dump->parsed()) return cmd_importance_dump(o, out);
        return cmd_report(o, out);
    } catch (const ConfigError& e) {
        err << "ekpc: config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "ekpc: error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace ekpc::cli

#endif  // EKPC_TOOLS_CLI_HPP
