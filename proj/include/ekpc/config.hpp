#ifndef EKPC_CONFIG_HPP
#define EKPC_CONFIG_HPP

// JSON experiment configuration (schema in docs/config.md). Unknown keys are rejected; overrides
// of the form section.key=value are applied on top of the file before validation.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ekpc/bench.hpp"
#include "ekpc/error.hpp"
#include "ekpc/trainer.hpp"

namespace ekpc {

enum class Variant { baseline, ipr, tsdc, ekpc, static_drift };

inline const std::vector<std::pair<std::string, Variant>>& variant_names() {
    static const std::vector<std::pair<std::string, Variant>> names = {
        {"baseline", Variant::baseline}, {"ipr", Variant::ipr},           {"tsdc", Variant::tsdc},
        {"ekpc", Variant::ekpc},         {"static", Variant::static_drift},
    };
    return names;
}

inline Variant parse_variant(const std::string& s) {
    for (const auto& [name, v] : variant_names())
        if (name == s) return v;
    throw ConfigError("unknown variant '" + s + "' (expected baseline, ipr, tsdc, ekpc or static)");
}

inline std::string variant_name(Variant v) {
    for (const auto& [name, x] : variant_names())
        if (x == v) return name;
    return "?";
}

// Variants zero the disabled penalty weights and fix the compensation switch; enabled weights keep
// their configured values. static compensates with the estimated drift but trains without penalties.
inline TrainConfig apply_variant(TrainConfig cfg, Variant v) {
    const bool anchor = v == Variant::ipr || v == Variant::ekpc;
    const bool drift = v == Variant::tsdc || v == Variant::ekpc;
    if (!anchor) cfg.w1 = 0.0;
    if (!drift) cfg.w2 = 0.0;
    cfg.compensate = drift || v == Variant::static_drift;
    return cfg;
}

struct StreamSpec {
    std::string source = "synthetic";  // synthetic | ekft
    SyntheticStreamConfig synthetic;
    std::optional<std::uint64_t> seed;  // defaults to the run seed
    std::string path;                   // ekft source
    FeatureStreamOptions feature;
};

struct ExperimentConfig {
    StreamSpec stream;
    TrainConfig train;
    Variant variant = Variant::ekpc;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds = {0, 1, 2};  // ablate
    std::vector<Variant> variants = {Variant::baseline, Variant::ipr, Variant::tsdc, Variant::ekpc};
};

namespace detail {

using json = nlohmann::json;

class JsonReader {
public:
    JsonReader(const json& obj, std::string section) : obj_(obj), section_(std::move(section)) {
        if (!obj_.is_object()) throw ConfigError(path("") + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError("expected a boolean");
                out = it->template get<bool>();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError("expected a string");
                out = it->template get<std::string>();
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError("expected a number");
                out = it->template get<T>();
            } else {
                if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
                    throw ConfigError("expected a non-negative integer");
                }
                out = it->template get<T>();
            }
        } catch (const ConfigError& e) {
            throw ConfigError(path(key) + ": " + e.what() + ", got " + it->dump());
        }
    }

    [[nodiscard]] bool has(const char* key) const { return obj_.contains(key); }
    [[nodiscard]] const json& at(const char* key) {
        seen_.insert(key);
        return obj_.at(key);
    }

    void reject_unknown() const {
        for (const auto& [k, v] : obj_.items()) {
            if (!seen_.contains(k)) throw ConfigError("unknown config key '" + path(k.c_str()) + "'");
        }
    }

    [[nodiscard]] std::string path(const char* key) const {
        if (section_.empty()) return key;
        return *key ? section_ + "." + key : section_;
    }

private:
    const json& obj_;
    std::string section_;
    std::set<std::string> seen_;
};

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < text.size() && i + 1 < byte; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

}  // namespace detail

// Set a dotted key ("train.lr") from "value"; the value is parsed as JSON when possible, else a string.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    nlohmann::json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
        node = &(*node)[part];
        if (!node->is_object()) throw ConfigError("override key '" + key + "': '" + part + "' is not a section");
        start = dot + 1;
    }
}

inline ExperimentConfig config_from_json(const nlohmann::json& root) {
    ExperimentConfig cfg;
    detail::JsonReader top(root, "");
    std::string variant = variant_name(cfg.variant);
    top.get("variant", variant);
    cfg.variant = parse_variant(variant);
    top.get("seed", cfg.seed);
    if (top.has("seeds")) {
        const auto& s = top.at("seeds");
        if (!s.is_array() || s.empty()) throw ConfigError("seeds: expected a non-empty array of integers");
        cfg.seeds.clear();
        for (const auto& v : s) {
            if (!v.is_number_unsigned()) throw ConfigError("seeds: expected non-negative integers, got " + v.dump());
            cfg.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    if (top.has("variants")) {
        const auto& s = top.at("variants");
        if (!s.is_array() || s.empty()) throw ConfigError("variants: expected a non-empty array of names");
        cfg.variants.clear();
        for (const auto& v : s) {
            if (!v.is_string()) throw ConfigError("variants: expected strings, got " + v.dump());
            cfg.variants.push_back(parse_variant(v.get<std::string>()));
        }
    }

    if (top.has("stream")) {
        detail::JsonReader st(top.at("stream"), "stream");
        auto& sy = cfg.stream.synthetic;
        st.get("source", cfg.stream.source);
        st.get("tasks", sy.tasks);
        st.get("classes_per_task", sy.classes_per_task);
        st.get("tokens", sy.tokens);
        st.get("dim", sy.dim);
        st.get("cluster_spread", sy.cluster_spread);
        st.get("anchor_scale", sy.anchor_scale);
        st.get("samples_per_class", sy.samples_per_class);
        if (st.has("seed")) {
            std::uint64_t s = 0;
            st.get("seed", s);
            cfg.stream.seed = s;
        }
        st.get("path", cfg.stream.path);
        st.get("train_fraction", cfg.stream.feature.train_fraction);
        st.get("synthesize_cls", cfg.stream.feature.synthesize_cls);
        st.reject_unknown();
        if (cfg.stream.source != "synthetic" && cfg.stream.source != "ekft") {
            throw ConfigError("stream.source: expected \"synthetic\" or \"ekft\", got \"" + cfg.stream.source + "\"");
        }
        if (cfg.stream.source == "ekft" && cfg.stream.path.empty()) throw ConfigError("stream.path: required for ekft source");
        if (!(cfg.stream.feature.train_fraction > 0.0 && cfg.stream.feature.train_fraction < 1.0)) {
            throw ConfigError("stream.train_fraction: must be in (0, 1)");
        }
    }

    if (top.has("train")) {
        detail::JsonReader tr(top.at("train"), "train");
        auto& t = cfg.train;
        tr.get("lr", t.lr);
        tr.get("weight_decay", t.weight_decay);
        tr.get("batch_size", t.batch_size);
        tr.get("epochs_first", t.epochs_first);
        tr.get("epochs_rest", t.epochs_rest);
        tr.get("epochs_unified", t.epochs_unified);
        tr.get("s", t.scale);
        tr.get("m", t.margin);
        tr.get("eta1", t.eta1);
        tr.get("eta2", t.eta2);
        tr.get("w1", t.w1);
        tr.get("w2", t.w2);
        tr.get("eps", t.eps);
        tr.get("replay_per_class", t.replay_per_class);
        tr.get("hidden", t.hidden);
        tr.get("layers", t.layers);
        std::string placement = "parallel";
        tr.get("placement", placement);
        if (placement == "parallel") t.placement = AdapterPlacement::parallel;
        else if (placement == "serial") t.placement = AdapterPlacement::serial;
        else throw ConfigError("train.placement: expected \"parallel\" or \"serial\", got \"" + placement + "\"");
        tr.get("compensate", t.compensate);
        std::string mode = "importance";
        tr.get("importance_mode", mode);
        if (mode == "importance") t.importance_mode = ImportanceMode::importance;
        else if (mode == "uniform") t.importance_mode = ImportanceMode::uniform;
        else throw ConfigError("train.importance_mode: expected \"importance\" or \"uniform\", got \"" + mode + "\"");
        tr.get("uniform_strength", t.uniform_strength);
        tr.get("normalize_importance", t.normalize_importance);
        tr.get("cosine_lr", t.cosine_lr);
        tr.get("unified_lr", t.unified_lr);
        tr.get("proximal_anchor", t.proximal_anchor);
        tr.reject_unknown();
    }
    top.reject_unknown();
    cfg.train.validate();
    if (cfg.stream.synthetic.tokens < 2) throw ConfigError("stream.tokens: must be >= 2");
    if (cfg.train.hidden >= cfg.stream.synthetic.dim && cfg.stream.source == "synthetic") {
        throw ConfigError("train.hidden: must be < stream.dim");
    }
    return cfg;
}

// Parse config text, reporting syntax errors with line and column.
inline nlohmann::json parse_config_text(const std::string& text, const std::string& origin) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        const auto [line, col] = detail::line_col(text, e.byte);
        throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON (" +
                          e.what() + ")");
    }
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    const auto& t = c.train;
    const auto& s = c.stream.synthetic;
    nlohmann::json seeds = c.seeds;
    nlohmann::json variants = nlohmann::json::array();
    for (auto v : c.variants) variants.push_back(variant_name(v));
    nlohmann::json stream = {
        {"source", c.stream.source},
        {"tasks", s.tasks},
        {"classes_per_task", s.classes_per_task},
        {"tokens", s.tokens},
        {"dim", s.dim},
        {"cluster_spread", s.cluster_spread},
        {"anchor_scale", s.anchor_scale},
        {"samples_per_class", s.samples_per_class},
        {"path", c.stream.path},
        {"train_fraction", c.stream.feature.train_fraction},
        {"synthesize_cls", c.stream.feature.synthesize_cls},
    };
    if (c.stream.seed) stream["seed"] = *c.stream.seed;
    return {
        {"variant", variant_name(c.variant)},
        {"seed", c.seed},
        {"seeds", seeds},
        {"variants", variants},
        {"stream", stream},
        {"train",
         {
             {"lr", t.lr},
             {"weight_decay", t.weight_decay},
             {"batch_size", t.batch_size},
             {"epochs_first", t.epochs_first},
             {"epochs_rest", t.epochs_rest},
             {"epochs_unified", t.epochs_unified},
             {"s", t.scale},
             {"m", t.margin},
             {"eta1", t.eta1},
             {"eta2", t.eta2},
             {"w1", t.w1},
             {"w2", t.w2},
             {"eps", t.eps},
             {"replay_per_class", t.replay_per_class},
             {"hidden", t.hidden},
             {"layers", t.layers},
             {"placement", t.placement == AdapterPlacement::parallel ? "parallel" : "serial"},
             {"compensate", t.compensate},
             {"importance_mode", t.importance_mode == ImportanceMode::importance ? "importance" : "uniform"},
             {"uniform_strength", t.uniform_strength},
             {"normalize_importance", t.normalize_importance},
             {"cosine_lr", t.cosine_lr},
             {"unified_lr", t.unified_lr},
             {"proximal_anchor", t.proximal_anchor},
         }},
    };
}

// Training config for one run: variant applied, seed set.
inline TrainConfig run_train_config(const ExperimentConfig& c, Variant v, std::uint64_t run_seed) {
    TrainConfig t = apply_variant(c.train, v);
    t.seed = run_seed;
    return t;
}

// Stream for a run with the given seed.
inline TaskStream build_stream(const ExperimentConfig& c, std::uint64_t run_seed) {
    const std::uint64_t seed = c.stream.seed.value_or(run_seed);
    if (c.stream.source == "ekft") {
        return load_feature_stream(c.stream.path, c.stream.synthetic.tasks, seed, c.stream.feature);
    }
    SyntheticStreamConfig s = c.stream.synthetic;
    s.seed = seed;
    return make_synthetic_stream(s);
}

}  // namespace ekpc

#endif  // EKPC_CONFIG_HPP
