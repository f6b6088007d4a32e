#ifndef EKPC_BENCH_HPP
#define EKPC_BENCH_HPP

// Task streams (synthetic and EKFT-backed) and continual-learning metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ekpc/data.hpp"
#include "ekpc/error.hpp"
#include "ekpc/io.hpp"
#include "ekpc/model.hpp"
#include "ekpc/numerics.hpp"

namespace ekpc {

struct Task {
    LabeledSet train;
    LabeledSet test;
    std::vector<int> classes;  // ascending
};

struct TaskStream {
    std::vector<Task> tasks;
    std::size_t tokens = 0;  // d_t
    std::size_t dim = 0;     // d

    [[nodiscard]] std::size_t size() const noexcept { return tasks.size(); }

    // Class sets pairwise disjoint; every test label belongs to its task; every task class has training data.
    void validate() const {
        std::set<int> seen;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const auto& task = tasks[t];
            const std::set<int> own(task.classes.begin(), task.classes.end());
            for (int c : own) {
                if (!seen.insert(c).second) {
                    throw ProtocolError("class " + std::to_string(c) + " appears in more than one task (task " +
                                        std::to_string(t) + ")");
                }
            }
            const std::set<int> train_labels(task.train.labels.begin(), task.train.labels.end());
            for (int c : own) {
                if (!train_labels.contains(c)) {
                    throw ProtocolError("task " + std::to_string(t) + " class " + std::to_string(c) + " has no training samples");
                }
            }
            for (int y : task.train.labels) {
                if (!own.contains(y)) throw ProtocolError("task " + std::to_string(t) + " train label outside its class set");
            }
            for (int y : task.test.labels) {
                if (!own.contains(y)) throw ProtocolError("task " + std::to_string(t) + " test label outside its class set");
            }
        }
    }
};

struct SyntheticStreamConfig {
    std::size_t tasks = 10;
    std::size_t classes_per_task = 5;
    std::size_t tokens = 4;  // d_t including the CLS row
    std::size_t dim = 32;
    double cluster_spread = 1.0;  // per-entry noise std around the class anchor
    double anchor_scale = 1.0;    // per-entry std of class anchors
    std::size_t samples_per_class = 100;  // split 80/20 train/test
    std::uint64_t seed = 0;
};

// Class anchors for make_synthetic_stream, (d_t - 1) x d patch rows per class, class id order.
inline std::vector<Matrix> synthetic_anchors(const SyntheticStreamConfig& cfg) {
    SeededRng rng = SeededRng(cfg.seed).derive(0xA);
    const std::size_t n_classes = cfg.tasks * cfg.classes_per_task;
    std::vector<Matrix> anchors;
    anchors.reserve(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        Matrix a(cfg.tokens - 1, cfg.dim);
        for (double& v : a.flat()) v = cfg.anchor_scale * rng.normal();
        anchors.push_back(std::move(a));
    }
    return anchors;
}

// Each class is a Gaussian cluster of patch-token matrices around its anchor; the CLS row is the
// mean of the patch rows. Task t holds classes [t * cpt, (t + 1) * cpt).
inline TaskStream make_synthetic_stream(const SyntheticStreamConfig& cfg) {
    if (cfg.tasks == 0 || cfg.classes_per_task == 0) throw PreconditionError("make_synthetic_stream: counts must be >= 1");
    if (cfg.tokens < 2) throw PreconditionError("make_synthetic_stream: need d_t >= 2 (CLS + one patch row)");
    if (cfg.samples_per_class < 2) throw PreconditionError("make_synthetic_stream: need >= 2 samples per class");
    if (cfg.cluster_spread < 0.0) throw PreconditionError("make_synthetic_stream: negative cluster spread");
    const std::vector<Matrix> anchors = synthetic_anchors(cfg);
    SeededRng noise = SeededRng(cfg.seed).derive(0xB);
    const std::size_t n_train = std::max<std::size_t>(1, (cfg.samples_per_class * 4) / 5);

    TaskStream s;
    s.tokens = cfg.tokens;
    s.dim = cfg.dim;
    for (std::size_t t = 0; t < cfg.tasks; ++t) {
        Task task;
        for (std::size_t k = 0; k < cfg.classes_per_task; ++k) {
            const int c = static_cast<int>(t * cfg.classes_per_task + k);
            task.classes.push_back(c);
            for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
                Matrix patches = anchors[static_cast<std::size_t>(c)];
                for (double& v : patches.flat()) v += cfg.cluster_spread * noise.normal();
                (i < n_train ? task.train : task.test).push_back(with_cls_token(patches), c);
            }
        }
        s.tasks.push_back(std::move(task));
    }
    s.validate();
    return s;
}

// ---- EKFT feature files -------------------------------------------------------------------------
//
// "EKFT" | u32 version | u32 samples | u32 d_t | u32 d | u32 classes, then per sample
// u32 label followed by d_t*d f32 token values (row-major). All little-endian.

inline constexpr std::uint32_t kEkftVersion = 1;

struct FeatureFile {
    std::uint32_t tokens = 0;
    std::uint32_t dim = 0;
    std::uint32_t classes = 0;
    std::vector<std::uint32_t> labels;
    std::vector<std::vector<float>> samples;  // each tokens*dim

    friend bool operator==(const FeatureFile&, const FeatureFile&) = default;
};

inline std::vector<char> encode_ekft(const FeatureFile& f) {
    io::Writer w;
    w.bytes("EKFT");
    w.u32(kEkftVersion);
    w.u32(static_cast<std::uint32_t>(f.samples.size()));
    w.u32(f.tokens);
    w.u32(f.dim);
    w.u32(f.classes);
    for (std::size_t i = 0; i < f.samples.size(); ++i) {
        require_dims(f.samples[i].size() == std::size_t{f.tokens} * f.dim, "encode_ekft: sample size != d_t * d");
        w.u32(f.labels[i]);
        for (float v : f.samples[i]) w.f32(v);
    }
    return w.buffer();
}

inline void write_ekft(const std::string& path, const FeatureFile& f) {
    io::Writer w;
    const auto bytes = encode_ekft(f);
    w.bytes(std::string_view(bytes.data(), bytes.size()));
    w.save(path);
}

inline FeatureFile decode_ekft(std::vector<char> bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("EKFT", "EKFT");
    const std::size_t version_at = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != kEkftVersion) throw ParseError("unsupported EKFT version " + std::to_string(version), version_at);
    FeatureFile f;
    const std::uint32_t n = r.u32("sample count");
    f.tokens = r.u32("d_t");
    f.dim = r.u32("d");
    f.classes = r.u32("class count");
    if (f.tokens == 0 || f.dim == 0) throw ParseError("EKFT header has zero d_t or d", r.offset());
    const std::size_t per = std::size_t{f.tokens} * f.dim;
    f.labels.reserve(n);
    f.samples.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t label_at = r.offset();
        const std::uint32_t label = r.u32("sample label");
        if (label >= f.classes) {
            throw ParseError("label " + std::to_string(label) + " out of range for " + std::to_string(f.classes) +
                                 " classes (sample " + std::to_string(i) + ")",
                             label_at);
        }
        std::vector<float> tokens(per);
        for (float& v : tokens) v = r.f32("token values");
        f.labels.push_back(label);
        f.samples.push_back(std::move(tokens));
    }
    r.expect_end("EKFT");
    return f;
}

inline FeatureFile read_ekft(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return decode_ekft(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
}

struct FeatureStreamOptions {
    double train_fraction = 0.8;
    // Treat every file row as a patch and prepend a mean CLS row.
    bool synthesize_cls = false;
};

// Classes shuffled by seed and dealt into `tasks` contiguous groups (sizes differ by at most one);
// each class's samples shuffled and split train/test.
inline TaskStream feature_file_stream(const FeatureFile& f, std::size_t tasks, std::uint64_t seed,
                                      const FeatureStreamOptions& opt = {}) {
    if (tasks == 0) throw PreconditionError("load_feature_stream: tasks must be >= 1");
    const auto groups = group_by_label(std::vector<int>(f.labels.begin(), f.labels.end()));
    std::vector<int> classes;
    for (const auto& [c, idx] : groups) classes.push_back(c);
    if (classes.size() < tasks) {
        throw PreconditionError("load_feature_stream: " + std::to_string(classes.size()) + " classes cannot fill " +
                                std::to_string(tasks) + " tasks");
    }
    SeededRng rng(seed);
    SeededRng class_rng = rng.derive(0);
    SeededRng split_rng = rng.derive(1);
    class_rng.shuffle(classes);

    TaskStream s;
    s.tokens = f.tokens + (opt.synthesize_cls ? 1 : 0);
    s.dim = f.dim;
    s.tasks.resize(tasks);
    const std::size_t base = classes.size() / tasks;
    const std::size_t extra = classes.size() % tasks;
    std::size_t at = 0;
    for (std::size_t t = 0; t < tasks; ++t) {
        const std::size_t take = base + (t < extra ? 1 : 0);
        Task& task = s.tasks[t];
        task.classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(at),
                            classes.begin() + static_cast<std::ptrdiff_t>(at + take));
        at += take;
        std::sort(task.classes.begin(), task.classes.end());
        for (int c : task.classes) {
            std::vector<std::size_t> idx = groups.at(c);
            split_rng.shuffle(idx);
            const std::size_t n_train = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::floor(opt.train_fraction * static_cast<double>(idx.size()))));
            for (std::size_t j = 0; j < idx.size(); ++j) {
                const auto& raw = f.samples[idx[j]];
                Matrix m(f.tokens, f.dim, std::vector<double>(raw.begin(), raw.end()));
                (j < n_train ? task.train : task.test).push_back(opt.synthesize_cls ? with_cls_token(m) : std::move(m), c);
            }
        }
    }
    s.validate();
    return s;
}

inline TaskStream load_feature_stream(const std::string& path, std::size_t tasks, std::uint64_t seed,
                                      const FeatureStreamOptions& opt = {}) {
    return feature_file_stream(read_ekft(path), tasks, seed, opt);
}

// ---- metrics ------------------------------------------------------------------------------------

// acc[t][j]: accuracy (percent) on task j's test set after training session t, j <= t.
using AccuracyMatrix = std::vector<std::vector<double>>;

inline void validate_accuracy_matrix(const AccuracyMatrix& acc) {
    for (std::size_t t = 0; t < acc.size(); ++t) {
        if (acc[t].size() != t + 1) {
            throw DimensionError("accuracy matrix row " + std::to_string(t) + " must have " + std::to_string(t + 1) +
                                 " entries (lower-triangular)");
        }
    }
}

// mean over tasks t < T-1 of (accuracy right after learning t) - (accuracy after the last session)
inline double average_forgetting(const AccuracyMatrix& acc) {
    validate_accuracy_matrix(acc);
    const std::size_t T = acc.size();
    if (T < 2) throw PreconditionError("average_forgetting: need at least two sessions");
    double s = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) s += acc[t][t] - acc[T - 1][t];
    return s / static_cast<double>(T - 1);
}

// All-seen-classes accuracy of each session: test-size weighted mean over the row.
// Empty weights means equal-sized test sets.
inline std::vector<double> session_accuracies(const AccuracyMatrix& acc, std::span<const double> test_sizes = {}) {
    validate_accuracy_matrix(acc);
    std::vector<double> out;
    for (std::size_t t = 0; t < acc.size(); ++t) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
            const double w = test_sizes.empty() ? 1.0 : test_sizes[j];
            num += w * acc[t][j];
            den += w;
        }
        out.push_back(den > 0.0 ? num / den : 0.0);
    }
    return out;
}

struct Summary {
    double a_last = 0.0;
    double a_avg = 0.0;
};

inline Summary summarize_sessions(std::span<const double> session_acc) {
    if (session_acc.empty()) throw PreconditionError("summarize: no sessions");
    return {session_acc.back(),
            std::accumulate(session_acc.begin(), session_acc.end(), 0.0) / static_cast<double>(session_acc.size())};
}

inline Summary summarize(const AccuracyMatrix& acc, std::span<const double> test_sizes = {}) {
    const auto s = session_accuracies(acc, test_sizes);
    return summarize_sessions(s);
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
};

inline MeanStd mean_std(std::span<const double> v) {
    if (v.empty()) return {};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace ekpc

#endif  // EKPC_BENCH_HPP
