#ifndef EKPC_TRAINER_HPP
#define EKPC_TRAINER_HPP

// Per-task continual training: adapters and cosine heads under the total loss, then the
// importance refresh, then drift compensation and unified-head retraining.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ekpc/bench.hpp"
#include "ekpc/data.hpp"
#include "ekpc/error.hpp"
#include "ekpc/ipr.hpp"
#include "ekpc/model.hpp"
#include "ekpc/numerics.hpp"
#include "ekpc/tsdc.hpp"

namespace ekpc {

struct TrainConfig {
    double lr = 0.01;
    double weight_decay = 0.0005;
    std::size_t batch_size = 48;
    std::size_t epochs_first = 30;
    std::size_t epochs_rest = 15;
    std::size_t epochs_unified = 5;
    double scale = 20.0;   // s
    double margin = 0.01;  // m
    double eta1 = 100.0;
    double eta2 = 1.0;
    double w1 = 1.0;  // anchor penalty weight
    double w2 = 1.0;  // drift penalty weight
    double eps = 1e-8;
    std::size_t replay_per_class = 200;  // N_s
    std::uint64_t seed = 0;

    // Architecture.
    std::size_t hidden = 8;
    std::size_t layers = 4;
    AdapterPlacement placement = AdapterPlacement::parallel;

    // Ablation switches.
    bool compensate = true;  // shift old prototypes by the estimated drift
    ImportanceMode importance_mode = ImportanceMode::importance;
    double uniform_strength = 1.0;  // penalty weight per parameter in uniform mode
    bool normalize_importance = false;
    bool cosine_lr = false;
    double unified_lr = 0.3;  // replay-head SGD step
    // Apply the anchor penalty as an exact proximal step instead of a gradient step. The
    // accumulated importance easily exceeds 1 / lr, where explicit steps on it diverge.
    bool proximal_anchor = true;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be > 0");
        };
        auto nonneg = [](double v, const char* name) {
            if (!(v >= 0.0)) throw ConfigError(std::string(name) + " must be >= 0");
        };
        positive(lr, "lr");
        nonneg(weight_decay, "weight_decay");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        positive(scale, "s");
        nonneg(margin, "m");
        nonneg(eta1, "eta1");
        nonneg(eta2, "eta2");
        nonneg(w1, "w1");
        nonneg(w2, "w2");
        positive(eps, "eps");
        if (replay_per_class == 0) throw ConfigError("replay_per_class must be >= 1");
        if (hidden == 0 || layers == 0) throw ConfigError("hidden and layers must be >= 1");
        nonneg(uniform_strength, "uniform_strength");
        positive(unified_lr, "unified_lr");
    }
};

// Everything that survives a task boundary. Holds no raw samples: only parameters and statistics.
struct ContinualState {
    BackboneSnapshot current;
    std::optional<BackboneSnapshot> previous;  // converged extractor of the last finished task
    ImportanceState importance;
    std::vector<Prototype> prototypes;
    CosineClassifier cosine;        // rows for every seen class, in arrival order
    std::vector<int> cosine_class;  // cosine row -> class id
    std::vector<int> cosine_task;   // cosine row -> task of origin
    LinearHead unified;
    int tasks_done = 0;

    // Drift of each finished session t >= 1 (full clean pass); empty entry for session 0.
    std::vector<std::optional<double>> sdv;

    [[nodiscard]] std::set<int> seen_classes() const { return {cosine_class.begin(), cosine_class.end()}; }
};

inline ContinualState make_initial_state(std::size_t d_t, std::size_t d, const TrainConfig& cfg) {
    cfg.validate();
    ContinualState s;
    SeededRng rng = SeededRng(cfg.seed).derive(0x1000);
    s.current = make_backbone(d, cfg.hidden, d_t, cfg.layers, rng, cfg.placement);
    s.importance = ImportanceState::zeros(d, cfg.hidden, cfg.layers);
    s.cosine.weights = Matrix(0, d);
    s.cosine.scale = cfg.scale;
    s.cosine.margin = cfg.margin;
    s.unified.weights = Matrix(0, d);
    return s;
}

// Weights used by the anchor penalty under the configured mode.
inline ImportanceState penalty_weights(const ContinualState& s, const TrainConfig& cfg) {
    if (cfg.importance_mode == ImportanceMode::uniform) {
        return ImportanceState::uniform(s.current.dim, s.current.hidden, s.current.n_layers(), cfg.uniform_strength);
    }
    return s.importance;
}

struct TotalLossResult {
    double loss = 0.0;
    double cos = 0.0;
    double ipr = 0.0;
    double tsd = 0.0;
    AdapterGrads adapter_grads;
    Matrix classifier_grads;  // cosine-head rows
};

// L = L_cos + w1 L_IPR + w2 L_TSD. Labels are class ids. The penalty terms vanish until a
// previous extractor exists.
// With include_anchor_grad = false the anchor term is still evaluated but left out of adapter_grads
// (the trainer then applies it through anchor_proximal_step).
inline TotalLossResult total_loss(const std::vector<TokenMatrix>& inputs, std::span<const int> labels,
                                  const ContinualState& state, const TrainConfig& cfg,
                                  const ImportanceState& weights, bool include_anchor_grad = true) {
    require_dims(inputs.size() == labels.size(), "total_loss: input/label count mismatch");
    if (inputs.empty()) throw PreconditionError("total_loss: empty batch");
    const BackboneSnapshot& bb = state.current;
    std::map<int, int> row_of;
    for (std::size_t r = 0; r < state.cosine_class.size(); ++r) row_of[state.cosine_class[r]] = static_cast<int>(r);

    std::vector<ForwardTrace> traces;
    traces.reserve(inputs.size());
    Matrix feats(inputs.size(), bb.dim);
    std::vector<int> rows(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        traces.push_back(backbone_forward(inputs[i], bb, TraceRows::cls_only));
        std::copy(traces.back().feature.begin(), traces.back().feature.end(), feats.row(i).begin());
        auto it = row_of.find(labels[i]);
        if (it == row_of.end()) throw PreconditionError("total_loss: class " + std::to_string(labels[i]) + " has no classifier row");
        rows[i] = it->second;
    }

    TotalLossResult r;
    CosineLossResult cl = cosine_margin_loss(feats, rows, state.cosine);
    r.cos = cl.loss;
    r.classifier_grads = std::move(cl.grad_weights);
    Matrix dfeat = std::move(cl.grad_features);
    r.adapter_grads = zero_adapter_grads(bb);

    if (state.previous) {
        if (cfg.w2 > 0.0 && !state.prototypes.empty()) {
            const Matrix prev = extract_features(inputs, *state.previous);
            const DriftComputation dc = drift_from_features(prev, feats, state.prototypes, cfg.eps);
            const TsdFeatureGrad tg = tsd_loss_features(dc, inputs.size(), bb.dim);
            r.tsd = tg.loss;
            for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat.flat()[i] += cfg.w2 * tg.grad_curr_features.flat()[i];
        }
        if (cfg.w1 > 0.0) {
            const IprLossResult ir = ipr_loss(bb, *state.previous, weights);
            r.ipr = ir.loss;
            if (include_anchor_grad) add_scaled(r.adapter_grads, ir.grads, cfg.w1);
        }
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) backbone_backward(traces[i], bb, dfeat.row(i), r.adapter_grads);
    r.loss = r.cos + cfg.w1 * r.ipr + cfg.w2 * r.tsd;
    return r;
}

inline TotalLossResult total_loss(const std::vector<TokenMatrix>& inputs, std::span<const int> labels,
                                  const ContinualState& state, const TrainConfig& cfg) {
    return total_loss(inputs, labels, state, cfg, penalty_weights(state, cfg));
}

// theta <- argmin_x |x - theta|^2 / (2 step) + strength * sum I (x - anchor)^2, elementwise:
// (theta + 2 step strength I anchor) / (1 + 2 step strength I).
inline void anchor_proximal_step(BackboneSnapshot& bb, const BackboneSnapshot& anchor, const ImportanceState& imp,
                                 double step, double strength) {
    if (!bb.same_architecture(anchor)) throw DimensionError("anchor_proximal_step: architectures differ");
    for (std::size_t l = 0; l < bb.n_layers(); ++l) {
        Adapter& a = bb.layers[l].adapter;
        const Adapter& p = anchor.layers[l].adapter;
        const FusedImportance& I = imp.layers[l].fused;
        for (std::size_t i = 0; i < bb.dim; ++i) {
            for (std::size_t h = 0; h < bb.hidden; ++h) {
                const double kd = 2.0 * step * strength * I.down(i, h);
                a.down(i, h) = (a.down(i, h) + kd * p.down(i, h)) / (1.0 + kd);
                const double ku = 2.0 * step * strength * I.up(i, h);
                a.up(h, i) = (a.up(h, i) + ku * p.up(h, i)) / (1.0 + ku);
            }
        }
    }
}

// Unified head initialized from the concatenated cosine heads: row = s * w / |w|, zero bias.
inline LinearHead head_from_cosine(const ContinualState& s) {
    LinearHead h;
    const std::size_t c = s.cosine.n_classes();
    h.weights = Matrix(c, s.current.dim);
    h.bias.assign(c, 0.0);
    h.class_ids = s.cosine_class;
    for (std::size_t r = 0; r < c; ++r) {
        const double n = norm2(s.cosine.weights.row(r));
        for (std::size_t k = 0; k < s.current.dim; ++k) {
            h.weights(r, k) = n > 0.0 ? s.cosine.scale * s.cosine.weights(r, k) / n : 0.0;
        }
    }
    return h;
}

struct TaskReport {
    double final_loss = 0.0;  // mean total loss of the last epoch
    std::optional<DriftEstimate> drift;
    std::optional<double> sdv;
};

// Train one task and finish it: importance refresh, drift compensation, unified head retraining.
inline TaskReport train_task(ContinualState& state, const Task& task, const TrainConfig& cfg) {
    cfg.validate();
    const auto seen = state.seen_classes();
    for (int c : task.classes) {
        if (seen.contains(c)) throw ProtocolError("train_task: class " + std::to_string(c) + " was already learned");
    }
    if (task.train.empty()) throw PreconditionError("train_task: empty training set");
    const int t = state.tasks_done;
    SeededRng task_rng = SeededRng(cfg.seed).derive(0x2000 + static_cast<std::uint64_t>(t));

    SeededRng head_rng = task_rng.derive(1);
    state.cosine.grow(task.classes.size(), state.current.dim, head_rng,
                      1.0 / std::sqrt(static_cast<double>(state.current.dim)));
    for (int c : task.classes) {
        state.cosine_class.push_back(c);
        state.cosine_task.push_back(t);
    }

    const ImportanceState weights = penalty_weights(state, cfg);
    const std::size_t epochs = t == 0 ? cfg.epochs_first : cfg.epochs_rest;
    const std::size_t n = task.train.size();
    const std::size_t total_steps = epochs * ((n + cfg.batch_size - 1) / cfg.batch_size);
    std::size_t step = 0;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng order_rng = task_rng.derive(2);
    TaskReport report;
    for (std::size_t e = 0; e < epochs; ++e) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            std::vector<TokenMatrix> xs;
            std::vector<int> ys;
            for (std::size_t i = start; i < end; ++i) {
                xs.push_back(task.train.inputs[order[i]]);
                ys.push_back(task.train.labels[order[i]]);
            }
            const bool proximal = cfg.proximal_anchor && state.previous && cfg.w1 > 0.0;
            const TotalLossResult g = total_loss(xs, ys, state, cfg, weights, !proximal);
            double lr = cfg.lr;
            if (cfg.cosine_lr && total_steps > 0) {
                lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
            }
            sgd_step(state.current, g.adapter_grads, lr, cfg.weight_decay);
            if (proximal) anchor_proximal_step(state.current, *state.previous, weights, lr, cfg.w1);
            sgd_step(state.cosine.weights, g.classifier_grads, lr, cfg.weight_decay);
            epoch_loss += g.loss;
            ++batches;
        }
        report.final_loss = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
    }

    // Importance refresh with the converged extractor.
    ImportanceConfig icfg{cfg.eta1, cfg.eta2, cfg.eps, cfg.normalize_importance};
    state.importance = run_importance_pass(task.train, state.current, state.importance, icfg, t);

    // Drift over a clean full pass, then compensation and new-class prototypes.
    const Matrix curr_feats = extract_features(task.train.inputs, state.current);
    const auto new_stats = class_stats_by_label(curr_feats, task.train.labels);
    DriftEstimate drift;
    if (state.previous && !state.prototypes.empty()) {
        const Matrix prev_feats = extract_features(task.train.inputs, *state.previous);
        drift = drift_from_features(prev_feats, curr_feats, state.prototypes, cfg.eps).estimate;
        report.sdv = sdv_metric(drift);
        report.drift = drift;
    }
    if (!cfg.compensate || !report.drift) {
        drift.classes.clear();
        for (const auto& p : state.prototypes) drift.classes.push_back({p.class_id, Vector(p.mean.size(), 0.0), 0.0, false});
    }
    state.prototypes = compensate_prototypes(state.prototypes, drift, new_stats, t);
    state.sdv.push_back(report.sdv);
    state.previous = state.current;

    UnifiedTrainConfig ucfg{cfg.epochs_unified, cfg.replay_per_class, cfg.batch_size, cfg.unified_lr, cfg.weight_decay};
    SeededRng replay_rng = task_rng.derive(3);
    state.unified = train_unified_classifier(state.prototypes, head_from_cosine(state), ucfg, replay_rng);
    state.tasks_done = t + 1;
    return report;
}

// Accuracy (percent) of the unified head on each test set; task identity is never used.
inline std::vector<double> evaluate(const ContinualState& state, std::span<const LabeledSet> test_sets) {
    std::vector<double> acc;
    for (const auto& set : test_sets) {
        if (set.empty()) {
            acc.push_back(0.0);
            continue;
        }
        std::size_t correct = 0;
        for (std::size_t i = 0; i < set.size(); ++i) {
            const Vector f = extract_feature(set.inputs[i], state.current);
            correct += state.unified.predict(f) == set.labels[i];
        }
        acc.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(set.size()));
    }
    return acc;
}

struct RunResult {
    AccuracyMatrix acc;
    std::vector<double> session_acc;
    std::vector<std::optional<double>> sdv;
    std::vector<double> test_sizes;
    double a_last = 0.0;
    double a_avg = 0.0;
    std::optional<double> af;  // needs >= 2 sessions
    std::optional<double> sdv_mean;
    ContinualState state;
};

// Full continual run over a stream.
inline RunResult run_stream(const TaskStream& stream, const TrainConfig& cfg) {
    stream.validate();
    RunResult r;
    r.state = make_initial_state(stream.tokens, stream.dim, cfg);
    std::vector<LabeledSet> tests;
    for (const auto& task : stream.tasks) {
        train_task(r.state, task, cfg);
        tests.push_back(task.test);
        r.test_sizes.push_back(static_cast<double>(task.test.size()));
        r.acc.push_back(evaluate(r.state, tests));
    }
    r.sdv = r.state.sdv;
    r.session_acc = session_accuracies(r.acc, r.test_sizes);
    const Summary s = summarize_sessions(r.session_acc);
    r.a_last = s.a_last;
    r.a_avg = s.a_avg;
    if (r.acc.size() >= 2) r.af = average_forgetting(r.acc);
    std::vector<double> sdvs;
    for (const auto& v : r.sdv)
        if (v) sdvs.push_back(*v);
    if (!sdvs.empty()) r.sdv_mean = mean_std(sdvs).mean;
    return r;
}

}  // namespace ekpc

#endif  // EKPC_TRAINER_HPP
