#ifndef EKPC_TSDC_HPP
#define EKPC_TSDC_HPP

// Trainable semantic drift compensation: drift of old-class prototypes estimated from current
// task data, the drift penalty used during training, prototype compensation, and retraining of
// the unified linear head on Gaussian replay of the prototypes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ekpc/data.hpp"
#include "ekpc/error.hpp"
#include "ekpc/ipr.hpp"
#include "ekpc/model.hpp"
#include "ekpc/numerics.hpp"

namespace ekpc {

struct Prototype {
    int class_id = 0;
    Vector mean;
    Vector stddev;
    Vector cov;  // diagonal covariance (= stddev^2 at capture time)
    std::size_t count = 0;
    int origin_task = 0;

    static Prototype from_stats(const ClassStats& s, int task) {
        Prototype p{s.class_id, s.mean, Vector(s.var.size()), s.var, s.count, task};
        for (std::size_t k = 0; k < s.var.size(); ++k) p.stddev[k] = std::sqrt(s.var[k]);
        return p;
    }

    friend bool operator==(const Prototype&, const Prototype&) = default;
};

struct ClassDrift {
    int class_id = 0;
    Vector drift;              // estimated drift of the class mean
    double weight_mass = 0.0;  // sum of sample weights
    bool low_confidence = false;  // weight mass underflowed to zero; drift reported as 0
};

struct DriftEstimate {
    std::vector<ClassDrift> classes;

    [[nodiscard]] const ClassDrift* find(int class_id) const noexcept {
        for (const auto& c : classes)
            if (c.class_id == class_id) return &c;
        return nullptr;
    }
    [[nodiscard]] bool empty() const noexcept { return classes.empty(); }
};

// Drift estimate together with the normalized sample weights alpha_i / sum(alpha), which the
// drift penalty's gradient needs.
struct DriftComputation {
    DriftEstimate estimate;
    std::vector<Vector> weights;  // per class, length = batch size
};

// delta_i = f_prev_i - f_curr_i, alpha_i = exp(-mean_k (f_prev_ik - mu_ck)^2 / (2 var_ck + eps)),
// drift_c = sum alpha_i delta_i / sum alpha_i.
inline DriftComputation drift_from_features(const Matrix& prev_features, const Matrix& curr_features,
                                            std::span<const Prototype> protos, double eps) {
    require_dims(prev_features.same_shape(curr_features), "estimate_drift: feature batches differ in shape");
    if (prev_features.rows() == 0) throw PreconditionError("estimate_drift: empty batch");
    const std::size_t n = prev_features.rows();
    const std::size_t d = prev_features.cols();
    DriftComputation out;
    for (const auto& p : protos) {
        require_dims(p.mean.size() == d && p.stddev.size() == d, "estimate_drift: prototype dimension");
        Vector w(n);
        double mass = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto f = prev_features.row(i);
            double e = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = f[k] - p.mean[k];
                e += diff * diff / (2.0 * p.stddev[k] * p.stddev[k] + eps);
            }
            w[i] = std::exp(-e / static_cast<double>(d));
            mass += w[i];
        }
        ClassDrift cd{p.class_id, Vector(d, 0.0), mass, false};
        if (mass > 0.0) {
            for (std::size_t i = 0; i < n; ++i) {
                w[i] /= mass;
                if (w[i] == 0.0) continue;
                auto fp = prev_features.row(i);
                auto fc = curr_features.row(i);
                for (std::size_t k = 0; k < d; ++k) cd.drift[k] += w[i] * (fp[k] - fc[k]);
            }
        } else {
            cd.low_confidence = true;
        }
        out.estimate.classes.push_back(std::move(cd));
        out.weights.push_back(std::move(w));
    }
    return out;
}

inline DriftEstimate estimate_drift(const std::vector<TokenMatrix>& batch, const BackboneSnapshot& bb_prev,
                                    const BackboneSnapshot& bb_curr, std::span<const Prototype> protos, double eps) {
    if (protos.empty()) throw PreconditionError("estimate_drift: no prototypes");
    if (batch.empty()) throw PreconditionError("estimate_drift: empty batch");
    return drift_from_features(extract_features(batch, bb_prev), extract_features(batch, bb_curr), protos, eps)
        .estimate;
}

struct TsdFeatureGrad {
    double loss = 0.0;
    Matrix grad_curr_features;  // n x d
};

// sum_c |drift_c|^2 with gradient w.r.t. the current-extractor features only.
inline TsdFeatureGrad tsd_loss_features(const DriftComputation& dc, std::size_t n, std::size_t d) {
    TsdFeatureGrad r{0.0, Matrix(n, d)};
    for (std::size_t c = 0; c < dc.estimate.classes.size(); ++c) {
        const auto& cd = dc.estimate.classes[c];
        if (cd.low_confidence) continue;
        r.loss += dot(cd.drift, cd.drift);
        const Vector& w = dc.weights[c];
        for (std::size_t i = 0; i < n; ++i) {
            if (w[i] == 0.0) continue;
            auto g = r.grad_curr_features.row(i);
            // d drift_c / d f_curr_i = -w_ic
            for (std::size_t k = 0; k < d; ++k) g[k] -= 2.0 * w[i] * cd.drift[k];
        }
    }
    return r;
}

inline double tsd_loss(const DriftEstimate& drift) {
    double loss = 0.0;
    for (const auto& c : drift.classes) loss += dot(c.drift, c.drift);
    return loss;
}

struct TsdLossResult {
    double loss = 0.0;
    AdapterGrads grads;
    DriftEstimate drift;
};

// Drift penalty on a batch and its gradient w.r.t. the current adapters. The previous extractor
// and the sample weights are constants.
inline TsdLossResult tsd_loss(const std::vector<TokenMatrix>& batch, const BackboneSnapshot& bb_prev,
                              const BackboneSnapshot& bb_curr, std::span<const Prototype> protos, double eps) {
    TsdLossResult r{0.0, zero_adapter_grads(bb_curr), {}};
    if (protos.empty()) return r;
    if (batch.empty()) throw PreconditionError("tsd_loss: empty batch");
    std::vector<ForwardTrace> traces;
    traces.reserve(batch.size());
    Matrix curr(batch.size(), bb_curr.dim);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        traces.push_back(backbone_forward(batch[i], bb_curr, TraceRows::cls_only));
        std::copy(traces.back().feature.begin(), traces.back().feature.end(), curr.row(i).begin());
    }
    const DriftComputation dc = drift_from_features(extract_features(batch, bb_prev), curr, protos, eps);
    const TsdFeatureGrad fg = tsd_loss_features(dc, batch.size(), bb_curr.dim);
    for (std::size_t i = 0; i < batch.size(); ++i) backbone_backward(traces[i], bb_curr, fg.grad_curr_features.row(i), r.grads);
    r.loss = fg.loss;
    r.drift = dc.estimate;
    return r;
}

// Old classes shift by their drift; classes in `current` get fresh prototypes from their stats.
// Old covariances are left as captured.
inline std::vector<Prototype> compensate_prototypes(std::span<const Prototype> protos, const DriftEstimate& drift,
                                                    std::span<const ClassStats> current, int task_index) {
    std::vector<Prototype> out;
    out.reserve(protos.size() + current.size());
    std::string missing;
    for (const auto& p : protos) {
        const ClassDrift* cd = drift.find(p.class_id);
        if (cd == nullptr) {
            missing += (missing.empty() ? "" : ", ") + std::to_string(p.class_id);
            continue;
        }
        Prototype q = p;
        for (std::size_t k = 0; k < q.mean.size(); ++k) q.mean[k] += cd->drift[k];
        out.push_back(std::move(q));
    }
    if (!missing.empty()) throw PreconditionError("compensate_prototypes: no drift entry for class(es) " + missing);
    for (const auto& s : current) {
        for (const auto& p : protos) {
            if (p.class_id == s.class_id) {
                throw ProtocolError("compensate_prototypes: class " + std::to_string(s.class_id) + " already has a prototype");
            }
        }
        out.push_back(Prototype::from_stats(s, task_index));
    }
    return out;
}

// Mean L2 norm of the per-class drift.
inline double sdv_metric(const DriftEstimate& drift) {
    if (drift.empty()) throw PreconditionError("sdv_metric: empty drift estimate");
    double s = 0.0;
    for (const auto& c : drift.classes) s += norm2(c.drift);
    return s / static_cast<double>(drift.classes.size());
}

// n_per_class samples from N(mean_c, diag(cov_c)) for every prototype, grouped by class.
inline LabeledFeatures sample_replay_set(std::span<const Prototype> protos, std::size_t n_per_class, SeededRng& rng) {
    if (n_per_class == 0) throw PreconditionError("sample_replay_set: samples per class must be positive");
    if (protos.empty()) throw PreconditionError("sample_replay_set: no prototypes");
    const std::size_t d = protos.front().mean.size();
    LabeledFeatures out{Matrix(n_per_class * protos.size(), d), {}};
    out.labels.reserve(out.features.rows());
    std::size_t row = 0;
    for (const auto& p : protos) {
        const Matrix s = sample_diag_gaussian(p.mean, p.cov, n_per_class, rng);
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            std::copy(s.row(i).begin(), s.row(i).end(), out.features.row(row).begin());
            out.labels.push_back(p.class_id);
        }
    }
    return out;
}

// Linear softmax head h(v) = W v + b over all learned classes.
struct LinearHead {
    Matrix weights;  // C x d
    Vector bias;     // C
    std::vector<int> class_ids;  // row -> class id

    [[nodiscard]] std::size_t n_classes() const noexcept { return class_ids.size(); }

    [[nodiscard]] std::map<int, int> row_index() const {
        std::map<int, int> m;
        for (std::size_t r = 0; r < class_ids.size(); ++r) m[class_ids[r]] = static_cast<int>(r);
        return m;
    }

    [[nodiscard]] int predict(std::span<const double> v) const {
        int best = -1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < n_classes(); ++r) {
            const double s = dot(weights.row(r), v) + bias[r];
            if (s > best_score) {
                best_score = s;
                best = class_ids[r];
            }
        }
        return best;
    }

    friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

struct UnifiedLossResult {
    double loss = 0.0;  // summed over samples
    Matrix grad_weights;
    Vector grad_bias;
};

// -sum_i log softmax(h(v_i))[y_i]; labels are head row indices.
inline UnifiedLossResult unified_loss(const LinearHead& head, const Matrix& features, std::span<const int> labels) {
    const std::size_t c = head.n_classes();
    require_dims(head.weights.rows() == c && head.bias.size() == c, "unified_loss: head shape");
    require_dims(features.cols() == head.weights.cols(), "unified_loss: feature dim != head dim");
    require_dims(labels.size() == features.rows(), "unified_loss: label count != feature rows");
    UnifiedLossResult r{0.0, Matrix(c, features.cols()), Vector(c, 0.0)};
    Vector logits(c);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw PreconditionError("unified_loss: label out of range");
        auto v = features.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            logits[j] = dot(head.weights.row(j), v) + head.bias[j];
            mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[j] - mx);
        const double lse = mx + std::log(z);
        r.loss += lse - logits[static_cast<std::size_t>(y)];
        for (std::size_t j = 0; j < c; ++j) {
            const double g = std::exp(logits[j] - lse) - (static_cast<int>(j) == y ? 1.0 : 0.0);
            r.grad_bias[j] += g;
            auto gw = r.grad_weights.row(j);
            for (std::size_t k = 0; k < v.size(); ++k) gw[k] += g * v[k];
        }
    }
    return r;
}

struct UnifiedTrainConfig {
    std::size_t epochs = 5;
    std::size_t samples_per_class = 200;
    std::size_t batch_size = 48;
    double lr = 0.01;
    double weight_decay = 0.0005;
};

// Accuracy of the head on a labeled feature set (labels are class ids).
inline double head_accuracy(const LinearHead& head, const LabeledFeatures& set) {
    if (set.labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < set.labels.size(); ++i) correct += head.predict(set.features.row(i)) == set.labels[i];
    return static_cast<double>(correct) / static_cast<double>(set.labels.size());
}

// SGD on the mean replay loss per mini-batch. The replay set is drawn once and reshuffled per epoch.
// Only the head changes; every prototype class must have a head row.
inline LinearHead train_unified_classifier(std::span<const Prototype> protos, LinearHead head,
                                           const UnifiedTrainConfig& cfg, SeededRng& rng) {
    if (protos.empty()) throw PreconditionError("train_unified_classifier: no prototypes");
    const auto rows = head.row_index();
    for (const auto& p : protos) {
        if (!rows.contains(p.class_id)) {
            throw PreconditionError("train_unified_classifier: class " + std::to_string(p.class_id) + " has no head row");
        }
    }
    SeededRng sample_rng = rng.derive(0);
    SeededRng order_rng = rng.derive(1);
    const LabeledFeatures replay = sample_replay_set(protos, cfg.samples_per_class, sample_rng);
    const std::size_t n = replay.labels.size();
    const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        order_rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(n, start + bs);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            const Matrix batch = gather_rows(replay.features, idx);
            std::vector<int> labels(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = rows.at(replay.labels[idx[i]]);
            UnifiedLossResult g = unified_loss(head, batch, labels);
            const double inv = 1.0 / static_cast<double>(idx.size());
            g.grad_weights *= inv;
            for (double& v : g.grad_bias) v *= inv;
            sgd_step(head.weights, g.grad_weights, cfg.lr, cfg.weight_decay);
            sgd_step(std::span<double>(head.bias), g.grad_bias, cfg.lr, 0.0);
        }
    }
    return head;
}

}  // namespace ekpc

#endif  // EKPC_TSDC_HPP
