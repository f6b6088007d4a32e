#ifndef EKPC_IPR_HPP
#define EKPC_IPR_HPP

// Importance-aware parameter regularization: global channel importance from class statistics,
// local hidden-unit importance from routed adapter intermediates, their fusion into per-parameter
// weights, and the weighted quadratic anchor penalty on adapter parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ekpc/data.hpp"
#include "ekpc/error.hpp"
#include "ekpc/model.hpp"
#include "ekpc/numerics.hpp"

namespace ekpc {

struct ClassStats {
    int class_id = 0;
    Vector mean;
    Vector var;  // biased (1/n)
    std::size_t count = 0;
};

// Mean and biased per-channel variance of the rows of `features`.
inline ClassStats class_stats(int class_id, const Matrix& features) {
    if (features.rows() == 0) throw PreconditionError("class_stats: class " + std::to_string(class_id) + " has no samples");
    const std::size_t n = features.rows();
    const std::size_t d = features.cols();
    ClassStats s{class_id, Vector(d, 0.0), Vector(d, 0.0), n};
    for (std::size_t i = 0; i < n; ++i) {
        auto r = features.row(i);
        for (std::size_t k = 0; k < d; ++k) s.mean[k] += r[k];
    }
    for (double& v : s.mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = features.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            const double e = r[k] - s.mean[k];
            s.var[k] += e * e;
        }
    }
    for (double& v : s.var) v /= static_cast<double>(n);
    return s;
}

// Stats for every label present, ascending label order.
inline std::vector<ClassStats> class_stats_by_label(const Matrix& features, const std::vector<int>& labels) {
    std::vector<ClassStats> out;
    for (const auto& [label, idx] : group_by_label(labels)) out.push_back(class_stats(label, gather_rows(features, idx)));
    return out;
}

// G = G_prev + (1/N_C) sum_c |f_c| / (var_c + eps)
inline Vector global_importance_increment(std::size_t d, std::span<const ClassStats> stats, double eps) {
    Vector inc(d, 0.0);
    if (stats.empty()) return inc;
    for (const auto& s : stats) {
        require_dims(s.mean.size() == d && s.var.size() == d, "global importance: class stats dimension");
        for (std::size_t k = 0; k < d; ++k) inc[k] += std::abs(s.mean[k]) / (s.var[k] + eps);
    }
    for (double& v : inc) v /= static_cast<double>(stats.size());
    return inc;
}

inline Vector update_global_importance(std::span<const double> g_prev, std::span<const ClassStats> stats, double eps) {
    Vector g(g_prev.begin(), g_prev.end());
    const Vector inc = global_importance_increment(g.size(), stats, eps);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += inc[k];
    return g;
}

// u = sum_j cos(u~[j], u~[0]) u~[j]. Zero-norm rows (or a zero-norm CLS row) get weight 0.
inline Vector router_weighted_unit(const Matrix& u_tilde) {
    require_dims(u_tilde.rows() >= 1, "router_weighted_unit: no token rows");
    Vector u(u_tilde.cols(), 0.0);
    auto cls = u_tilde.row(0);
    for (std::size_t j = 0; j < u_tilde.rows(); ++j) {
        auto r = u_tilde.row(j);
        const double w = try_cosine_similarity(r, cls).value_or(0.0);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < u.size(); ++k) u[k] += w * r[k];
    }
    return u;
}

// L = L_prev + mean over rows of `units`.
inline Vector accumulate_mean(std::span<const double> l_prev, const Matrix& units) {
    if (units.rows() == 0) throw PreconditionError("local importance update: no samples");
    require_dims(units.cols() == l_prev.size(), "local importance update: unit width != d_h");
    Vector l(l_prev.begin(), l_prev.end());
    Vector sum(l.size(), 0.0);
    for (std::size_t i = 0; i < units.rows(); ++i) {
        auto r = units.row(i);
        for (std::size_t k = 0; k < l.size(); ++k) sum[k] += r[k];
    }
    for (std::size_t k = 0; k < l.size(); ++k) l[k] += sum[k] / static_cast<double>(units.rows());
    return l;
}

inline Vector update_local_importance_down(std::span<const double> l_prev, const Matrix& units) {
    return accumulate_mean(l_prev, units);
}

inline Vector update_local_importance_up(std::span<const double> l_prev, const Matrix& weighted_units) {
    return accumulate_mean(l_prev, weighted_units);
}

// u_hat = u * (per-hidden-unit absolute row sum of W_up)
inline Vector weighted_up_unit(std::span<const double> u, const Matrix& w_up) {
    require_dims(w_up.rows() == u.size(), "weighted_up_unit: W_up rows != d_h");
    Vector out(u.size());
    for (std::size_t h = 0; h < u.size(); ++h) {
        double s = 0.0;
        for (double v : w_up.row(h)) s += std::abs(v);
        out[h] = u[h] * s;
    }
    return out;
}

struct FusedImportance {
    Matrix down;  // d x d_h
    Matrix up;    // d x d_h, indexes W_up transposed
};

// I_up = eta1 * G^T L_up, I_down = eta2 * G^T L_down
inline FusedImportance fuse_importance(std::span<const double> g, std::span<const double> l_down,
                                       std::span<const double> l_up, double eta1, double eta2) {
    require_dims(l_down.size() == l_up.size(), "fuse_importance: L_dm / L_um length mismatch");
    FusedImportance out{Matrix(g.size(), l_down.size()), Matrix(g.size(), l_up.size())};
    for (std::size_t a = 0; a < g.size(); ++a) {
        for (std::size_t b = 0; b < l_down.size(); ++b) {
            out.down(a, b) = eta2 * g[a] * l_down[b];
            out.up(a, b) = eta1 * g[a] * l_up[b];
        }
    }
    return out;
}

struct LayerImportance {
    Vector local_down;  // L_dm, d_h
    Vector local_up;    // L_um, d_h
    FusedImportance fused;
};

// Weights applied by the anchor penalty.
enum class ImportanceMode {
    importance,  // fused global x local importance
    uniform,     // every parameter weighted by the same constant (plain parameter regularization)
};

struct ImportanceState {
    Vector global;  // G, length d
    std::vector<LayerImportance> layers;
    int last_task = -1;  // -1 before the first pass

    static ImportanceState zeros(std::size_t d, std::size_t d_h, std::size_t n_layers) {
        ImportanceState s;
        s.global.assign(d, 0.0);
        for (std::size_t l = 0; l < n_layers; ++l) {
            s.layers.push_back({Vector(d_h, 0.0), Vector(d_h, 0.0), {Matrix(d, d_h), Matrix(d, d_h)}});
        }
        return s;
    }

    static ImportanceState uniform(std::size_t d, std::size_t d_h, std::size_t n_layers, double value) {
        ImportanceState s = zeros(d, d_h, n_layers);
        for (auto& L : s.layers) {
            L.fused.down.fill(value);
            L.fused.up.fill(value);
        }
        return s;
    }

    [[nodiscard]] std::size_t n_layers() const noexcept { return layers.size(); }
};

struct ImportanceConfig {
    double eta1 = 100.0;  // up-projection scale
    double eta2 = 1.0;    // down-projection scale
    double eps = 1e-8;    // variance floor
    // Scale each task's increments of G and L so their maximum is 1 before accumulation.
    bool normalize_per_task = false;
};

struct IprLossResult {
    double loss = 0.0;
    AdapterGrads grads;
};

// sum_l <I_dm, (D_prev - D)^2> + <I_um, (U_prev^T - U^T)^2>; gradient w.r.t. the current adapters.
inline IprLossResult ipr_loss(const BackboneSnapshot& current, const BackboneSnapshot& previous,
                              const ImportanceState& imp) {
    if (!current.same_architecture(previous)) throw DimensionError("ipr_loss: snapshot architectures differ");
    require_dims(imp.n_layers() == current.n_layers(), "ipr_loss: importance layer count != backbone layers");
    IprLossResult r{0.0, zero_adapter_grads(current)};
    for (std::size_t l = 0; l < current.n_layers(); ++l) {
        const Adapter& cur = current.layers[l].adapter;
        const Adapter& prev = previous.layers[l].adapter;
        const FusedImportance& I = imp.layers[l].fused;
        require_dims(I.down.same_shape(cur.down) && I.up.rows() == cur.up.cols() && I.up.cols() == cur.up.rows(),
                     "ipr_loss: importance shape at layer " + std::to_string(l));
        for (std::size_t a = 0; a < current.dim; ++a) {
            for (std::size_t b = 0; b < current.hidden; ++b) {
                const double dd = cur.down(a, b) - prev.down(a, b);
                r.loss += I.down(a, b) * dd * dd;
                r.grads[l].down(a, b) = 2.0 * I.down(a, b) * dd;
                const double du = cur.up(b, a) - prev.up(b, a);
                r.loss += I.up(a, b) * du * du;
                r.grads[l].up(b, a) = 2.0 * I.up(a, b) * du;
            }
        }
    }
    return r;
}

namespace detail {

inline void scale_to_unit_max(Vector& v) {
    double mx = 0.0;
    for (double x : v) mx = std::max(mx, x);
    if (mx > 0.0)
        for (double& x : v) x /= mx;
}

}  // namespace detail

// One inference pass with the converged extractor of the task just finished: class statistics
// update G, routed intermediates update L_dm, weighted routed intermediates update L_um, and the
// fused matrices are recomputed from the accumulated vectors. imp_prev is not modified.
inline ImportanceState run_importance_pass(const LabeledSet& data, const BackboneSnapshot& bb_prev,
                                           const ImportanceState& imp_prev, const ImportanceConfig& cfg,
                                           int task_index) {
    if (data.empty()) throw PreconditionError("run_importance_pass: empty dataset");
    require_dims(imp_prev.global.size() == bb_prev.dim && imp_prev.n_layers() == bb_prev.n_layers(),
                 "run_importance_pass: importance state does not match backbone");
    const std::size_t n = data.size();
    const std::size_t nl = bb_prev.n_layers();

    Matrix features(n, bb_prev.dim);
    std::vector<Matrix> units(nl, Matrix(n, bb_prev.hidden));
    std::vector<Matrix> weighted(nl, Matrix(n, bb_prev.hidden));
    for (std::size_t i = 0; i < n; ++i) {
        const ForwardTrace tr = backbone_forward(data.inputs[i], bb_prev, TraceRows::all);
        std::copy(tr.feature.begin(), tr.feature.end(), features.row(i).begin());
        for (std::size_t l = 0; l < nl; ++l) {
            const Vector u = router_weighted_unit(tr.u_tilde[l]);
            const Vector uh = weighted_up_unit(u, bb_prev.layers[l].adapter.up);
            std::copy(u.begin(), u.end(), units[l].row(i).begin());
            std::copy(uh.begin(), uh.end(), weighted[l].row(i).begin());
        }
    }

    ImportanceState next;
    next.last_task = task_index;
    const auto stats = class_stats_by_label(features, data.labels);
    Vector g_inc = global_importance_increment(bb_prev.dim, stats, cfg.eps);
    if (cfg.normalize_per_task) detail::scale_to_unit_max(g_inc);
    next.global = imp_prev.global;
    for (std::size_t k = 0; k < g_inc.size(); ++k) next.global[k] += g_inc[k];

    const Vector zero(bb_prev.hidden, 0.0);
    for (std::size_t l = 0; l < nl; ++l) {
        Vector down_inc = accumulate_mean(zero, units[l]);
        Vector up_inc = accumulate_mean(zero, weighted[l]);
        if (cfg.normalize_per_task) {
            detail::scale_to_unit_max(down_inc);
            detail::scale_to_unit_max(up_inc);
        }
        LayerImportance li;
        li.local_down = imp_prev.layers[l].local_down;
        li.local_up = imp_prev.layers[l].local_up;
        for (std::size_t h = 0; h < bb_prev.hidden; ++h) {
            li.local_down[h] += down_inc[h];
            li.local_up[h] += up_inc[h];
        }
        li.fused = fuse_importance(next.global, li.local_down, li.local_up, cfg.eta1, cfg.eta2);
        next.layers.push_back(std::move(li));
    }
    return next;
}

}  // namespace ekpc

#endif  // EKPC_IPR_HPP
