#ifndef EKPC_MODEL_HPP
#define EKPC_MODEL_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ekpc/data.hpp"
#include "ekpc/error.hpp"
#include "ekpc/numerics.hpp"

namespace ekpc {

// Bottleneck adapter y = relu(x * down) * up. No biases.
struct Adapter {
    Matrix down;  // d x d_h
    Matrix up;    // d_h x d

    [[nodiscard]] std::size_t parameter_count() const noexcept { return down.size() + up.size(); }
    friend bool operator==(const Adapter&, const Adapter&) = default;
};

// Frozen layer x -> tanh(x * weight). Never trained.
struct FrozenBlock {
    Matrix weight;  // d x d
    friend bool operator==(const FrozenBlock&, const FrozenBlock&) = default;
};

enum class AdapterPlacement {
    parallel,  // x' = tanh(x W) + adapter(x)
    serial,    // h = tanh(x W); x' = h + adapter(h)
};

struct Layer {
    FrozenBlock block;
    Adapter adapter;
    friend bool operator==(const Layer&, const Layer&) = default;
};

// Gradients share the adapter shape, one per layer.
using AdapterGrads = std::vector<Adapter>;

struct BackboneSnapshot {
    std::size_t dim = 0;         // d
    std::size_t hidden = 0;      // d_h
    std::size_t tokens = 0;      // d_t
    AdapterPlacement placement = AdapterPlacement::parallel;
    std::vector<Layer> layers;
    // Constant added to the extracted feature. Zero for every trained model; non-zero only
    // when constructing extractors with a known feature-space shift.
    Vector feature_offset;

    [[nodiscard]] std::size_t n_layers() const noexcept { return layers.size(); }

    void validate() const {
        require_dims(hidden < dim, "adapter bottleneck requires d_h < d");
        require_dims(feature_offset.empty() || feature_offset.size() == dim, "feature offset length != d");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            const std::string at = " at layer " + std::to_string(l);
            require_dims(L.block.weight.rows() == dim && L.block.weight.cols() == dim, "block weight shape" + at);
            require_dims(L.adapter.down.rows() == dim && L.adapter.down.cols() == hidden, "W_down shape" + at);
            require_dims(L.adapter.up.rows() == hidden && L.adapter.up.cols() == dim, "W_up shape" + at);
        }
    }

    [[nodiscard]] bool same_architecture(const BackboneSnapshot& o) const noexcept {
        if (dim != o.dim || hidden != o.hidden || n_layers() != o.n_layers() || placement != o.placement) return false;
        return true;
    }

    [[nodiscard]] std::size_t adapter_parameter_count() const noexcept {
        std::size_t n = 0;
        for (const auto& L : layers) n += L.adapter.parameter_count();
        return n;
    }

    friend bool operator==(const BackboneSnapshot&, const BackboneSnapshot&) = default;
};

inline AdapterGrads zero_adapter_grads(const BackboneSnapshot& bb) {
    AdapterGrads g;
    g.reserve(bb.n_layers());
    for (const auto& L : bb.layers) {
        g.push_back({Matrix(L.adapter.down.rows(), L.adapter.down.cols()),
                     Matrix(L.adapter.up.rows(), L.adapter.up.cols())});
    }
    return g;
}

inline void add_scaled(AdapterGrads& acc, const AdapterGrads& g, double scale) {
    require_dims(acc.size() == g.size(), "adapter grad layer count mismatch");
    for (std::size_t l = 0; l < acc.size(); ++l) {
        require_dims(acc[l].down.same_shape(g[l].down) && acc[l].up.same_shape(g[l].up), "adapter grad shape");
        auto ad = acc[l].down.flat();
        auto gd = g[l].down.flat();
        for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += scale * gd[i];
        auto au = acc[l].up.flat();
        auto gu = g[l].up.flat();
        for (std::size_t i = 0; i < au.size(); ++i) au[i] += scale * gu[i];
    }
}

// Flat layout: layer 0 W_down, layer 0 W_up, layer 1 W_down, ...
inline Vector flatten(const AdapterGrads& adapters) {
    Vector out;
    for (const auto& a : adapters) {
        out.insert(out.end(), a.down.flat().begin(), a.down.flat().end());
        out.insert(out.end(), a.up.flat().begin(), a.up.flat().end());
    }
    return out;
}

inline Vector flatten_adapters(const BackboneSnapshot& bb) {
    Vector out;
    out.reserve(bb.adapter_parameter_count());
    for (const auto& L : bb.layers) {
        out.insert(out.end(), L.adapter.down.flat().begin(), L.adapter.down.flat().end());
        out.insert(out.end(), L.adapter.up.flat().begin(), L.adapter.up.flat().end());
    }
    return out;
}

inline void assign_adapters(BackboneSnapshot& bb, std::span<const double> flat) {
    require_dims(flat.size() == bb.adapter_parameter_count(), "assign_adapters: parameter count mismatch");
    std::size_t at = 0;
    for (auto& L : bb.layers) {
        for (auto* m : {&L.adapter.down, &L.adapter.up}) {
            auto dst = m->flat();
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
                      flat.begin() + static_cast<std::ptrdiff_t>(at + dst.size()), dst.begin());
            at += dst.size();
        }
    }
}

// Orthogonal d x d matrix from Gram-Schmidt on a Gaussian draw.
inline Matrix random_orthogonal(std::size_t d, SeededRng& rng) {
    Matrix q(d, d);
    for (double& v : q.flat()) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
        auto ri = q.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            auto rj = q.row(j);
            const double p = dot(ri, rj);
            for (std::size_t k = 0; k < d; ++k) ri[k] -= p * rj[k];
        }
        const double n = norm2(ri);
        for (double& v : ri) v /= n;
    }
    return q;
}

// Adapter with W_down ~ U(-1/sqrt(d), 1/sqrt(d)) and W_up = 0, so a fresh adapter outputs zero.
inline Adapter init_adapter(std::size_t d, std::size_t d_h, SeededRng& rng) {
    Adapter a{Matrix(d, d_h), Matrix(d_h, d)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : a.down.flat()) v = rng.uniform(-bound, bound);
    return a;
}

inline BackboneSnapshot make_backbone(std::size_t d, std::size_t d_h, std::size_t d_t, std::size_t n_layers,
                                      SeededRng& rng, AdapterPlacement placement = AdapterPlacement::parallel) {
    BackboneSnapshot bb;
    bb.dim = d;
    bb.hidden = d_h;
    bb.tokens = d_t;
    bb.placement = placement;
    SeededRng block_rng = rng.derive(1);
    SeededRng adapter_rng = rng.derive(2);
    for (std::size_t l = 0; l < n_layers; ++l) {
        bb.layers.push_back({FrozenBlock{random_orthogonal(d, block_rng)}, init_adapter(d, d_h, adapter_rng)});
    }
    bb.validate();
    return bb;
}

struct AdapterOutput {
    TokenMatrix y;   // d_t x d
    Matrix u_tilde;  // d_t x d_h, relu(x * W_down)
};

inline AdapterOutput adapter_forward(const TokenMatrix& x, const Adapter& a) {
    require_dims(x.cols() == a.down.rows(), "adapter_forward: input has " + std::to_string(x.cols()) +
                                                " columns, W_down expects " + std::to_string(a.down.rows()));
    require_dims(a.down.cols() == a.up.rows(), "adapter_forward: W_down/W_up hidden size mismatch");
    Matrix u = matmul(x, a.down);
    for (double& v : u.flat()) v = v > 0.0 ? v : 0.0;
    Matrix y = matmul(u, a.up);
    return {std::move(y), std::move(u)};
}

struct ForwardTrace {
    std::vector<TokenMatrix> inputs;          // x_l, pre-block input of layer l
    std::vector<TokenMatrix> adapter_inputs;  // x_l (parallel) or tanh(x_l W) (serial)
    std::vector<Matrix> block_outputs;        // tanh(x_l W)
    std::vector<Matrix> u_tilde;              // relu(adapter_input * W_down)
    TokenMatrix output;                       // x_{N_L}
    Vector feature;                           // row 0 of output (+ feature offset)

    [[nodiscard]] std::size_t n_layers() const noexcept { return u_tilde.size(); }
};

// Which token rows to propagate. Rows never interact in this backbone, so propagating only the
// CLS row yields a bit-identical feature at 1/d_t of the cost. Full traces are needed for routing.
enum class TraceRows { all, cls_only };

inline ForwardTrace backbone_forward(const TokenMatrix& x0, const BackboneSnapshot& bb,
                                     TraceRows rows = TraceRows::all) {
    require_dims(x0.cols() == bb.dim, "backbone_forward: input has " + std::to_string(x0.cols()) +
                                          " columns, backbone expects d = " + std::to_string(bb.dim));
    require_dims(x0.rows() >= 1, "backbone_forward: empty token matrix");
    ForwardTrace tr;
    const std::size_t L = bb.n_layers();
    tr.inputs.reserve(L);
    tr.adapter_inputs.reserve(L);
    tr.block_outputs.reserve(L);
    tr.u_tilde.reserve(L);

    TokenMatrix x = rows == TraceRows::all ? x0 : Matrix(1, x0.cols(), Vector(x0.row(0).begin(), x0.row(0).end()));
    for (const auto& layer : bb.layers) {
        Matrix h = matmul(x, layer.block.weight);
        for (double& v : h.flat()) v = std::tanh(v);
        const TokenMatrix& adapter_in = bb.placement == AdapterPlacement::parallel ? x : h;
        AdapterOutput ad = adapter_forward(adapter_in, layer.adapter);
        TokenMatrix next = h;
        next += ad.y;
        tr.inputs.push_back(std::move(x));
        tr.adapter_inputs.push_back(bb.placement == AdapterPlacement::parallel ? tr.inputs.back() : h);
        tr.block_outputs.push_back(std::move(h));
        tr.u_tilde.push_back(std::move(ad.u_tilde));
        x = std::move(next);
    }
    tr.feature.assign(x.row(0).begin(), x.row(0).end());
    if (!bb.feature_offset.empty()) {
        for (std::size_t k = 0; k < bb.dim; ++k) tr.feature[k] += bb.feature_offset[k];
    }
    tr.output = std::move(x);
    return tr;
}

inline Vector extract_feature(const TokenMatrix& x0, const BackboneSnapshot& bb) {
    return backbone_forward(x0, bb, TraceRows::cls_only).feature;
}

inline Matrix extract_features(const std::vector<TokenMatrix>& inputs, const BackboneSnapshot& bb) {
    Matrix out(inputs.size(), bb.dim);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Vector f = extract_feature(inputs[i], bb);
        std::copy(f.begin(), f.end(), out.row(i).begin());
    }
    return out;
}

namespace detail {

// Backprop dY through y = relu(x D) U. Accumulates into grad; returns dL/dx.
inline Matrix adapter_backward(const Matrix& x, const Matrix& u_tilde, const Adapter& a, const Matrix& dy,
                               Adapter& grad) {
    add_matmul_at(u_tilde, dy, grad.up);
    Matrix du = matmul_bt(dy, a.up);
    for (std::size_t i = 0; i < du.size(); ++i) {
        if (!(u_tilde.flat()[i] > 0.0)) du.flat()[i] = 0.0;
    }
    add_matmul_at(x, du, grad.down);
    return matmul_bt(du, a.down);
}

inline Matrix tanh_backward(const Matrix& h, const Matrix& dh, const Matrix& w) {
    Matrix dpre(dh.rows(), dh.cols());
    for (std::size_t i = 0; i < dh.size(); ++i) {
        const double t = h.flat()[i];
        dpre.flat()[i] = dh.flat()[i] * (1.0 - t * t);
    }
    return matmul_bt(dpre, w);
}

}  // namespace detail

// Accumulates dL/d(adapter params) into grads given dL/d(feature). Works for both trace kinds.
inline void backbone_backward(const ForwardTrace& tr, const BackboneSnapshot& bb, std::span<const double> dfeature,
                              AdapterGrads& grads) {
    require_dims(dfeature.size() == bb.dim, "backbone_backward: feature gradient length != d");
    require_dims(grads.size() == bb.n_layers() && tr.n_layers() == bb.n_layers(),
                 "backbone_backward: layer count mismatch");
    Matrix dx(tr.output.rows(), bb.dim);
    std::copy(dfeature.begin(), dfeature.end(), dx.row(0).begin());
    for (std::size_t li = bb.n_layers(); li-- > 0;) {
        const auto& layer = bb.layers[li];
        if (bb.placement == AdapterPlacement::parallel) {
            Matrix dx_prev = detail::tanh_backward(tr.block_outputs[li], dx, layer.block.weight);
            dx_prev += detail::adapter_backward(tr.adapter_inputs[li], tr.u_tilde[li], layer.adapter, dx, grads[li]);
            dx = std::move(dx_prev);
        } else {
            Matrix dh = dx;
            dh += detail::adapter_backward(tr.adapter_inputs[li], tr.u_tilde[li], layer.adapter, dx, grads[li]);
            dx = detail::tanh_backward(tr.block_outputs[li], dh, layer.block.weight);
        }
    }
}

// Prepend a CLS row equal to the mean of the given patch rows.
inline TokenMatrix with_cls_token(const Matrix& patches) {
    require_dims(patches.rows() >= 1, "with_cls_token: no patch rows");
    TokenMatrix x(patches.rows() + 1, patches.cols());
    auto cls = x.row(0);
    for (std::size_t r = 0; r < patches.rows(); ++r) {
        auto src = patches.row(r);
        std::copy(src.begin(), src.end(), x.row(r + 1).begin());
        for (std::size_t k = 0; k < patches.cols(); ++k) cls[k] += src[k];
    }
    for (double& v : cls) v /= static_cast<double>(patches.rows());
    return x;
}

// Cosine-margin classifier: one weight row per learned class.
struct CosineClassifier {
    Matrix weights;  // C x d
    double scale = 20.0;
    double margin = 0.01;

    [[nodiscard]] std::size_t n_classes() const noexcept { return weights.rows(); }

    // Append rows drawn from U(-bound, bound).
    void grow(std::size_t n_new, std::size_t d, SeededRng& rng, double bound) {
        Matrix w(weights.rows() + n_new, d);
        std::copy(weights.flat().begin(), weights.flat().end(), w.flat().begin());
        for (std::size_t r = weights.rows(); r < w.rows(); ++r)
            for (double& v : w.row(r)) v = rng.uniform(-bound, bound);
        weights = std::move(w);
    }
};

struct CosineLossResult {
    double loss = 0.0;
    Matrix grad_weights;   // C x d
    Matrix grad_features;  // N x d
};

// Mean over the batch of -log(z_y / (z_y + sum_{i != y} exp(s cos_i))), z_y = exp(s (cos_y - m)).
// labels are classifier row indices.
inline CosineLossResult cosine_margin_loss(const Matrix& features, std::span<const int> labels,
                                           const CosineClassifier& clf) {
    const std::size_t n = features.rows();
    const std::size_t c = clf.n_classes();
    const std::size_t d = features.cols();
    require_dims(labels.size() == n, "cosine_margin_loss: label count != feature rows");
    require_dims(clf.weights.cols() == d, "cosine_margin_loss: feature dim != classifier dim");
    if (!(clf.scale > 0.0) || clf.margin < 0.0) throw PreconditionError("cosine_margin_loss: need s > 0, m >= 0");
    if (n == 0) throw PreconditionError("cosine_margin_loss: empty batch");

    Vector wnorm(c);
    for (std::size_t j = 0; j < c; ++j) {
        wnorm[j] = norm2(clf.weights.row(j));
        if (wnorm[j] == 0.0) throw DegenerateInputError("cosine_margin_loss: zero-norm classifier row " + std::to_string(j));
    }

    CosineLossResult r{0.0, Matrix(c, d), Matrix(n, d)};
    Vector cosv(c), logits(c), prob(c);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw PreconditionError("cosine_margin_loss: label " + std::to_string(y) + " has no classifier row");
        }
        auto f = features.row(i);
        const double fnorm = norm2(f);
        if (fnorm == 0.0) throw DegenerateInputError("cosine_margin_loss: zero-norm feature at row " + std::to_string(i));
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            cosv[j] = dot(clf.weights.row(j), f) / (wnorm[j] * fnorm);
            logits[j] = clf.scale * (cosv[j] - (static_cast<int>(j) == y ? clf.margin : 0.0));
            mx = std::max(mx, logits[j]);
        }
        const double ly = logits[static_cast<std::size_t>(y)];
        double z = 0.0, rest = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            z += std::exp(logits[j] - mx);
            if (static_cast<int>(j) != y) rest += std::exp(logits[j] - ly);
        }
        const double lse = mx + std::log(z);
        // log1p keeps the tail when the true class dominates.
        r.loss += (ly == mx ? std::log1p(rest) : lse - ly) * inv_n;

        auto gf = r.grad_features.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            prob[j] = std::exp(logits[j] - lse);
            const double dlogit = (prob[j] - (static_cast<int>(j) == y ? 1.0 : 0.0)) * inv_n;
            const double dcos = clf.scale * dlogit;
            if (dcos == 0.0) continue;
            auto w = clf.weights.row(j);
            auto gw = r.grad_weights.row(j);
            // d cos / d f = (w/|w| - cos f/|f|) / |f| ; d cos / d w = (f/|f| - cos w/|w|) / |w|
            for (std::size_t k = 0; k < d; ++k) {
                gf[k] += dcos * (w[k] / wnorm[j] - cosv[j] * f[k] / fnorm) / fnorm;
                gw[k] += dcos * (f[k] / fnorm - cosv[j] * w[k] / wnorm[j]) / wnorm[j];
            }
        }
    }
    return r;
}

// p <- p - lr * (g + weight_decay * p)
inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay) {
    require_dims(params.size() == grads.size(), "sgd_step: parameter/gradient length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * (grads[i] + weight_decay * params[i]);
}

inline void sgd_step(Matrix& params, const Matrix& grads, double lr, double weight_decay) {
    require_dims(params.same_shape(grads), "sgd_step: parameter/gradient shape mismatch");
    sgd_step(params.flat(), grads.flat(), lr, weight_decay);
}

inline void sgd_step(BackboneSnapshot& bb, const AdapterGrads& grads, double lr, double weight_decay) {
    require_dims(grads.size() == bb.n_layers(), "sgd_step: layer count mismatch");
    for (std::size_t l = 0; l < grads.size(); ++l) {
        sgd_step(bb.layers[l].adapter.down, grads[l].down, lr, weight_decay);
        sgd_step(bb.layers[l].adapter.up, grads[l].up, lr, weight_decay);
    }
}

}  // namespace ekpc

#endif  // EKPC_MODEL_HPP
