#ifndef EKPC_TESTS_SUPPORT_HPP
#define EKPC_TESTS_SUPPORT_HPP

// Shared fixtures and independent oracles for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include <unistd.h>

#include "ekpc/bench.hpp"
#include "ekpc/ipr.hpp"
#include "ekpc/model.hpp"
#include "ekpc/trainer.hpp"
#include "ekpc/tsdc.hpp"

namespace ekpc::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.flat()) v = scale * rng.normal();
    return m;
}

// Backbone with non-zero W_up so every adapter path carries gradient.
inline BackboneSnapshot random_backbone(std::size_t d, std::size_t d_h, std::size_t d_t, std::size_t n_layers,
                                        SeededRng& rng, AdapterPlacement placement = AdapterPlacement::parallel) {
    BackboneSnapshot bb = make_backbone(d, d_h, d_t, n_layers, rng, placement);
    SeededRng up = rng.derive(7);
    for (auto& L : bb.layers) {
        for (double& v : L.adapter.down.flat()) v = 0.6 * up.normal();
        for (double& v : L.adapter.up.flat()) v = 0.4 * up.normal();
    }
    return bb;
}

inline std::vector<TokenMatrix> random_inputs(std::size_t n, std::size_t d_t, std::size_t d, SeededRng& rng) {
    std::vector<TokenMatrix> xs;
    for (std::size_t i = 0; i < n; ++i) xs.push_back(random_matrix(d_t, d, rng));
    return xs;
}

inline ImportanceState random_importance(std::size_t d, std::size_t d_h, std::size_t n_layers, SeededRng& rng) {
    ImportanceState s = ImportanceState::zeros(d, d_h, n_layers);
    for (auto& L : s.layers) {
        for (double& v : L.fused.down.flat()) v = rng.uniform(0.0, 2.0);
        for (double& v : L.fused.up.flat()) v = rng.uniform(0.0, 2.0);
    }
    return s;
}

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(ranks(a), ranks(b));
}

// ---- straight-line importance oracle --------------------------------------------------------
//
// Recomputes one importance pass with plain loops and no engine helpers beyond data access.

struct OracleImportance {
    std::vector<double> g;
    std::vector<std::vector<double>> l_dm, l_um;
    std::vector<std::vector<std::vector<double>>> i_dm, i_um;  // [layer][a][b]
};

inline OracleImportance oracle_importance_pass(const LabeledSet& data, const BackboneSnapshot& bb,
                                               const OracleImportance& prev, double eta1, double eta2, double eps) {
    const std::size_t d = bb.dim, dh = bb.hidden, nl = bb.layers.size(), n = data.size();
    std::vector<std::vector<double>> feats(n, std::vector<double>(d));
    std::vector<std::vector<std::vector<double>>> u(nl, std::vector<std::vector<double>>(n, std::vector<double>(dh)));
    std::vector<std::vector<std::vector<double>>> uh = u;
    for (std::size_t i = 0; i < n; ++i) {
        const Matrix& x0 = data.inputs[i];
        const std::size_t T = x0.rows();
        std::vector<std::vector<double>> x(T, std::vector<double>(d));
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < d; ++k) x[t][k] = x0(t, k);
        for (std::size_t l = 0; l < nl; ++l) {
            const auto& W = bb.layers[l].block.weight;
            const auto& D = bb.layers[l].adapter.down;
            const auto& U = bb.layers[l].adapter.up;
            std::vector<std::vector<double>> h(T, std::vector<double>(d, 0.0)), ut(T, std::vector<double>(dh, 0.0));
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t k = 0; k < d; ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < d; ++j) s += x[t][j] * W(j, k);
                    h[t][k] = std::tanh(s);
                }
                const auto& ain = bb.placement == AdapterPlacement::parallel ? x[t] : h[t];
                for (std::size_t b = 0; b < dh; ++b) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < d; ++j) s += ain[j] * D(j, b);
                    ut[t][b] = s > 0.0 ? s : 0.0;
                }
            }
            // router
            double n0 = 0.0;
            for (std::size_t b = 0; b < dh; ++b) n0 += ut[0][b] * ut[0][b];
            n0 = std::sqrt(n0);
            for (std::size_t t = 0; t < T; ++t) {
                double nt = 0.0, p = 0.0;
                for (std::size_t b = 0; b < dh; ++b) {
                    nt += ut[t][b] * ut[t][b];
                    p += ut[t][b] * ut[0][b];
                }
                nt = std::sqrt(nt);
                const double w = (n0 > 0.0 && nt > 0.0) ? p / (n0 * nt) : 0.0;
                for (std::size_t b = 0; b < dh; ++b) u[l][i][b] += w * ut[t][b];
            }
            for (std::size_t b = 0; b < dh; ++b) {
                double rs = 0.0;
                for (std::size_t k = 0; k < d; ++k) rs += std::abs(U(b, k));
                uh[l][i][b] = u[l][i][b] * rs;
            }
            std::vector<std::vector<double>> next = h;
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t k = 0; k < d; ++k)
                    for (std::size_t b = 0; b < dh; ++b) next[t][k] += ut[t][b] * U(b, k);
            x = next;
        }
        feats[i] = x[0];
    }

    OracleImportance out = prev;
    std::vector<int> classes(data.labels.begin(), data.labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    std::vector<double> inc(d, 0.0);
    for (int c : classes) {
        std::vector<double> mean(d, 0.0), var(d, 0.0);
        double cnt = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (data.labels[i] != c) continue;
            cnt += 1.0;
            for (std::size_t k = 0; k < d; ++k) mean[k] += feats[i][k];
        }
        for (double& m : mean) m /= cnt;
        for (std::size_t i = 0; i < n; ++i) {
            if (data.labels[i] != c) continue;
            for (std::size_t k = 0; k < d; ++k) var[k] += (feats[i][k] - mean[k]) * (feats[i][k] - mean[k]);
        }
        for (std::size_t k = 0; k < d; ++k) inc[k] += std::abs(mean[k]) / (var[k] / cnt + eps);
    }
    for (std::size_t k = 0; k < d; ++k) out.g[k] += inc[k] / static_cast<double>(classes.size());
    for (std::size_t l = 0; l < nl; ++l) {
        for (std::size_t b = 0; b < dh; ++b) {
            double su = 0.0, suh = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                su += u[l][i][b];
                suh += uh[l][i][b];
            }
            out.l_dm[l][b] += su / static_cast<double>(n);
            out.l_um[l][b] += suh / static_cast<double>(n);
        }
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < dh; ++b) {
                out.i_dm[l][a][b] = eta2 * out.g[a] * out.l_dm[l][b];
                out.i_um[l][a][b] = eta1 * out.g[a] * out.l_um[l][b];
            }
        }
    }
    return out;
}

inline OracleImportance oracle_zeros(std::size_t d, std::size_t dh, std::size_t nl) {
    OracleImportance o;
    o.g.assign(d, 0.0);
    o.l_dm.assign(nl, std::vector<double>(dh, 0.0));
    o.l_um = o.l_dm;
    o.i_dm.assign(nl, std::vector<std::vector<double>>(d, std::vector<double>(dh, 0.0)));
    o.i_um = o.i_dm;
    return o;
}

// Largest absolute difference between the engine's state and the oracle.
inline double oracle_distance(const ImportanceState& s, const OracleImportance& o) {
    double worst = 0.0;
    auto upd = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    for (std::size_t k = 0; k < o.g.size(); ++k) upd(s.global[k], o.g[k]);
    for (std::size_t l = 0; l < o.l_dm.size(); ++l) {
        for (std::size_t b = 0; b < o.l_dm[l].size(); ++b) {
            upd(s.layers[l].local_down[b], o.l_dm[l][b]);
            upd(s.layers[l].local_up[b], o.l_um[l][b]);
        }
        for (std::size_t a = 0; a < o.i_dm[l].size(); ++a) {
            for (std::size_t b = 0; b < o.i_dm[l][a].size(); ++b) {
                upd(s.layers[l].fused.down(a, b), o.i_dm[l][a][b]);
                upd(s.layers[l].fused.up(a, b), o.i_um[l][a][b]);
            }
        }
    }
    return worst;
}

// Relative scale of the oracle state, for turning the absolute distance into a relative one.
inline double oracle_scale(const OracleImportance& o) {
    double m = 0.0;
    for (double v : o.g) m = std::max(m, std::abs(v));
    for (const auto& layer : o.i_um)
        for (const auto& row : layer)
            for (double v : row) m = std::max(m, std::abs(v));
    return m;
}

// Largest |I(a,b) I(c,e) - I(a,e) I(c,b)| relative to max|I|^2; zero for rank <= 1.
inline double rank_one_defect(const Matrix& I) {
    double mx = 0.0;
    for (double v : I.flat()) mx = std::max(mx, std::abs(v));
    if (mx == 0.0) return 0.0;
    double worst = 0.0;
    for (std::size_t a = 0; a < I.rows(); ++a)
        for (std::size_t c = a + 1; c < I.rows(); ++c)
            for (std::size_t b = 0; b < I.cols(); ++b)
                for (std::size_t e = b + 1; e < I.cols(); ++e)
                    worst = std::max(worst, std::abs(I(a, b) * I(c, e) - I(a, e) * I(c, b)));
    return worst / (mx * mx);
}

// ---- sensitivity experiment ------------------------------------------------------------------

struct SensitivityResult {
    std::vector<double> predicted;  // mean weighted routed unit per hidden unit
    std::vector<double> measured;   // mean |delta x_L| per hidden unit
};

// Perturbs each hidden unit's outgoing W_up row at `layer` by noise of norm `radius` and measures
// the mean Frobenius change of the final token matrix over the data.
inline SensitivityResult sensitivity_experiment(const BackboneSnapshot& bb, const std::vector<TokenMatrix>& data,
                                                std::size_t layer, double radius, std::size_t draws,
                                                SeededRng& rng) {
    SensitivityResult r;
    r.predicted.assign(bb.hidden, 0.0);
    r.measured.assign(bb.hidden, 0.0);
    std::vector<Matrix> base;
    for (const auto& x : data) {
        const ForwardTrace tr = backbone_forward(x, bb, TraceRows::all);
        const Vector u = router_weighted_unit(tr.u_tilde[layer]);
        const Vector uh = weighted_up_unit(u, bb.layers[layer].adapter.up);
        for (std::size_t h = 0; h < bb.hidden; ++h) r.predicted[h] += uh[h] / static_cast<double>(data.size());
        base.push_back(tr.output);
    }
    for (std::size_t h = 0; h < bb.hidden; ++h) {
        for (std::size_t k = 0; k < draws; ++k) {
            BackboneSnapshot p = bb;
            auto row = p.layers[layer].adapter.up.row(h);
            Vector noise(row.size());
            for (double& v : noise) v = rng.normal();
            const double nn = norm2(noise);
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += radius * noise[j] / nn;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const Matrix out = backbone_forward(data[i], p, TraceRows::all).output;
                double s = 0.0;
                for (std::size_t e = 0; e < out.size(); ++e) {
                    const double dv = out.flat()[e] - base[i].flat()[e];
                    s += dv * dv;
                }
                r.measured[h] += std::sqrt(s) / static_cast<double>(data.size() * draws);
            }
        }
    }
    return r;
}

// ---- filesystem ------------------------------------------------------------------------------

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ekpc_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const noexcept { return path_; }
    [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline std::string slurp_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

// FNV-1a 64 over a byte string.
inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace ekpc::testing

#endif  // EKPC_TESTS_SUPPORT_HPP
