#ifndef EKPC_PERSIST_HPP
#define EKPC_PERSIST_HPP

// Binary stores for checkpoints (EKPC), prototypes (EKPP) and importance state (EKPI).
// Layouts are documented in docs/formats.md.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ekpc/error.hpp"
#include "ekpc/io.hpp"
#include "ekpc/ipr.hpp"
#include "ekpc/model.hpp"
#include "ekpc/trainer.hpp"
#include "ekpc/tsdc.hpp"

namespace ekpc {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kPrototypeVersion = 1;
inline constexpr std::uint32_t kImportanceVersion = 1;

struct Checkpoint {
    BackboneSnapshot backbone;
    CosineClassifier cosine;
    std::vector<int> cosine_class;
    std::vector<int> cosine_task;
    LinearHead unified;

    static Checkpoint from_state(const ContinualState& s) {
        return {s.current, s.cosine, s.cosine_class, s.cosine_task, s.unified};
    }

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        return a.backbone == b.backbone && a.cosine.weights == b.cosine.weights && a.cosine.scale == b.cosine.scale &&
               a.cosine.margin == b.cosine.margin && a.cosine_class == b.cosine_class &&
               a.cosine_task == b.cosine_task && a.unified == b.unified;
    }
};

namespace detail {

inline std::uint32_t to_u32(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw Error(std::string(what) + " does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

inline std::uint32_t encode_task(int t) { return t < 0 ? 0xFFFFFFFFu : static_cast<std::uint32_t>(t); }
inline int decode_task(std::uint32_t t) { return t == 0xFFFFFFFFu ? -1 : static_cast<int>(t); }

inline Matrix read_matrix(io::Reader& r, std::size_t rows, std::size_t cols, const char* field) {
    Matrix m(rows, cols);
    r.f64s(m.flat(), field);
    return m;
}

inline Vector read_vector(io::Reader& r, std::size_t n, const char* field) {
    Vector v(n);
    r.f64s(v, field);
    return v;
}

inline void require_finite(const Matrix& m, const char* what, std::size_t offset) {
    if (!m.all_finite()) throw ParseError(std::string("non-finite values in ") + what, offset);
}

inline std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), {}};
}

inline void dump(const std::string& path, const std::vector<char>& bytes) {
    io::Writer w;
    w.bytes({bytes.data(), bytes.size()});
    w.save(path);
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    const BackboneSnapshot& bb = ck.backbone;
    bb.validate();
    io::Writer w;
    w.bytes("EKPC");
    w.u32(kCheckpointVersion);
    w.u32(detail::to_u32(bb.dim, "d"));
    w.u32(detail::to_u32(bb.hidden, "d_h"));
    w.u32(detail::to_u32(bb.tokens, "d_t"));
    w.u32(detail::to_u32(bb.n_layers(), "N_L"));
    for (const auto& L : bb.layers) {
        w.f64s(L.block.weight.flat());
        w.f64s(L.adapter.down.flat());
        w.f64s(L.adapter.up.flat());
    }
    w.f64(ck.cosine.scale);
    w.f64(ck.cosine.margin);
    w.u32(detail::to_u32(ck.cosine.n_classes(), "classifier rows"));
    for (std::size_t r = 0; r < ck.cosine.n_classes(); ++r) {
        w.u32(static_cast<std::uint32_t>(ck.cosine_class.at(r)));
        w.u32(detail::encode_task(ck.cosine_task.at(r)));
        w.f64s(ck.cosine.weights.row(r));
    }
    w.u32(detail::to_u32(ck.unified.n_classes(), "unified head rows"));
    for (std::size_t r = 0; r < ck.unified.n_classes(); ++r) {
        w.u32(static_cast<std::uint32_t>(ck.unified.class_ids[r]));
        w.f64(ck.unified.bias[r]);
        w.f64s(ck.unified.weights.row(r));
    }
    w.u32(bb.placement == AdapterPlacement::parallel ? 0u : 1u);
    w.u32(bb.feature_offset.empty() ? 0u : 1u);
    if (!bb.feature_offset.empty()) w.f64s(bb.feature_offset);
    return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("EKPC", "EKPC checkpoint");
    const std::size_t v_at = r.offset();
    if (const auto v = r.u32("version"); v != kCheckpointVersion) {
        throw ParseError("unsupported checkpoint version " + std::to_string(v), v_at);
    }
    Checkpoint ck;
    BackboneSnapshot& bb = ck.backbone;
    bb.dim = r.u32("d");
    bb.hidden = r.u32("d_h");
    bb.tokens = r.u32("d_t");
    const std::size_t n_layers = r.u32("N_L");
    if (bb.dim == 0 || bb.hidden == 0 || bb.hidden >= bb.dim) throw ParseError("invalid d / d_h in checkpoint header", r.offset());
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::size_t at = r.offset();
        Layer L;
        L.block.weight = detail::read_matrix(r, bb.dim, bb.dim, "W_block");
        L.adapter.down = detail::read_matrix(r, bb.dim, bb.hidden, "W_down");
        L.adapter.up = detail::read_matrix(r, bb.hidden, bb.dim, "W_up");
        detail::require_finite(L.block.weight, "W_block", at);
        detail::require_finite(L.adapter.down, "W_down", at);
        detail::require_finite(L.adapter.up, "W_up", at);
        bb.layers.push_back(std::move(L));
    }
    ck.cosine.scale = r.f64("classifier scale");
    ck.cosine.margin = r.f64("classifier margin");
    const std::size_t rows = r.u32("classifier rows");
    ck.cosine.weights = Matrix(rows, bb.dim);
    for (std::size_t i = 0; i < rows; ++i) {
        ck.cosine_class.push_back(static_cast<int>(r.u32("class id")));
        ck.cosine_task.push_back(detail::decode_task(r.u32("task index")));
        r.f64s(ck.cosine.weights.row(i), "classifier row");
    }
    const std::size_t urows = r.u32("unified head rows");
    ck.unified.weights = Matrix(urows, bb.dim);
    for (std::size_t i = 0; i < urows; ++i) {
        ck.unified.class_ids.push_back(static_cast<int>(r.u32("class id")));
        ck.unified.bias.push_back(r.f64("bias"));
        r.f64s(ck.unified.weights.row(i), "unified head row");
    }
    const std::size_t p_at = r.offset();
    const auto placement = r.u32("placement");
    if (placement > 1) throw ParseError("unknown adapter placement " + std::to_string(placement), p_at);
    bb.placement = placement == 0 ? AdapterPlacement::parallel : AdapterPlacement::serial;
    if (r.u32("feature offset flag") != 0) bb.feature_offset = detail::read_vector(r, bb.dim, "feature offset");
    r.expect_end("EKPC checkpoint");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { detail::dump(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::slurp(path)); }

inline std::vector<char> encode_prototypes(const std::vector<Prototype>& protos, std::size_t d) {
    io::Writer w;
    w.bytes("EKPP");
    w.u32(kPrototypeVersion);
    w.u32(detail::to_u32(d, "d"));
    w.u32(detail::to_u32(protos.size(), "prototype count"));
    for (const auto& p : protos) {
        require_dims(p.mean.size() == d && p.stddev.size() == d && p.cov.size() == d, "encode_prototypes: dimension");
        w.u32(static_cast<std::uint32_t>(p.class_id));
        w.u32(detail::to_u32(p.count, "n_c"));
        w.u32(detail::encode_task(p.origin_task));
        w.f64s(p.mean);
        w.f64s(p.stddev);
        w.f64s(p.cov);
    }
    return w.buffer();
}

inline std::vector<Prototype> decode_prototypes(std::vector<char> bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("EKPP", "EKPP prototype store");
    const std::size_t v_at = r.offset();
    if (const auto v = r.u32("version"); v != kPrototypeVersion) {
        throw ParseError("unsupported prototype store version " + std::to_string(v), v_at);
    }
    const std::size_t d = r.u32("d");
    const std::size_t n = r.u32("prototype count");
    std::vector<Prototype> out;
    for (std::size_t i = 0; i < n; ++i) {
        Prototype p;
        p.class_id = static_cast<int>(r.u32("class id"));
        p.count = r.u32("n_c");
        p.origin_task = detail::decode_task(r.u32("origin task"));
        const std::size_t at = r.offset();
        p.mean = detail::read_vector(r, d, "f_c");
        p.stddev = detail::read_vector(r, d, "sigma_c");
        p.cov = detail::read_vector(r, d, "Sigma_c");
        for (std::size_t k = 0; k < d; ++k) {
            if (!(p.stddev[k] >= 0.0) || !(p.cov[k] >= 0.0)) throw ParseError("negative prototype spread", at);
        }
        out.push_back(std::move(p));
    }
    r.expect_end("EKPP prototype store");
    return out;
}

inline std::vector<char> encode_importance(const ImportanceState& s) {
    io::Writer w;
    const std::size_t d = s.global.size();
    const std::size_t dh = s.layers.empty() ? 0 : s.layers.front().local_down.size();
    w.bytes("EKPI");
    w.u32(kImportanceVersion);
    w.u32(detail::to_u32(d, "d"));
    w.u32(detail::to_u32(dh, "d_h"));
    w.u32(detail::to_u32(s.n_layers(), "N_L"));
    w.u32(detail::encode_task(s.last_task));
    w.f64s(s.global);
    for (const auto& L : s.layers) {
        require_dims(L.local_down.size() == dh && L.local_up.size() == dh, "encode_importance: d_h");
        w.f64s(L.local_down);
        w.f64s(L.local_up);
        w.f64s(L.fused.down.flat());
        w.f64s(L.fused.up.flat());
    }
    return w.buffer();
}

inline ImportanceState decode_importance(std::vector<char> bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("EKPI", "EKPI importance store");
    const std::size_t v_at = r.offset();
    if (const auto v = r.u32("version"); v != kImportanceVersion) {
        throw ParseError("unsupported importance store version " + std::to_string(v), v_at);
    }
    const std::size_t d = r.u32("d");
    const std::size_t dh = r.u32("d_h");
    const std::size_t nl = r.u32("N_L");
    ImportanceState s;
    s.last_task = detail::decode_task(r.u32("last task"));
    s.global = detail::read_vector(r, d, "G");
    for (std::size_t l = 0; l < nl; ++l) {
        LayerImportance L;
        L.local_down = detail::read_vector(r, dh, "L_dm");
        L.local_up = detail::read_vector(r, dh, "L_um");
        L.fused.down = detail::read_matrix(r, d, dh, "I_dm");
        L.fused.up = detail::read_matrix(r, d, dh, "I_um");
        s.layers.push_back(std::move(L));
    }
    r.expect_end("EKPI importance store");
    return s;
}

inline void save_prototypes(const std::string& path, const std::vector<Prototype>& p, std::size_t d) {
    detail::dump(path, encode_prototypes(p, d));
}
inline std::vector<Prototype> load_prototypes(const std::string& path) { return decode_prototypes(detail::slurp(path)); }

inline void save_importance(const std::string& path, const ImportanceState& s) { detail::dump(path, encode_importance(s)); }
inline ImportanceState load_importance(const std::string& path) { return decode_importance(detail::slurp(path)); }

}  // namespace ekpc

#endif  // EKPC_PERSIST_HPP
