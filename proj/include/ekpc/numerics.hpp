#ifndef EKPC_NUMERICS_HPP
#define EKPC_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ekpc/error.hpp"

namespace ekpc {

using Vector = std::vector<double>;

// Dense row-major f64 matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length " + std::to_string(data_.size()) + " != " +
                                 std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    // Nested-list construction, used mostly by tests: Matrix::from_rows({{1, 2}, {3, 4}}).
    static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.front().size();
        Matrix m(r, c);
        for (std::size_t i = 0; i < r; ++i) {
            if (rows[i].size() != c) throw DimensionError("ragged row list");
            std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
        }
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::span<double> flat() noexcept { return data_; }
    [[nodiscard]] std::span<const double> flat() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

    [[nodiscard]] bool same_shape(const Matrix& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    [[nodiscard]] Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    void require_same_shape(const Matrix& o, const char* op) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string("shape mismatch in ") + op + ": " + std::to_string(rows_) + "x" +
                                 std::to_string(cols_) + " vs " + std::to_string(o.rows_) + "x" +
                                 std::to_string(o.cols_));
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_dims(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require_dims(a.cols() == b.rows(), "matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                                           std::to_string(b.rows()));
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ci = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto bk = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

// C = A * B^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    require_dims(a.cols() == b.cols(), "matmul_bt: inner dimensions");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

// C += A^T * B
inline void add_matmul_at(const Matrix& a, const Matrix& b, Matrix& c) {
    require_dims(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(),
                 "add_matmul_at: shape mismatch");
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto ak = a.row(k);
        auto bk = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            auto ci = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
        }
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    require_dims(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Cosine similarity, or nullopt when either vector has zero norm.
inline std::optional<double> try_cosine_similarity(std::span<const double> a, std::span<const double> b) {
    require_dims(a.size() == b.size(), "cosine_similarity: length mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    auto c = try_cosine_similarity(a, b);
    if (!c) throw DegenerateInputError("cosine_similarity: zero-norm vector");
    return *c;
}

// Counter-based generator: draw n of stream `key` is mix(key + n * gamma) (SplitMix64 finalizer).
// Sub-streams derived with derive() never share keys with their parent.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) noexcept : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

    [[nodiscard]] SeededRng derive(std::uint64_t stream) const noexcept {
        SeededRng child(0);
        child.key_ = mix(key_ ^ mix(stream + 0x3c6ef372fe94f82bULL));
        return child;
    }

    std::uint64_t next_u64() noexcept { return mix(key_ + (counter_++) * kGamma); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept {
        // Lemire's multiply-shift; the tiny bias is irrelevant at our n.
        __extension__ using u128 = unsigned __int128;
        return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <class T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// n x d samples from N(mean, diag(var)).
inline Matrix sample_diag_gaussian(std::span<const double> mean, std::span<const double> var, std::size_t n,
                                   SeededRng& rng) {
    require_dims(mean.size() == var.size(), "sample_diag_gaussian: mean/var length mismatch");
    for (std::size_t k = 0; k < var.size(); ++k) {
        if (!(var[k] >= 0.0)) {
            throw PreconditionError("sample_diag_gaussian: negative variance at channel " + std::to_string(k));
        }
    }
    const std::size_t d = mean.size();
    Vector sd(d);
    for (std::size_t k = 0; k < d; ++k) sd[k] = std::sqrt(var[k]);
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = out.row(i);
        for (std::size_t k = 0; k < d; ++k) r[k] = sd[k] == 0.0 ? mean[k] : mean[k] + sd[k] * rng.normal();
    }
    return out;
}

// Central-difference gradient of a scalar function. f is called with a mutable copy of x.
template <class F>
Vector finite_diff_gradient(F&& f, std::span<const double> x, double h) {
    if (!(h > 0.0)) throw PreconditionError("finite_diff_gradient: step must be positive");
    Vector probe(x.begin(), x.end());
    Vector grad(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + h;
        const double fp = f(std::span<const double>(probe));
        probe[k] = orig - h;
        const double fm = f(std::span<const double>(probe));
        probe[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NonFiniteError("finite_diff_gradient: non-finite function value", k);
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor), the comparison used by every gradient check.
// floor = max(abs_floor, 1e-3 * max_j |a_j|) so near-zero components of a large gradient are
// judged against the gradient's scale rather than against themselves.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double abs_floor = 1e-8) {
    require_dims(a.size() == b.size(), "max_relative_error: length mismatch");
    double scale = 0.0;
    for (double v : a) scale = std::max(scale, std::abs(v));
    const double floor = std::max(abs_floor, 1e-3 * scale);
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double denom = std::max({std::abs(a[k]), std::abs(b[k]), floor});
        worst = std::max(worst, std::abs(a[k] - b[k]) / denom);
    }
    return worst;
}

}  // namespace ekpc

#endif  // EKPC_NUMERICS_HPP
