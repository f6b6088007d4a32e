#ifndef EKPC_DATA_HPP
#define EKPC_DATA_HPP

#include <cstddef>
#include <map>
#include <vector>

#include "ekpc/numerics.hpp"

namespace ekpc {

// d_t x d tokens of one sample; row 0 is the CLS token.
using TokenMatrix = Matrix;

struct LabeledSet {
    std::vector<TokenMatrix> inputs;
    std::vector<int> labels;

    [[nodiscard]] std::size_t size() const noexcept { return inputs.size(); }
    [[nodiscard]] bool empty() const noexcept { return inputs.empty(); }

    void push_back(TokenMatrix x, int label) {
        inputs.push_back(std::move(x));
        labels.push_back(label);
    }
};

// Features with class labels (replay sets, extracted features).
struct LabeledFeatures {
    Matrix features;  // n x d
    std::vector<int> labels;
};

// Row indices grouped by label, in ascending label order.
inline std::map<int, std::vector<std::size_t>> group_by_label(const std::vector<int>& labels) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    return groups;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

}  // namespace ekpc

#endif  // EKPC_DATA_HPP
