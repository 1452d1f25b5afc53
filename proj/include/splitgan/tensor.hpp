#pragma once
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "splitgan/errors.hpp"

namespace splitgan {

// Dense row-major float tensor.  First dimension is always the batch.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), 0.0f);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    int64_t numel() const { return numel_of(shape); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t row_size() const { return rows() == 0 ? 0 : numel() / rows(); }

    float* row(int r) { return data.data() + size_t(r) * row_size(); }
    const float* row(int r) const { return data.data() + size_t(r) * row_size(); }

    // per-sample shape (batch dimension dropped)
    std::vector<int> sample_shape() const {
        return shape.empty() ? std::vector<int>{}
                             : std::vector<int>(shape.begin() + 1, shape.end());
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline bool same_shape(const std::vector<int>& a, const std::vector<int>& b) {
    return a == b;
}

// Stack tensors along the batch dimension (shared per-sample shape required).
inline Tensor concat_rows(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) return Tensor();
    std::vector<int> sample = parts[0]->sample_shape();
    int total = 0;
    for (const Tensor* t : parts) {
        if (t->sample_shape() != sample)
            throw InvariantError("concat_rows: per-sample shape mismatch " +
                                 shape_str(t->shape));
        total += t->rows();
    }
    std::vector<int> out_shape;
    out_shape.push_back(total);
    out_shape.insert(out_shape.end(), sample.begin(), sample.end());
    Tensor out(out_shape);
    int64_t rs = out.row_size();
    int at = 0;
    for (const Tensor* t : parts) {
        std::copy(t->data.begin(), t->data.end(), out.data.begin() + at * rs);
        at += t->rows();
    }
    return out;
}

inline Tensor slice_rows(const Tensor& t, int start, int count) {
    if (start < 0 || count < 0 || start + count > t.rows())
        throw InvariantError("slice_rows: range out of bounds");
    std::vector<int> s = t.shape;
    s[0] = count;
    Tensor out(s);
    int64_t rs = t.row_size();
    std::copy(t.data.begin() + start * rs, t.data.begin() + (start + count) * rs,
              out.data.begin());
    return out;
}

inline Tensor reshape(const Tensor& t, std::vector<int> new_shape) {
    if (Tensor::numel_of(new_shape) != t.numel())
        throw InvariantError("reshape: element count mismatch " + shape_str(t.shape) +
                             " -> " + shape_str(new_shape));
    Tensor out = t;
    out.shape = std::move(new_shape);
    return out;
}

}  // namespace splitgan
