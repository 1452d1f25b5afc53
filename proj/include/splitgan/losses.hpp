#pragma once
#include <cmath>

#include "splitgan/tensor.hpp"

namespace splitgan {

constexpr double kProbEps = 1e-7;

// mean binary cross-entropy of sigmoid outputs against a constant target
inline double bce_loss(const Tensor& p, double target) {
    double acc = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        double v = std::min(1.0 - kProbEps, std::max(double(p.data[i]), kProbEps));
        acc += -(target * std::log(v) + (1.0 - target) * std::log(1.0 - v));
    }
    return acc / double(p.numel());
}

// d(mean BCE)/dp
inline Tensor bce_grad(const Tensor& p, double target) {
    Tensor g(p.shape);
    double inv_n = 1.0 / double(p.numel());
    for (int64_t i = 0; i < p.numel(); ++i) {
        double v = std::min(1.0 - kProbEps, std::max(double(p.data[i]), kProbEps));
        g.data[i] = float((-(target / v) + (1.0 - target) / (1.0 - v)) * inv_n);
    }
    return g;
}

// saturating generator objective: minimize log(1 - D(G(z)))
inline double saturating_loss(const Tensor& p) {
    double acc = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        double v = std::min(1.0 - kProbEps, std::max(double(p.data[i]), kProbEps));
        acc += std::log(1.0 - v);
    }
    return acc / double(p.numel());
}

inline Tensor saturating_grad(const Tensor& p) {
    Tensor g(p.shape);
    double inv_n = 1.0 / double(p.numel());
    for (int64_t i = 0; i < p.numel(); ++i) {
        double v = std::min(1.0 - kProbEps, std::max(double(p.data[i]), kProbEps));
        g.data[i] = float(-inv_n / (1.0 - v));
    }
    return g;
}

}  // namespace splitgan
