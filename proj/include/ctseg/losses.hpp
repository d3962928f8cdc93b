#pragma once

#include <array>
#include <cmath>

#include "ctseg/tensor.hpp"

// Training objective pieces. Loss values and their gradients are computed
// with double accumulation regardless of the tensor scalar type, so the
// recorded curves and the total = sup + lambda*cons identity hold to
// round-off even in float training runs.
namespace ctseg::losses {

inline constexpr int kScales = 5;
inline constexpr double kDiceEps = 1e-5;

struct LossBreakdown {
    double supervised = 0.0;
    double consistency = 0.0;
    double lambda = 0.0;
    double total = 0.0;
    std::array<double, kScales> per_scale_supervised{};
    std::array<double, kScales> per_scale_consistency{};
};

// Soft dice: 1 - (2*sum(P*G) + eps) / (sum(P) + sum(G) + eps).
template <typename T>
double dice_loss(const Tensor<T>& p, const Tensor<T>& g, double eps = kDiceEps) {
    check_same_shape(p, g, "dice_loss");
    double inter = 0.0, sp = 0.0, sg = 0.0;
    for (size_t i = 0; i < p.numel(); ++i) {
        inter += double(p[i]) * double(g[i]);
        sp += double(p[i]);
        sg += double(g[i]);
    }
    return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

// d(dice_loss)/dP scaled by `scale`, accumulated into `grad`.
template <typename T>
void dice_loss_grad(const Tensor<T>& p, const Tensor<T>& g, double scale, Tensor<T>& grad,
                    double eps = kDiceEps) {
    check_same_shape(p, g, "dice_loss_grad");
    check_same_shape(p, grad, "dice_loss_grad");
    double inter = 0.0, sp = 0.0, sg = 0.0;
    for (size_t i = 0; i < p.numel(); ++i) {
        inter += double(p[i]) * double(g[i]);
        sp += double(p[i]);
        sg += double(g[i]);
    }
    const double num = 2.0 * inter + eps;
    const double den = sp + sg + eps;
    const double inv_den2 = 1.0 / (den * den);
    for (size_t i = 0; i < p.numel(); ++i) {
        const double d = -(2.0 * double(g[i]) * den - num) * inv_den2;
        grad[i] += T(scale * d);
    }
}

template <typename T>
double mse_loss(const Tensor<T>& s, const Tensor<T>& t) {
    check_same_shape(s, t, "mse_loss");
    double acc = 0.0;
    for (size_t i = 0; i < s.numel(); ++i) {
        const double d = double(s[i]) - double(t[i]);
        acc += d * d;
    }
    return acc / double(s.numel());
}

// d(mse)/dS scaled by `scale`, accumulated into `grad`. The other side is a
// constant target: consistency gradients flow into the student only.
template <typename T>
void mse_loss_grad(const Tensor<T>& s, const Tensor<T>& t, double scale, Tensor<T>& grad) {
    check_same_shape(s, t, "mse_loss_grad");
    const double k = 2.0 * scale / double(s.numel());
    for (size_t i = 0; i < s.numel(); ++i)
        grad[i] += T(k * (double(s[i]) - double(t[i])));
}

struct MultiScaleLoss {
    double total = 0.0;
    std::array<double, kScales> per_scale{};
};

template <typename T>
using ScaleGrids = std::array<const Tensor<T>*, kScales>;

// Sum of per-scale dice losses against the down-sampled targets.
template <typename T>
MultiScaleLoss supervised_loss(const ScaleGrids<T>& preds, const ScaleGrids<T>& targets) {
    MultiScaleLoss r;
    for (int k = 0; k < kScales; ++k) {
        r.per_scale[size_t(k)] = dice_loss(*preds[size_t(k)], *targets[size_t(k)]);
        r.total += r.per_scale[size_t(k)];
    }
    return r;
}

// Sum of per-scale MSE between student and teacher predictions.
template <typename T>
MultiScaleLoss consistency_loss(const ScaleGrids<T>& student, const ScaleGrids<T>& teacher) {
    MultiScaleLoss r;
    for (int k = 0; k < kScales; ++k) {
        r.per_scale[size_t(k)] = mse_loss(*student[size_t(k)], *teacher[size_t(k)]);
        r.total += r.per_scale[size_t(k)];
    }
    return r;
}

// Gaussian warm-up: lambda_max * exp(-5 * (1 - i/i_max)^2), monotone
// non-decreasing in i and equal to lambda_max at i = i_max.
inline double ramp_weight(long long i, long long i_max, double lambda_max) {
    if (i_max <= 0) throw DomainError("ramp_weight: i_max must be positive");
    if (i < 0 || i > i_max)
        throw DomainError("ramp_weight: iteration " + std::to_string(i) + " outside [0, " +
                          std::to_string(i_max) + "]");
    const double u = 1.0 - double(i) / double(i_max);
    return lambda_max * std::exp(-5.0 * u * u);
}

inline double total_loss(double sup, double cons, double lambda) {
    return sup + lambda * cons;
}

}  // namespace ctseg::losses
