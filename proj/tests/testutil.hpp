#pragma once

// Shared test helpers: independent reference implementations (kept free of
// the library's own compute paths) and a central finite-difference harness.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "absorbkit/rng.hpp"
#include "absorbkit/tensor.hpp"

namespace testutil {

// Brute-force triple-loop matmul, the oracle for the Eigen-backed kernels.
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      int m, int p, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < p; ++k)
            for (int j = 0; j < n; ++j)
                c[i * n + j] += a[i * p + k] * b[k * n + j];
    return c;
}

// Scalar softmax of one row, straight from the definition.
inline std::vector<double> softmax_ref(const std::vector<double>& x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> y(x.size());
    double denom = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        y[i] = std::isinf(x[i]) && x[i] < 0 ? 0.0 : std::exp(x[i] - mx);
        denom += y[i];
    }
    for (double& v : y) v /= denom;
    return y;
}

// Sort-based top-k index oracle: k largest, ties toward the lower index.
inline std::vector<int> topk_ref(const std::vector<double>& scores, int k) {
    std::vector<int> idx(scores.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(k)));
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline bool close(double a, double b, double tol) {
    if (std::isnan(a) || std::isnan(b)) return false;
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

inline bool rel_close(double a, double b, double rel_tol, double abs_tol = 1e-7) {
    const double diff = std::abs(a - b);
    if (diff <= abs_tol) return true;
    return diff <= rel_tol * std::max(std::abs(a), std::abs(b));
}

// Central finite differences against an analytic gradient.
//
// `loss_fn` must rebuild the forward pass from the current parameter values
// (no tape needed; it returns the scalar loss value). `param` is a leaf whose
// grad was filled by one backward() call beforehand.
struct GradCheckResult {
    double max_rel_err = 0.0;
    int worst_index = -1;
    bool ok(double tol) const { return max_rel_err <= tol; }
};

inline GradCheckResult grad_check(absorb::Tensor& param,
                                  const std::function<double()>& loss_fn,
                                  double h = 1e-5, double abs_floor = 1e-7) {
    GradCheckResult res;
    auto vals = param.values();
    auto grad = param.grad();
    for (size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + h;
        const double up = loss_fn();
        vals[i] = keep - h;
        const double down = loss_fn();
        vals[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = grad[i];
        const double diff = std::abs(numeric - analytic);
        double rel = 0.0;
        if (diff > abs_floor)
            rel = diff / std::max(std::abs(numeric), std::abs(analytic));
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = static_cast<int>(i);
        }
    }
    return res;
}

}  // namespace testutil
