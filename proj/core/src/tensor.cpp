#include "absorbkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

#include "op_common.hpp"

namespace absorb {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

using opdetail::make_out;
using opdetail::tracked;

int64_t leading_product(const Shape& s, size_t keep_last) {
    int64_t p = 1;
    for (size_t i = 0; i + keep_last < s.size(); ++i) p *= s[i];
    return p;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t p = 1;
    for (int e : s) p *= e;
    return p;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    for (int e : s)
        if (e <= 0) throw ShapeError("tensor extents must be positive: " + shape_str(s));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = s;
    impl->data.assign(static_cast<size_t>(shape_numel(s)), 0.0);
    if (requires_grad) {
        impl->requires_grad = true;
        impl->ensure_grad();
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& s, double v) {
    Tensor t = zeros(s);
    std::fill(t.impl()->data.begin(), t.impl()->data.end(), v);
    return t;
}

Tensor Tensor::from_vector(const Shape& s, std::vector<double> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size()))
        throw ShapeError("from_vector: " + shape_str(s) + " does not hold " +
                         std::to_string(v.size()) + " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = s;
    impl->data = std::move(v);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from_vector({1}, {v}); }

void Tensor::set_requires_grad(bool on) {
    if (!impl_->leaf) throw LifecycleError("requires_grad can only be toggled on leaf tensors");
    impl_->requires_grad = on;
    if (on) {
        impl_->ensure_grad();
    } else {
        impl_->grad.clear();
        impl_->grad.shrink_to_fit();
    }
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar: " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ShapeError("at: rank mismatch");
    int64_t flat = 0;
    size_t i = 0;
    for (int v : idx) {
        flat = flat * s[i] + v;
        ++i;
    }
    return impl_->data[static_cast<size_t>(flat)];
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor randn(const Shape& s, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = Tensor::zeros(s, requires_grad);
    for (double& v : t.values()) v = rng.gaussian() * stddev;
    return t;
}

// --- Tape -------------------------------------------------------------------

void Tape::record(std::shared_ptr<detail::TensorImpl> out, std::function<void()> back) {
    nodes_.push_back({std::move(out), std::move(back)});
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
    ++epoch_;
}

void Tape::backward(const Tensor& loss) {
    const auto& impl = loss.impl();
    if (!impl || impl->data.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got " +
                         (impl ? shape_str(impl->shape) : std::string("<null>")));
    if (consumed_) throw LifecycleError("backward: tape already consumed; call reset() first");
    if (impl->tape != this || impl->epoch != epoch_)
        throw LifecycleError("backward: loss was not produced on the current tape");
    consumed_ = true;

    impl->ensure_grad();
    impl->grad[0] = 1.0;

    // Reverse topological order is the recording order reversed. A node whose
    // output never received gradient contributes nothing and is skipped.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out->grad.empty()) continue;
        it->back();
    }
}

// --- matmul family ----------------------------------------------------------

namespace {

struct MatmulDims {
    int64_t batches;  // leading product of a
    int m, p, n;
    bool shared_b;  // b is 2-d and reused for every batch
};

MatmulDims matmul_dims(const char* op, const Tensor& a, const Tensor& b, bool b_transposed) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw ShapeError(std::string(op) + ": operands must have rank >= 2: " + shape_str(sa) +
                         " x " + shape_str(sb));
    MatmulDims d;
    d.m = sa[sa.size() - 2];
    d.p = sa[sa.size() - 1];
    const int b_rows = sb[sb.size() - 2];
    const int b_cols = sb[sb.size() - 1];
    d.n = b_transposed ? b_rows : b_cols;
    const int b_inner = b_transposed ? b_cols : b_rows;
    if (b_inner != d.p)
        throw ShapeError(std::string(op) + ": inner extents differ: " + shape_str(sa) + " x " +
                         shape_str(sb));
    d.batches = leading_product(sa, 2);
    d.shared_b = sb.size() == 2;
    if (!d.shared_b) {
        Shape lead_a(sa.begin(), sa.end() - 2);
        Shape lead_b(sb.begin(), sb.end() - 2);
        if (lead_a != lead_b)
            throw ShapeError(std::string(op) + ": batch dims differ: " + shape_str(sa) + " x " +
                             shape_str(sb));
    }
    return d;
}

Shape matmul_out_shape(const Tensor& a, int m, int n) {
    Shape out(a.shape().begin(), a.shape().end() - 2);
    out.push_back(m);
    out.push_back(n);
    return out;
}

}  // namespace

Tensor matmul(Tape* t, const Tensor& a, const Tensor& b) {
    const MatmulDims d = matmul_dims("matmul", a, b, false);
    const bool track = tracked(t, {&a, &b});
    Tensor out = make_out(t, matmul_out_shape(a, d.m, d.n), track);

    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.values().data();
    const int64_t sa = static_cast<int64_t>(d.m) * d.p;
    const int64_t sb = d.shared_b ? 0 : static_cast<int64_t>(d.p) * d.n;
    const int64_t sc = static_cast<int64_t>(d.m) * d.n;
    for (int64_t i = 0; i < d.batches; ++i) {
        MapConst A(pa + i * sa, d.m, d.p);
        MapConst B(pb + i * sb, d.p, d.n);
        MapMat C(pc + i * sc, d.m, d.n);
        C.noalias() = A * B;
    }

    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        t->record(oi, [ai, bi, oi, d, sa, sb, sc]() {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t i = 0; i < d.batches; ++i) {
                    MapConst G(g + i * sc, d.m, d.n);
                    MapConst B(bi->data.data() + i * sb, d.p, d.n);
                    MapMat GA(ai->grad.data() + i * sa, d.m, d.p);
                    GA.noalias() += G * B.transpose();
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < d.batches; ++i) {
                    MapConst G(g + i * sc, d.m, d.n);
                    MapConst A(ai->data.data() + i * sa, d.m, d.p);
                    MapMat GB(bi->grad.data() + i * sb, d.p, d.n);
                    GB.noalias() += A.transpose() * G;
                }
            }
        });
    }
    return out;
}

Tensor matmul_nt(Tape* t, const Tensor& a, const Tensor& b) {
    const MatmulDims d = matmul_dims("matmul_nt", a, b, true);
    const bool track = tracked(t, {&a, &b});
    Tensor out = make_out(t, matmul_out_shape(a, d.m, d.n), track);

    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.values().data();
    const int64_t sa = static_cast<int64_t>(d.m) * d.p;
    const int64_t sb = d.shared_b ? 0 : static_cast<int64_t>(d.n) * d.p;
    const int64_t sc = static_cast<int64_t>(d.m) * d.n;
    for (int64_t i = 0; i < d.batches; ++i) {
        MapConst A(pa + i * sa, d.m, d.p);
        MapConst B(pb + i * sb, d.n, d.p);
        MapMat C(pc + i * sc, d.m, d.n);
        C.noalias() = A * B.transpose();
    }

    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        t->record(oi, [ai, bi, oi, d, sa, sb, sc]() {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t i = 0; i < d.batches; ++i) {
                    MapConst G(g + i * sc, d.m, d.n);
                    MapConst B(bi->data.data() + i * sb, d.n, d.p);
                    MapMat GA(ai->grad.data() + i * sa, d.m, d.p);
                    GA.noalias() += G * B;
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < d.batches; ++i) {
                    MapConst G(g + i * sc, d.m, d.n);
                    MapConst A(ai->data.data() + i * sa, d.m, d.p);
                    MapMat GB(bi->grad.data() + i * sb, d.n, d.p);
                    GB.noalias() += G.transpose() * A;
                }
            }
        });
    }
    return out;
}

// --- elementwise ------------------------------------------------------------

Tensor add(Tape* t, const Tensor& a, const Tensor& b) {
    const int64_t na = a.numel();
    const int64_t nb = b.numel();
    const bool suffix = a.ndim() > b.ndim();
    if (suffix) {
        const Shape& sa = a.shape();
        const Shape& sb = b.shape();
        if (!std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
            throw ShapeError("add: " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
    } else {
        check_same_shape("add", a, b);
    }

    const bool track = tracked(t, {&a, &b});
    Tensor out = make_out(t, a.shape(), track);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.values().data();
    for (int64_t i = 0; i < na; ++i) po[i] = pa[i] + pb[i % nb];

    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        t->record(oi, [ai, bi, oi, na, nb]() {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t i = 0; i < na; ++i) ai->grad[i] += g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < na; ++i) bi->grad[i % nb] += g[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape* t, const Tensor& a, double c) {
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, a.shape(), track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi, c, n]() {
            ai->ensure_grad();
            for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

Tensor elementwise_mul(Tape* t, const Tensor& a, const Tensor& b) {
    check_same_shape("elementwise_mul", a, b);
    const bool track = tracked(t, {&a, &b});
    Tensor out = make_out(t, a.shape(), track);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.values().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (track) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        t->record(oi, [ai, bi, oi, n]() {
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor sigmoid(Tape* t, const Tensor& a) {
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, a.shape(), track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double x = pa[i];
        po[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi, n]() {
            ai->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double y = oi->data[i];
                ai->grad[i] += oi->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor gelu(Tape* t, const Tensor& a) {
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, a.shape(), track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    const int64_t n = a.numel();
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    for (int64_t i = 0; i < n; ++i) {
        const double x = pa[i];
        po[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi, n, inv_sqrt2]() {
            ai->ensure_grad();
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (int64_t i = 0; i < n; ++i) {
                const double x = ai->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// --- softmax / layernorm ------------------------------------------------------

Tensor softmax_rows(Tape* t, const Tensor& a) {
    const Shape& s = a.shape();
    if (s.empty()) throw ShapeError("softmax_rows: rank must be >= 1");
    const int width = s.back();
    const int64_t rows = leading_product(s, 1);

    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, s, track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = pa + r * width;
        double* y = po + r * width;
        double mx = kNegInf;
        for (int j = 0; j < width; ++j) mx = std::max(mx, x[j]);
        if (mx == kNegInf)
            throw InvalidRowError("softmax_rows: row " + std::to_string(r) +
                                  " has no finite entry (mask removed every position)");
        double denom = 0.0;
        for (int j = 0; j < width; ++j) {
            y[j] = x[j] == kNegInf ? 0.0 : std::exp(x[j] - mx);
            denom += y[j];
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < width; ++j) y[j] *= inv;
    }

    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi, rows, width]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            const double* y = oi->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g + r * width;
                const double* yr = y + r * width;
                double dot = 0.0;
                for (int j = 0; j < width; ++j) dot += gr[j] * yr[j];
                double* ga = ai->grad.data() + r * width;
                for (int j = 0; j < width; ++j) ga[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor layernorm(Tape* t, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ConfigError("layernorm: eps must be positive");
    const Shape& s = x.shape();
    const int width = s.back();
    if (gain.ndim() != 1 || gain.dim(0) != width || bias.ndim() != 1 || bias.dim(0) != width)
        throw ShapeError("layernorm: gain/bias must be [" + std::to_string(width) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const int64_t rows = leading_product(s, 1);

    const bool track = tracked(t, {&x, &gain, &bias});
    Tensor out = make_out(t, s, track);

    // mean and inverse std per row, kept for the backward pass
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    double* po = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * width;
        double mean = 0.0;
        for (int j = 0; j < width; ++j) mean += xr[j];
        mean /= width;
        double var = 0.0;
        for (int j = 0; j < width; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= width;
        const double istd = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * r] = mean;
        (*stats)[2 * r + 1] = istd;
        double* yr = po + r * width;
        for (int j = 0; j < width; ++j) yr[j] = (xr[j] - mean) * istd * pg[j] + pb[j];
    }

    if (track) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        t->record(oi, [xi, gi, bi, oi, stats, rows, width]() {
            const double* g = oi->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double mean = (*stats)[2 * r];
                const double istd = (*stats)[2 * r + 1];
                const double* xr = xi->data.data() + r * width;
                const double* gr = g + r * width;
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (int j = 0; j < width; ++j)
                        gi->grad[j] += gr[j] * (xr[j] - mean) * istd;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int j = 0; j < width; ++j) bi->grad[j] += gr[j];
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < width; ++j) {
                        const double dxh = gr[j] * gi->data[j];
                        const double xh = (xr[j] - mean) * istd;
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= width;
                    m2 /= width;
                    double* gx = xi->grad.data() + r * width;
                    for (int j = 0; j < width; ++j) {
                        const double dxh = gr[j] * gi->data[j];
                        const double xh = (xr[j] - mean) * istd;
                        gx[j] += istd * (dxh - m1 - xh * m2);
                    }
                }
            }
        });
    }
    return out;
}

// --- embedding / reshape ------------------------------------------------------

Tensor embed(Tape* t, const TokenBatch& ids, const Tensor& table) {
    if (table.ndim() != 2)
        throw ShapeError("embed: table must be 2-d, got " + shape_str(table.shape()));
    const int vocab = table.dim(0);
    const int d = table.dim(1);
    for (int32_t id : ids.ids)
        if (id < 0 || id >= vocab)
            throw IndexError("embed: token id " + std::to_string(id) + " outside vocab " +
                             std::to_string(vocab));

    const bool track = tracked(t, {&table});
    Tensor out = make_out(t, {ids.batch, ids.len, d}, track);
    const double* pt = table.data().data();
    double* po = out.values().data();
    const size_t n_tok = ids.ids.size();
    for (size_t i = 0; i < n_tok; ++i)
        std::copy_n(pt + static_cast<size_t>(ids.ids[i]) * d, d, po + i * d);

    if (track) {
        auto ti = table.impl(), oi = out.impl();
        auto idv = ids.ids;
        t->record(oi, [ti, oi, idv, d]() {
            ti->ensure_grad();
            const double* g = oi->grad.data();
            for (size_t i = 0; i < idv.size(); ++i) {
                double* row = ti->grad.data() + static_cast<size_t>(idv[i]) * d;
                const double* gr = g + i * d;
                for (int j = 0; j < d; ++j) row[j] += gr[j];
            }
        });
    }
    return out;
}

Tensor reshape(Tape* t, const Tensor& a, const Shape& target) {
    if (shape_numel(target) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(target) +
                         " changes element count");
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, target, track);
    std::copy(a.data().begin(), a.data().end(), out.values().begin());
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi]() {
            ai->ensure_grad();
            for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

Tensor swap_middle(Tape* t, const Tensor& a) {
    if (a.ndim() != 4)
        throw ShapeError("swap_middle: expects rank 4, got " + shape_str(a.shape()));
    const int b = a.dim(0), x = a.dim(1), y = a.dim(2), z = a.dim(3);
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, {b, y, x, z}, track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    for (int ib = 0; ib < b; ++ib)
        for (int ix = 0; ix < x; ++ix)
            for (int iy = 0; iy < y; ++iy) {
                const double* src = pa + (((static_cast<int64_t>(ib) * x + ix) * y + iy) * z);
                double* dst = po + (((static_cast<int64_t>(ib) * y + iy) * x + ix) * z);
                std::copy_n(src, z, dst);
            }
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi, b, x, y, z]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            for (int ib = 0; ib < b; ++ib)
                for (int ix = 0; ix < x; ++ix)
                    for (int iy = 0; iy < y; ++iy) {
                        double* dst = ai->grad.data() +
                                      (((static_cast<int64_t>(ib) * x + ix) * y + iy) * z);
                        const double* src =
                            g + (((static_cast<int64_t>(ib) * y + iy) * x + ix) * z);
                        for (int iz = 0; iz < z; ++iz) dst[iz] += src[iz];
                    }
        });
    }
    return out;
}

// --- losses / reductions -------------------------------------------------------

Tensor cross_entropy(Tape* t, const Tensor& logits, const TokenBatch& targets) {
    if (logits.ndim() != 3)
        throw ShapeError("cross_entropy: logits must be [B,n,V], got " + shape_str(logits.shape()));
    const int B = logits.dim(0), n = logits.dim(1), V = logits.dim(2);
    if (targets.batch != B || targets.len != n)
        throw ShapeError("cross_entropy: targets [" + std::to_string(targets.batch) + "," +
                         std::to_string(targets.len) + "] do not match logits " +
                         shape_str(logits.shape()));
    for (int32_t id : targets.ids)
        if (id < 0 || id >= V)
            throw IndexError("cross_entropy: target id " + std::to_string(id) +
                             " outside vocab " + std::to_string(V));

    const int64_t rows = static_cast<int64_t>(B) * n;
    const bool track = tracked(t, {&logits});
    Tensor out = make_out(t, {1}, track);

    auto lse = std::make_shared<std::vector<double>>(rows);
    const double* pl = logits.data().data();
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = pl + r * V;
        double mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
        const double l = mx + std::log(denom);
        (*lse)[r] = l;
        total += l - row[targets.ids[r]];
    }
    out.values()[0] = total / static_cast<double>(rows);

    if (track) {
        auto li = logits.impl(), oi = out.impl();
        auto tgt = targets.ids;
        t->record(oi, [li, oi, lse, tgt, rows, V]() {
            li->ensure_grad();
            const double gscale = oi->grad[0] / static_cast<double>(rows);
            for (int64_t r = 0; r < rows; ++r) {
                const double* row = li->data.data() + r * V;
                double* grow = li->grad.data() + r * V;
                const double l = (*lse)[r];
                for (int j = 0; j < V; ++j) grow[j] += gscale * std::exp(row[j] - l);
                grow[tgt[r]] -= gscale;
            }
        });
    }
    return out;
}

Tensor sum(Tape* t, const Tensor& a) {
    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, {1}, track);
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.values()[0] = s;
    if (track) {
        auto ai = a.impl(), oi = out.impl();
        t->record(oi, [ai, oi]() {
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& v : ai->grad) v += g;
        });
    }
    return out;
}

// --- masking ---------------------------------------------------------------------

Tensor causal_neg_inf(Tape* t, const Tensor& scores) {
    const Shape& s = scores.shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2])
        throw ShapeError("causal_neg_inf: expects [.., n, n], got " + shape_str(s));
    const int n = s.back();
    const int64_t mats = leading_product(s, 2);

    const bool track = tracked(t, {&scores});
    Tensor out = make_out(t, s, track);
    const double* pa = scores.data().data();
    double* po = out.values().data();
    for (int64_t m = 0; m < mats; ++m) {
        const double* src = pa + m * n * n;
        double* dst = po + m * n * n;
        for (int q = 0; q < n; ++q) {
            for (int j = 0; j <= q; ++j) dst[q * n + j] = src[q * n + j];
            for (int j = q + 1; j < n; ++j) dst[q * n + j] = kNegInf;
        }
    }
    if (track) {
        auto ai = scores.impl(), oi = out.impl();
        t->record(oi, [ai, oi, mats, n]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            for (int64_t m = 0; m < mats; ++m) {
                const double* gm = g + m * n * n;
                double* am = ai->grad.data() + m * n * n;
                for (int q = 0; q < n; ++q)
                    for (int j = 0; j <= q; ++j) am[q * n + j] += gm[q * n + j];
            }
        });
    }
    return out;
}

Tensor masked_fill_neg_inf(Tape* t, const Tensor& a, const std::vector<uint8_t>& keep,
                           const Shape& keep_shape) {
    const int64_t nk = shape_numel(keep_shape);
    if (nk != static_cast<int64_t>(keep.size()))
        throw ShapeError("masked_fill_neg_inf: keep buffer does not match " +
                         shape_str(keep_shape));
    const Shape& sa = a.shape();
    if (keep_shape.size() > sa.size() ||
        !std::equal(keep_shape.rbegin(), keep_shape.rend(), sa.rbegin()))
        throw ShapeError("masked_fill_neg_inf: " + shape_str(keep_shape) +
                         " is not a suffix of " + shape_str(sa));

    const bool track = tracked(t, {&a});
    Tensor out = make_out(t, sa, track);
    const double* pa = a.data().data();
    double* po = out.values().data();
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = keep[i % nk] ? pa[i] : kNegInf;

    if (track) {
        auto ai = a.impl(), oi = out.impl();
        auto bits = std::make_shared<std::vector<uint8_t>>(keep);
        t->record(oi, [ai, oi, bits, n, nk]() {
            ai->ensure_grad();
            const double* g = oi->grad.data();
            for (int64_t i = 0; i < n; ++i)
                if ((*bits)[i % nk]) ai->grad[i] += g[i];
        });
    }
    return out;
}

}  // namespace absorb
