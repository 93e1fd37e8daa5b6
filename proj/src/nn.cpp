#include "rollforge/nn.hpp"

#include <cmath>
#include <limits>

#include "rollforge/errors.hpp"

namespace rollforge::nn {

namespace {
// Up to this many rows one matrix-vector product per row beats packed GEMM.
constexpr Eigen::Index kRowwiseRows = 64;
}  // namespace

RowMat linear(const RowMat& x, const Mat& w, const Mat& b) {
    RowMat y(x.rows(), w.cols());
    if (x.rows() <= kRowwiseRows) {
        for (Eigen::Index r = 0; r < x.rows(); ++r) y.row(r).noalias() = x.row(r) * w;
    } else {
        y.noalias() = x * w;
    }
    y.rowwise() += b.col(0).transpose();
    return y;
}

void linear_backward(const RowMat& x, const Mat& w, const RowMat& dy, RowMat* dx, Mat& dw, Mat& db) {
    linear_backward(x, w, dy, dx, dw);
    db.col(0) += dy.colwise().sum().transpose();
}

void linear_backward(const RowMat& x, const Mat& w, const RowMat& dy, RowMat* dx, Mat& dw) {
    dw.noalias() += x.transpose() * dy;
    if (dx != nullptr) *dx = dy * w.transpose();
}

RowMat layer_norm(const RowMat& x, LayerNormCache& cache, double eps) {
    const auto n = x.rows();
    const auto d = static_cast<double>(x.cols());
    cache.normalized.resize(n, x.cols());
    cache.inv_std.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).sum() / d;
        const auto centered = x.row(r).array() - mean;
        const double var = centered.square().sum() / d;
        const double inv = 1.0 / std::sqrt(var + eps);
        cache.inv_std[r] = inv;
        cache.normalized.row(r) = centered * inv;
    }
    return cache.normalized;
}

RowMat layer_norm_backward(const LayerNormCache& cache, const RowMat& dy) {
    const auto& xhat = cache.normalized;
    const double d = static_cast<double>(xhat.cols());
    RowMat dx(xhat.rows(), xhat.cols());
    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const double mean_dy = dy.row(r).sum() / d;
        const double mean_dy_xhat = dy.row(r).dot(xhat.row(r)) / d;
        dx.row(r) = cache.inv_std[r] *
                    (dy.row(r).array() - mean_dy - xhat.row(r).array() * mean_dy_xhat).matrix();
    }
    return dx;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

namespace {
// 0.5 (1 + tanh(v)) == 1 / (1 + exp(-2 v)); the array form vectorizes.
Eigen::ArrayXXd logistic(const Eigen::ArrayXXd& v) { return ((-v).exp() + 1.0).inverse(); }

Eigen::ArrayXXd gelu_inner(const RowMat& x) {
    const auto u = x.array();
    return kGeluC * (u + kGeluA * u.cube());
}
}  // namespace

RowMat gelu(const RowMat& x) {
    return (x.array() * logistic(2.0 * gelu_inner(x))).matrix();
}

RowMat gelu_backward(const RowMat& x, const RowMat& dy) {
    const auto u = x.array();
    const Eigen::ArrayXXd s = logistic(2.0 * gelu_inner(x));
    const Eigen::ArrayXXd dinner = kGeluC * (1.0 + 3.0 * kGeluA * u.square());
    return ((s + 2.0 * u * s * (1.0 - s) * dinner) * dy.array()).matrix();
}

RowMat silu(const RowMat& x) {
    return (x.array() * logistic(x.array())).matrix();
}

RowMat silu_backward(const RowMat& x, const RowMat& dy) {
    const Eigen::ArrayXXd s = logistic(x.array());
    return ((s * (1.0 + x.array() * (1.0 - s))) * dy.array()).matrix();
}

void apply_rope(RowMat& x, std::span<const long> positions, int num_heads, double base, bool inverse) {
    if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
        throw ContractError("apply_rope: one position per row required");
    }
    const int head_dim = static_cast<int>(x.cols()) / num_heads;
    const int pairs = head_dim / 2;
    std::vector<double> freq(static_cast<size_t>(pairs));
    for (int i = 0; i < pairs; ++i) {
        freq[static_cast<size_t>(i)] = std::pow(base, -2.0 * i / head_dim);
    }
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const long pos = positions[static_cast<size_t>(r)];
        if (pos == 0) continue;
        for (int i = 0; i < pairs; ++i) {
            const double angle = static_cast<double>(pos) * freq[static_cast<size_t>(i)];
            const double c = std::cos(angle);
            const double s = sign * std::sin(angle);
            for (int h = 0; h < num_heads; ++h) {
                const Eigen::Index col = h * head_dim + 2 * i;
                const double a = x(r, col);
                const double b = x(r, col + 1);
                x(r, col) = c * a - s * b;
                x(r, col + 1) = s * a + c * b;
            }
        }
    }
}

RowMat attention(const RowMat& q, const RowMat& k, const RowMat& v, const Mask& mask,
                 int num_heads, AttentionCache* cache) {
    const auto n = q.rows();
    const auto m = k.rows();
    if (mask.rows() != n || mask.cols() != m) throw ContractError("attention mask shape mismatch");
    const int head_dim = static_cast<int>(q.cols()) / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    RowMat out(n, q.cols());
    if (cache != nullptr) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs.assign(static_cast<size_t>(num_heads), RowMat());
    }
    for (int h = 0; h < num_heads; ++h) {
        const auto qh = q.middleCols(h * head_dim, head_dim);
        const auto kh = k.middleCols(h * head_dim, head_dim);
        RowMat p = (qh * kh.transpose()) * scale;
        for (Eigen::Index r = 0; r < n; ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < m; ++c) {
                if (mask(r, c)) mx = std::max(mx, p(r, c));
            }
            if (!std::isfinite(mx)) throw ContractError("attention row admits no keys");
            double sum = 0.0;
            for (Eigen::Index c = 0; c < m; ++c) {
                const double e = mask(r, c) ? std::exp(p(r, c) - mx) : 0.0;
                p(r, c) = e;
                sum += e;
            }
            p.row(r) /= sum;
        }
        out.middleCols(h * head_dim, head_dim).noalias() = p * v.middleCols(h * head_dim, head_dim);
        if (cache != nullptr) cache->probs[static_cast<size_t>(h)] = std::move(p);
    }
    return out;
}

void attention_backward(const AttentionCache& cache, const RowMat& dout, int num_heads, RowMat& dq,
                        RowMat& dk, RowMat& dv) {
    const int head_dim = static_cast<int>(cache.q.cols()) / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    dq = RowMat::Zero(cache.q.rows(), cache.q.cols());
    dk = RowMat::Zero(cache.k.rows(), cache.k.cols());
    dv = RowMat::Zero(cache.v.rows(), cache.v.cols());
    for (int h = 0; h < num_heads; ++h) {
        const RowMat& p = cache.probs[static_cast<size_t>(h)];
        const auto doh = dout.middleCols(h * head_dim, head_dim);
        dv.middleCols(h * head_dim, head_dim).noalias() = p.transpose() * doh;
        RowMat dp = doh * cache.v.middleCols(h * head_dim, head_dim).transpose();
        const Vec row_dot = (dp.array() * p.array()).rowwise().sum();
        RowMat ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scale;
        dq.middleCols(h * head_dim, head_dim).noalias() = ds * cache.k.middleCols(h * head_dim, head_dim);
        dk.middleCols(h * head_dim, head_dim).noalias() =
            ds.transpose() * cache.q.middleCols(h * head_dim, head_dim);
    }
}

Vec sinusoidal_embedding(double t, int dim) {
    const int half = dim / 2;
    Vec e = Vec::Zero(dim);
    for (int i = 0; i < half; ++i) {
        const double f = std::pow(10000.0, -static_cast<double>(i) / half);
        e[i] = std::cos(t * f);
        e[half + i] = std::sin(t * f);
    }
    return e;
}

}  // namespace rollforge::nn
