#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/rng.hpp"

namespace nmim {

// Thread-local switch for building the backward graph. Evaluation paths wrap
// themselves in NoGradGuard so no tape is recorded.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor with reverse-mode gradients. S is float or double;
// gradient-verification paths instantiate S = double. Gradients accumulate
// additively; the caller zeroes them between steps.
template <typename S>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<S> v;
        std::vector<S> g;
        bool track = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> back;

        void ensure_grad() {
            if (g.size() != v.size()) {
                g.assign(v.size(), S(0));
            }
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->v.assign(static_cast<size_t>(shape_numel(t.n_->shape)), S(0));
        t.n_->track = requires_grad && grad_mode_flag();
        return t;
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.n_->v.begin(), t.n_->v.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        require(static_cast<int64_t>(data.size()) == shape_numel(shape),
                "from_data: data length ", data.size(), " does not match shape ", shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->v = std::move(data);
        t.n_->track = requires_grad && grad_mode_flag();
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.n_->v) {
            x = static_cast<S>(rng.normal()) * stddev;
        }
        return t;
    }

    static Tensor trunc_normal(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.n_->v) {
            x = static_cast<S>(rng.trunc_normal(stddev));
        }
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return static_cast<int64_t>(n_->v.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }

    S* data() { return n_->v.data(); }
    const S* data() const { return n_->v.data(); }
    std::vector<S>& values() { return n_->v; }
    const std::vector<S>& values() const { return n_->v; }

    bool requires_grad() const { return n_->track; }
    void set_requires_grad(bool b) { n_->track = b; }

    const std::vector<S>& grad() const { return n_->g; }
    std::vector<S>& grad_mut() {
        n_->ensure_grad();
        return n_->g;
    }
    void zero_grad() {
        if (!n_->g.empty()) {
            std::fill(n_->g.begin(), n_->g.end(), S(0));
        }
    }

    S item() const {
        require(size() == 1, "item: tensor has ", size(), " elements, expected scalar");
        return n_->v[0];
    }

    // Runs reverse-mode accumulation from this scalar. Gradients land in the
    // .grad() buffers of every tracked tensor in the graph.
    void backward() const {
        require(size() == 1, "backward: root must be scalar, got shape ", shape_str(shape()));
        require(n_->track, "backward: root does not require grad");
        std::vector<Node*> order = topo_order_();
        n_->ensure_grad();
        n_->g[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->back) {
                node->back(*node);
            }
        }
    }

    std::shared_ptr<Node> node() const { return n_; }

    static Tensor wrap(std::shared_ptr<Node> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::vector<Node*> topo_order_() const {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // Iterative DFS; graphs from long training sequences would overflow a
        // recursive walk.
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* parent = node->parents[idx].get();
                ++idx;
                if (parent->track && !seen.count(parent)) {
                    seen.insert(parent);
                    stack.emplace_back(parent, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<Node> n_;
};

namespace ops {

template <typename S>
using NodePtr = std::shared_ptr<typename Tensor<S>::Node>;

template <typename S>
Tensor<S> make_result(Shape shape, std::vector<Tensor<S>> parents) {
    Tensor<S> out = Tensor<S>::zeros(std::move(shape));
    bool track = false;
    if (grad_mode_flag()) {
        for (const auto& p : parents) {
            track = track || p.requires_grad();
        }
    }
    if (track) {
        out.node()->track = true;
        for (const auto& p : parents) {
            out.node()->parents.push_back(p.node());
        }
    }
    return out;
}

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()));
}

// ---- elementwise ----

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape("add", a, b);
    Tensor<S> out = make_result<S>(a.shape(), {a, b});
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] + pb[i];
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->back = [an, bn](auto& self) {
            const int64_t m = static_cast<int64_t>(self.v.size());
            if (an->track) {
                an->ensure_grad();
                for (int64_t i = 0; i < m; ++i) an->g[i] += self.g[i];
            }
            if (bn->track) {
                bn->ensure_grad();
                for (int64_t i = 0; i < m; ++i) bn->g[i] += self.g[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape("sub", a, b);
    Tensor<S> out = make_result<S>(a.shape(), {a, b});
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.data()[i] = a.data()[i] - b.data()[i];
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->back = [an, bn](auto& self) {
            const int64_t m = static_cast<int64_t>(self.v.size());
            if (an->track) {
                an->ensure_grad();
                for (int64_t i = 0; i < m; ++i) an->g[i] += self.g[i];
            }
            if (bn->track) {
                bn->ensure_grad();
                for (int64_t i = 0; i < m; ++i) bn->g[i] -= self.g[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    check_same_shape("mul", a, b);
    Tensor<S> out = make_result<S>(a.shape(), {a, b});
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.data()[i] = a.data()[i] * b.data()[i];
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto av = a.values();
        auto bv = b.values();
        out.node()->back = [an, bn, av, bv](auto& self) {
            const int64_t m = static_cast<int64_t>(self.v.size());
            if (an->track) {
                an->ensure_grad();
                for (int64_t i = 0; i < m; ++i) an->g[i] += self.g[i] * bv[i];
            }
            if (bn->track) {
                bn->ensure_grad();
                for (int64_t i = 0; i < m; ++i) bn->g[i] += self.g[i] * av[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    Tensor<S> out = make_result<S>(a.shape(), {a});
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) {
        out.data()[i] = a.data()[i] * factor;
    }
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->back = [an, factor](auto& self) {
            an->ensure_grad();
            const int64_t m = static_cast<int64_t>(self.v.size());
            for (int64_t i = 0; i < m; ++i) an->g[i] += self.g[i] * factor;
        };
    }
    return out;
}

// Adds a length-m bias vector to every row of an n x m matrix.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    require(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0),
            "add_bias: shape mismatch ", shape_str(x.shape()), " vs ", shape_str(b.shape()));
    Tensor<S> out = make_result<S>(x.shape(), {x, b});
    const int n = x.dim(0);
    const int m = x.dim(1);
    for (int i = 0; i < n; ++i) {
        const S* px = x.data() + static_cast<int64_t>(i) * m;
        S* po = out.data() + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            po[j] = px[j] + b.data()[j];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto bn = b.node();
        out.node()->back = [xn, bn, n, m](auto& self) {
            if (xn->track) {
                xn->ensure_grad();
                const int64_t total = static_cast<int64_t>(n) * m;
                for (int64_t i = 0; i < total; ++i) xn->g[i] += self.g[i];
            }
            if (bn->track) {
                bn->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                    for (int j = 0; j < m; ++j) bn->g[j] += pg[j];
                }
            }
        };
    }
    return out;
}

// ---- matrix products ----

namespace detail {

// c (n x m) += a (n x k) * b (k x m), row-major. i-k-j order vectorizes well.
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* arow = a + static_cast<int64_t>(i) * k;
        S* crow = c + static_cast<int64_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const S aik = arow[p];
            if (aik == S(0)) continue;
            const S* brow = b + static_cast<int64_t>(p) * m;
            for (int j = 0; j < m; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

// c (n x m) += a (n x k) * b^T where b is (m x k).
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* arow = a + static_cast<int64_t>(i) * k;
        S* crow = c + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const S* brow = b + static_cast<int64_t>(j) * k;
            S acc = S(0);
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// c (k x m) += a^T * b where a is (n x k), b is (n x m).
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* arow = a + static_cast<int64_t>(i) * k;
        const S* brow = b + static_cast<int64_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const S aip = arow[p];
            if (aip == S(0)) continue;
            S* crow = c + static_cast<int64_t>(p) * m;
            for (int j = 0; j < m; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

} // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
            "matmul: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor<S> out = make_result<S>({n, m}, {a, b});
    detail::gemm_acc(a.data(), b.data(), out.data(), n, k, m);
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto av = a.values();
        auto bv = b.values();
        out.node()->back = [an, bn, av, bv, n, k, m](auto& self) {
            if (an->track) {
                an->ensure_grad();
                detail::gemm_nt_acc(self.g.data(), bv.data(), an->g.data(), n, m, k);
            }
            if (bn->track) {
                bn->ensure_grad();
                detail::gemm_tn_acc(av.data(), self.g.data(), bn->g.data(), n, k, m);
            }
        };
    }
    return out;
}

// a (n x k) times b^T for b (m x k); used for attention scores.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
            "matmul_nt: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
    Tensor<S> out = make_result<S>({n, m}, {a, b});
    detail::gemm_nt_acc(a.data(), b.data(), out.data(), n, k, m);
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        auto av = a.values();
        auto bv = b.values();
        out.node()->back = [an, bn, av, bv, n, k, m](auto& self) {
            if (an->track) {
                an->ensure_grad();
                detail::gemm_acc(self.g.data(), bv.data(), an->g.data(), n, m, k);
            }
            if (bn->track) {
                bn->ensure_grad();
                detail::gemm_tn_acc(self.g.data(), av.data(), bn->g.data(), n, m, k);
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return add_bias(matmul(x, w), b);
}

// ---- nonlinearities ----

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out = make_result<S>(x.shape(), {x});
    const int64_t n = x.size();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out.data()[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto xv = x.values();
        out.node()->back = [xn, xv](auto& self) {
            xn->ensure_grad();
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            constexpr double c = 0.70710678118654752440;
            const int64_t m = static_cast<int64_t>(self.v.size());
            for (int64_t i = 0; i < m; ++i) {
                const double v = static_cast<double>(xv[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * c));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xn->g[i] += self.g[i] * static_cast<S>(cdf + v * pdf);
            }
        };
    }
    return out;
}

// Layer normalization over the last dimension of an n x m matrix.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-6)) {
    require(x.ndim() == 2, "layer_norm: expected matrix, got ", shape_str(x.shape()));
    require(gamma.ndim() == 1 && gamma.dim(0) == x.dim(1),
            "layer_norm: gamma shape ", shape_str(gamma.shape()), " vs input ", shape_str(x.shape()));
    require(beta.ndim() == 1 && beta.dim(0) == x.dim(1),
            "layer_norm: beta shape ", shape_str(beta.shape()), " vs input ", shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    Tensor<S> out = make_result<S>(x.shape(), {x, gamma, beta});
    std::vector<S> xhat(static_cast<size_t>(n) * m);
    std::vector<S> inv_std(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const S* px = x.data() + static_cast<int64_t>(i) * m;
        S mean = S(0);
        for (int j = 0; j < m; ++j) mean += px[j];
        mean /= static_cast<S>(m);
        S var = S(0);
        for (int j = 0; j < m; ++j) {
            const S d = px[j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(m);
        const S istd = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = istd;
        S* ph = xhat.data() + static_cast<int64_t>(i) * m;
        S* po = out.data() + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            ph[j] = (px[j] - mean) * istd;
            po[j] = gamma.data()[j] * ph[j] + beta.data()[j];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto gv = gamma.values();
        out.node()->back = [xn, gn, bn, gv, xhat = std::move(xhat),
                            inv_std = std::move(inv_std), n, m](auto& self) {
            if (gn->track) {
                gn->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                    const S* ph = xhat.data() + static_cast<int64_t>(i) * m;
                    for (int j = 0; j < m; ++j) gn->g[j] += pg[j] * ph[j];
                }
            }
            if (bn->track) {
                bn->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                    for (int j = 0; j < m; ++j) bn->g[j] += pg[j];
                }
            }
            if (xn->track) {
                xn->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                    const S* ph = xhat.data() + static_cast<int64_t>(i) * m;
                    S* px = xn->g.data() + static_cast<int64_t>(i) * m;
                    S sum_dh = S(0), sum_dh_h = S(0);
                    for (int j = 0; j < m; ++j) {
                        const S dh = pg[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * ph[j];
                    }
                    const S istd = inv_std[static_cast<size_t>(i)];
                    const S inv_m = S(1) / static_cast<S>(m);
                    for (int j = 0; j < m; ++j) {
                        const S dh = pg[j] * gv[j];
                        px[j] += istd * (dh - inv_m * sum_dh - ph[j] * inv_m * sum_dh_h);
                    }
                }
            }
        };
    }
    return out;
}

// Row-wise softmax. When a key mask is given, masked columns receive weight
// exactly zero and contribute nothing to the normalization.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x, const std::vector<bool>& masked_cols = {}) {
    require(x.ndim() == 2, "softmax_rows: expected matrix, got ", shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    if (!masked_cols.empty()) {
        require(static_cast<int>(masked_cols.size()) == m,
                "softmax_rows: mask length ", masked_cols.size(), " vs columns ", m);
    }
    Tensor<S> out = make_result<S>(x.shape(), {x});
    for (int i = 0; i < n; ++i) {
        const S* px = x.data() + static_cast<int64_t>(i) * m;
        S* po = out.data() + static_cast<int64_t>(i) * m;
        S maxv = std::numeric_limits<S>::lowest();
        bool any = false;
        for (int j = 0; j < m; ++j) {
            if (!masked_cols.empty() && masked_cols[static_cast<size_t>(j)]) continue;
            maxv = std::max(maxv, px[j]);
            any = true;
        }
        require(any, "softmax_rows: all columns masked in row ", i);
        S denom = S(0);
        for (int j = 0; j < m; ++j) {
            if (!masked_cols.empty() && masked_cols[static_cast<size_t>(j)]) {
                po[j] = S(0);
            } else {
                po[j] = std::exp(px[j] - maxv);
                denom += po[j];
            }
        }
        for (int j = 0; j < m; ++j) po[j] /= denom;
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto yv = out.values();
        out.node()->back = [xn, yv, n, m](auto& self) {
            xn->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                const S* py = yv.data() + static_cast<int64_t>(i) * m;
                S dot = S(0);
                for (int j = 0; j < m; ++j) dot += pg[j] * py[j];
                S* px = xn->g.data() + static_cast<int64_t>(i) * m;
                for (int j = 0; j < m; ++j) px[j] += py[j] * (pg[j] - dot);
            }
        };
    }
    return out;
}

// Sum of per-row cross-entropy between logits (n x V) and integer targets.
template <typename S>
Tensor<S> cross_entropy_sum(const Tensor<S>& logits, const std::vector<int32_t>& targets) {
    require(logits.ndim() == 2, "cross_entropy_sum: expected matrix, got ",
            shape_str(logits.shape()));
    const int n = logits.dim(0), V = logits.dim(1);
    require(static_cast<int>(targets.size()) == n,
            "cross_entropy_sum: targets length ", targets.size(), " vs rows ", n);
    for (int i = 0; i < n; ++i) {
        require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < V,
                "cross_entropy_sum: target ", targets[static_cast<size_t>(i)],
                " out of range [0,", V, ") at row ", i);
    }
    Tensor<S> out = make_result<S>({1}, {logits});
    std::vector<S> probs(static_cast<size_t>(n) * V);
    S total = S(0);
    for (int i = 0; i < n; ++i) {
        const S* pl = logits.data() + static_cast<int64_t>(i) * V;
        S maxv = pl[0];
        for (int j = 1; j < V; ++j) maxv = std::max(maxv, pl[j]);
        S denom = S(0);
        S* pp = probs.data() + static_cast<int64_t>(i) * V;
        for (int j = 0; j < V; ++j) {
            pp[j] = std::exp(pl[j] - maxv);
            denom += pp[j];
        }
        for (int j = 0; j < V; ++j) pp[j] /= denom;
        const S logz = std::log(denom) + maxv;
        total += logz - pl[targets[static_cast<size_t>(i)]];
    }
    out.data()[0] = total;
    if (out.requires_grad()) {
        auto ln = logits.node();
        out.node()->back = [ln, probs = std::move(probs), targets, n, V](auto& self) {
            ln->ensure_grad();
            const S go = self.g[0];
            for (int i = 0; i < n; ++i) {
                const S* pp = probs.data() + static_cast<int64_t>(i) * V;
                S* pg = ln->g.data() + static_cast<int64_t>(i) * V;
                for (int j = 0; j < V; ++j) pg[j] += go * pp[j];
                pg[targets[static_cast<size_t>(i)]] -= go;
            }
        };
    }
    return out;
}

// ---- convolution and sampling ----

// Valid (no padding, stride 1) 2-D convolution. Input H x W x Cin, kernel
// kh x kw x Cin x Cout, output (H-kh+1) x (W-kw+1) x Cout.
template <typename S>
Tensor<S> conv2d_valid(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias) {
    require(x.ndim() == 3, "conv2d_valid: input must be HxWxC, got ", shape_str(x.shape()));
    require(kernel.ndim() == 4, "conv2d_valid: kernel must be khxkwxCinxCout, got ",
            shape_str(kernel.shape()));
    const int H = x.dim(0), W = x.dim(1), Ci = x.dim(2);
    const int kh = kernel.dim(0), kw = kernel.dim(1);
    require(kernel.dim(2) == Ci, "conv2d_valid: kernel Cin ", kernel.dim(2),
            " vs input channels ", Ci);
    const int Co = kernel.dim(3);
    require(bias.ndim() == 1 && bias.dim(0) == Co, "conv2d_valid: bias shape ",
            shape_str(bias.shape()), " vs Cout ", Co);
    require(kh <= H && kw <= W, "conv2d_valid: kernel ", kh, "x", kw,
            " larger than input ", H, "x", W);
    const int Ho = H - kh + 1, Wo = W - kw + 1;
    Tensor<S> out = make_result<S>({Ho, Wo, Co}, {x, kernel, bias});
    auto xat = [&](int i, int j, int c) {
        return x.data()[(static_cast<int64_t>(i) * W + j) * Ci + c];
    };
    auto kat = [&](int i, int j, int ci, int co) {
        return kernel.data()[((static_cast<int64_t>(i) * kw + j) * Ci + ci) * Co + co];
    };
    for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
            S* po = out.data() + (static_cast<int64_t>(oi) * Wo + oj) * Co;
            for (int co = 0; co < Co; ++co) po[co] = bias.data()[co];
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                    for (int ci = 0; ci < Ci; ++ci) {
                        const S xv = xat(oi + ki, oj + kj, ci);
                        if (xv == S(0)) continue;
                        for (int co = 0; co < Co; ++co) {
                            po[co] += xv * kat(ki, kj, ci, co);
                        }
                    }
                }
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto kn = kernel.node();
        auto bn = bias.node();
        auto xv = x.values();
        auto kv = kernel.values();
        out.node()->back = [xn, kn, bn, xv, kv, H, W, Ci, kh, kw, Co, Ho, Wo](auto& self) {
            if (bn->track) {
                bn->ensure_grad();
                for (int64_t p = 0; p < static_cast<int64_t>(Ho) * Wo; ++p) {
                    const S* pg = self.g.data() + p * Co;
                    for (int co = 0; co < Co; ++co) bn->g[co] += pg[co];
                }
            }
            if (xn->track) xn->ensure_grad();
            if (kn->track) kn->ensure_grad();
            for (int oi = 0; oi < Ho; ++oi) {
                for (int oj = 0; oj < Wo; ++oj) {
                    const S* pg = self.g.data() + (static_cast<int64_t>(oi) * Wo + oj) * Co;
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            const int64_t xoff = (static_cast<int64_t>(oi + ki) * W + (oj + kj)) * Ci;
                            for (int ci = 0; ci < Ci; ++ci) {
                                const int64_t koff = ((static_cast<int64_t>(ki) * kw + kj) * Ci + ci) * Co;
                                S acc = S(0);
                                for (int co = 0; co < Co; ++co) {
                                    acc += pg[co] * kv[static_cast<size_t>(koff + co)];
                                    if (kn->track) {
                                        kn->g[static_cast<size_t>(koff + co)] +=
                                            pg[co] * xv[static_cast<size_t>(xoff + ci)];
                                    }
                                }
                                if (xn->track) xn->g[static_cast<size_t>(xoff + ci)] += acc;
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// Bilinear samples of an H x W x D map at fractional (row, col) points.
// Coordinates are in cell units where cell (i, j) is centered at
// (i + 0.5, j + 0.5); samples outside the map clamp to the border.
template <typename S>
Tensor<S> bilinear_gather(const Tensor<S>& map, const std::vector<std::pair<double, double>>& points) {
    require(map.ndim() == 3, "bilinear_gather: map must be HxWxD, got ", shape_str(map.shape()));
    const int H = map.dim(0), W = map.dim(1), D = map.dim(2);
    const int n = static_cast<int>(points.size());
    Tensor<S> out = make_result<S>({n, D}, {map});
    struct Tap {
        int64_t idx;
        S w;
    };
    std::vector<std::array<Tap, 4>> taps(static_cast<size_t>(n));
    for (int p = 0; p < n; ++p) {
        const double u = points[static_cast<size_t>(p)].first - 0.5;
        const double v = points[static_cast<size_t>(p)].second - 0.5;
        const double uc = std::clamp(u, 0.0, static_cast<double>(H - 1));
        const double vc = std::clamp(v, 0.0, static_cast<double>(W - 1));
        const int i0 = std::min(static_cast<int>(std::floor(uc)), H - 2 >= 0 ? H - 2 : 0);
        const int j0 = std::min(static_cast<int>(std::floor(vc)), W - 2 >= 0 ? W - 2 : 0);
        const int i1 = std::min(i0 + 1, H - 1);
        const int j1 = std::min(j0 + 1, W - 1);
        const double fu = uc - i0;
        const double fv = vc - j0;
        const S w00 = static_cast<S>((1.0 - fu) * (1.0 - fv));
        const S w01 = static_cast<S>((1.0 - fu) * fv);
        const S w10 = static_cast<S>(fu * (1.0 - fv));
        const S w11 = static_cast<S>(fu * fv);
        auto off = [&](int i, int j) { return (static_cast<int64_t>(i) * W + j) * D; };
        taps[static_cast<size_t>(p)] = {Tap{off(i0, j0), w00}, Tap{off(i0, j1), w01},
                                        Tap{off(i1, j0), w10}, Tap{off(i1, j1), w11}};
        S* po = out.data() + static_cast<int64_t>(p) * D;
        for (int d = 0; d < D; ++d) {
            po[d] = w00 * map.data()[off(i0, j0) + d] + w01 * map.data()[off(i0, j1) + d] +
                    w10 * map.data()[off(i1, j0) + d] + w11 * map.data()[off(i1, j1) + d];
        }
    }
    if (out.requires_grad()) {
        auto mn = map.node();
        out.node()->back = [mn, taps = std::move(taps), n, D](auto& self) {
            mn->ensure_grad();
            for (int p = 0; p < n; ++p) {
                const S* pg = self.g.data() + static_cast<int64_t>(p) * D;
                for (const auto& tap : taps[static_cast<size_t>(p)]) {
                    S* pm = mn->g.data() + tap.idx;
                    for (int d = 0; d < D; ++d) pm[d] += tap.w * pg[d];
                }
            }
        };
    }
    return out;
}

// ---- structure ----

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    require(shape_numel(new_shape) == x.size(), "reshape: cannot view ",
            shape_str(x.shape()), " as ", shape_str(new_shape));
    Tensor<S> out = make_result<S>(new_shape, {x});
    std::copy(x.data(), x.data() + x.size(), out.data());
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->back = [xn](auto& self) {
            xn->ensure_grad();
            const int64_t m = static_cast<int64_t>(self.v.size());
            for (int64_t i = 0; i < m; ++i) xn->g[i] += self.g[i];
        };
    }
    return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    require(!parts.empty(), "concat_rows: empty input");
    const int m = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        require(p.ndim() == 2 && p.dim(1) == m, "concat_rows: column mismatch ",
                shape_str(p.shape()), " vs ", m, " columns");
        total += p.dim(0);
    }
    Tensor<S> out = make_result<S>({total, m}, parts);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + off);
        off += p.size();
    }
    if (out.requires_grad()) {
        std::vector<NodePtr<S>> nodes;
        std::vector<int64_t> sizes;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            sizes.push_back(p.size());
        }
        out.node()->back = [nodes, sizes](auto& self) {
            int64_t pos = 0;
            for (size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i]->track) {
                    nodes[i]->ensure_grad();
                    for (int64_t j = 0; j < sizes[i]; ++j) {
                        nodes[i]->g[static_cast<size_t>(j)] += self.g[static_cast<size_t>(pos + j)];
                    }
                }
                pos += sizes[i];
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    require(!parts.empty(), "concat_cols: empty input");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require(p.ndim() == 2 && p.dim(0) == n, "concat_cols: row mismatch ",
                shape_str(p.shape()), " vs ", n, " rows");
        total += p.dim(1);
    }
    Tensor<S> out = make_result<S>({n, total}, parts);
    int coff = 0;
    for (const auto& p : parts) {
        const int pm = p.dim(1);
        for (int i = 0; i < n; ++i) {
            std::copy(p.data() + static_cast<int64_t>(i) * pm,
                      p.data() + static_cast<int64_t>(i + 1) * pm,
                      out.data() + static_cast<int64_t>(i) * total + coff);
        }
        coff += pm;
    }
    if (out.requires_grad()) {
        std::vector<NodePtr<S>> nodes;
        std::vector<int> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        out.node()->back = [nodes, widths, n, total](auto& self) {
            int coff2 = 0;
            for (size_t k = 0; k < nodes.size(); ++k) {
                const int pm = widths[k];
                if (nodes[k]->track) {
                    nodes[k]->ensure_grad();
                    for (int i = 0; i < n; ++i) {
                        for (int j = 0; j < pm; ++j) {
                            nodes[k]->g[static_cast<size_t>(static_cast<int64_t>(i) * pm + j)] +=
                                self.g[static_cast<size_t>(static_cast<int64_t>(i) * total + coff2 + j)];
                        }
                    }
                }
                coff2 += pm;
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int r0, int r1) {
    require(x.ndim() == 2 && r0 >= 0 && r1 <= x.dim(0) && r0 <= r1,
            "slice_rows: range [", r0, ",", r1, ") invalid for ", shape_str(x.shape()));
    const int m = x.dim(1);
    Tensor<S> out = make_result<S>({r1 - r0, m}, {x});
    std::copy(x.data() + static_cast<int64_t>(r0) * m, x.data() + static_cast<int64_t>(r1) * m,
              out.data());
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->back = [xn, r0, m](auto& self) {
            xn->ensure_grad();
            const int64_t count = static_cast<int64_t>(self.v.size());
            S* pg = xn->g.data() + static_cast<int64_t>(r0) * m;
            for (int64_t i = 0; i < count; ++i) pg[i] += self.g[static_cast<size_t>(i)];
        };
    }
    return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, int c0, int c1) {
    require(x.ndim() == 2 && c0 >= 0 && c1 <= x.dim(1) && c0 <= c1,
            "slice_cols: range [", c0, ",", c1, ") invalid for ", shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1), w = c1 - c0;
    Tensor<S> out = make_result<S>({n, w}, {x});
    for (int i = 0; i < n; ++i) {
        std::copy(x.data() + static_cast<int64_t>(i) * m + c0,
                  x.data() + static_cast<int64_t>(i) * m + c1,
                  out.data() + static_cast<int64_t>(i) * w);
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->back = [xn, c0, n, m, w](auto& self) {
            xn->ensure_grad();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < w; ++j) {
                    xn->g[static_cast<size_t>(static_cast<int64_t>(i) * m + c0 + j)] +=
                        self.g[static_cast<size_t>(static_cast<int64_t>(i) * w + j)];
                }
            }
        };
    }
    return out;
}

// Selects rows of x by index; duplicates allowed. Backward scatter-adds.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& indices) {
    require(x.ndim() == 2, "gather_rows: expected matrix, got ", shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    for (int idx : indices) {
        require(idx >= 0 && idx < n, "gather_rows: index ", idx, " out of range [0,", n, ")");
    }
    Tensor<S> out = make_result<S>({static_cast<int>(indices.size()), m}, {x});
    for (size_t i = 0; i < indices.size(); ++i) {
        std::copy(x.data() + static_cast<int64_t>(indices[i]) * m,
                  x.data() + static_cast<int64_t>(indices[i] + 1) * m,
                  out.data() + static_cast<int64_t>(i) * m);
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->back = [xn, indices, m](auto& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < indices.size(); ++i) {
                S* pg = xn->g.data() + static_cast<int64_t>(indices[i]) * m;
                const S* ps = self.g.data() + static_cast<int64_t>(i) * m;
                for (int j = 0; j < m; ++j) pg[j] += ps[j];
            }
        };
    }
    return out;
}

// Stacks `count` copies of a 1 x m row vector. Backward sums row grads.
template <typename S>
Tensor<S> repeat_row(const Tensor<S>& row, int count) {
    require(row.ndim() == 2 && row.dim(0) == 1, "repeat_row: expected 1 x m row, got ",
            shape_str(row.shape()));
    const int m = row.dim(1);
    Tensor<S> out = make_result<S>({count, m}, {row});
    for (int i = 0; i < count; ++i) {
        std::copy(row.data(), row.data() + m, out.data() + static_cast<int64_t>(i) * m);
    }
    if (out.requires_grad()) {
        auto rn = row.node();
        out.node()->back = [rn, count, m](auto& self) {
            rn->ensure_grad();
            for (int i = 0; i < count; ++i) {
                const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                for (int j = 0; j < m; ++j) rn->g[static_cast<size_t>(j)] += pg[j];
            }
        };
    }
    return out;
}

// Adds a 1 x m vector to one row of x.
template <typename S>
Tensor<S> add_to_row(const Tensor<S>& x, int row, const Tensor<S>& v) {
    require(x.ndim() == 2 && v.ndim() == 2 && v.dim(0) == 1 && v.dim(1) == x.dim(1),
            "add_to_row: shape mismatch ", shape_str(x.shape()), " vs ", shape_str(v.shape()));
    require(row >= 0 && row < x.dim(0), "add_to_row: row ", row, " out of range");
    const int m = x.dim(1);
    Tensor<S> out = make_result<S>(x.shape(), {x, v});
    std::copy(x.data(), x.data() + x.size(), out.data());
    for (int j = 0; j < m; ++j) {
        out.data()[static_cast<int64_t>(row) * m + j] += v.data()[j];
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto vn = v.node();
        out.node()->back = [xn, vn, row, m](auto& self) {
            if (xn->track) {
                xn->ensure_grad();
                const int64_t total = static_cast<int64_t>(self.v.size());
                for (int64_t i = 0; i < total; ++i) xn->g[i] += self.g[i];
            }
            if (vn->track) {
                vn->ensure_grad();
                for (int j = 0; j < m; ++j) {
                    vn->g[static_cast<size_t>(j)] += self.g[static_cast<size_t>(static_cast<int64_t>(row) * m + j)];
                }
            }
        };
    }
    return out;
}

// Replaces the listed rows with a shared 1 x m token; all other rows pass
// through. Gradient to the token is the sum over replaced rows.
template <typename S>
Tensor<S> replace_rows(const Tensor<S>& x, const std::vector<int>& rows, const Tensor<S>& token) {
    require(x.ndim() == 2 && token.ndim() == 2 && token.dim(0) == 1 && token.dim(1) == x.dim(1),
            "replace_rows: shape mismatch ", shape_str(x.shape()), " vs ", shape_str(token.shape()));
    const int n = x.dim(0), m = x.dim(1);
    std::vector<bool> replaced(static_cast<size_t>(n), false);
    for (int r : rows) {
        require(r >= 0 && r < n, "replace_rows: index ", r, " out of range [0,", n, ")");
        replaced[static_cast<size_t>(r)] = true;
    }
    Tensor<S> out = make_result<S>(x.shape(), {x, token});
    for (int i = 0; i < n; ++i) {
        const S* src = replaced[static_cast<size_t>(i)] ? token.data()
                                                        : x.data() + static_cast<int64_t>(i) * m;
        std::copy(src, src + m, out.data() + static_cast<int64_t>(i) * m);
    }
    if (out.requires_grad()) {
        auto xn = x.node();
        auto tn = token.node();
        out.node()->back = [xn, tn, replaced = std::move(replaced), n, m](auto& self) {
            if (xn->track) xn->ensure_grad();
            if (tn->track) tn->ensure_grad();
            for (int i = 0; i < n; ++i) {
                const S* pg = self.g.data() + static_cast<int64_t>(i) * m;
                if (replaced[static_cast<size_t>(i)]) {
                    if (tn->track) {
                        for (int j = 0; j < m; ++j) tn->g[static_cast<size_t>(j)] += pg[j];
                    }
                } else if (xn->track) {
                    S* px = xn->g.data() + static_cast<int64_t>(i) * m;
                    for (int j = 0; j < m; ++j) px[j] += pg[j];
                }
            }
        };
    }
    return out;
}

// ---- reductions ----

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    Tensor<S> out = make_result<S>({1}, {x});
    S acc = S(0);
    for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    out.data()[0] = acc;
    if (out.requires_grad()) {
        auto xn = x.node();
        out.node()->back = [xn](auto& self) {
            xn->ensure_grad();
            const S go = self.g[0];
            for (auto& g : xn->g) g += go;
        };
    }
    return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.size()));
}

} // namespace ops

} // namespace nmim
