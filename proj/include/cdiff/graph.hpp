#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// Handle to a node on a GraphT tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape. Ops append nodes in topological order and
// record a backward closure; backward() replays them in reverse. One graph
// per training-step item; graphs are single-threaded and non-copyable.
template <typename T>
class GraphT {
  public:
    using Tn = TensorT<T>;
    using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const EMat>;
    using MMap = Eigen::Map<EMat>;

    GraphT() = default;
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    // ---- leaves ----------------------------------------------------------

    Var leaf(Tn t, bool requires_grad = false, std::string name = "") {
        Node n;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        n.is_leaf = true;
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        return Var{(int)nodes_.size() - 1};
    }

    Var constant(Tn t) { return leaf(std::move(t), false); }

    // Binds a model parameter as a leaf; remembered so optimizers can map
    // gradients back to the parameter after backward().
    // Repeated registrations of one parameter (e.g. shared weights applied to
    // every element of a batch) must map to a single node so the backward
    // pass accumulates one total gradient and optimizers see each parameter
    // exactly once per step.
    Var param(ParameterT<T>& p) {
        auto it = bound_ids_.find(&p);
        if (it != bound_ids_.end()) return Var{it->second};
        Var v = leaf(p.value, p.trainable, p.name);
        bound_.push_back({&p, v.id});
        bound_ids_.emplace(&p, v.id);
        return v;
    }

    const Tn& value(Var v) const { return nodes_[(size_t)v.id].value; }
    const Tn& grad(Var v) const {
        const Tn& g = grads_[(size_t)v.id];
        if (g.data.empty()) fail("grad", "no gradient recorded for node " + std::to_string(v.id));
        return g;
    }
    bool has_grad(Var v) const {
        return v.id < (int)grads_.size() && !grads_[(size_t)v.id].data.empty();
    }
    size_t size() const { return nodes_.size(); }

    // ---- elementwise / broadcast -----------------------------------------

    Var add(Var a, Var b) { return binary_op(a, b, OpAdd{}); }
    Var sub(Var a, Var b) { return binary_op(a, b, OpSub{}); }
    Var mul(Var a, Var b) { return binary_op(a, b, OpMul{}); }

    Var scale(Var a, T c) {
        const Tn& x = val(a);
        Tn out = x;
        for (auto& v : out.data) v *= c;
        return make(std::move(out), {a}, [this, a, c](int id) {
            accumulate_scaled(a, grads_[(size_t)id], c);
        });
    }

    Var add_const(Var a, T c) {
        Tn out = val(a);
        for (auto& v : out.data) v += c;
        return make(std::move(out), {a}, [this, a](int id) {
            accumulate_scaled(a, grads_[(size_t)id], T(1));
        });
    }

    Var silu(Var a) {
        const Tn& x = val(a);
        Tn out(x.shape);
        for (int64_t i = 0; i < x.numel(); i++) {
            T s = sigmoid(x.data[(size_t)i]);
            out.data[(size_t)i] = x.data[(size_t)i] * s;
        }
        return make(std::move(out), {a}, [this, a](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& x = val(a);
            Tn& ga = grad_buf(a);
            for (int64_t i = 0; i < x.numel(); i++) {
                T s = sigmoid(x.data[(size_t)i]);
                ga.data[(size_t)i] += g.data[(size_t)i] * s * (T(1) + x.data[(size_t)i] * (T(1) - s));
            }
        });
    }

    Var square(Var a) {
        const Tn& x = val(a);
        Tn out(x.shape);
        for (int64_t i = 0; i < x.numel(); i++) out.data[(size_t)i] = x.data[(size_t)i] * x.data[(size_t)i];
        return make(std::move(out), {a}, [this, a](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& x = val(a);
            Tn& ga = grad_buf(a);
            for (int64_t i = 0; i < x.numel(); i++)
                ga.data[(size_t)i] += T(2) * x.data[(size_t)i] * g.data[(size_t)i];
        });
    }

    Var log(Var a) {
        const Tn& x = val(a);
        Tn out(x.shape);
        for (int64_t i = 0; i < x.numel(); i++) out.data[(size_t)i] = std::log(x.data[(size_t)i]);
        return make(std::move(out), {a}, [this, a](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& x = val(a);
            Tn& ga = grad_buf(a);
            for (int64_t i = 0; i < x.numel(); i++)
                ga.data[(size_t)i] += g.data[(size_t)i] / x.data[(size_t)i];
        });
    }

    // ---- reductions -------------------------------------------------------

    Var sum_all(Var a) {
        const Tn& x = val(a);
        T acc = T(0);
        for (T v : x.data) acc += v;  // fixed index order
        Tn out({1});
        out.data[0] = acc;
        return make(std::move(out), {a}, [this, a](int id) {
            accumulate_fill(a, grads_[(size_t)id].data[0]);
        });
    }

    Var mean_all(Var a) {
        const Tn& x = val(a);
        T acc = T(0);
        for (T v : x.data) acc += v;
        T inv = T(1) / (T)x.numel();
        Tn out({1});
        out.data[0] = acc * inv;
        return make(std::move(out), {a}, [this, a, inv](int id) {
            accumulate_fill(a, grads_[(size_t)id].data[0] * inv);
        });
    }

    // [N,D] -> [D], mean over rows
    Var mean_rows(Var a) {
        const Tn& x = val(a);
        check(x.rank() == 2, "mean_rows", "expects a rank-2 input, got " + shape_str(x.shape));
        int n = x.shape[0], d = x.shape[1];
        Tn out({d});
        for (int i = 0; i < n; i++)
            for (int j = 0; j < d; j++) out.data[(size_t)j] += x.at2(i, j);
        T inv = T(1) / (T)n;
        for (auto& v : out.data) v *= inv;
        return make(std::move(out), {a}, [this, a, n, d, inv](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            Tn& ga = grad_buf(a);
            for (int i = 0; i < n; i++)
                for (int j = 0; j < d; j++) ga.at2(i, j) += g.data[(size_t)j] * inv;
        });
    }

    // [C,N] -> [C], max over the last axis; ties break to the lowest index
    // and the subgradient routes only through the winning entry.
    Var row_max(Var a) {
        const Tn& x = val(a);
        check(x.rank() == 2, "row_max", "expects a rank-2 input, got " + shape_str(x.shape));
        int c = x.shape[0], n = x.shape[1];
        check(n >= 1, "row_max", "empty rows");
        Tn out({c});
        auto arg = std::make_shared<std::vector<int>>((size_t)c, 0);
        for (int i = 0; i < c; i++) {
            T best = x.at2(i, 0);
            int bi = 0;
            for (int j = 1; j < n; j++)
                if (x.at2(i, j) > best) {
                    best = x.at2(i, j);
                    bi = j;
                }
            out.data[(size_t)i] = best;
            (*arg)[(size_t)i] = bi;
        }
        return make(std::move(out), {a}, [this, a, c, arg](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            Tn& ga = grad_buf(a);
            for (int i = 0; i < c; i++) ga.at2(i, (*arg)[(size_t)i]) += g.data[(size_t)i];
        });
    }

    // ---- shape ------------------------------------------------------------

    Var reshape(Var a, std::vector<int> shape) {
        const Tn& x = val(a);
        check(Tn::count(shape) == x.numel(), "reshape",
              "cannot reshape " + shape_str(x.shape) + " to " + shape_str(shape));
        Tn out(shape, x.data);
        return make(std::move(out), {a}, [this, a](int id) {
            accumulate_scaled(a, grads_[(size_t)id], T(1));
        });
    }

    Var permute(Var a, std::vector<int> perm) {
        const Tn& x = val(a);
        int r = x.rank();
        check((int)perm.size() == r, "permute", "perm rank mismatch for " + shape_str(x.shape));
        std::vector<int> out_shape(perm.size());
        for (int i = 0; i < r; i++) out_shape[(size_t)i] = x.shape[(size_t)perm[(size_t)i]];
        Tn out(out_shape);
        permute_into(x, perm, out);
        return make(std::move(out), {a}, [this, a, perm, r](int id) {
            if (!wants_grad(a)) return;
            std::vector<int> inv((size_t)r);
            for (int i = 0; i < r; i++) inv[(size_t)perm[(size_t)i]] = i;
            const Tn& g = grads_[(size_t)id];
            Tn back(val(a).shape);
            permute_into(g, inv, back);
            accumulate_scaled(a, back, T(1));
        });
    }

    Var concat(Var a, Var b, int axis) {
        const Tn& x = val(a);
        const Tn& y = val(b);
        check(x.rank() == y.rank(), "concat", "rank mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        for (int i = 0; i < x.rank(); i++)
            if (i != axis)
                check(x.shape[(size_t)i] == y.shape[(size_t)i], "concat",
                      "shape mismatch off-axis: " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        std::vector<int> os = x.shape;
        os[(size_t)axis] += y.shape[(size_t)axis];
        Tn out(os);
        int64_t outer = 1;
        for (int i = 0; i < axis; i++) outer *= x.shape[(size_t)i];
        int64_t ia = x.numel() / outer, ib = y.numel() / outer;
        for (int64_t o = 0; o < outer; o++) {
            std::copy_n(x.data.begin() + o * ia, ia, out.data.begin() + o * (ia + ib));
            std::copy_n(y.data.begin() + o * ib, ib, out.data.begin() + o * (ia + ib) + ia);
        }
        return make(std::move(out), {a, b}, [this, a, b, outer, ia, ib](int id) {
            const Tn& g = grads_[(size_t)id];
            if (wants_grad(a)) {
                Tn& ga = grad_buf(a);
                for (int64_t o = 0; o < outer; o++)
                    for (int64_t i = 0; i < ia; i++) ga.data[(size_t)(o * ia + i)] += g.data[(size_t)(o * (ia + ib) + i)];
            }
            if (wants_grad(b)) {
                Tn& gb = grad_buf(b);
                for (int64_t o = 0; o < outer; o++)
                    for (int64_t i = 0; i < ib; i++) gb.data[(size_t)(o * ib + i)] += g.data[(size_t)(o * (ia + ib) + ia + i)];
            }
        });
    }

    // rows of x ([V,D]) selected by index; backward scatter-adds.
    Var gather_rows(Var a, std::vector<int> rows) {
        const Tn& x = val(a);
        check(x.rank() == 2, "gather_rows", "expects rank-2 input, got " + shape_str(x.shape));
        int v = x.shape[0], d = x.shape[1];
        for (int r : rows)
            check(r >= 0 && r < v, "gather_rows",
                  "row index " + std::to_string(r) + " out of range [0," + std::to_string(v) + ")");
        Tn out({(int)rows.size(), d});
        for (size_t i = 0; i < rows.size(); i++)
            std::copy_n(x.data.begin() + (int64_t)rows[i] * d, d, out.data.begin() + (int64_t)i * d);
        return make(std::move(out), {a}, [this, a, rows, d](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            Tn& ga = grad_buf(a);
            for (size_t i = 0; i < rows.size(); i++)
                for (int j = 0; j < d; j++) ga.at2(rows[i], j) += g.at2((int)i, j);
        });
    }

    // ---- matmul -----------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tn& x = val(a);
        const Tn& y = val(b);
        check(x.rank() == 2 && y.rank() == 2 && x.shape[1] == y.shape[0], "matmul",
              "incompatible shapes " + shape_str(x.shape) + " x " + shape_str(y.shape));
        int m = x.shape[0], k = x.shape[1], n = y.shape[1];
        Tn out({m, n});
        MMap(out.data.data(), m, n).noalias() =
            CMap(x.data.data(), m, k) * CMap(y.data.data(), k, n);
        return make(std::move(out), {a, b}, [this, a, b, m, k, n](int id) {
            const Tn& g = grads_[(size_t)id];
            CMap gm(g.data.data(), m, n);
            if (wants_grad(a)) {
                Tn& ga = grad_buf(a);
                MMap(ga.data.data(), m, k).noalias() += gm * CMap(val(b).data.data(), k, n).transpose();
            }
            if (wants_grad(b)) {
                Tn& gb = grad_buf(b);
                MMap(gb.data.data(), k, n).noalias() += CMap(val(a).data.data(), m, k).transpose() * gm;
            }
        });
    }

    // Batched matmul [B,m,k] x [B,k,n] -> [B,m,n]
    Var bmm(Var a, Var b) {
        const Tn& x = val(a);
        const Tn& y = val(b);
        check(x.rank() == 3 && y.rank() == 3 && x.shape[0] == y.shape[0] && x.shape[2] == y.shape[1],
              "bmm", "incompatible shapes " + shape_str(x.shape) + " x " + shape_str(y.shape));
        int bs = x.shape[0], m = x.shape[1], k = x.shape[2], n = y.shape[2];
        Tn out({bs, m, n});
        for (int i = 0; i < bs; i++)
            MMap(out.data.data() + (int64_t)i * m * n, m, n).noalias() =
                CMap(x.data.data() + (int64_t)i * m * k, m, k) *
                CMap(y.data.data() + (int64_t)i * k * n, k, n);
        return make(std::move(out), {a, b}, [this, a, b, bs, m, k, n](int id) {
            const Tn& g = grads_[(size_t)id];
            for (int i = 0; i < bs; i++) {
                CMap gm(g.data.data() + (int64_t)i * m * n, m, n);
                if (wants_grad(a)) {
                    Tn& ga = grad_buf(a);
                    MMap(ga.data.data() + (int64_t)i * m * k, m, k).noalias() +=
                        gm * CMap(val(b).data.data() + (int64_t)i * k * n, k, n).transpose();
                }
                if (wants_grad(b)) {
                    Tn& gb = grad_buf(b);
                    MMap(gb.data.data() + (int64_t)i * k * n, k, n).noalias() +=
                        CMap(val(a).data.data() + (int64_t)i * m * k, m, k).transpose() * gm;
                }
            }
        });
    }

    // ---- softmax / norms ---------------------------------------------------

    Var softmax_last(Var a) {
        const Tn& x = val(a);
        check(x.rank() >= 1, "softmax", "rank-0 input");
        int64_t cols = x.shape.back();
        int64_t rows = x.numel() / cols;
        Tn out(x.shape);
        for (int64_t r = 0; r < rows; r++) {
            const T* in = x.data.data() + r * cols;
            T* o = out.data.data() + r * cols;
            T mx = in[0];
            for (int64_t j = 1; j < cols; j++) mx = std::max(mx, in[j]);
            T den = T(0);
            for (int64_t j = 0; j < cols; j++) {
                o[j] = std::exp(in[j] - mx);
                den += o[j];
            }
            T inv = T(1) / den;
            for (int64_t j = 0; j < cols; j++) o[j] *= inv;
        }
        return make(std::move(out), {a}, [this, a, rows, cols](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& y = nodes_[(size_t)id].value;
            Tn& ga = grad_buf(a);
            for (int64_t r = 0; r < rows; r++) {
                const T* gr = g.data.data() + r * cols;
                const T* yr = y.data.data() + r * cols;
                T dot = T(0);
                for (int64_t j = 0; j < cols; j++) dot += gr[j] * yr[j];
                T* o = ga.data.data() + r * cols;
                for (int64_t j = 0; j < cols; j++) o[j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    // Row-wise log softmax, fused for stability: log p_j = (x_j - mx) - log
    // sum_k exp(x_k - mx). The composed log(softmax(x)) overflows 1/p_j once
    // a row is confidently wrong by ~90 logits; this form stays finite and
    // its gradient is bounded by 2|g| regardless of the margins.
    Var log_softmax_last(Var a) {
        const Tn& x = val(a);
        check(x.rank() >= 1, "log_softmax", "rank-0 input");
        int64_t cols = x.shape.back();
        int64_t rows = x.numel() / cols;
        Tn out(x.shape);
        for (int64_t r = 0; r < rows; r++) {
            const T* in = x.data.data() + r * cols;
            T* o = out.data.data() + r * cols;
            T mx = in[0];
            for (int64_t j = 1; j < cols; j++) mx = std::max(mx, in[j]);
            T den = T(0);
            for (int64_t j = 0; j < cols; j++) den += std::exp(in[j] - mx);
            T lden = std::log(den);
            for (int64_t j = 0; j < cols; j++) o[j] = in[j] - mx - lden;
        }
        return make(std::move(out), {a}, [this, a, rows, cols](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& y = nodes_[(size_t)id].value;  // log probabilities
            Tn& ga = grad_buf(a);
            for (int64_t r = 0; r < rows; r++) {
                const T* gr = g.data.data() + r * cols;
                const T* yr = y.data.data() + r * cols;
                T gsum = T(0);
                for (int64_t j = 0; j < cols; j++) gsum += gr[j];
                T* o = ga.data.data() + r * cols;
                for (int64_t j = 0; j < cols; j++) o[j] += gr[j] - std::exp(yr[j]) * gsum;
            }
        });
    }

    // Group normalization over [C,H,W] with per-channel affine.
    Var group_norm(Var a, Var gamma, Var beta, int groups, T eps = (T)1e-5) {
        const Tn& x = val(a);
        check(x.rank() == 3, "group_norm", "expects [C,H,W], got " + shape_str(x.shape));
        int c = x.shape[0], h = x.shape[1], w = x.shape[2];
        check(groups >= 1 && c % groups == 0, "group_norm",
              "group count " + std::to_string(groups) + " does not divide channels " + std::to_string(c));
        check(val(gamma).numel() == c && val(beta).numel() == c, "group_norm", "affine size mismatch");
        int cpg = c / groups;
        int64_t gsz = (int64_t)cpg * h * w;
        auto stats = std::make_shared<std::vector<T>>((size_t)groups * 2);
        Tn out(x.shape);
        const Tn& gm = val(gamma);
        const Tn& bt = val(beta);
        for (int g = 0; g < groups; g++) {
            const T* in = x.data.data() + (int64_t)g * gsz;
            T mu = T(0);
            for (int64_t i = 0; i < gsz; i++) mu += in[i];
            mu /= (T)gsz;
            T var = T(0);
            for (int64_t i = 0; i < gsz; i++) {
                T d = in[i] - mu;
                var += d * d;
            }
            var /= (T)gsz;
            T inv = T(1) / std::sqrt(var + eps);
            (*stats)[(size_t)g * 2] = mu;
            (*stats)[(size_t)g * 2 + 1] = inv;
            for (int cc = 0; cc < cpg; cc++) {
                int ch = g * cpg + cc;
                const T* xin = x.data.data() + (int64_t)ch * h * w;
                T* o = out.data.data() + (int64_t)ch * h * w;
                T ga_ = gm.data[(size_t)ch], be = bt.data[(size_t)ch];
                for (int64_t i = 0; i < (int64_t)h * w; i++) o[i] = ga_ * (xin[i] - mu) * inv + be;
            }
        }
        return make(std::move(out), {a, gamma, beta},
                    [this, a, gamma, beta, groups, cpg, h, w, stats](int id) {
            const Tn& g = grads_[(size_t)id];
            const Tn& x = val(a);
            const Tn& gm = val(gamma);
            int64_t hw = (int64_t)h * w;
            int64_t gsz = (int64_t)cpg * hw;
            if (wants_grad(gamma) || wants_grad(beta)) {
                for (int ch = 0; ch < groups * cpg; ch++) {
                    int grp = ch / cpg;
                    T mu = (*stats)[(size_t)grp * 2], inv = (*stats)[(size_t)grp * 2 + 1];
                    T sg = T(0), sb = T(0);
                    const T* xin = x.data.data() + (int64_t)ch * hw;
                    const T* gr = g.data.data() + (int64_t)ch * hw;
                    for (int64_t i = 0; i < hw; i++) {
                        sg += gr[i] * (xin[i] - mu) * inv;
                        sb += gr[i];
                    }
                    if (wants_grad(gamma)) grad_buf(gamma).data[(size_t)ch] += sg;
                    if (wants_grad(beta)) grad_buf(beta).data[(size_t)ch] += sb;
                }
            }
            if (!wants_grad(a)) return;
            Tn& ga = grad_buf(a);
            for (int grp = 0; grp < groups; grp++) {
                T mu = (*stats)[(size_t)grp * 2], inv = (*stats)[(size_t)grp * 2 + 1];
                // gxhat = g * gamma (per channel); reduce means over the group
                T mean_gx = T(0), mean_gxx = T(0);
                for (int cc = 0; cc < cpg; cc++) {
                    int ch = grp * cpg + cc;
                    const T* xin = x.data.data() + (int64_t)ch * hw;
                    const T* gr = g.data.data() + (int64_t)ch * hw;
                    T ga_ = gm.data[(size_t)ch];
                    for (int64_t i = 0; i < hw; i++) {
                        T gx = gr[i] * ga_;
                        mean_gx += gx;
                        mean_gxx += gx * (xin[i] - mu) * inv;
                    }
                }
                mean_gx /= (T)gsz;
                mean_gxx /= (T)gsz;
                for (int cc = 0; cc < cpg; cc++) {
                    int ch = grp * cpg + cc;
                    const T* xin = x.data.data() + (int64_t)ch * hw;
                    const T* gr = g.data.data() + (int64_t)ch * hw;
                    T* o = ga.data.data() + (int64_t)ch * hw;
                    T ga_ = gm.data[(size_t)ch];
                    for (int64_t i = 0; i < hw; i++) {
                        T xhat = (xin[i] - mu) * inv;
                        o[i] += inv * (gr[i] * ga_ - mean_gx - xhat * mean_gxx);
                    }
                }
            }
        });
    }

    // Layer normalization over the last axis with affine.
    Var layer_norm(Var a, Var gamma, Var beta, T eps = (T)1e-5) {
        const Tn& x = val(a);
        int64_t d = x.shape.back();
        int64_t rows = x.numel() / d;
        check(val(gamma).numel() == d && val(beta).numel() == d, "layer_norm", "affine size mismatch");
        auto stats = std::make_shared<std::vector<T>>((size_t)rows * 2);
        Tn out(x.shape);
        const Tn& gm = val(gamma);
        const Tn& bt = val(beta);
        for (int64_t r = 0; r < rows; r++) {
            const T* in = x.data.data() + r * d;
            T mu = T(0);
            for (int64_t i = 0; i < d; i++) mu += in[i];
            mu /= (T)d;
            T var = T(0);
            for (int64_t i = 0; i < d; i++) {
                T dd = in[i] - mu;
                var += dd * dd;
            }
            var /= (T)d;
            T inv = T(1) / std::sqrt(var + eps);
            (*stats)[(size_t)r * 2] = mu;
            (*stats)[(size_t)r * 2 + 1] = inv;
            T* o = out.data.data() + r * d;
            for (int64_t i = 0; i < d; i++) o[i] = gm.data[(size_t)i] * (in[i] - mu) * inv + bt.data[(size_t)i];
        }
        return make(std::move(out), {a, gamma, beta}, [this, a, gamma, beta, rows, d, stats](int id) {
            const Tn& g = grads_[(size_t)id];
            const Tn& x = val(a);
            const Tn& gm = val(gamma);
            for (int64_t r = 0; r < rows; r++) {
                T mu = (*stats)[(size_t)r * 2], inv = (*stats)[(size_t)r * 2 + 1];
                const T* in = x.data.data() + r * d;
                const T* gr = g.data.data() + r * d;
                if (wants_grad(gamma)) {
                    Tn& gg = grad_buf(gamma);
                    for (int64_t i = 0; i < d; i++) gg.data[(size_t)i] += gr[i] * (in[i] - mu) * inv;
                }
                if (wants_grad(beta)) {
                    Tn& gb = grad_buf(beta);
                    for (int64_t i = 0; i < d; i++) gb.data[(size_t)i] += gr[i];
                }
                if (wants_grad(a)) {
                    T mean_gx = T(0), mean_gxx = T(0);
                    for (int64_t i = 0; i < d; i++) {
                        T gx = gr[i] * gm.data[(size_t)i];
                        mean_gx += gx;
                        mean_gxx += gx * (in[i] - mu) * inv;
                    }
                    mean_gx /= (T)d;
                    mean_gxx /= (T)d;
                    T* o = grad_buf(a).data.data() + r * d;
                    for (int64_t i = 0; i < d; i++) {
                        T xhat = (in[i] - mu) * inv;
                        o[i] += inv * (gr[i] * gm.data[(size_t)i] - mean_gx - xhat * mean_gxx);
                    }
                }
            }
        });
    }

    // Row-wise L2 normalization of [N,D].
    Var l2norm_rows(Var a, T eps = (T)1e-12) {
        const Tn& x = val(a);
        check(x.rank() == 2, "l2norm_rows", "expects rank-2 input, got " + shape_str(x.shape));
        int n = x.shape[0], d = x.shape[1];
        auto norms = std::make_shared<std::vector<T>>((size_t)n);
        Tn out(x.shape);
        for (int i = 0; i < n; i++) {
            const T* in = x.data.data() + (int64_t)i * d;
            T s = eps;
            for (int j = 0; j < d; j++) s += in[j] * in[j];
            T nr = std::sqrt(s);
            (*norms)[(size_t)i] = nr;
            T inv = T(1) / nr;
            T* o = out.data.data() + (int64_t)i * d;
            for (int j = 0; j < d; j++) o[j] = in[j] * inv;
        }
        return make(std::move(out), {a}, [this, a, n, d, norms](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            const Tn& y = nodes_[(size_t)id].value;
            Tn& ga = grad_buf(a);
            for (int i = 0; i < n; i++) {
                const T* gr = g.data.data() + (int64_t)i * d;
                const T* yr = y.data.data() + (int64_t)i * d;
                T dot = T(0);
                for (int j = 0; j < d; j++) dot += gr[j] * yr[j];
                T inv = T(1) / (*norms)[(size_t)i];
                T* o = ga.data.data() + (int64_t)i * d;
                for (int j = 0; j < d; j++) o[j] += (gr[j] - yr[j] * dot) * inv;
            }
        });
    }

    // ---- convolution / spatial ---------------------------------------------

    // x: [Cin,H,W], w: [Cout,Cin,kh,kw], optional bias [Cout]; zero padding.
    Var conv2d(Var xv, Var wv, Var bias, int stride, int pad) {
        const Tn& x = val(xv);
        const Tn& w = val(wv);
        check(x.rank() == 3 && w.rank() == 4, "conv2d",
              "expects x [C,H,W] and w [Co,Ci,kh,kw], got " + shape_str(x.shape) + " and " + shape_str(w.shape));
        check(x.shape[0] == w.shape[1], "conv2d",
              "channel mismatch: x " + shape_str(x.shape) + " vs w " + shape_str(w.shape));
        int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
        int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        check(stride >= 1, "conv2d", "bad stride");
        int ho = (h + 2 * pad - kh) / stride + 1;
        int wo = (wd + 2 * pad - kw) / stride + 1;
        check(ho >= 1 && wo >= 1, "conv2d", "kernel larger than padded input");
        if (bias.valid())
            check(val(bias).numel() == co, "conv2d", "bias size mismatch");

        int64_t kc = (int64_t)ci * kh * kw;
        int64_t np = (int64_t)ho * wo;
        auto col = std::make_shared<Tn>(std::vector<int>{(int)kc, (int)np});
        im2col(x, kh, kw, stride, pad, ho, wo, *col);

        Tn out({co, ho, wo});
        MMap(out.data.data(), co, (int)np).noalias() =
            CMap(w.data.data(), co, (int)kc) * CMap(col->data.data(), (int)kc, (int)np);
        if (bias.valid()) {
            const Tn& b = val(bias);
            for (int c = 0; c < co; c++) {
                T* o = out.data.data() + (int64_t)c * np;
                T bb = b.data[(size_t)c];
                for (int64_t i = 0; i < np; i++) o[i] += bb;
            }
        }
        std::vector<Var> parents = bias.valid() ? std::vector<Var>{xv, wv, bias} : std::vector<Var>{xv, wv};
        return make(std::move(out), parents,
                    [this, xv, wv, bias, col, stride, pad, ci, h, wd, co, kh, kw, ho, wo, kc, np](int id) {
            const Tn& g = grads_[(size_t)id];
            CMap gm(g.data.data(), co, (int)np);
            if (wants_grad(wv)) {
                Tn& gw = grad_buf(wv);
                MMap(gw.data.data(), co, (int)kc).noalias() +=
                    gm * CMap(col->data.data(), (int)kc, (int)np).transpose();
            }
            if (bias.valid() && wants_grad(bias)) {
                Tn& gb = grad_buf(bias);
                for (int c = 0; c < co; c++) {
                    T s = T(0);
                    const T* gr = g.data.data() + (int64_t)c * np;
                    for (int64_t i = 0; i < np; i++) s += gr[i];
                    gb.data[(size_t)c] += s;
                }
            }
            if (wants_grad(xv)) {
                Tn gcol({(int)kc, (int)np});
                MMap(gcol.data.data(), (int)kc, (int)np).noalias() =
                    CMap(val(wv).data.data(), co, (int)kc).transpose() * gm;
                col2im_add(gcol, ci, h, wd, kh, kw, stride, pad, ho, wo, grad_buf(xv));
            }
        });
    }

    // Nearest-neighbor 2x upsample of [C,H,W].
    Var upsample2x(Var a) {
        const Tn& x = val(a);
        check(x.rank() == 3, "upsample2x", "expects [C,H,W], got " + shape_str(x.shape));
        int c = x.shape[0], h = x.shape[1], w = x.shape[2];
        Tn out({c, 2 * h, 2 * w});
        for (int ch = 0; ch < c; ch++)
            for (int y = 0; y < 2 * h; y++) {
                const T* in = x.data.data() + ((int64_t)ch * h + y / 2) * w;
                T* o = out.data.data() + ((int64_t)ch * 2 * h + y) * 2 * w;
                for (int xx = 0; xx < 2 * w; xx++) o[xx] = in[xx / 2];
            }
        return make(std::move(out), {a}, [this, a, c, h, w](int id) {
            if (!wants_grad(a)) return;
            const Tn& g = grads_[(size_t)id];
            Tn& ga = grad_buf(a);
            for (int ch = 0; ch < c; ch++)
                for (int y = 0; y < 2 * h; y++) {
                    const T* gr = g.data.data() + ((int64_t)ch * 2 * h + y) * 2 * w;
                    T* o = ga.data.data() + ((int64_t)ch * h + y / 2) * w;
                    for (int xx = 0; xx < 2 * w; xx++) o[xx / 2] += gr[xx];
                }
        });
    }

    // [C,H,W] + [C], bias broadcast over the spatial extent.
    Var add_channel_bias(Var a, Var b) {
        const Tn& x = val(a);
        const Tn& bb = val(b);
        check(x.rank() == 3 && bb.numel() == x.shape[0], "add_channel_bias",
              "shape mismatch " + shape_str(x.shape) + " + " + shape_str(bb.shape));
        int c = x.shape[0];
        int64_t hw = (int64_t)x.shape[1] * x.shape[2];
        Tn out = x;
        for (int ch = 0; ch < c; ch++) {
            T* o = out.data.data() + ch * hw;
            T v = bb.data[(size_t)ch];
            for (int64_t i = 0; i < hw; i++) o[i] += v;
        }
        return make(std::move(out), {a, b}, [this, a, b, c, hw](int id) {
            const Tn& g = grads_[(size_t)id];
            if (wants_grad(a)) accumulate_scaled(a, g, T(1));
            if (wants_grad(b)) {
                Tn& gb = grad_buf(b);
                for (int ch = 0; ch < c; ch++) {
                    T s = T(0);
                    const T* gr = g.data.data() + ch * hw;
                    for (int64_t i = 0; i < hw; i++) s += gr[i];
                    gb.data[(size_t)ch] += s;
                }
            }
        });
    }

    // ---- backward -----------------------------------------------------------

    // Runs reverse-mode accumulation from a scalar loss. Gradients for
    // requires_grad leaves survive; intermediate gradients are released.
    void backward(Var loss) {
        check(val(loss).numel() == 1, "backward",
              "loss must be scalar, got " + shape_str(val(loss).shape));
        grads_.assign(nodes_.size(), Tn{});
        grad_buf(loss).data[0] = T(1);
        for (int i = loss.id; i >= 0; i--) {
            if (!nodes_[(size_t)i].backward) continue;
            if (grads_[(size_t)i].data.empty()) continue;
            nodes_[(size_t)i].backward((int)i);
            if (!nodes_[(size_t)i].is_leaf) grads_[(size_t)i] = Tn{};  // release
        }
    }

    // Gradients of named requires_grad leaves, keyed by leaf name.
    std::map<std::string, Tn> leaf_grads() const {
        std::map<std::string, Tn> out;
        for (size_t i = 0; i < nodes_.size(); i++) {
            const Node& n = nodes_[i];
            if (n.is_leaf && n.requires_grad && !n.name.empty() && i < grads_.size() &&
                !grads_[i].data.empty())
                out[n.name] = grads_[i];
        }
        return out;
    }

    // Parameters bound via param() together with their gradient (null when
    // the parameter was frozen or unreached).
    std::vector<std::pair<ParameterT<T>*, const Tn*>> bound_params() const {
        std::vector<std::pair<ParameterT<T>*, const Tn*>> out;
        for (const auto& [p, id] : bound_) {
            const Tn* g = ((size_t)id < grads_.size() && !grads_[(size_t)id].data.empty())
                              ? &grads_[(size_t)id]
                              : nullptr;
            out.push_back({p, g});
        }
        return out;
    }

  private:
    struct Node {
        Tn value;
        bool requires_grad = false;
        bool is_leaf = false;
        std::string name;
        std::function<void(int)> backward;  // receives own node id
    };

    std::vector<Node> nodes_;
    std::vector<Tn> grads_;
    std::vector<std::pair<ParameterT<T>*, int>> bound_;
    std::map<const ParameterT<T>*, int> bound_ids_;

    const Tn& val(Var v) const {
        if (!v.valid() || v.id >= (int)nodes_.size()) fail("graph", "invalid Var handle");
        return nodes_[(size_t)v.id].value;
    }
    const Node& node(Var v) const { return nodes_[(size_t)v.id]; }

    static void check(bool ok, const char* op, const std::string& msg) {
        if (!ok) fail("shape", std::string(op) + ": " + msg);
    }

    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    bool wants_grad(Var v) const { return nodes_[(size_t)v.id].requires_grad; }

    Tn& grad_buf(Var v) {
        Tn& g = grads_[(size_t)v.id];
        if (g.data.empty()) g = Tn(nodes_[(size_t)v.id].value.shape);
        return g;
    }

    Var make(Tn value, const std::vector<Var>& parents, std::function<void(int)> bw) {
        Node n;
        n.value = std::move(value);
        for (Var p : parents) n.requires_grad = n.requires_grad || nodes_[(size_t)p.id].requires_grad;
        if (n.requires_grad) n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{(int)nodes_.size() - 1};
    }

    void accumulate_scaled(Var v, const Tn& g, T c) {
        if (!wants_grad(v)) return;
        Tn& dst = grad_buf(v);
        for (int64_t i = 0; i < (int64_t)dst.data.size(); i++) dst.data[(size_t)i] += c * g.data[(size_t)i];
    }
    void accumulate_fill(Var v, T c) {
        if (!wants_grad(v)) return;
        Tn& dst = grad_buf(v);
        for (auto& x : dst.data) x += c;
    }

    // ---- broadcasting machinery ----

    struct OpAdd {
        T operator()(T a, T b) const { return a + b; }
        static constexpr int kind = 0;
    };
    struct OpSub {
        T operator()(T a, T b) const { return a - b; }
        static constexpr int kind = 1;
    };
    struct OpMul {
        T operator()(T a, T b) const { return a * b; }
        static constexpr int kind = 2;
    };

    static std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                            const char* op) {
        size_t r = std::max(a.size(), b.size());
        std::vector<int> out(r);
        for (size_t i = 0; i < r; i++) {
            int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
            int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
            if (da != db && da != 1 && db != 1)
                fail("shape", std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
            out[i] = std::max(da, db);
        }
        return out;
    }

    static std::vector<int64_t> broadcast_strides(const std::vector<int>& shape,
                                                  const std::vector<int>& out_shape) {
        size_t r = out_shape.size();
        std::vector<int64_t> st(r, 0);
        int64_t s = 1;
        for (size_t i = 0; i < shape.size(); i++) {
            size_t ri = shape.size() - 1 - i;
            size_t oi = r - 1 - i;
            st[oi] = (shape[ri] == 1) ? 0 : s;
            s *= shape[ri];
        }
        // dims of size 1 in src but >1 in out keep stride 0 (set above)
        return st;
    }

    template <typename Op>
    Var binary_op(Var a, Var b, Op op) {
        const Tn& x = val(a);
        const Tn& y = val(b);
        constexpr int kind = Op::kind;
        const char* name = kind == 0 ? "add" : kind == 1 ? "sub" : "mul";
        if (x.shape == y.shape) {
            Tn out(x.shape);
            for (int64_t i = 0; i < x.numel(); i++)
                out.data[(size_t)i] = op(x.data[(size_t)i], y.data[(size_t)i]);
            return make(std::move(out), {a, b}, [this, a, b](int id) {
                const Tn& g = grads_[(size_t)id];
                if constexpr (kind == 2) {
                    const Tn& xv = val(a);
                    const Tn& yv = val(b);
                    if (wants_grad(a)) {
                        Tn& ga = grad_buf(a);
                        for (int64_t i = 0; i < (int64_t)g.data.size(); i++)
                            ga.data[(size_t)i] += g.data[(size_t)i] * yv.data[(size_t)i];
                    }
                    if (wants_grad(b)) {
                        Tn& gb = grad_buf(b);
                        for (int64_t i = 0; i < (int64_t)g.data.size(); i++)
                            gb.data[(size_t)i] += g.data[(size_t)i] * xv.data[(size_t)i];
                    }
                } else {
                    if (wants_grad(a)) accumulate_scaled(a, g, T(1));
                    if (wants_grad(b)) accumulate_scaled(b, g, kind == 1 ? T(-1) : T(1));
                }
            });
        }
        std::vector<int> os = broadcast_shape(x.shape, y.shape, name);
        Tn out(os);
        auto sa = broadcast_strides(x.shape, os);
        auto sb = broadcast_strides(y.shape, os);
        for_each_broadcast(out.shape, sa, sb, [&](int64_t lin, int64_t ia, int64_t ib) {
            out.data[(size_t)lin] = op(x.data[(size_t)ia], y.data[(size_t)ib]);
        });
        return make(std::move(out), {a, b}, [this, a, b, os, sa, sb](int id) {
            const Tn& g = grads_[(size_t)id];
            const Tn& xv = val(a);
            const Tn& yv = val(b);
            bool ga_ = wants_grad(a), gb_ = wants_grad(b);
            Tn* ga = ga_ ? &grad_buf(a) : nullptr;
            Tn* gb = gb_ ? &grad_buf(b) : nullptr;
            for_each_broadcast(os, sa, sb, [&](int64_t lin, int64_t ia, int64_t ib) {
                T gv = g.data[(size_t)lin];
                if constexpr (kind == 0) {
                    if (ga_) ga->data[(size_t)ia] += gv;
                    if (gb_) gb->data[(size_t)ib] += gv;
                } else if constexpr (kind == 1) {
                    if (ga_) ga->data[(size_t)ia] += gv;
                    if (gb_) gb->data[(size_t)ib] -= gv;
                } else {
                    if (ga_) ga->data[(size_t)ia] += gv * yv.data[(size_t)ib];
                    if (gb_) gb->data[(size_t)ib] += gv * xv.data[(size_t)ia];
                }
            });
        });
    }

    template <typename F>
    static void for_each_broadcast(const std::vector<int>& os, const std::vector<int64_t>& sa,
                                   const std::vector<int64_t>& sb, F f) {
        size_t r = os.size();
        std::vector<int> idx(r, 0);
        int64_t total = 1;
        for (int d : os) total *= d;
        int64_t ia = 0, ib = 0;
        for (int64_t lin = 0; lin < total; lin++) {
            f(lin, ia, ib);
            for (int d = (int)r - 1; d >= 0; d--) {
                ia += sa[(size_t)d];
                ib += sb[(size_t)d];
                if (++idx[(size_t)d] < os[(size_t)d]) break;
                idx[(size_t)d] = 0;
                ia -= sa[(size_t)d] * os[(size_t)d];
                ib -= sb[(size_t)d] * os[(size_t)d];
            }
        }
    }

    static void permute_into(const Tn& x, const std::vector<int>& perm, Tn& out) {
        size_t r = x.shape.size();
        std::vector<int64_t> in_strides(r, 1);
        for (int i = (int)r - 2; i >= 0; i--)
            in_strides[(size_t)i] = in_strides[(size_t)i + 1] * x.shape[(size_t)i + 1];
        std::vector<int64_t> mapped(r);
        for (size_t i = 0; i < r; i++) mapped[i] = in_strides[(size_t)perm[i]];
        std::vector<int> idx(r, 0);
        for (int64_t lin = 0; lin < x.numel(); lin++) {
            int64_t src = 0;
            for (size_t d = 0; d < r; d++) src += idx[d] * mapped[d];
            out.data[(size_t)lin] = x.data[(size_t)src];
            for (int d = (int)r - 1; d >= 0; d--) {
                if (++idx[(size_t)d] < out.shape[(size_t)d]) break;
                idx[(size_t)d] = 0;
            }
        }
    }

    static void im2col(const Tn& x, int kh, int kw, int stride, int pad, int ho, int wo, Tn& col) {
        int ci = x.shape[0], h = x.shape[1], w = x.shape[2];
        int64_t np = (int64_t)ho * wo;
        for (int c = 0; c < ci; c++)
            for (int i = 0; i < kh; i++)
                for (int j = 0; j < kw; j++) {
                    T* dst = col.data.data() + (((int64_t)c * kh + i) * kw + j) * np;
                    for (int oy = 0; oy < ho; oy++) {
                        int iy = oy * stride - pad + i;
                        if (iy < 0 || iy >= h) {
                            std::fill_n(dst + (int64_t)oy * wo, wo, T(0));
                            continue;
                        }
                        const T* src = x.data.data() + ((int64_t)c * h + iy) * w;
                        for (int ox = 0; ox < wo; ox++) {
                            int ix = ox * stride - pad + j;
                            dst[(int64_t)oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                        }
                    }
                }
    }

    static void col2im_add(const Tn& gcol, int ci, int h, int w, int kh, int kw, int stride,
                           int pad, int ho, int wo, Tn& gx) {
        int64_t np = (int64_t)ho * wo;
        for (int c = 0; c < ci; c++)
            for (int i = 0; i < kh; i++)
                for (int j = 0; j < kw; j++) {
                    const T* src = gcol.data.data() + (((int64_t)c * kh + i) * kw + j) * np;
                    for (int oy = 0; oy < ho; oy++) {
                        int iy = oy * stride - pad + i;
                        if (iy < 0 || iy >= h) continue;
                        T* dst = gx.data.data() + ((int64_t)c * h + iy) * w;
                        for (int ox = 0; ox < wo; ox++) {
                            int ix = ox * stride - pad + j;
                            if (ix >= 0 && ix < w) dst[ix] += src[(int64_t)oy * wo + ox];
                        }
                    }
                }
    }
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;

}  // namespace cdiff
