#pragma once

#include <algorithm>
#include <vector>

#include "cdiff/graph.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

struct LossReport {
    float l_rec = 0.f;
    float l_align = 0.f;
    float l_total = 0.f;
    std::vector<float> s_c;  // per-concept max similarity
};

// ---- plain-tensor forms (evaluation / oracles) -----------------------------

// M[c][i] = dot(concept_c, patch_i); both sides are expected unit-normalized.
inline Tensor similarity_matrix(const Tensor& patches, const Tensor& concepts) {
    if (patches.rank() != 2 || concepts.rank() != 2 || patches.shape[1] != concepts.shape[1])
        fail("shape", "similarity needs [N,d] patches and [C,d] concepts, got " +
                          shape_str(patches.shape) + " and " + shape_str(concepts.shape));
    int n = patches.shape[0], c = concepts.shape[0], d = patches.shape[1];
    Tensor m({c, n});
    for (int ci = 0; ci < c; ci++)
        for (int i = 0; i < n; i++) {
            float acc = 0.f;
            for (int k = 0; k < d; k++) acc += concepts.at2(ci, k) * patches.at2(i, k);
            m.at2(ci, i) = acc;
        }
    return m;
}

struct AlignmentScore {
    std::vector<float> s_c;
    float s = 0.f;
    float l_align = 0.f;
};

inline AlignmentScore alignment_from_matrix(const Tensor& m) {
    if (m.rank() != 2 || m.shape[0] < 1 || m.shape[1] < 1)
        fail("shape", "alignment needs a nonempty [C,N] matrix, got " + shape_str(m.shape));
    AlignmentScore out;
    int c = m.shape[0], n = m.shape[1];
    for (int ci = 0; ci < c; ci++) {
        float best = m.at2(ci, 0);
        for (int i = 1; i < n; i++) best = std::max(best, m.at2(ci, i));
        out.s_c.push_back(best);
        out.s += best;
    }
    out.s /= (float)c;
    out.l_align = 1.f - out.s;
    return out;
}

// Mean-per-element squared error by default; the sum-per-item variant
// divides only by the (implicit, =1 here) batch dimension.
inline float reconstruction_loss(const Tensor& eps, const Tensor& eps_hat,
                                 bool mean_per_element = true) {
    if (!eps.same_shape(eps_hat))
        fail("shape", "reconstruction loss shapes differ: " + shape_str(eps.shape) + " vs " +
                          shape_str(eps_hat.shape));
    double acc = 0.0;
    for (int64_t i = 0; i < eps.numel(); i++) {
        double d = (double)eps_hat.data[(size_t)i] - (double)eps.data[(size_t)i];
        acc += d * d;
    }
    if (mean_per_element) acc /= (double)eps.numel();
    return (float)acc;
}

// ---- tape forms (training) ---------------------------------------------------

template <typename T>
Var similarity_matrix_op(GraphT<T>& g, Var patches, Var concepts) {
    return g.matmul(concepts, g.permute(patches, {1, 0}));  // [C, N]
}

template <typename T>
struct AlignmentVars {
    Var m;        // [C, N]
    Var s_c;      // [C]
    Var l_align;  // scalar
};

// L_align = 1 - mean_c max_i M[c][i]; the subgradient of each row max routes
// through its (lowest-index) argmax entry only.
template <typename T>
AlignmentVars<T> alignment_loss_op(GraphT<T>& g, Var patches, Var concepts) {
    AlignmentVars<T> out;
    out.m = similarity_matrix_op(g, patches, concepts);
    out.s_c = g.row_max(out.m);
    out.l_align = g.add_const(g.scale(g.mean_all(out.s_c), (T)-1), (T)1);
    return out;
}

template <typename T>
Var reconstruction_loss_op(GraphT<T>& g, Var eps_target, Var eps_hat, bool mean_per_element = true) {
    Var sq = g.square(g.sub(eps_hat, eps_target));
    return mean_per_element ? g.mean_all(sq) : g.sum_all(sq);
}

}  // namespace cdiff
