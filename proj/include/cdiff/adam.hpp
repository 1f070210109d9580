#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

// Adam with bias correction and decoupled weight decay. Weight decay is
// applied multiplicatively to the parameter before the Adam update so it
// never leaks into the moment estimates.
template <typename T>
struct AdamT {
    T lr = (T)1e-3;
    T beta1 = (T)0.9;
    T beta2 = (T)0.999;
    T eps = (T)1e-8;
    T weight_decay = (T)0;
    int64_t step_count = 0;

    std::unordered_map<std::string, TensorT<T>> m, v;

    // One optimizer step over (parameter, gradient) pairs. Pairs with a null
    // gradient are skipped (frozen or unreached parameters).
    void step(const std::vector<std::pair<ParameterT<T>*, const TensorT<T>*>>& grads) {
        step_count++;
        T bc1 = T(1) - std::pow(beta1, (T)step_count);
        T bc2 = T(1) - std::pow(beta2, (T)step_count);
        for (auto& [p, g] : grads) {
            if (!g || !p->trainable) continue;
            if (p->name.empty()) fail("optimizer", "cannot track an unnamed parameter");
            if (!g->all_finite()) fail("nan_grad", "non-finite gradient for parameter " + p->name);
            if (g->shape != p->value.shape)
                fail("shape", "gradient shape " + shape_str(g->shape) + " != parameter shape " +
                                  shape_str(p->value.shape) + " for " + p->name);
            TensorT<T>& mm = moment(m, *p);
            TensorT<T>& vv = moment(v, *p);
            T decay = T(1) - lr * weight_decay;
            for (int64_t i = 0; i < p->value.numel(); i++) {
                T gi = g->data[(size_t)i];
                mm.data[(size_t)i] = beta1 * mm.data[(size_t)i] + (T(1) - beta1) * gi;
                vv.data[(size_t)i] = beta2 * vv.data[(size_t)i] + (T(1) - beta2) * gi * gi;
                T mhat = mm.data[(size_t)i] / bc1;
                T vhat = vv.data[(size_t)i] / bc2;
                T& w = p->value.data[(size_t)i];
                if (weight_decay != T(0)) w *= decay;
                w -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

  private:
    TensorT<T>& moment(std::unordered_map<std::string, TensorT<T>>& store, const ParameterT<T>& p) {
        auto it = store.find(p.name);
        if (it == store.end()) it = store.emplace(p.name, TensorT<T>(p.value.shape)).first;
        else if (it->second.shape != p.value.shape)
            fail("shape", "optimizer state shape changed for " + p.name);
        return it->second;
    }
};

using Adam = AdamT<float>;

}  // namespace cdiff
