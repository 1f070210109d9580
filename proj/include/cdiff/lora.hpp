#pragma once

#include <string>

#include "cdiff/graph.hpp"
#include "cdiff/params.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

constexpr int kLoraRank = 4;
constexpr float kLoraAlpha = 8.0f;
inline constexpr const char* kLoraASuffix = ".lora.A";
inline constexpr const char* kLoraBSuffix = ".lora.B";

inline bool is_lora_name(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        std::string s(suf);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(kLoraASuffix) || ends_with(kLoraBSuffix);
}

// Creates a base projection weight [d_in, d_out] plus its low-rank adapter
// pair A [d_in, r], B [r, d_out]. B starts at zero so the adapted layer is
// initially identical to the base layer.
template <typename T>
void create_lora_linear(ParamStoreT<T>& store, const std::string& name, int d_in, int d_out,
                        Rng& rng, int rank = kLoraRank) {
    T w_std = (T)(1.0 / std::sqrt((double)d_in));
    store.create(name + ".w", randn<T>({d_in, d_out}, rng, w_std));
    store.create(name + kLoraASuffix, randn<T>({d_in, rank}, rng, (T)0.02));
    store.create(name + kLoraBSuffix, TensorT<T>({rank, d_out}));
}

// y = x @ W + (alpha/r) * (x @ A) @ B   with x: [n, d_in]
template <typename T>
Var lora_linear(GraphT<T>& g, Var x, ParamStoreT<T>& store, const std::string& name,
                bool adapters_enabled, T alpha = (T)kLoraAlpha) {
    Var w = g.param(store.get(name + ".w"));
    Var y = g.matmul(x, w);
    if (!adapters_enabled) return y;
    ParameterT<T>& pa = store.get(name + kLoraASuffix);
    Var a = g.param(pa);
    Var b = g.param(store.get(name + kLoraBSuffix));
    T scale = alpha / (T)pa.value.shape[1];
    return g.add(y, g.scale(g.matmul(g.matmul(x, a), b), scale));
}

// Plain trainable linear with bias: y = x @ W + b
template <typename T>
void create_linear(ParamStoreT<T>& store, const std::string& name, int d_in, int d_out, Rng& rng,
                   bool zero_init = false) {
    T w_std = zero_init ? (T)0 : (T)(1.0 / std::sqrt((double)d_in));
    store.create(name + ".w", zero_init ? TensorT<T>({d_in, d_out}) : randn<T>({d_in, d_out}, rng, w_std));
    store.create(name + ".b", TensorT<T>({d_out}));
}

template <typename T>
Var linear(GraphT<T>& g, Var x, ParamStoreT<T>& store, const std::string& name) {
    Var y = g.matmul(x, g.param(store.get(name + ".w")));
    return g.add(y, g.param(store.get(name + ".b")));
}

}  // namespace cdiff
