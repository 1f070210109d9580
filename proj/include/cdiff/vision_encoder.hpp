#pragma once

#include <string>
#include <vector>

#include "cdiff/graph.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/params.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

struct VisionConfig {
    int in_ch = 3;
    int patch = 8;
    int width = 64;
    int d_out = 64;  // must equal the text embedding dim for cosine similarity
};

// Convolutional patch encoder: 8x8 patchify, two residual conv blocks, 1x1
// head to the shared text/image feature dim. Rows are patches. Each patch is
// encoded independently (the patchify kernel sees the full patch; the blocks
// are 1x1 channel mixers, and there is no normalization over the map), so
// the features are exactly translation-equivariant at patch stride and free
// of cross-patch leakage — a patch feature localizes its own content only.
template <typename T>
class VisionEncoderT {
  public:
    VisionConfig cfg;

    void init(ParamStoreT<T>& store, Rng& rng) {
        int p = cfg.patch, w = cfg.width;
        T patch_std = (T)(1.0 / std::sqrt((double)(cfg.in_ch * p * p)));
        store.create("vis.patch.w", randn<T>({w, cfg.in_ch, p, p}, rng, patch_std));
        store.create("vis.patch.b", TensorT<T>({w}));
        for (int b = 1; b <= 2; b++) {
            std::string name = "vis.block" + std::to_string(b);
            T std1 = (T)(1.0 / std::sqrt((double)w));
            store.create(name + ".conv.w", randn<T>({w, w, 1, 1}, rng, std1));
            store.create(name + ".conv.b", TensorT<T>({w}));
        }
        T head_std = (T)(1.0 / std::sqrt((double)w));
        store.create("vis.head.w", randn<T>({cfg.d_out, w, 1, 1}, rng, head_std));
        store.create("vis.head.b", TensorT<T>({cfg.d_out}));
    }

    // Pre-normalization patch features [N, d_out], N = (H/patch)*(W/patch).
    Var raw_features(GraphT<T>& g, ParamStoreT<T>& store, Var image) const {
        const auto& shape = g.value(image).shape;
        if (shape.size() != 3 || shape[0] != cfg.in_ch)
            fail("vision", "expected a [" + std::to_string(cfg.in_ch) + ",H,W] image, got " +
                               shape_str(shape));
        if (shape[1] % cfg.patch != 0 || shape[2] % cfg.patch != 0)
            fail("vision", "image size " + shape_str(shape) + " not divisible by patch " +
                               std::to_string(cfg.patch));
        int rows = shape[1] / cfg.patch, cols = shape[2] / cfg.patch;
        Var x = g.conv2d(image, g.param(store.get("vis.patch.w")), g.param(store.get("vis.patch.b")),
                         cfg.patch, 0);
        for (int b = 1; b <= 2; b++) {
            std::string name = "vis.block" + std::to_string(b);
            Var h = g.silu(x);
            h = g.conv2d(h, g.param(store.get(name + ".conv.w")), g.param(store.get(name + ".conv.b")),
                         1, 0);
            x = g.add(x, h);
        }
        x = g.conv2d(x, g.param(store.get("vis.head.w")), g.param(store.get("vis.head.b")), 1, 0);
        // [d, rows, cols] -> [N, d]
        return g.permute(g.reshape(x, {cfg.d_out, rows * cols}), {1, 0});
    }

    // Unit-normalized patch features [N, d_out].
    Var patch_features(GraphT<T>& g, ParamStoreT<T>& store, Var image) const {
        return g.l2norm_rows(raw_features(g, store, image));
    }

    // Mean of pre-normalization patch features, then unit-normalized: [1, d_out].
    Var pooled_feature(GraphT<T>& g, ParamStoreT<T>& store, Var image) const {
        Var mean = g.mean_rows(raw_features(g, store, image));
        return g.l2norm_rows(g.reshape(mean, {1, cfg.d_out}));
    }

    std::pair<int, int> grid(int h, int w) const { return {h / cfg.patch, w / cfg.patch}; }
};

using VisionEncoder = VisionEncoderT<float>;

}  // namespace cdiff
