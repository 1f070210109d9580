#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cdiff/graph.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/params.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

struct UNetConfig {
    int in_ch = 3;
    int base_ch = 32;   // level-1 width
    int mid_ch = 64;    // level-2 / bottleneck width
    int n_heads = 4;
    int temb_dim = 64;
    int d_text = 64;
    int gn_groups = 4;
    int lora_rank = kLoraRank;
    float lora_alpha = kLoraAlpha;

    void validate() const {
        if (temb_dim % 2 != 0) fail("config", "timestep embedding dim must be even");
        if (mid_ch % n_heads != 0) fail("config", "attention width must divide into heads");
        if (mid_ch != d_text) fail("config", "cross-attention assumes mid_ch == d_text");
    }
};

// Sinusoidal features [sin(t/10000^{2i/dim}), cos(...)] interleaved.
template <typename T>
TensorT<T> timestep_embedding(int t, int dim) {
    if (dim % 2 != 0) fail("unet", "timestep embedding dim must be even, got " + std::to_string(dim));
    TensorT<T> out({dim});
    int half = dim / 2;
    for (int i = 0; i < half; i++) {
        double angle = (double)t / std::pow(10000.0, (double)(2 * i) / (double)dim);
        out.data[(size_t)(2 * i)] = (T)std::sin(angle);
        out.data[(size_t)(2 * i + 1)] = (T)std::cos(angle);
    }
    return out;
}

// Head-averaged cross-attention weights at one site: [tokens, H', W'].
struct AttentionSiteCapture {
    std::string site;
    Tensor weights;
};
struct AttentionCapture {
    std::vector<AttentionSiteCapture> sites;
};

// Two-level conditional UNet predicting the noise residual. Cross-attention
// over text embeddings sits at the level-2 blocks and the bottleneck; those
// q/k/v/out projections carry low-rank adapters.
template <typename T>
class UNetT {
  public:
    UNetConfig cfg;

    void init(ParamStoreT<T>& store, Rng& rng) {
        cfg.validate();
        int c1 = cfg.base_ch, c2 = cfg.mid_ch;
        create_linear(store, "unet.temb.fc1", cfg.temb_dim, cfg.temb_dim, rng);
        create_linear(store, "unet.temb.fc2", cfg.temb_dim, cfg.temb_dim, rng);
        create_conv(store, "unet.in", cfg.in_ch, c1, 3, rng);
        create_res_block(store, "unet.d1", c1, rng);
        create_conv(store, "unet.down1", c1, c2, 3, rng);
        create_res_block(store, "unet.d2", c2, rng);
        create_attn(store, "unet.d2.attn", c2, rng);
        create_conv(store, "unet.down2", c2, c2, 3, rng);
        create_res_block(store, "unet.mid.b1", c2, rng);
        create_attn(store, "unet.mid.attn", c2, rng);
        create_res_block(store, "unet.mid.b2", c2, rng);
        create_conv(store, "unet.u2.fuse", c2 + c2, c2, 1, rng);
        create_res_block(store, "unet.u2", c2, rng);
        create_attn(store, "unet.u2.attn", c2, rng);
        create_conv(store, "unet.u1.fuse", c2 + c1, c1, 1, rng);
        create_res_block(store, "unet.u1", c1, rng);
        create_gn(store, "unet.out.gn", c1);
        // zero-initialized output head: the untrained net predicts zero noise
        store.create("unet.out.conv.w", TensorT<T>({cfg.in_ch, c1, 3, 3}));
        store.create("unet.out.conv.b", TensorT<T>({cfg.in_ch}));
    }

    // eps_hat for latent z [in_ch, H, W] at training timestep t (0-based),
    // conditioned on text context ctx [seq, d_text]. When capture is given,
    // head-averaged attention weights are recorded per site.
    Var predict(GraphT<T>& g, ParamStoreT<T>& store, Var z, int t, Var ctx, bool adapters,
                AttentionCapture* capture = nullptr) const {
        const auto& zs = g.value(z).shape;
        if (zs.size() != 3 || zs[0] != cfg.in_ch)
            fail("unet", "latent must be [" + std::to_string(cfg.in_ch) + ",H,W], got " + shape_str(zs));
        if ((zs[1] % 4) != 0 || (zs[2] % 4) != 0)
            fail("unet", "spatial dims must be divisible by 4, got " + shape_str(zs));
        const auto& cs = g.value(ctx).shape;
        if (cs.size() != 2 || cs[1] != cfg.d_text)
            fail("unet", "text context must be [seq," + std::to_string(cfg.d_text) + "], got " +
                             shape_str(cs));

        Var temb = g.constant(timestep_embedding<T>(t, cfg.temb_dim).reshaped({1, cfg.temb_dim}));
        temb = linear(g, temb, store, "unet.temb.fc1");
        temb = g.silu(temb);
        temb = linear(g, temb, store, "unet.temb.fc2");
        temb = g.silu(temb);

        Var x = conv(g, store, "unet.in", z, 1, 1);
        Var skip1 = res_block(g, store, "unet.d1", x, temb);          // [c1, H, W]
        x = conv(g, store, "unet.down1", skip1, 2, 1);                // [c2, H/2, W/2]
        x = res_block(g, store, "unet.d2", x, temb);
        Var skip2 = cross_attn(g, store, "unet.d2.attn", x, ctx, adapters, capture);
        x = conv(g, store, "unet.down2", skip2, 2, 1);                // [c2, H/4, W/4]
        x = res_block(g, store, "unet.mid.b1", x, temb);
        x = cross_attn(g, store, "unet.mid.attn", x, ctx, adapters, capture);
        x = res_block(g, store, "unet.mid.b2", x, temb);
        x = g.upsample2x(x);                                          // [c2, H/2, W/2]
        x = conv(g, store, "unet.u2.fuse", g.concat(x, skip2, 0), 1, 0);
        x = res_block(g, store, "unet.u2", x, temb);
        x = cross_attn(g, store, "unet.u2.attn", x, ctx, adapters, capture);
        x = g.upsample2x(x);                                          // [c2, H, W]
        x = conv(g, store, "unet.u1.fuse", g.concat(x, skip1, 0), 1, 0);
        x = res_block(g, store, "unet.u1", x, temb);
        x = g.group_norm(x, g.param(store.get("unet.out.gn.g")), g.param(store.get("unet.out.gn.b")),
                         cfg.gn_groups);
        x = g.silu(x);
        return conv(g, store, "unet.out.conv", x, 1, 1);
    }

    std::vector<std::string> adapter_names() const {
        std::vector<std::string> out;
        for (const char* site : {"unet.d2.attn", "unet.mid.attn", "unet.u2.attn"})
            for (const char* proj : {"q", "k", "v", "o"}) {
                out.push_back(std::string(site) + "." + proj + kLoraASuffix);
                out.push_back(std::string(site) + "." + proj + kLoraBSuffix);
            }
        return out;
    }

    static std::vector<std::string> attention_sites() {
        return {"unet.d2.attn", "unet.mid.attn", "unet.u2.attn"};
    }

  private:
    static void create_gn(ParamStoreT<T>& store, const std::string& name, int ch) {
        TensorT<T> ones({ch});
        for (auto& v : ones.data) v = (T)1;
        store.create(name + ".g", std::move(ones));
        store.create(name + ".b", TensorT<T>({ch}));
    }

    static void create_conv(ParamStoreT<T>& store, const std::string& name, int ci, int co, int k,
                            Rng& rng) {
        T std = (T)(1.0 / std::sqrt((double)(ci * k * k)));
        store.create(name + ".w", randn<T>({co, ci, k, k}, rng, std));
        store.create(name + ".b", TensorT<T>({co}));
    }

    void create_res_block(ParamStoreT<T>& store, const std::string& name, int ch, Rng& rng) {
        create_gn(store, name + ".gn", ch);
        create_conv(store, name + ".conv", ch, ch, 3, rng);
        create_linear(store, name + ".temb", cfg.temb_dim, ch, rng);
    }

    void create_attn(ParamStoreT<T>& store, const std::string& name, int ch, Rng& rng) {
        create_gn(store, name + ".gn", ch);
        for (const char* proj : {"q", "k", "v", "o"})
            create_lora_linear(store, name + "." + proj, ch, ch, rng, cfg.lora_rank);
    }

    static Var conv(GraphT<T>& g, ParamStoreT<T>& store, const std::string& name, Var x, int stride,
                    int pad) {
        return g.conv2d(x, g.param(store.get(name + ".w")), g.param(store.get(name + ".b")), stride,
                        pad);
    }

    Var res_block(GraphT<T>& g, ParamStoreT<T>& store, const std::string& name, Var x, Var temb) const {
        Var h = g.group_norm(x, g.param(store.get(name + ".gn.g")),
                             g.param(store.get(name + ".gn.b")), cfg.gn_groups);
        h = g.silu(h);
        h = conv(g, store, name + ".conv", h, 1, 1);
        Var bias = linear(g, temb, store, name + ".temb");  // [1, ch]
        int ch = g.value(bias).shape[1];
        h = g.add_channel_bias(h, g.reshape(bias, {ch}));
        return g.add(x, h);
    }

    Var cross_attn(GraphT<T>& g, ParamStoreT<T>& store, const std::string& site, Var x, Var ctx,
                   bool adapters, AttentionCapture* capture) const {
        const auto& xs = g.value(x).shape;
        int c = xs[0], hh = xs[1], ww = xs[2];
        int n = hh * ww, heads = cfg.n_heads, dh = c / cfg.n_heads;
        int seq = g.value(ctx).shape[0];
        T alpha = (T)cfg.lora_alpha;
        Var h = g.group_norm(x, g.param(store.get(site + ".gn.g")),
                             g.param(store.get(site + ".gn.b")), cfg.gn_groups);
        Var tokens = g.permute(g.reshape(h, {c, n}), {1, 0});  // [n, c]
        Var q = g.permute(g.reshape(lora_linear(g, tokens, store, site + ".q", adapters, alpha),
                                    {n, heads, dh}),
                          {1, 0, 2});
        Var k = g.permute(g.reshape(lora_linear(g, ctx, store, site + ".k", adapters, alpha),
                                    {seq, heads, dh}),
                          {1, 0, 2});
        Var v = g.permute(g.reshape(lora_linear(g, ctx, store, site + ".v", adapters, alpha),
                                    {seq, heads, dh}),
                          {1, 0, 2});
        Var scores = g.scale(g.bmm(q, g.permute(k, {0, 2, 1})), (T)(1.0 / std::sqrt((double)dh)));
        Var w = g.softmax_last(scores);  // [heads, n, seq]
        if (capture) capture->sites.push_back({site, head_mean(g.value(w), heads, n, seq, hh, ww)});
        Var out = g.reshape(g.permute(g.bmm(w, v), {1, 0, 2}), {n, c});
        out = lora_linear(g, out, store, site + ".o", adapters, alpha);
        return g.add(x, g.reshape(g.permute(out, {1, 0}), {c, hh, ww}));
    }

    // [heads, n, seq] values -> [seq, H', W'] head-averaged capture tensor.
    static Tensor head_mean(const TensorT<T>& w, int heads, int n, int seq, int hh, int ww) {
        Tensor out({seq, hh, ww});
        for (int s = 0; s < seq; s++)
            for (int i = 0; i < n; i++) {
                double acc = 0.0;
                for (int h = 0; h < heads; h++)
                    acc += (double)w.data[(size_t)((h * n + i) * seq + s)];
                out.data[(size_t)(s * n + i)] = (float)(acc / heads);
            }
        return out;
    }
};

using UNet = UNetT<float>;

}  // namespace cdiff
