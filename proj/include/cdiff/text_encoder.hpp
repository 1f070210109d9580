#pragma once

#include <string>
#include <vector>

#include "cdiff/graph.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/params.hpp"
#include "cdiff/tensor.hpp"
#include "cdiff/vocab.hpp"

namespace cdiff {

struct TextConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 2;
    int max_len = kMaxPromptLen;
    int mlp_mult = 4;
    int lora_rank = kLoraRank;
    float lora_alpha = kLoraAlpha;

    void validate() const {
        if (vocab_size < 4) fail("config", "text encoder needs a vocabulary");
        if (d_model % n_heads != 0) fail("config", "d_model must be divisible by n_heads");
    }
};

// Two-block bidirectional transformer over word tokens. Attention
// projections carry low-rank adapters; everything else is base weight.
template <typename T>
class TextEncoderT {
  public:
    TextConfig cfg;

    void init(ParamStoreT<T>& store, Rng& rng) {
        cfg.validate();
        store.create("text.emb", randn<T>({cfg.vocab_size, cfg.d_model}, rng, (T)0.02));
        store.create("text.pos", randn<T>({cfg.max_len, cfg.d_model}, rng, (T)0.01));
        for (int b = 0; b < cfg.n_blocks; b++) {
            std::string p = block_prefix(b);
            for (const char* proj : {"q", "k", "v", "o"})
                create_lora_linear(store, p + ".attn." + proj, cfg.d_model, cfg.d_model, rng,
                                   cfg.lora_rank);
            create_affine(store, p + ".ln1", cfg.d_model);
            create_affine(store, p + ".ln2", cfg.d_model);
            create_linear(store, p + ".mlp.fc1", cfg.d_model, cfg.d_model * cfg.mlp_mult, rng);
            create_linear(store, p + ".mlp.fc2", cfg.d_model * cfg.mlp_mult, cfg.d_model, rng);
        }
        create_affine(store, "text.ln_f", cfg.d_model);
    }

    // Per-token embeddings [max_len, d_model]. PAD key positions are masked
    // out of self-attention so the PAD tail cannot influence content rows.
    Var encode(GraphT<T>& g, ParamStoreT<T>& store, const std::vector<int>& ids,
               bool adapters_enabled) const {
        if ((int)ids.size() != cfg.max_len)
            fail("encode", "expected " + std::to_string(cfg.max_len) + " token ids, got " +
                               std::to_string(ids.size()));
        for (int id : ids)
            if (id < 0 || id >= cfg.vocab_size)
                fail("encode", "token id " + std::to_string(id) + " outside vocabulary of size " +
                                   std::to_string(cfg.vocab_size));
        int s = cfg.max_len;
        Var x = g.add(g.gather_rows(g.param(store.get("text.emb")), ids),
                      g.param(store.get("text.pos")));

        TensorT<T> mask({s});
        for (int i = 0; i < s; i++) mask.data[(size_t)i] = ids[(size_t)i] == kPadId ? (T)-1e9 : (T)0;
        Var key_mask = g.constant(mask);

        for (int b = 0; b < cfg.n_blocks; b++) {
            std::string p = block_prefix(b);
            Var h = affine_norm(g, store, p + ".ln1", x);
            h = self_attention(g, store, p + ".attn", h, key_mask, adapters_enabled);
            x = g.add(x, h);
            Var m = affine_norm(g, store, p + ".ln2", x);
            m = linear(g, m, store, p + ".mlp.fc1");
            m = g.silu(m);
            m = linear(g, m, store, p + ".mlp.fc2");
            x = g.add(x, m);
        }
        return affine_norm(g, store, "text.ln_f", x);
    }

    // Unit-normalized rows of emb at concept positions: [C, d_model].
    Var concept_rows(GraphT<T>& g, Var emb, const std::vector<bool>& concept_mask) const {
        std::vector<int> rows;
        for (size_t i = 0; i < concept_mask.size(); i++)
            if (concept_mask[i]) rows.push_back((int)i);
        if (rows.empty()) fail("concepts", "prompt has no concept positions");
        return g.l2norm_rows(g.gather_rows(emb, rows));
    }

    // Mean over BOS..EOS rows, unit-normalized: [1, d_model]. Used as the
    // sentence-level feature for contrastive pretraining.
    Var pooled(GraphT<T>& g, Var emb, const std::vector<int>& ids) const {
        std::vector<int> rows;
        for (size_t i = 0; i < ids.size(); i++)
            if (ids[i] != kPadId) rows.push_back((int)i);
        Var sel = g.gather_rows(emb, rows);
        return g.l2norm_rows(g.reshape(g.mean_rows(sel), {1, cfg.d_model}));
    }

    std::vector<std::string> adapter_names() const {
        std::vector<std::string> out;
        for (int b = 0; b < cfg.n_blocks; b++)
            for (const char* proj : {"q", "k", "v", "o"}) {
                out.push_back(block_prefix(b) + ".attn." + proj + kLoraASuffix);
                out.push_back(block_prefix(b) + ".attn." + proj + kLoraBSuffix);
            }
        return out;
    }

  private:
    static std::string block_prefix(int b) { return "text.b" + std::to_string(b); }

    static void create_affine(ParamStoreT<T>& store, const std::string& name, int d) {
        TensorT<T> ones({d});
        for (auto& v : ones.data) v = (T)1;
        store.create(name + ".g", std::move(ones));
        store.create(name + ".b", TensorT<T>({d}));
    }

    static Var affine_norm(GraphT<T>& g, ParamStoreT<T>& store, const std::string& name, Var x) {
        return g.layer_norm(x, g.param(store.get(name + ".g")), g.param(store.get(name + ".b")));
    }

    Var self_attention(GraphT<T>& g, ParamStoreT<T>& store, const std::string& prefix, Var x,
                       Var key_mask, bool adapters) const {
        int s = cfg.max_len, h = cfg.n_heads, dh = cfg.d_model / cfg.n_heads;
        T alpha = (T)cfg.lora_alpha;
        auto heads = [&](Var m) {  // [s, d] -> [h, s, dh]
            return g.permute(g.reshape(m, {s, h, dh}), {1, 0, 2});
        };
        Var q = heads(lora_linear(g, x, store, prefix + ".q", adapters, alpha));
        Var k = heads(lora_linear(g, x, store, prefix + ".k", adapters, alpha));
        Var v = heads(lora_linear(g, x, store, prefix + ".v", adapters, alpha));
        Var scores = g.scale(g.bmm(q, g.permute(k, {0, 2, 1})), (T)(1.0 / std::sqrt((double)dh)));
        scores = g.add(scores, key_mask);  // broadcast over key axis
        Var w = g.softmax_last(scores);
        Var ctx = g.reshape(g.permute(g.bmm(w, v), {1, 0, 2}), {s, cfg.d_model});
        return lora_linear(g, ctx, store, prefix + ".o", adapters, alpha);
    }
};

using TextEncoder = TextEncoderT<float>;

}  // namespace cdiff
