#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "cdiff/lora.hpp"
#include "cdiff/params.hpp"
#include "cdiff/text_encoder.hpp"
#include "cdiff/vision_encoder.hpp"
#include "cdiff/vocab.hpp"
#include "test_support.hpp"

using namespace cdiff;

static Vocabulary test_vocab() {
    return Vocabulary::from_lexicon(
        {"a", "photo", "of", "egg", "sandwich", "pizza", "corn", "dog", "crab", "cake"});
}

TEST_CASE("vocabulary construction and lookup") {
    Vocabulary v = test_vocab();
    REQUIRE(v.id("<pad>") == kPadId);
    REQUIRE(v.id("<bos>") == kBosId);
    REQUIRE(v.id("<eos>") == kEosId);
    REQUIRE(v.id("<unk>") == kUnkId);
    REQUIRE(v.id("zzz-not-there") == kUnkId);
    REQUIRE(v.contains("egg"));
    // lexicographic assignment beyond the reserved block
    REQUIRE(v.token(4) == "a");
    REQUIRE(v.id("a") == 4);
}

TEST_CASE("vocabulary save/load round-trip") {
    Vocabulary v = test_vocab();
    auto path = std::filesystem::temp_directory_path() / "cdiff_vocab_test.txt";
    v.save(path.string());
    Vocabulary w = Vocabulary::load(path.string());
    REQUIRE(w.size() == v.size());
    for (int i = 0; i < v.size(); i++) REQUIRE(w.token(i) == v.token(i));
    std::filesystem::remove(path);
}

TEST_CASE("tokenize template prompts") {
    Vocabulary v = test_vocab();
    TokenizedPrompt p = tokenize("A photo of egg sandwich", v);
    REQUIRE(p.ids[0] == kBosId);
    REQUIRE(v.token(p.ids[1]) == "a");
    REQUIRE(v.token(p.ids[4]) == "egg");
    REQUIRE(v.token(p.ids[5]) == "sandwich");
    REQUIRE(p.ids[6] == kEosId);
    for (int i = 7; i < kMaxPromptLen; i++) REQUIRE(p.ids[(size_t)i] == kPadId);
    std::vector<bool> want(kMaxPromptLen, false);
    want[4] = want[5] = true;
    REQUIRE(p.concept_mask == want);

    TokenizedPrompt empty = tokenize("", v);
    REQUIRE(empty.ids[0] == kBosId);
    REQUIRE(empty.ids[1] == kEosId);
    for (bool b : empty.concept_mask) REQUIRE_FALSE(b);

    // bare category text: every word is a concept
    TokenizedPrompt bare = tokenize("corn dog", v);
    REQUIRE(bare.concept_mask[1]);
    REQUIRE(bare.concept_mask[2]);
    REQUIRE_FALSE(bare.concept_mask[0]);

    std::string too_long;
    for (int i = 0; i < 15; i++) too_long += "egg ";
    REQUIRE_THROWS_AS(tokenize(too_long, v), Error);
    REQUIRE_NOTHROW(tokenize("egg egg egg egg egg egg egg egg egg egg egg egg egg egg", v));
}

TEST_CASE("detokenize round-trips every lexicon word") {
    Vocabulary v = test_vocab();
    for (int id = 4; id < v.size(); id++) {
        std::string word = v.token(id);
        TokenizedPrompt p = tokenize(word, v);
        REQUIRE(detokenize(p.ids, v) == word);
    }
    REQUIRE(detokenize(tokenize("a photo of egg sandwich", v).ids, v) == "a photo of egg sandwich");
}

TEST_CASE("lora name detection") {
    REQUIRE(is_lora_name("text.b0.attn.q.lora.A"));
    REQUIRE(is_lora_name("unet.mid.attn.o.lora.B"));
    REQUIRE_FALSE(is_lora_name("text.b0.attn.q.w"));
    REQUIRE_FALSE(is_lora_name("unet.d1.conv.w"));
}

TEST_CASE("lora linear starts as the identity adaptation") {
    ParamStore store;
    Rng rng(3);
    create_lora_linear(store, "proj", 8, 8, rng);
    Tensor x = randn<float>({5, 8}, rng);
    Graph g;
    Var vx = g.leaf(x);
    Var base = lora_linear(g, vx, store, "proj", false);
    Var adapted = lora_linear(g, vx, store, "proj", true);
    for (int64_t i = 0; i < g.value(base).numel(); i++)
        REQUIRE(g.value(base).data[(size_t)i] == g.value(adapted).data[(size_t)i]);

    // a nonzero B must change the output
    store.get("proj.lora.B").value.data[0] = 0.5f;
    Graph g2;
    Var vx2 = g2.leaf(x);
    Var base2 = lora_linear(g2, vx2, store, "proj", false);
    Var adapted2 = lora_linear(g2, vx2, store, "proj", true);
    bool any_diff = false;
    for (int64_t i = 0; i < g2.value(base2).numel(); i++)
        any_diff = any_diff ||
                   g2.value(base2).data[(size_t)i] != g2.value(adapted2).data[(size_t)i];
    REQUIRE(any_diff);
}

// ---- text encoder ------------------------------------------------------------

static TextConfig tiny_text_cfg(int vocab) {
    TextConfig c;
    c.vocab_size = vocab;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_blocks = 2;
    c.max_len = 4;
    c.mlp_mult = 2;
    c.lora_rank = 2;
    return c;
}

// Independent plain-loop forward pass of the same architecture, written
// without the graph machinery, to pin the encoder's arithmetic.
namespace reference {

static std::vector<std::vector<double>> layer_norm(const std::vector<std::vector<double>>& x,
                                                   const std::vector<double>& g,
                                                   const std::vector<double>& b) {
    size_t d = g.size();
    std::vector<std::vector<double>> out(x.size(), std::vector<double>(d));
    for (size_t r = 0; r < x.size(); r++) {
        double mu = 0;
        for (double v : x[r]) mu += v;
        mu /= (double)d;
        double var = 0;
        for (double v : x[r]) var += (v - mu) * (v - mu);
        var /= (double)d;
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (size_t j = 0; j < d; j++) out[r][j] = g[j] * (x[r][j] - mu) * inv + b[j];
    }
    return out;
}

static std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& x,
                                               const TensorD& w) {
    int din = w.shape[0], dout = w.shape[1];
    std::vector<std::vector<double>> out(x.size(), std::vector<double>((size_t)dout, 0.0));
    for (size_t r = 0; r < x.size(); r++)
        for (int j = 0; j < dout; j++)
            for (int k = 0; k < din; k++) out[r][(size_t)j] += x[r][(size_t)k] * w.at2(k, j);
    return out;
}

static std::vector<std::vector<double>> encode(const ParamStoreT<double>& store, const TextConfig& cfg,
                                               const std::vector<int>& ids) {
    int s = cfg.max_len, d = cfg.d_model, heads = cfg.n_heads, dh = d / heads;
    std::vector<std::vector<double>> x((size_t)s, std::vector<double>((size_t)d));
    const TensorD& emb = store.get("text.emb").value;
    const TensorD& pos = store.get("text.pos").value;
    for (int r = 0; r < s; r++)
        for (int j = 0; j < d; j++) x[(size_t)r][(size_t)j] = emb.at2(ids[(size_t)r], j) + pos.at2(r, j);

    for (int blk = 0; blk < cfg.n_blocks; blk++) {
        std::string p = "text.b" + std::to_string(blk);
        auto h = layer_norm(x, store.get(p + ".ln1.g").value.data, store.get(p + ".ln1.b").value.data);
        auto q = matmul(h, store.get(p + ".attn.q.w").value);
        auto k = matmul(h, store.get(p + ".attn.k.w").value);
        auto v = matmul(h, store.get(p + ".attn.v.w").value);
        std::vector<std::vector<double>> ctx((size_t)s, std::vector<double>((size_t)d, 0.0));
        for (int hd = 0; hd < heads; hd++) {
            int off = hd * dh;
            for (int qi = 0; qi < s; qi++) {
                std::vector<double> logits((size_t)s);
                for (int ki = 0; ki < s; ki++) {
                    double dot = 0;
                    for (int j = 0; j < dh; j++)
                        dot += q[(size_t)qi][(size_t)(off + j)] * k[(size_t)ki][(size_t)(off + j)];
                    logits[(size_t)ki] = dot / std::sqrt((double)dh) +
                                         (ids[(size_t)ki] == kPadId ? -1e9 : 0.0);
                }
                double mx = *std::max_element(logits.begin(), logits.end());
                double den = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    den += l;
                }
                for (int ki = 0; ki < s; ki++)
                    for (int j = 0; j < dh; j++)
                        ctx[(size_t)qi][(size_t)(off + j)] +=
                            logits[(size_t)ki] / den * v[(size_t)ki][(size_t)(off + j)];
            }
        }
        auto attn_out = matmul(ctx, store.get(p + ".attn.o.w").value);
        for (int r = 0; r < s; r++)
            for (int j = 0; j < d; j++) x[(size_t)r][(size_t)j] += attn_out[(size_t)r][(size_t)j];

        auto m = layer_norm(x, store.get(p + ".ln2.g").value.data, store.get(p + ".ln2.b").value.data);
        m = matmul(m, store.get(p + ".mlp.fc1.w").value);
        const TensorD& b1 = store.get(p + ".mlp.fc1.b").value;
        for (auto& row : m)
            for (size_t j = 0; j < row.size(); j++) {
                double z = row[j] + b1.data[j];
                row[j] = z / (1.0 + std::exp(-z));  // silu
            }
        m = matmul(m, store.get(p + ".mlp.fc2.w").value);
        const TensorD& b2 = store.get(p + ".mlp.fc2.b").value;
        for (int r = 0; r < s; r++)
            for (int j = 0; j < d; j++)
                x[(size_t)r][(size_t)j] += m[(size_t)r][(size_t)j] + b2.data[(size_t)j];
    }
    return layer_norm(x, store.get("text.ln_f.g").value.data, store.get("text.ln_f.b").value.data);
}

}  // namespace reference

TEST_CASE("text encoder matches a hand-traced reference at d=4") {
    TextConfig cfg = tiny_text_cfg(8);
    ParamStoreT<double> store;
    Rng rng(31);
    TextEncoderT<double> enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    std::vector<int> ids = {kBosId, 5, kEosId, kPadId};  // single-token prompt
    GraphT<double> g;
    Var out = enc.encode(g, store, ids, false);
    auto ref = reference::encode(store, cfg, ids);
    const TensorD& got = g.value(out);
    REQUIRE(got.shape == std::vector<int>{4, 4});
    for (int r = 0; r < 4; r++)
        for (int j = 0; j < 4; j++)
            REQUIRE(std::abs(got.at2(r, j) - ref[(size_t)r][(size_t)j]) < 1e-9);
}

TEST_CASE("text encoder adapter zero-init identity and determinism") {
    TextConfig cfg;
    cfg.vocab_size = 12;
    ParamStore store;
    Rng rng(37);
    TextEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    std::vector<int> ids(16, kPadId);
    ids[0] = kBosId;
    ids[1] = 6;
    ids[2] = 7;
    ids[3] = kEosId;

    Graph g1, g2, g3;
    const Tensor& off = g1.value(enc.encode(g1, store, ids, false));
    const Tensor& on = g2.value(enc.encode(g2, store, ids, true));
    const Tensor& off2 = g3.value(enc.encode(g3, store, ids, false));
    for (int64_t i = 0; i < off.numel(); i++) {
        REQUIRE(off.data[(size_t)i] == on.data[(size_t)i]);
        REQUIRE(off.data[(size_t)i] == off2.data[(size_t)i]);
    }

    REQUIRE_THROWS_AS(enc.encode(g1, store, std::vector<int>(16, 999), false), Error);
}

TEST_CASE("pad tail cannot influence content rows") {
    TextConfig cfg;
    cfg.vocab_size = 12;
    ParamStore store;
    Rng rng(41);
    TextEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    std::vector<int> ids(16, kPadId);
    ids[0] = kBosId;
    ids[1] = 5;
    ids[2] = kEosId;

    Graph g1;
    Tensor before = g1.value(enc.encode(g1, store, ids, false));
    // rewrite the positional embeddings of two PAD-tail positions
    Tensor& pos = store.get("text.pos").value;
    for (int j = 0; j < cfg.d_model; j++) std::swap(pos.at2(10, j), pos.at2(12, j));
    pos.at2(11, 0) += 3.0f;
    Graph g2;
    Tensor after = g2.value(enc.encode(g2, store, ids, false));
    for (int r = 0; r < 3; r++)
        for (int j = 0; j < cfg.d_model; j++) REQUIRE(before.at2(r, j) == after.at2(r, j));
}

TEST_CASE("duplicate tokens at positions with equal position rows give equal rows") {
    TextConfig cfg;
    cfg.vocab_size = 12;
    ParamStore store;
    Rng rng(43);
    TextEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);
    Tensor& pos = store.get("text.pos").value;
    for (int j = 0; j < cfg.d_model; j++) pos.at2(2, j) = pos.at2(1, j);

    std::vector<int> ids(16, kPadId);
    ids[0] = kBosId;
    ids[1] = 8;
    ids[2] = 8;
    ids[3] = kEosId;
    Graph g;
    const Tensor& out = g.value(enc.encode(g, store, ids, false));
    for (int j = 0; j < cfg.d_model; j++)
        REQUIRE(std::abs(out.at2(1, j) - out.at2(2, j)) < 1e-5f);
}

TEST_CASE("concept rows are the masked positions, unit-normalized") {
    Vocabulary v = test_vocab();
    TextConfig cfg;
    cfg.vocab_size = v.size();
    ParamStore store;
    Rng rng(47);
    TextEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    TokenizedPrompt p = tokenize("a photo of egg sandwich", v);
    Graph g;
    Var emb = enc.encode(g, store, p.ids, false);
    Var c = enc.concept_rows(g, emb, p.concept_mask);
    const Tensor& cv = g.value(c);
    REQUIRE(cv.shape == std::vector<int>{2, 64});
    for (int r = 0; r < 2; r++) {
        double n = 0;
        for (int j = 0; j < 64; j++) n += (double)cv.at2(r, j) * cv.at2(r, j);
        REQUIRE(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }

    TokenizedPrompt single = tokenize("a photo of pizza", v);
    Graph g2;
    Var emb2 = enc.encode(g2, store, single.ids, false);
    REQUIRE(g2.value(enc.concept_rows(g2, emb2, single.concept_mask)).shape[0] == 1);

    TokenizedPrompt none = tokenize("", v);
    Graph g3;
    Var emb3 = enc.encode(g3, store, none.ids, false);
    REQUIRE_THROWS_AS(enc.concept_rows(g3, emb3, none.concept_mask), Error);
}

TEST_CASE("text adapter name set is exactly the attention adapters") {
    TextConfig cfg;
    cfg.vocab_size = 8;
    ParamStore store;
    Rng rng(53);
    TextEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);
    auto names = enc.adapter_names();
    REQUIRE(names.size() == 16);  // 2 blocks x 4 projections x {A,B}
    for (const auto& n : names) {
        REQUIRE(is_lora_name(n));
        REQUIRE(store.has(n));
        REQUIRE(n.find(".attn.") != std::string::npos);
    }
    store.set_trainable([&](const std::string& n) { return is_lora_name(n); });
    auto trainable = store.trainable_names();
    std::set<std::string> got(trainable.begin(), trainable.end());
    std::set<std::string> want(names.begin(), names.end());
    REQUIRE(got == want);
}

// ---- vision encoder ----------------------------------------------------------

TEST_CASE("vision encoder postconditions") {
    VisionConfig cfg;
    ParamStore store;
    Rng rng(59);
    VisionEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    SECTION("zero image: all patches identical, cosine 1") {
        // nonzero bias so the constant feature direction is well-defined
        store.get("vis.patch.b").value = randn<float>({64}, rng);
        Graph g;
        Var f = enc.patch_features(g, store, g.leaf(Tensor({3, 64, 64})));
        const Tensor& fv = g.value(f);
        REQUIRE(fv.shape == std::vector<int>{64, 64});
        for (int r = 1; r < 64; r++) {
            double dot = 0;
            for (int j = 0; j < 64; j++) dot += (double)fv.at2(0, j) * fv.at2(r, j);
            REQUIRE(std::abs(dot - 1.0) < 1e-6);
        }
    }
    SECTION("unit norms on random images") {
        Rng ir(7);
        double worst = 0;
        for (int n = 0; n < 20; n++) {
            Graph g;
            Var f = enc.patch_features(g, store, g.leaf(randn<float>({3, 64, 64}, ir)));
            const Tensor& fv = g.value(f);
            for (int r = 0; r < 64; r++) {
                double s = 0;
                for (int j = 0; j < 64; j++) s += (double)fv.at2(r, j) * fv.at2(r, j);
                worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
            }
        }
        REQUIRE(worst < 1e-6);
    }
    SECTION("pooled equals the mean-of-rows oracle") {
        Rng ir(8);
        Tensor img = randn<float>({3, 64, 64}, ir);
        Graph g;
        Var raw = enc.raw_features(g, store, g.leaf(img));
        Var pooled = enc.pooled_feature(g, store, g.leaf(img));
        const Tensor& rv = g.value(raw);
        std::vector<double> mean(64, 0.0);
        for (int r = 0; r < 64; r++)
            for (int j = 0; j < 64; j++) mean[(size_t)j] += rv.at2(r, j);
        double norm = 0;
        for (auto& m : mean) {
            m /= 64.0;
            norm += m * m;
        }
        norm = std::sqrt(norm + 1e-12);
        const Tensor& pv = g.value(pooled);
        for (int j = 0; j < 64; j++)
            REQUIRE(std::abs(pv.data[(size_t)j] - mean[(size_t)j] / norm) < 1e-5);
    }
    SECTION("deterministic: identical image, bit-identical features") {
        Rng ir(9);
        Tensor img = randn<float>({3, 64, 64}, ir);
        Graph g1, g2;
        const Tensor& a = g1.value(enc.patch_features(g1, store, g1.leaf(img)));
        const Tensor& b = g2.value(enc.patch_features(g2, store, g2.leaf(img)));
        for (int64_t i = 0; i < a.numel(); i++) REQUIRE(a.data[(size_t)i] == b.data[(size_t)i]);
    }
    SECTION("wrong channel count errors") {
        Graph g;
        REQUIRE_THROWS_AS(enc.patch_features(g, store, g.leaf(Tensor({1, 64, 64}))), Error);
        REQUIRE_THROWS_AS(enc.patch_features(g, store, g.leaf(Tensor({3, 60, 64}))), Error);
    }
}

TEST_CASE("translating by one patch stride permutes interior patch rows") {
    VisionConfig cfg;
    ParamStore store;
    Rng rng(61);
    VisionEncoder enc;
    enc.cfg = cfg;
    enc.init(store, rng);

    Rng ir(10);
    Tensor img({3, 64, 64});
    // sprite occupying patch cells: rows 16..39, cols 8..31 (patch cells 2..4, 1..3)
    for (int c = 0; c < 3; c++)
        for (int y = 16; y < 40; y++)
            for (int x = 8; x < 32; x++) img.at3(c, y, x) = (float)ir.normal();
    Tensor shifted({3, 64, 64});
    for (int c = 0; c < 3; c++)
        for (int y = 0; y < 64; y++)
            for (int x = 8; x < 64; x++) shifted.at3(c, y, x) = img.at3(c, y, x - 8);

    Graph g1, g2;
    const Tensor& a = g1.value(enc.patch_features(g1, store, g1.leaf(img)));
    const Tensor& b = g2.value(enc.patch_features(g2, store, g2.leaf(shifted)));
    // receptive field is 5x5 patch cells; compare rows at distance >= 2 from borders
    for (int r = 2; r <= 5; r++)
        for (int c = 2; c <= 4; c++) {
            int orig = r * 8 + c, moved = r * 8 + c + 1;
            for (int j = 0; j < 64; j++)
                REQUIRE(std::abs(a.at2(orig, j) - b.at2(moved, j)) < 1e-5f);
        }
}

TEST_CASE("feature dim matches the text embedding dim") {
    VisionConfig vc;
    TextConfig tc;
    tc.vocab_size = 8;
    REQUIRE(vc.d_out == tc.d_model);
}
