#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "cdiff/adam.hpp"
#include "cdiff/checkpoint.hpp"
#include "cdiff/losses.hpp"
#include "cdiff/models.hpp"
#include "cdiff/png_io.hpp"
#include "cdiff/synth.hpp"

namespace cdiff {

struct TrainItem {
    Tensor image;  // [3,H,W] in [-1,1]
    TokenizedPrompt prompt;
    std::string category;
};

inline std::vector<TrainItem> load_train_items(const ModelBundle& m, const LoadedCorpus& corpus) {
    std::vector<TrainItem> items;
    items.reserve(corpus.train_idx.size());
    for (int idx : corpus.train_idx) {
        const CorpusItem& ci = corpus.items[(size_t)idx];
        TrainItem item;
        item.image = to_float_chw(read_png_rgb(ci.path));
        item.prompt = m.category_prompt(ci.ann.category);
        item.category = ci.ann.category;
        items.push_back(std::move(item));
    }
    if (items.empty()) fail("train", "corpus has no training images");
    return items;
}

namespace detail {

// -mean over rows of log softmax picked at `targets`.
inline Var mean_cross_entropy(GraphT<float>& g, Var logits, const std::vector<int>& targets) {
    const Tensor& l = g.value(logits);
    Tensor onehot(l.shape);
    for (size_t i = 0; i < targets.size(); i++)
        onehot.at2((int)i, targets[i]) = -1.f / (float)targets.size();
    return g.sum_all(g.mul(g.log_softmax_last(logits), g.constant(std::move(onehot))));
}

inline bool is_adapter(const std::string& name) { return is_lora_name(name); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder pretraining: symmetric contrastive alignment between pooled image
// features and mean concept embeddings of the category prompt. Run before
// any diffusion training so patch/concept cosine similarities are meaningful.
// ---------------------------------------------------------------------------
struct PretrainStats {
    double initial_top1 = 0, final_top1 = 0;
    double final_loss = 0;
    int steps = 0;
};

class EncoderPretrainer {
  public:
    ModelBundle& m;
    const LoadedCorpus& corpus;
    std::ostream* log = nullptr;

    EncoderPretrainer(ModelBundle& bundle, const LoadedCorpus& c, std::ostream* l = nullptr)
        : m(bundle), corpus(c), log(l) {}

    // Pooled image feature as a plain tensor (no gradient bookkeeping).
    Tensor image_feature(const Tensor& image) {
        GraphT<float> g;
        return g.value(m.vision.pooled_feature(g, m.store, g.leaf(image)));
    }

    // Mean concept embedding of the category prompt, unit-normalized.
    Tensor text_feature(const std::string& category) {
        GraphT<float> g;
        return g.value(text_feature_op(g, category));
    }

    Var text_feature_op(GraphT<float>& g, const std::string& category) {
        TokenizedPrompt tp = m.category_prompt(category);
        Var emb = m.text.encode(g, m.store, tp.ids, /*adapters=*/false);
        Var rows = m.text.concept_rows(g, emb, tp.concept_mask);
        return g.l2norm_rows(g.reshape(g.mean_rows(rows), {1, m.text.cfg.d_model}));
    }

    // Image -> category top-1 retrieval accuracy over the held-out split.
    double holdout_top1() {
        const auto cats = corpus.categories();
        std::vector<Tensor> txt;
        txt.reserve(cats.size());
        for (const auto& c : cats) txt.push_back(text_feature(c));
        int64_t hits = 0, total = 0;
        for (int idx : corpus.test_idx) {
            const CorpusItem& ci = corpus.items[(size_t)idx];
            Tensor img = image_feature(to_float_chw(read_png_rgb(ci.path)));
            int best = 0;
            double best_dot = -2;
            for (size_t c = 0; c < cats.size(); c++) {
                double dot = 0;
                for (int64_t k = 0; k < img.numel(); k++)
                    dot += (double)img.data[(size_t)k] * (double)txt[c].data[(size_t)k];
                if (dot > best_dot) {
                    best_dot = dot;
                    best = (int)c;
                }
            }
            total++;
            if (lowercase(cats[(size_t)best]) == lowercase(ci.ann.category)) hits++;
        }
        return total ? (double)hits / (double)total : 0.0;
    }

    PretrainStats run() {
        const PretrainConfig& pc = m.cfg.pretrain;
        // both encoder towers train in full; adapters and the UNet stay out
        m.store.set_trainable([](const std::string& name) {
            return (name.rfind("text.", 0) == 0 || name.rfind("vis.", 0) == 0) &&
                   !detail::is_adapter(name);
        });

        // group train items by category for positive sampling
        std::map<std::string, std::vector<int>> by_cat;
        for (int idx : corpus.train_idx)
            by_cat[lowercase(corpus.items[(size_t)idx].ann.category)].push_back(idx);
        std::vector<std::string> cats;
        for (const auto& [c, v] : by_cat) cats.push_back(c);
        if (cats.size() < 2) fail("pretrain", "contrastive pretraining needs >= 2 categories");

        PretrainStats stats;
        stats.initial_top1 = holdout_top1();
        if (log) (*log) << "pretrain holdout top-1 before training: " << stats.initial_top1 << "\n";

        AdamT<float> opt;
        opt.lr = pc.lr;
        int steps_per_epoch =
            std::max<int>(1, (int)(corpus.train_idx.size() / (size_t)pc.batch));
        for (int epoch = 0; epoch < pc.epochs; epoch++) {
            Rng rng = Rng::stream(pc.seed, 100 + (uint64_t)epoch);
            for (int step = 0; step < steps_per_epoch; step++) {
                // batch of distinct categories, one random image each
                std::vector<std::string> pool = cats;
                for (size_t i = pool.size(); i > 1; i--)
                    std::swap(pool[i - 1], pool[(size_t)rng.below((int64_t)i)]);
                int b = std::min<int>(pc.batch, (int)pool.size());

                GraphT<float> g;
                std::vector<Var> img_rows, txt_rows;
                for (int i = 0; i < b; i++) {
                    const auto& members = by_cat[pool[(size_t)i]];
                    int idx = members[(size_t)rng.below((int64_t)members.size())];
                    Tensor img = to_float_chw(read_png_rgb(corpus.items[(size_t)idx].path));
                    img_rows.push_back(m.vision.pooled_feature(g, m.store, g.leaf(img)));
                    txt_rows.push_back(text_feature_op(g, pool[(size_t)i]));
                }
                Var img_mat = img_rows[0], txt_mat = txt_rows[0];
                for (int i = 1; i < b; i++) {
                    img_mat = g.concat(img_mat, img_rows[(size_t)i], 0);
                    txt_mat = g.concat(txt_mat, txt_rows[(size_t)i], 0);
                }
                Var logits = g.scale(g.matmul(img_mat, g.permute(txt_mat, {1, 0})),
                                     1.f / pc.temperature);
                std::vector<int> diag(b);
                for (int i = 0; i < b; i++) diag[(size_t)i] = i;
                Var loss = g.scale(
                    g.add(detail::mean_cross_entropy(g, logits, diag),
                          detail::mean_cross_entropy(g, g.permute(logits, {1, 0}), diag)),
                    0.5f);
                g.backward(loss);
                opt.step(g.bound_params());
                stats.final_loss = (double)g.value(loss).data[0];
                stats.steps++;
            }
            if (log)
                (*log) << "pretrain epoch " << epoch + 1 << "/" << pc.epochs << " loss "
                       << stats.final_loss << "\n";
        }
        stats.final_top1 = holdout_top1();
        if (log) (*log) << "pretrain holdout top-1 after training: " << stats.final_top1 << "\n";
        return stats;
    }
};

// ---------------------------------------------------------------------------
// Diffusion training.
//   baseline: the full UNet learns noise prediction; encoders stay frozen.
//   fdala:    only the low-rank adapters in the UNet cross-attention and the
//             text encoder train, driven by reconstruction + patch-concept
//             alignment on the clean image. Separate learning rates per tower.
// ---------------------------------------------------------------------------
struct StepLoss {
    int64_t step = 0;
    float l_rec = 0, l_align = 0, l_total = 0;
};

struct TrainRunResult {
    std::vector<StepLoss> losses;
    std::string final_checkpoint;
    int64_t total_steps = 0;
};

class DiffusionTrainer {
  public:
    ModelBundle& m;
    const LoadedCorpus& corpus;
    std::string out_dir;  // checkpoints land in <out_dir>/epoch_NNN and <out_dir>/final
    std::ostream* log = nullptr;
    int64_t max_steps = 0;  // 0 = no cap; otherwise stop after this many steps

    DiffusionTrainer(ModelBundle& bundle, const LoadedCorpus& c, std::string out,
                     std::ostream* l = nullptr)
        : m(bundle), corpus(c), out_dir(std::move(out)), log(l) {}

    // Single-item losses on a prepared graph; shared by training and tests.
    struct ItemLoss {
        Var l_total;
        float l_rec = 0, l_align = 0;
    };

    ItemLoss item_loss(GraphT<float>& g, const TrainItem& item, bool dropped, int t,
                       const Tensor& eps, bool adapters, bool align) {
        const std::vector<int> ids = dropped ? m.pad_ids() : item.prompt.ids;
        Var ctx = m.text.encode(g, m.store, ids, adapters);
        Tensor z_t = forward_noise(item.image, t, eps, m.sched);
        Var eps_hat = m.unet.predict(g, m.store, g.leaf(z_t), t, ctx, adapters);
        Var l_rec = reconstruction_loss_op(g, g.constant(eps), eps_hat);
        ItemLoss out;
        out.l_rec = g.value(l_rec).data[0];
        if (align && !dropped) {
            Var patches = m.vision.patch_features(g, m.store, g.leaf(item.image));
            Var concepts = m.text.concept_rows(g, ctx, item.prompt.concept_mask);
            AlignmentVars<float> av = alignment_loss_op(g, patches, concepts);
            out.l_align = g.value(av.l_align).data[0];
            out.l_total = g.add(l_rec, av.l_align);
        } else {
            out.l_total = l_rec;
        }
        return out;
    }

    TrainRunResult run(int start_epoch = 0) {
        const TrainConfig& tc = m.cfg.train;
        const bool fdala = tc.mode == "fdala";
        if (!fdala && tc.mode != "baseline")
            fail("train", "unknown training mode '" + tc.mode + "'");

        if (fdala) {
            m.store.set_trainable(detail::is_adapter);
        } else {
            m.store.set_trainable([](const std::string& name) {
                return name.rfind("unet.", 0) == 0 && !detail::is_adapter(name);
            });
        }

        AdamT<float> opt_unet, opt_text;
        opt_unet.lr = tc.lr_unet;
        opt_unet.weight_decay = tc.weight_decay;
        opt_text.lr = tc.lr_text;
        opt_text.weight_decay = tc.weight_decay;

        std::vector<TrainItem> items = load_train_items(m, corpus);
        const bool align = fdala && tc.use_align;
        TrainRunResult result;
        int64_t step = (int64_t)start_epoch *
                       (int64_t)((items.size() + (size_t)tc.batch - 1) / (size_t)tc.batch);

        for (int epoch = start_epoch; epoch < tc.epochs; epoch++) {
            std::vector<int> order(items.size());
            for (size_t i = 0; i < order.size(); i++) order[i] = (int)i;
            Rng shuffle = Rng::stream(tc.seed, 1000 + (uint64_t)epoch);
            for (size_t i = order.size(); i > 1; i--)
                std::swap(order[i - 1], order[(size_t)shuffle.below((int64_t)i)]);

            for (size_t start = 0; start < order.size(); start += (size_t)tc.batch) {
                size_t end = std::min(order.size(), start + (size_t)tc.batch);
                int bsz = (int)(end - start);
                std::map<std::string, Tensor> grad_sum;
                double rec_sum = 0, align_sum = 0;

                for (size_t slot = start; slot < end; slot++) {
                    const TrainItem& item = items[(size_t)order[slot]];
                    Rng rng = Rng::stream(
                        tc.seed, hash64(0x57e9ull, (uint64_t)epoch * 1000003ull + slot));
                    bool dropped = rng.uniform() < (double)tc.prompt_dropout;
                    int t = (int)rng.below(m.sched.t_train);
                    Tensor eps = randn<float>(item.image.shape, rng);

                    GraphT<float> g;
                    ItemLoss il = item_loss(g, item, dropped, t, eps, fdala, align);
                    g.backward(il.l_total);
                    rec_sum += il.l_rec;
                    align_sum += il.l_align;
                    for (const auto& [param, grad] : g.bound_params()) {
                        if (!grad) continue;
                        auto it = grad_sum.find(param->name);
                        if (it == grad_sum.end()) {
                            grad_sum.emplace(param->name, *grad);
                        } else {
                            for (int64_t k = 0; k < grad->numel(); k++)
                                it->second.data[(size_t)k] += grad->data[(size_t)k];
                        }
                    }
                }

                std::vector<std::pair<ParameterT<float>*, const Tensor*>> unet_grads, text_grads;
                for (auto& [name, grad] : grad_sum) {
                    for (auto& v : grad.data) v /= (float)bsz;
                    auto& entry = (name.rfind("text.", 0) == 0) ? text_grads : unet_grads;
                    entry.push_back({&m.store.get(name), &grad});
                }
                opt_unet.step(unet_grads);
                if (!text_grads.empty()) opt_text.step(text_grads);

                StepLoss sl;
                sl.step = ++step;
                sl.l_rec = (float)(rec_sum / bsz);
                sl.l_align = (float)(align_sum / bsz);
                sl.l_total = sl.l_rec + sl.l_align;  // exact float sum of the two means
                result.losses.push_back(sl);
                if (log) {
                    char line[160];
                    std::snprintf(line, sizeof line,
                                  "step %lld l_rec %.6f l_align %.6f l_total %.6f",
                                  (long long)sl.step, sl.l_rec, sl.l_align, sl.l_total);
                    (*log) << line << "\n";
                }
                if (max_steps > 0 && step >= max_steps) {
                    result.total_steps = step;
                    result.final_checkpoint = save_epoch(epoch, step);
                    return result;
                }
            }
            save_epoch(epoch, step);
            prune_checkpoints(epoch);
        }
        result.total_steps = step;
        result.final_checkpoint = finalize(step);
        return result;
    }

    CheckpointMeta meta_for(int64_t step) const {
        CheckpointMeta meta;
        meta.config_echo = experiment_config_to_json(m.cfg);
        meta.config_echo["config_hash"] = experiment_config_hash(m.cfg);
        meta.schedule = {{"t_train", m.sched.t_train},
                         {"beta_start", m.sched.betas.front()},
                         {"beta_end", m.sched.betas.back()}};
        meta.rng_state = Rng::stream(m.cfg.train.seed, (uint64_t)step).state_str();
        meta.step = step;
        return meta;
    }

  private:
    std::string epoch_dir(int epoch) const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "epoch_%03d", epoch);
        return (std::filesystem::path(out_dir) / buf).string();
    }

    std::string save_epoch(int epoch, int64_t step) {
        std::string dir = epoch_dir(epoch);
        save_checkpoint(dir, m.store, meta_for(step));
        return dir;
    }

    void prune_checkpoints(int current_epoch) {
        int keep = std::max(1, m.cfg.train.keep_checkpoints);
        for (int e = 0; e <= current_epoch - keep; e++)
            std::filesystem::remove_all(epoch_dir(e));
    }

    std::string finalize(int64_t step) {
        std::string dir = (std::filesystem::path(out_dir) / "final").string();
        save_checkpoint(dir, m.store, meta_for(step));
        return dir;
    }
};

}  // namespace cdiff
