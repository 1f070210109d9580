#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "cdiff/adam.hpp"
#include "cdiff/graph.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/params.hpp"
#include "cdiff/png_io.hpp"
#include "cdiff/synth.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

// One detected object instance.
struct Detection {
    std::string cls;
    int x = 0, y = 0, w = 0, h = 0;
    float score = 0.f;          // classifier confidence for `cls`
    std::string modifier_attr;  // predicted attribute; empty when "none"
};

struct DetectorConfig {
    int crop_size = 16;
    int min_component = 6;    // drop connected components smaller than this
    int fg_threshold = 30;    // color distance from background that counts as foreground
    int epochs = 30;
    int batch = 32;
    float lr = 1e-3f;
    uint64_t seed = 23;
};

// Analysis-by-detection pipeline: background subtraction, connected
// components, then a small trained classifier over each component crop.
// The classifier has two heads: object class and modifier attribute.
class ObjectDetector {
  public:
    DetectorConfig cfg;
    Lexicon lexicon;
    std::vector<std::string> classes;  // heads + standalones
    std::vector<std::string> attrs;    // "none" + modifiers

    void init(ParamStoreT<float>& store, const Lexicon& lex, Rng& rng) {
        lexicon = lex;
        classes = lex.heads;
        classes.insert(classes.end(), lex.standalones.begin(), lex.standalones.end());
        attrs = {"none"};
        attrs.insert(attrs.end(), lex.modifiers.begin(), lex.modifiers.end());
        auto conv_init = [&](const std::string& name, int ci, int co, int k) {
            float std = 1.f / std::sqrt((float)(ci * k * k));
            store.create(name + ".w", randn<float>({co, ci, k, k}, rng, std));
            store.create(name + ".b", Tensor({co}));
        };
        // input: RGB crop plus a constant size channel
        conv_init("det.c1", 4, 12, 3);
        conv_init("det.c2", 12, 24, 3);
        conv_init("det.c3", 24, 32, 3);
        int flat = 32 * (cfg.crop_size / 4) * (cfg.crop_size / 4);
        create_linear(store, "det.fc", flat, 64, rng);
        create_linear(store, "det.cls", 64, (int)classes.size(), rng);
        create_linear(store, "det.attr", 64, (int)attrs.size(), rng);
        store.create("det.trained", Tensor({1}), /*trainable=*/false);
    }

    // Square crop around a bbox, background-padded, nearest-neighbor resampled
    // to crop_size, plus the relative-size channel. Returns [4,S,S] in [-1,1].
    Tensor crop_from_bbox(const ImageU8& img, int x, int y, int w, int h) const {
        int side = std::max(w, h);
        int cx = x + w / 2, cy = y + h / 2;
        int s = cfg.crop_size;
        Tensor out({4, s, s});
        for (int oy = 0; oy < s; oy++)
            for (int ox = 0; ox < s; ox++) {
                int sx = cx - side / 2 + (int)((int64_t)ox * side / s);
                int sy = cy - side / 2 + (int)((int64_t)oy * side / s);
                RGB c = palette::background;
                if (sx >= 0 && sy >= 0 && sx < img.width && sy < img.height)
                    c = RGB{img.at(sy, sx, 0), img.at(sy, sx, 1), img.at(sy, sx, 2)};
                out.at3(0, oy, ox) = (float)c.r / 127.5f - 1.f;
                out.at3(1, oy, ox) = (float)c.g / 127.5f - 1.f;
                out.at3(2, oy, ox) = (float)c.b / 127.5f - 1.f;
            }
        float size_feat = (float)side / 32.f - 1.f;
        for (int i = 0; i < s * s; i++) out.data[(size_t)3 * s * s + i] = size_feat;
        return out;
    }

    // Forward pass over a batch of crops [B,4,S,S] flattened as B tensors.
    // Returns {cls_logits [B,NC], attr_logits [B,NA]}.
    std::pair<Var, Var> forward(GraphT<float>& g, ParamStoreT<float>& store,
                                const std::vector<Tensor>& crops) const {
        int s = cfg.crop_size;
        std::vector<Var> feats;
        feats.reserve(crops.size());
        for (const auto& crop : crops) {
            Var x = g.leaf(crop);
            x = g.silu(conv(g, store, "det.c1", x, 1, 1));  // [12,S,S]
            x = g.silu(conv(g, store, "det.c2", x, 2, 1));  // [24,S/2,S/2]
            x = g.silu(conv(g, store, "det.c3", x, 2, 1));  // [32,S/4,S/4]
            x = g.reshape(x, {1, 32 * (s / 4) * (s / 4)});
            feats.push_back(g.silu(linear(g, x, store, "det.fc")));  // [1,64]
        }
        Var f = feats[0];
        for (size_t i = 1; i < feats.size(); i++) f = g.concat(f, feats[i], 0);  // [B,64]
        return {linear(g, f, store, "det.cls"), linear(g, f, store, "det.attr")};
    }

    struct TrainStats {
        int steps = 0;
        double final_loss = 0.0;
        double holdout_class_accuracy = 0.0;
    };

    // Train the crop classifier on annotated corpus instances, then mark the
    // detector trained. Deterministic for a fixed config.
    TrainStats train(ParamStoreT<float>& store, const LoadedCorpus& corpus,
                     std::ostream* log = nullptr) {
        struct Sample {
            Tensor crop;
            int cls_id, attr_id;
        };
        std::vector<Sample> samples;
        Rng aug = Rng::stream(cfg.seed, 7001);
        for (int idx : corpus.train_idx) {
            const CorpusItem& item = corpus.items[(size_t)idx];
            ImageU8 img = read_png_rgb(item.path);
            for (const auto& a : item.ann.instances) {
                // modest bbox jitter narrows the gap to detection-time boxes
                int jx = (int)aug.below(3) - 1, jy = (int)aug.below(3) - 1;
                Sample s;
                s.crop = crop_from_bbox(img, a.x + jx, a.y + jy, a.w, a.h);
                for (auto& v : s.crop.data) v += (float)(aug.normal() * 0.02);
                s.cls_id = class_id(a.cls);
                s.attr_id = attr_id(a.modifier_attr.empty() ? "none" : a.modifier_attr);
                samples.push_back(std::move(s));
            }
        }
        if (samples.empty()) fail("detector", "no annotated training crops found");

        AdamT<float> opt;
        opt.lr = cfg.lr;
        Rng order = Rng::stream(cfg.seed, 7002);
        TrainStats stats;
        for (int epoch = 0; epoch < cfg.epochs; epoch++) {
            std::vector<int> perm(samples.size());
            for (size_t i = 0; i < perm.size(); i++) perm[i] = (int)i;
            for (size_t i = perm.size(); i > 1; i--)
                std::swap(perm[i - 1], perm[(size_t)order.below((int64_t)i)]);
            for (size_t start = 0; start < perm.size(); start += (size_t)cfg.batch) {
                size_t end = std::min(perm.size(), start + (size_t)cfg.batch);
                std::vector<Tensor> crops;
                std::vector<int> cls_t, attr_t;
                for (size_t i = start; i < end; i++) {
                    crops.push_back(samples[(size_t)perm[i]].crop);
                    cls_t.push_back(samples[(size_t)perm[i]].cls_id);
                    attr_t.push_back(samples[(size_t)perm[i]].attr_id);
                }
                GraphT<float> g;
                auto [cls_logits, attr_logits] = forward(g, store, crops);
                Var loss = g.add(cross_entropy(g, cls_logits, cls_t),
                                 cross_entropy(g, attr_logits, attr_t));
                g.backward(loss);
                opt.step(g.bound_params());
                stats.final_loss = (double)g.value(loss).data[0];
                stats.steps++;
            }
            if (log)
                (*log) << "detector epoch " << epoch + 1 << "/" << cfg.epochs << " loss "
                       << stats.final_loss << "\n";
        }
        store.get("det.trained").value.data[0] = 1.f;
        stats.holdout_class_accuracy = holdout_accuracy(store, corpus);
        if (log) (*log) << "detector holdout class accuracy " << stats.holdout_class_accuracy << "\n";
        return stats;
    }

    // Per-instance class accuracy on the held-out split, using ground-truth boxes.
    double holdout_accuracy(ParamStoreT<float>& store, const LoadedCorpus& corpus) const {
        int64_t total = 0, hit = 0;
        for (int idx : corpus.test_idx) {
            const CorpusItem& item = corpus.items[(size_t)idx];
            ImageU8 img = read_png_rgb(item.path);
            for (const auto& a : item.ann.instances) {
                auto [cls, attr, score] = classify(store, crop_from_bbox(img, a.x, a.y, a.w, a.h));
                (void)attr;
                (void)score;
                total++;
                if (cls == a.cls) hit++;
            }
        }
        return total ? (double)hit / (double)total : 0.0;
    }

    std::tuple<std::string, std::string, float> classify(ParamStoreT<float>& store,
                                                         const Tensor& crop) const {
        GraphT<float> g;
        auto [cls_logits, attr_logits] = forward(g, store, {crop});
        const Tensor& cl = g.value(g.softmax_last(cls_logits));
        const Tensor& al = g.value(g.softmax_last(attr_logits));
        int ci = argmax_row(cl), ai = argmax_row(al);
        return {classes[(size_t)ci], attrs[(size_t)ai], cl.data[(size_t)ci]};
    }

    // Full detection pipeline over one image.
    std::vector<Detection> detect(ParamStoreT<float>& store, const ImageU8& img) const {
        if (!store.has("det.trained") || store.get("det.trained").value.data[0] < 0.5f)
            fail("detector", "detector has not been trained");

        // background estimate: per-channel median over the 1-px border ring
        int bg[3];
        for (int c = 0; c < 3; c++) {
            std::vector<unsigned char> border;
            for (int x = 0; x < img.width; x++) {
                border.push_back(img.at(0, x, c));
                border.push_back(img.at(img.height - 1, x, c));
            }
            for (int y = 1; y < img.height - 1; y++) {
                border.push_back(img.at(y, 0, c));
                border.push_back(img.at(y, img.width - 1, c));
            }
            std::nth_element(border.begin(), border.begin() + border.size() / 2, border.end());
            bg[c] = border[border.size() / 2];
        }

        std::vector<int> label((size_t)img.width * img.height, 0);
        auto is_fg = [&](int x, int y) {
            int d2 = 0;
            for (int c = 0; c < 3; c++) {
                int d = (int)img.at(y, x, c) - bg[c];
                d2 += d * d;
            }
            return d2 > cfg.fg_threshold * cfg.fg_threshold;
        };
        std::vector<Detection> out;
        int next_label = 0;
        for (int sy = 0; sy < img.height; sy++)
            for (int sx = 0; sx < img.width; sx++) {
                if (!is_fg(sx, sy) || label[(size_t)sy * img.width + sx]) continue;
                next_label++;
                int x0 = sx, x1 = sx, y0 = sy, y1 = sy;
                int64_t area = 0;
                std::deque<std::pair<int, int>> q{{sx, sy}};
                label[(size_t)sy * img.width + sx] = next_label;
                while (!q.empty()) {
                    auto [x, y] = q.front();
                    q.pop_front();
                    area++;
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
                    for (int k = 0; k < 4; k++) {
                        int nx = x + dx[k], ny = y + dy[k];
                        if (nx < 0 || ny < 0 || nx >= img.width || ny >= img.height) continue;
                        if (label[(size_t)ny * img.width + nx] || !is_fg(nx, ny)) continue;
                        label[(size_t)ny * img.width + nx] = next_label;
                        q.emplace_back(nx, ny);
                    }
                }
                if (area < cfg.min_component) continue;
                Detection det;
                det.x = x0;
                det.y = y0;
                det.w = x1 - x0 + 1;
                det.h = y1 - y0 + 1;
                auto [cls, attr, score] =
                    classify(store, crop_from_bbox(img, det.x, det.y, det.w, det.h));
                det.cls = cls;
                det.score = score;
                // attributes only make sense on head shapes
                if (attr != "none" && is_head_word(lexicon, cls)) det.modifier_attr = attr;
                out.push_back(det);
            }
        // deterministic order: by score descending, then top-left position
        std::sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
            if (a.score != b.score) return a.score > b.score;
            return std::tie(a.y, a.x) < std::tie(b.y, b.x);
        });
        return out;
    }

    int class_id(const std::string& cls) const {
        auto it = std::find(classes.begin(), classes.end(), cls);
        if (it == classes.end()) fail("detector", "unknown object class '" + cls + "'");
        return (int)(it - classes.begin());
    }
    int attr_id(const std::string& attr) const {
        auto it = std::find(attrs.begin(), attrs.end(), attr);
        if (it == attrs.end()) fail("detector", "unknown attribute '" + attr + "'");
        return (int)(it - attrs.begin());
    }

  private:
    static Var conv(GraphT<float>& g, ParamStoreT<float>& store, const std::string& name, Var x,
                    int stride, int pad) {
        return g.conv2d(x, g.param(store.get(name + ".w")), g.param(store.get(name + ".b")),
                        stride, pad);
    }

    static int argmax_row(const Tensor& row) {
        int best = 0;
        for (int i = 1; i < (int)row.numel(); i++)
            if (row.data[(size_t)i] > row.data[(size_t)best]) best = i;
        return best;
    }

    // Mean cross-entropy of row-wise targets. logits: [B,N].
    static Var cross_entropy(GraphT<float>& g, Var logits, const std::vector<int>& targets) {
        const Tensor& l = g.value(logits);
        Tensor onehot(l.shape);
        for (size_t i = 0; i < targets.size(); i++)
            onehot.at2((int)i, targets[i]) = -1.f / (float)targets.size();
        Var logp = g.log_softmax_last(logits);
        return g.sum_all(g.mul(logp, g.constant(std::move(onehot))));
    }
};

}  // namespace cdiff
