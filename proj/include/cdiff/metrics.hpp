#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cdiff/detector.hpp"
#include "cdiff/synth.hpp"
#include "cdiff/tensor.hpp"

namespace cdiff {

// Expected object instance for one evaluated image. Real images carry
// annotated boxes; generated images only carry class expectations derived
// from their prompt category.
struct ExpectedInstance {
    std::string cls;
    std::string modifier_attr;
    bool has_bbox = false;
    int x = 0, y = 0, w = 0, h = 0;
};

struct EvalCase {
    std::string category;
    std::vector<ExpectedInstance> expected;
    std::vector<Detection> detections;
};

inline double iou(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh) {
    int ix0 = std::max(ax, bx), iy0 = std::max(ay, by);
    int ix1 = std::min(ax + aw, bx + bw), iy1 = std::min(ay + ah, by + bh);
    int64_t inter = (int64_t)std::max(0, ix1 - ix0) * std::max(0, iy1 - iy0);
    int64_t uni = (int64_t)aw * ah + (int64_t)bw * bh - inter;
    return uni > 0 ? (double)inter / (double)uni : 0.0;
}

struct PRF {
    int64_t tp = 0, fp = 0, fn = 0;
    // precision/recall default to 0 when undefined (no detections / no expected)
    double precision() const { return tp + fp > 0 ? (double)tp / (double)(tp + fp) : 0.0; }
    double recall() const { return tp + fn > 0 ? (double)tp / (double)(tp + fn) : 0.0; }
    double f1() const {
        double p = precision(), r = recall();
        return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    PRF& operator+=(const PRF& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

// Greedy matching in detection-score order: a detection matches an unmatched
// expected instance of equal class, with IoU >= 0.5 when the expectation has
// a box. Returns per-image counts.
inline PRF match_detections(const std::vector<ExpectedInstance>& expected,
                            std::vector<Detection> detections) {
    std::stable_sort(detections.begin(), detections.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<char> used(expected.size(), 0);
    PRF prf;
    for (const auto& det : detections) {
        int best = -1;
        double best_iou = -1.0;
        for (size_t i = 0; i < expected.size(); i++) {
            if (used[i] || expected[i].cls != det.cls) continue;
            if (expected[i].has_bbox) {
                double v = iou(expected[i].x, expected[i].y, expected[i].w, expected[i].h, det.x,
                               det.y, det.w, det.h);
                if (v >= 0.5 && v > best_iou) {
                    best = (int)i;
                    best_iou = v;
                }
            } else if (best < 0) {
                best = (int)i;  // class-only expectation
            }
        }
        if (best >= 0) {
            used[(size_t)best] = 1;
            prf.tp++;
        } else {
            prf.fp++;
        }
    }
    for (char u : used)
        if (!u) prf.fn++;
    return prf;
}

// Expected instances for a generated image of a category. Compound and head
// categories expect exactly one head instance; standalone categories are
// generative ("3..6 objects"), so the expectation adapts to the detection
// count clamped into that range.
inline std::vector<ExpectedInstance> expected_for_generated(const Lexicon& lex,
                                                            const std::string& category,
                                                            const std::vector<Detection>& dets) {
    CategoryInfo info = parse_category(lex, category);
    std::vector<ExpectedInstance> out;
    if (!info.is_standalone) {
        out.push_back({info.cls, info.modifier});
        return out;
    }
    int64_t found = 0;
    for (const auto& d : dets)
        if (d.cls == info.cls) found++;
    int64_t n = std::min<int64_t>(6, std::max<int64_t>(3, found));
    for (int64_t i = 0; i < n; i++) out.push_back({info.cls, ""});
    return out;
}

inline std::vector<ExpectedInstance> expected_from_annotation(const SceneAnnotation& ann) {
    std::vector<ExpectedInstance> out;
    for (const auto& a : ann.instances)
        out.push_back({a.cls, a.modifier_attr, true, a.x, a.y, a.w, a.h});
    return out;
}

struct DetectionMetrics {
    PRF aggregate;
    std::map<std::string, PRF> per_category;
    PRF multi_noun;  // compound categories only
    double redundant_object_rate = 0.0;
    std::vector<double> redundant_outcomes;  // one 0/1 per compound image
    int64_t compound_images = 0;
};

// Micro-averaged detection metrics plus the redundant-object diagnostic:
// a compound image is "redundant" when it contains at least one standalone
// detection whose associated modifier equals the category's modifier.
inline DetectionMetrics evaluate_detections(const std::vector<EvalCase>& cases,
                                            const Lexicon& lex) {
    DetectionMetrics m;
    for (const auto& c : cases) {
        CategoryInfo info = parse_category(lex, c.category);
        PRF prf = match_detections(c.expected, c.detections);
        m.aggregate += prf;
        m.per_category[info.name] += prf;
        if (info.is_compound) {
            m.multi_noun += prf;
            m.compound_images++;
            bool redundant = false;
            for (const auto& d : c.detections) {
                std::string mod = modifier_for_standalone(lex, d.cls);
                if (!mod.empty() && mod == info.modifier) redundant = true;
            }
            m.redundant_outcomes.push_back(redundant ? 1.0 : 0.0);
        }
    }
    if (!m.redundant_outcomes.empty()) {
        double s = 0;
        for (double v : m.redundant_outcomes) s += v;
        m.redundant_object_rate = s / (double)m.redundant_outcomes.size();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Confusable-pair confusion matrices
// ---------------------------------------------------------------------------
struct PairConfusion {
    std::string a, b;
    double matrix[2][2] = {{0, 0}, {0, 0}};  // row: true category; col: decision
    int64_t support[2] = {0, 0};             // decided images per row
    double mean_diagonal() const {
        double s = 0;
        int n = 0;
        for (int r = 0; r < 2; r++)
            if (support[r] > 0) {
                s += matrix[r][r];
                n++;
            }
        return n ? s / n : 0.0;
    }
};

// Decide which pair member an image's detections support: the highest-score
// detection that maps to either member wins; -1 when neither applies.
// Single-noun members map by class; compound members need class + attribute.
inline int pair_decision(const std::vector<Detection>& dets, const CategoryInfo& a,
                         const CategoryInfo& b) {
    int decision = -1;
    float best = -1.f;
    auto maps_to = [](const Detection& d, const CategoryInfo& info) {
        if (d.cls != info.cls) return false;
        if (info.is_compound) return d.modifier_attr == info.modifier;
        return true;
    };
    for (const auto& d : dets) {
        if (d.score <= best) continue;
        if (maps_to(d, a)) {
            decision = 0;
            best = d.score;
        } else if (maps_to(d, b)) {
            decision = 1;
            best = d.score;
        }
    }
    return decision;
}

// Row-normalized confusion over the designated pair categories; rows without
// any decided image keep zero support.
inline std::vector<PairConfusion> confusion_pairs(
    const std::vector<EvalCase>& cases, const Lexicon& lex,
    const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::vector<PairConfusion> out;
    for (const auto& p : pairs) {
        CategoryInfo a = parse_category(lex, p.first), b = parse_category(lex, p.second);
        PairConfusion pc;
        pc.a = a.name;
        pc.b = b.name;
        int64_t counts[2][2] = {{0, 0}, {0, 0}};
        for (const auto& c : cases) {
            std::string cat = lowercase(c.category);
            int row = cat == a.name ? 0 : (cat == b.name ? 1 : -1);
            if (row < 0) continue;
            int col = pair_decision(c.detections, a, b);
            if (col < 0) continue;
            counts[row][col]++;
            pc.support[row]++;
        }
        for (int r = 0; r < 2; r++)
            if (pc.support[r] > 0)
                for (int col = 0; col < 2; col++)
                    pc.matrix[r][col] = (double)counts[r][col] / (double)pc.support[r];
        out.push_back(pc);
    }
    return out;
}

inline double mean_pair_diagonal(const std::vector<PairConfusion>& pcs) {
    double s = 0;
    int n = 0;
    for (const auto& pc : pcs)
        for (int r = 0; r < 2; r++)
            if (pc.support[r] > 0) {
                s += pc.matrix[r][r];
                n++;
            }
    return n ? s / n : 0.0;
}

// ---------------------------------------------------------------------------
// Percentile bootstrap for a mean
// ---------------------------------------------------------------------------
struct BootstrapCI {
    double mean = 0, lo = 0, hi = 0;
};

inline BootstrapCI bootstrap_mean(const std::vector<double>& xs, int resamples, uint64_t seed) {
    if (xs.empty()) fail("bootstrap", "cannot bootstrap an empty sample");
    BootstrapCI ci;
    for (double v : xs) ci.mean += v;
    ci.mean /= (double)xs.size();
    Rng rng(seed);
    std::vector<double> means((size_t)resamples);
    for (int r = 0; r < resamples; r++) {
        double s = 0;
        for (size_t i = 0; i < xs.size(); i++) s += xs[(size_t)rng.below((int64_t)xs.size())];
        means[(size_t)r] = s / (double)xs.size();
    }
    std::sort(means.begin(), means.end());
    auto pick = [&](double q) {
        double pos = q * (double)(means.size() - 1);
        size_t i = (size_t)pos;
        double fr = pos - (double)i;
        return i + 1 < means.size() ? means[i] * (1 - fr) + means[i + 1] * fr : means[i];
    };
    ci.lo = pick(0.025);
    ci.hi = pick(0.975);
    return ci;
}

}  // namespace cdiff
