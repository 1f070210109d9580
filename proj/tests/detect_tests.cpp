#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "cdiff/detector.hpp"
#include "cdiff/metrics.hpp"
#include "cdiff/synth.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cdiff_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Detection det(const std::string& cls, int x, int y, int w, int h, float score,
              const std::string& attr = "") {
    Detection d;
    d.cls = cls;
    d.x = x;
    d.y = y;
    d.w = w;
    d.h = h;
    d.score = score;
    d.modifier_attr = attr;
    return d;
}

ExpectedInstance exp_box(const std::string& cls, int x, int y, int w, int h) {
    ExpectedInstance e;
    e.cls = cls;
    e.has_bbox = true;
    e.x = x;
    e.y = y;
    e.w = w;
    e.h = h;
    return e;
}

// Independent re-derivation of the greedy matcher, structured differently:
// explicit index permutation by descending score (stable), per-detection scan
// recording candidate (iou, index) pairs, then selection.
PRF reference_match(const std::vector<ExpectedInstance>& expected,
                    const std::vector<Detection>& detections) {
    std::vector<size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (detections[a].score != detections[b].score)
            return detections[a].score > detections[b].score;
        return a < b;  // stable on ties
    });
    std::vector<bool> taken(expected.size(), false);
    PRF out;
    for (size_t oi : order) {
        const Detection& d = detections[oi];
        int choice = -1;
        double choice_iou = -1.0;
        for (size_t e = 0; e < expected.size(); e++) {
            if (taken[e]) continue;
            if (expected[e].cls != d.cls) continue;
            if (!expected[e].has_bbox) {
                if (choice < 0) choice = (int)e;
                continue;
            }
            double v =
                iou(expected[e].x, expected[e].y, expected[e].w, expected[e].h, d.x, d.y, d.w, d.h);
            if (v >= 0.5 && v > choice_iou) {
                choice = (int)e;
                choice_iou = v;
            }
        }
        if (choice >= 0) {
            taken[(size_t)choice] = true;
            out.tp++;
        } else {
            out.fp++;
        }
    }
    for (bool t : taken)
        if (!t) out.fn++;
    return out;
}

}  // namespace

TEST_CASE("iou hand values") {
    REQUIRE(iou(0, 0, 10, 10, 0, 0, 10, 10) == Catch::Approx(1.0));
    REQUIRE(iou(0, 0, 10, 10, 5, 0, 10, 10) == Catch::Approx(50.0 / 150.0));
    REQUIRE(iou(0, 0, 10, 10, 20, 20, 5, 5) == 0.0);
    REQUIRE(iou(0, 0, 10, 10, 10, 0, 10, 10) == 0.0);  // edge contact only
    REQUIRE(iou(2, 3, 4, 4, 4, 5, 4, 4) == Catch::Approx(4.0 / 28.0));
}

TEST_CASE("greedy matching hand cases") {
    SECTION("higher score claims the overlapping box, the other is fp") {
        std::vector<ExpectedInstance> expected{exp_box("bar", 10, 10, 12, 12)};
        std::vector<Detection> dets{det("bar", 11, 10, 12, 12, 0.4f),
                                    det("bar", 10, 11, 12, 12, 0.9f)};
        PRF prf = match_detections(expected, dets);
        REQUIRE(prf.tp == 1);
        REQUIRE(prf.fp == 1);
        REQUIRE(prf.fn == 0);
    }
    SECTION("class mismatch never matches") {
        std::vector<ExpectedInstance> expected{exp_box("bar", 10, 10, 12, 12)};
        std::vector<Detection> dets{det("disk", 10, 10, 12, 12, 0.9f)};
        PRF prf = match_detections(expected, dets);
        REQUIRE(prf.tp == 0);
        REQUIRE(prf.fp == 1);
        REQUIRE(prf.fn == 1);
    }
    SECTION("iou below 0.5 is a miss") {
        std::vector<ExpectedInstance> expected{exp_box("bar", 0, 0, 10, 10)};
        std::vector<Detection> dets{det("bar", 6, 0, 10, 10, 0.9f)};  // iou 4/16... below half
        PRF prf = match_detections(expected, dets);
        REQUIRE(prf.tp == 0);
        REQUIRE(prf.fp == 1);
        REQUIRE(prf.fn == 1);
    }
    SECTION("class-only expectation matches regardless of location") {
        std::vector<ExpectedInstance> expected{{"bar", "", false, 0, 0, 0, 0}};
        std::vector<Detection> dets{det("bar", 50, 50, 8, 8, 0.3f)};
        PRF prf = match_detections(expected, dets);
        REQUIRE(prf.tp == 1);
        REQUIRE(prf.fp == 0);
        REQUIRE(prf.fn == 0);
    }
    SECTION("each expectation is claimed at most once") {
        std::vector<ExpectedInstance> expected{{"dot", "", false, 0, 0, 0, 0}};
        std::vector<Detection> dets{det("dot", 0, 0, 4, 4, 0.9f), det("dot", 8, 8, 4, 4, 0.8f)};
        PRF prf = match_detections(expected, dets);
        REQUIRE(prf.tp == 1);
        REQUIRE(prf.fp == 1);
    }
}

TEST_CASE("greedy matching agrees with an independent reimplementation") {
    Rng rng(1234);
    std::vector<std::string> vocab{"bar", "disk", "dot"};
    for (int trial = 0; trial < 400; trial++) {
        std::vector<ExpectedInstance> expected;
        int ne = (int)rng.below(6);
        for (int i = 0; i < ne; i++) {
            ExpectedInstance e;
            e.cls = vocab[rng.below(vocab.size())];
            e.has_bbox = rng.below(4) != 0;
            if (e.has_bbox) {
                e.x = (int)rng.below(20);
                e.y = (int)rng.below(20);
                e.w = 4 + (int)rng.below(10);
                e.h = 4 + (int)rng.below(10);
            }
            expected.push_back(e);
        }
        std::vector<Detection> dets;
        int nd = (int)rng.below(7);
        for (int i = 0; i < nd; i++) {
            Detection d = det(vocab[rng.below(vocab.size())], (int)rng.below(20),
                              (int)rng.below(20), 4 + (int)rng.below(10), 4 + (int)rng.below(10),
                              (float)rng.below(5) * 0.25f);  // coarse scores force ties
            dets.push_back(d);
        }
        PRF a = match_detections(expected, dets);
        PRF b = reference_match(expected, dets);
        INFO("trial " << trial);
        REQUIRE(a.tp == b.tp);
        REQUIRE(a.fp == b.fp);
        REQUIRE(a.fn == b.fn);
        REQUIRE(a.tp + a.fp == (int64_t)dets.size());
        REQUIRE(a.tp + a.fn == (int64_t)expected.size());
        REQUIRE(a.tp <= (int64_t)std::min(dets.size(), expected.size()));
    }
}

TEST_CASE("precision, recall and f1 conventions") {
    PRF empty;
    REQUIRE(empty.precision() == 0.0);
    REQUIRE(empty.recall() == 0.0);
    REQUIRE(empty.f1() == 0.0);
    PRF perfect{3, 0, 0};
    REQUIRE(perfect.precision() == 1.0);
    REQUIRE(perfect.recall() == 1.0);
    REQUIRE(perfect.f1() == 1.0);
    PRF mixed{2, 1, 2};
    REQUIRE(mixed.precision() == Catch::Approx(2.0 / 3.0));
    REQUIRE(mixed.recall() == Catch::Approx(0.5));
    double p = 2.0 / 3.0, r = 0.5;
    REQUIRE(mixed.f1() == Catch::Approx(2 * p * r / (p + r)));
}

TEST_CASE("expected instances for generated images") {
    Lexicon lex;
    SECTION("head and compound categories expect one instance") {
        auto e1 = expected_for_generated(lex, "disk", {});
        REQUIRE(e1.size() == 1);
        REQUIRE(e1[0].cls == "disk");
        REQUIRE(e1[0].modifier_attr.empty());
        REQUIRE_FALSE(e1[0].has_bbox);
        auto e2 = expected_for_generated(lex, "dotted bar", {});
        REQUIRE(e2.size() == 1);
        REQUIRE(e2[0].cls == "bar");
        REQUIRE(e2[0].modifier_attr == "dotted");
    }
    SECTION("standalone categories adapt to detections within the generative range") {
        REQUIRE(expected_for_generated(lex, "dot", {}).size() == 3);
        std::vector<Detection> five(5, det("dot", 0, 0, 4, 4, 0.5f));
        REQUIRE(expected_for_generated(lex, "dot", five).size() == 5);
        std::vector<Detection> many(9, det("dot", 0, 0, 4, 4, 0.5f));
        REQUIRE(expected_for_generated(lex, "dot", many).size() == 6);
        // detections of other classes do not count toward the range
        std::vector<Detection> off(9, det("bar", 0, 0, 4, 4, 0.5f));
        REQUIRE(expected_for_generated(lex, "dot", off).size() == 3);
    }
}

TEST_CASE("detection metrics aggregate slices and the redundant-object rate") {
    Lexicon lex;
    std::vector<EvalCase> cases;
    // compound image: correct head plus a leaked standalone matching the modifier
    cases.push_back({"dotted bar",
                     expected_for_generated(lex, "dotted bar", {}),
                     {det("bar", 5, 5, 20, 20, 0.9f, "dotted"), det("dot", 40, 40, 5, 5, 0.7f)}});
    // compound image: clean
    cases.push_back({"checkered bar",
                     expected_for_generated(lex, "checkered bar", {}),
                     {det("bar", 5, 5, 20, 20, 0.8f, "checkered")}});
    // compound image: standalone leaked but of a different modifier family
    cases.push_back({"dotted ring",
                     expected_for_generated(lex, "dotted ring", {}),
                     {det("ring", 5, 5, 20, 20, 0.8f, "dotted"), det("stripe", 40, 5, 9, 3, 0.6f)}});
    // single-noun image, missed entirely
    cases.push_back({"disk", expected_for_generated(lex, "disk", {}), {}});

    DetectionMetrics m = evaluate_detections(cases, lex);
    REQUIRE(m.compound_images == 3);
    REQUIRE(m.redundant_outcomes.size() == 3);
    REQUIRE(m.redundant_object_rate == Catch::Approx(1.0 / 3.0));
    // aggregate: tp 3 (three heads), fp 2 (leaked standalones), fn 1 (missed disk)
    REQUIRE(m.aggregate.tp == 3);
    REQUIRE(m.aggregate.fp == 2);
    REQUIRE(m.aggregate.fn == 1);
    // multi-noun slice excludes the plain disk image
    REQUIRE(m.multi_noun.tp == 3);
    REQUIRE(m.multi_noun.fn == 0);
    REQUIRE(m.per_category.at("disk").fn == 1);
    REQUIRE(m.per_category.at("dotted bar").tp == 1);
}

TEST_CASE("pair decisions and confusion matrices") {
    Lexicon lex;
    CategoryInfo ring = parse_category(lex, "ring");
    CategoryInfo disk = parse_category(lex, "disk");
    SECTION("single-noun pair decided by class of the strongest mapped detection") {
        REQUIRE(pair_decision({det("ring", 0, 0, 9, 9, 0.9f)}, ring, disk) == 0);
        REQUIRE(pair_decision({det("ring", 0, 0, 9, 9, 0.2f), det("disk", 0, 0, 9, 9, 0.8f)}, ring,
                              disk) == 1);
        REQUIRE(pair_decision({det("bar", 0, 0, 9, 9, 0.9f)}, ring, disk) == -1);
        REQUIRE(pair_decision({}, ring, disk) == -1);
    }
    SECTION("compound pair members require the matching attribute") {
        CategoryInfo db = parse_category(lex, "dotted bar");
        CategoryInfo cb = parse_category(lex, "checkered bar");
        REQUIRE(pair_decision({det("bar", 0, 0, 9, 9, 0.9f, "dotted")}, db, cb) == 0);
        REQUIRE(pair_decision({det("bar", 0, 0, 9, 9, 0.9f, "checkered")}, db, cb) == 1);
        REQUIRE(pair_decision({det("bar", 0, 0, 9, 9, 0.9f, "")}, db, cb) == -1);
        REQUIRE(pair_decision({det("bar", 0, 0, 9, 9, 0.9f, "red")}, db, cb) == -1);
    }
    SECTION("confusion rows normalize over decided images only") {
        std::vector<EvalCase> cases;
        auto mk = [&](const std::string& cat, std::vector<Detection> d) {
            cases.push_back({cat, {}, std::move(d)});
        };
        mk("ring", {det("ring", 0, 0, 9, 9, 0.9f)});
        mk("ring", {det("ring", 0, 0, 9, 9, 0.9f)});
        mk("ring", {det("disk", 0, 0, 9, 9, 0.9f)});
        mk("ring", {det("bar", 0, 0, 9, 9, 0.9f)});  // undecided
        mk("disk", {det("disk", 0, 0, 9, 9, 0.9f)});
        mk("bar", {det("bar", 0, 0, 9, 9, 0.9f)});  // not a pair member
        auto pcs = confusion_pairs(cases, lex, {{"ring", "disk"}});
        REQUIRE(pcs.size() == 1);
        REQUIRE(pcs[0].support[0] == 3);
        REQUIRE(pcs[0].support[1] == 1);
        REQUIRE(pcs[0].matrix[0][0] == Catch::Approx(2.0 / 3.0));
        REQUIRE(pcs[0].matrix[0][1] == Catch::Approx(1.0 / 3.0));
        REQUIRE(pcs[0].matrix[1][1] == Catch::Approx(1.0));
        REQUIRE(pcs[0].mean_diagonal() == Catch::Approx((2.0 / 3.0 + 1.0) / 2));
        REQUIRE(mean_pair_diagonal(pcs) == Catch::Approx((2.0 / 3.0 + 1.0) / 2));
    }
    SECTION("rows with no decided image contribute zero support") {
        std::vector<EvalCase> cases{{"ring", {}, {det("ring", 0, 0, 9, 9, 0.9f)}}};
        auto pcs = confusion_pairs(cases, lex, {{"ring", "disk"}});
        REQUIRE(pcs[0].support[1] == 0);
        REQUIRE(pcs[0].mean_diagonal() == Catch::Approx(1.0));  // averaged over decided rows
    }
}

TEST_CASE("bootstrap confidence intervals") {
    SECTION("degenerate sample collapses to a point") {
        std::vector<double> xs(40, 0.25);
        BootstrapCI ci = bootstrap_mean(xs, 500, 11);
        REQUIRE(ci.mean == Catch::Approx(0.25));
        REQUIRE(ci.lo == Catch::Approx(0.25));
        REQUIRE(ci.hi == Catch::Approx(0.25));
    }
    SECTION("bernoulli interval brackets the sample mean") {
        std::vector<double> xs(200, 0.0);
        for (int i = 0; i < 60; i++) xs[(size_t)i] = 1.0;
        BootstrapCI ci = bootstrap_mean(xs, 2000, 12);
        REQUIRE(ci.mean == Catch::Approx(0.3));
        REQUIRE(ci.lo < 0.3);
        REQUIRE(ci.hi > 0.3);
        REQUIRE(ci.lo > 0.2);
        REQUIRE(ci.hi < 0.4);
        BootstrapCI again = bootstrap_mean(xs, 2000, 12);
        REQUIRE(ci.lo == again.lo);
        REQUIRE(ci.hi == again.hi);
    }
    SECTION("empty sample is rejected") { REQUIRE_THROWS(bootstrap_mean({}, 100, 1)); }
}

TEST_CASE("detector trains on corpus crops and finds shapes") {
    Lexicon lex;
    CorpusConfig cfg;
    cfg.images_per_category = 12;
    cfg.seed = 41;
    cfg.categories = {"bar", "disk", "ring", "dot", "checker", "dotted bar", "checkered bar"};
    cfg.confusable_pairs = {{"ring", "disk"}, {"dotted bar", "checkered bar"}};
    fs::path root = fresh_dir("detcorpus");
    make_corpus(root.string(), lex, cfg);
    LoadedCorpus corpus = LoadedCorpus::load(root.string());

    ParamStoreT<float> store;
    ObjectDetector detr;
    Rng rng(23);
    detr.init(store, lex, rng);

    SECTION("untrained detector refuses to run") {
        Rng r2 = Rng::stream(7, 0);
        RenderResult r = render_scene(lex, "disk", 64, r2);
        REQUIRE_THROWS(detr.detect(store, r.image));
    }

    std::ostringstream log;
    auto stats = detr.train(store, corpus, &log);
    INFO(log.str());
    REQUIRE(stats.steps > 0);
    REQUIRE(stats.holdout_class_accuracy >= 0.9);

    SECTION("flat background yields no detections") {
        ImageU8 blank;
        blank.width = 64;
        blank.height = 64;
        blank.pixels.assign((size_t)64 * 64 * 3, 204);
        REQUIRE(detr.detect(store, blank).empty());
    }

    SECTION("single-object scene localizes and classifies the head") {
        int hits = 0, total = 0;
        for (uint64_t s = 0; s < 6; s++) {
            Rng r2 = Rng::stream(900 + s, 0);
            RenderResult r = render_scene(lex, "dotted bar", 64, r2);
            auto dets = detr.detect(store, r.image);
            REQUIRE(dets.size() == 1);
            total++;
            const auto& gt = r.instances[0];
            bool located = iou(gt.x, gt.y, gt.w, gt.h, dets[0].x, dets[0].y, dets[0].w,
                               dets[0].h) >= 0.5;
            if (dets[0].cls == "bar" && located) hits++;
        }
        REQUIRE(hits >= 5);  // allow one classifier slip across seeds
    }

    SECTION("standalone scene produces one detection per object") {
        Rng r2 = Rng::stream(901, 0);
        RenderResult r = render_scene(lex, "dot", 64, r2);
        auto dets = detr.detect(store, r.image);
        REQUIRE(dets.size() == r.instances.size());
        int correct = 0;
        for (const auto& d : dets)
            if (d.cls == "dot") correct++;
        REQUIRE(correct >= (int)dets.size() - 1);
    }

    SECTION("attribute head is only reported for head classes") {
        Rng r2 = Rng::stream(902, 0);
        RenderResult r = render_scene(lex, "checker", 64, r2);
        for (const auto& d : detr.detect(store, r.image))
            if (!is_head_word(lex, d.cls)) REQUIRE(d.modifier_attr.empty());
    }
}
