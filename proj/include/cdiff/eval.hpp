#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdiff/detector.hpp"
#include "cdiff/frechet.hpp"
#include "cdiff/metrics.hpp"
#include "cdiff/models.hpp"
#include "cdiff/synth.hpp"

namespace cdiff {

struct EvalImage {
    std::string path;
    std::string category;
};

// Accepts either flat sampler output ({slug}_{seed}_{i}.png) or a corpus
// split tree ({slug}/{image_id}.png); category comes from the slug.
inline std::vector<EvalImage> scan_eval_images(const std::string& dir,
                                               const std::vector<std::string>& categories) {
    namespace fs = std::filesystem;
    if (!fs::exists(dir)) fail("eval", "image directory does not exist: " + dir);
    std::map<std::string, std::string> by_slug;
    for (const auto& c : categories) by_slug[category_slug(c)] = lowercase(c);

    auto category_of = [&](const fs::path& p) -> std::string {
        std::string parent = p.parent_path().filename().string();
        if (by_slug.count(parent)) return by_slug[parent];
        // flat naming: {slug}_{seed}_{index}.png -> strip two numeric suffixes
        std::string stem = p.stem().string();
        std::vector<std::string> parts;
        std::stringstream ss(stem);
        std::string part;
        while (std::getline(ss, part, '_')) parts.push_back(part);
        if (parts.size() >= 3) {
            std::string slug = parts[0];
            for (size_t i = 1; i + 2 < parts.size(); i++) slug += "_" + parts[i];
            if (by_slug.count(slug)) return by_slug[slug];
        }
        return "";
    };

    std::vector<EvalImage> out;
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        std::string cat = category_of(p);
        if (!cat.empty()) out.push_back({p.string(), cat});
    }
    if (out.empty()) fail("eval", "no category-attributable PNG images under " + dir);
    return out;
}

struct MetricsReport {
    int64_t images = 0;
    DetectionMetrics detection;
    BootstrapCI redundant_ci;
    double frechet = -1.0;  // negative when not computed
    std::vector<PairConfusion> pairs;
    std::map<std::string, int64_t> images_per_category;
};

// Full evaluation pass: detect on every image, score against the category
// expectations, fit Gaussians on pooled vision features for the Fréchet
// distance, and build the confusable-pair confusion matrices.
inline MetricsReport run_eval(ModelBundle& m, ObjectDetector& det, ParamStoreT<float>& det_store,
                              const std::vector<EvalImage>& generated,
                              const std::vector<EvalImage>& reference,
                              const std::vector<std::pair<std::string, std::string>>& pairs,
                              int bootstrap_resamples, uint64_t seed,
                              std::ostream* log = nullptr) {
    MetricsReport report;
    std::vector<EvalCase> cases;
    std::vector<std::vector<double>> gen_feats, ref_feats;

    auto pooled = [&](const Tensor& img) {
        GraphT<float> g;
        const Tensor& f = g.value(m.vision.pooled_feature(g, m.store, g.leaf(img)));
        return std::vector<double>(f.data.begin(), f.data.end());
    };

    // restrict the reference set to categories the generated set covers
    std::set<std::string> gen_cats;
    for (const auto& im : generated) gen_cats.insert(im.category);

    for (const auto& im : generated) {
        ImageU8 png = read_png_rgb(im.path);
        EvalCase c;
        c.category = im.category;
        c.detections = det.detect(det_store, png);
        c.expected = expected_for_generated(m.lexicon, im.category, c.detections);
        cases.push_back(std::move(c));
        gen_feats.push_back(pooled(to_float_chw(png)));
        report.images_per_category[im.category]++;
        report.images++;
    }
    for (const auto& im : reference) {
        if (!gen_cats.count(im.category)) continue;
        ref_feats.push_back(pooled(to_float_chw(read_png_rgb(im.path))));
    }

    report.detection = evaluate_detections(cases, m.lexicon);
    if (!report.detection.redundant_outcomes.empty())
        report.redundant_ci =
            bootstrap_mean(report.detection.redundant_outcomes, bootstrap_resamples, seed);
    if (gen_feats.size() >= 2 && ref_feats.size() >= 2)
        report.frechet = frechet_distance(gen_feats, ref_feats);
    else if (log)
        (*log) << "note: too few images for a Fréchet distance (" << gen_feats.size() << " vs "
               << ref_feats.size() << " reference)\n";
    report.pairs = confusion_pairs(cases, m.lexicon, pairs);
    return report;
}

inline nlohmann::json prf_to_json(const PRF& p) {
    return {{"tp", p.tp},          {"fp", p.fp},       {"fn", p.fn},
            {"precision", p.precision()}, {"recall", p.recall()}, {"f1", p.f1()}};
}

inline nlohmann::json metrics_report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["images"] = r.images;
    j["aggregate"] = prf_to_json(r.detection.aggregate);
    j["multi_noun_only"] = prf_to_json(r.detection.multi_noun);
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [cat, prf] : r.detection.per_category) per[cat] = prf_to_json(prf);
    j["per_category"] = per;
    j["redundant_object_rate"] = {{"rate", r.detection.redundant_object_rate},
                                  {"ci_lo", r.redundant_ci.lo},
                                  {"ci_hi", r.redundant_ci.hi},
                                  {"compound_images", r.detection.compound_images}};
    if (r.frechet >= 0) j["frechet"] = r.frechet;
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& pc : r.pairs)
        pairs.push_back({{"a", pc.a},
                         {"b", pc.b},
                         {"matrix", {{pc.matrix[0][0], pc.matrix[0][1]},
                                     {pc.matrix[1][0], pc.matrix[1][1]}}},
                         {"support", {pc.support[0], pc.support[1]}},
                         {"mean_diagonal", pc.mean_diagonal()}});
    j["confusable_pairs"] = pairs;
    return j;
}

// CSV: one row per category plus aggregate and multi-noun rows.
inline void write_metrics_csv(const std::string& path, const MetricsReport& r) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write metrics CSV " + path);
    out << "category,images,tp,fp,fn,precision,recall,f1\n";
    auto row = [&](const std::string& name, int64_t images, const PRF& p) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%lld,%lld,%.6f,%.6f,%.6f", name.c_str(),
                      (long long)images, (long long)p.tp, (long long)p.fp, (long long)p.fn,
                      p.precision(), p.recall(), p.f1());
        out << buf << "\n";
    };
    for (const auto& [cat, prf] : r.detection.per_category) {
        auto it = r.images_per_category.find(cat);
        row(cat, it != r.images_per_category.end() ? it->second : 0, prf);
    }
    row("__multi_noun__", r.detection.compound_images, r.detection.multi_noun);
    row("__aggregate__", r.images, r.detection.aggregate);
}

inline std::string metrics_report_text(const MetricsReport& r) {
    std::ostringstream os;
    char buf[256];
    auto line = [&](const char* name, const PRF& p) {
        std::snprintf(buf, sizeof buf, "%-18s P %.4f  R %.4f  F1 %.4f  (tp %lld fp %lld fn %lld)",
                      name, p.precision(), p.recall(), p.f1(), (long long)p.tp, (long long)p.fp,
                      (long long)p.fn);
        os << buf << "\n";
    };
    os << "images evaluated: " << r.images << "\n";
    line("aggregate", r.detection.aggregate);
    line("multi-noun only", r.detection.multi_noun);
    std::snprintf(buf, sizeof buf,
                  "redundant object rate %.4f  [%.4f, %.4f] over %lld compound images",
                  r.detection.redundant_object_rate, r.redundant_ci.lo, r.redundant_ci.hi,
                  (long long)r.detection.compound_images);
    os << buf << "\n";
    if (r.frechet >= 0) {
        std::snprintf(buf, sizeof buf, "frechet distance %.6f", r.frechet);
        os << buf << "\n";
    }
    for (const auto& pc : r.pairs) {
        std::snprintf(buf, sizeof buf,
                      "pair [%s | %s]  [[%.3f %.3f][%.3f %.3f]]  support %lld/%lld  diag %.4f",
                      pc.a.c_str(), pc.b.c_str(), pc.matrix[0][0], pc.matrix[0][1],
                      pc.matrix[1][0], pc.matrix[1][1], (long long)pc.support[0],
                      (long long)pc.support[1], pc.mean_diagonal());
        os << buf << "\n";
    }
    return os.str();
}

}  // namespace cdiff
