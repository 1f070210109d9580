#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdiff/eval.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cdiff_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void drop_png(const fs::path& p) {
    fs::create_directories(p.parent_path());
    ImageU8 img;
    img.width = img.height = 4;
    img.pixels.assign(4 * 4 * 3, 100);
    write_png_rgb(p.string(), img);
}

MetricsReport sample_report() {
    Lexicon lex;
    std::vector<EvalCase> cases;
    cases.push_back({"dotted bar",
                     expected_for_generated(lex, "dotted bar", {}),
                     {{"bar", 5, 5, 20, 10, 0.9f, "dotted"}, {"dot", 40, 40, 5, 5, 0.6f}}});
    cases.push_back({"disk", expected_for_generated(lex, "disk", {}), {{"disk", 1, 1, 9, 9, 0.8f, ""}}});
    MetricsReport r;
    r.images = (int64_t)cases.size();
    r.images_per_category["dotted bar"] = 1;
    r.images_per_category["disk"] = 1;
    r.detection = evaluate_detections(cases, lex);
    r.redundant_ci = bootstrap_mean(r.detection.redundant_outcomes, 200, 9);
    r.pairs = confusion_pairs(cases, lex, {{"ring", "disk"}});
    return r;
}

}  // namespace

TEST_CASE("eval image scanning handles both layouts") {
    fs::path dir = fresh_dir("scan");
    std::vector<std::string> cats{"dotted bar", "disk", "dot"};

    SECTION("corpus-style split tree") {
        drop_png(dir / "dotted_bar" / "000001.png");
        drop_png(dir / "disk" / "000002.png");
        drop_png(dir / "unrelated" / "000003.png");  // not a known category
        auto images = scan_eval_images(dir.string(), cats);
        REQUIRE(images.size() == 2);
        REQUIRE(images[0].category == "disk");
        REQUIRE(images[1].category == "dotted bar");
    }
    SECTION("flat sampler naming with seed and index suffixes") {
        drop_png(dir / "dotted_bar_7_0.png");
        drop_png(dir / "dotted_bar_7_1.png");
        drop_png(dir / "dot_12_0.png");
        drop_png(dir / "mystery_1_0.png");
        auto images = scan_eval_images(dir.string(), cats);
        REQUIRE(images.size() == 3);
        REQUIRE(images[0].category == "dot");
        REQUIRE(images[1].category == "dotted bar");
        REQUIRE(images[2].category == "dotted bar");
    }
    SECTION("directories with no attributable image fail loudly") {
        drop_png(dir / "mystery_1_0.png");
        REQUIRE_THROWS(scan_eval_images(dir.string(), cats));
        REQUIRE_THROWS(scan_eval_images((dir / "absent").string(), cats));
    }
}

TEST_CASE("metrics reports serialize consistently") {
    MetricsReport r = sample_report();

    SECTION("json carries every block") {
        nlohmann::json j = metrics_report_to_json(r);
        REQUIRE(j.at("images") == 2);
        REQUIRE(j.at("aggregate").at("tp") == 2);
        REQUIRE(j.at("aggregate").at("fp") == 1);
        REQUIRE(j.at("aggregate").at("fn") == 0);
        REQUIRE(j.at("multi_noun_only").at("tp") == 1);
        REQUIRE(j.at("per_category").contains("disk"));
        REQUIRE(j.at("redundant_object_rate").at("rate") == 1.0);
        REQUIRE(j.at("redundant_object_rate").at("compound_images") == 1);
        REQUIRE_FALSE(j.contains("frechet"));  // not computed here
        REQUIRE(j.at("confusable_pairs").size() == 1);
        REQUIRE(j.at("confusable_pairs")[0].at("support")[0] == 0);
        REQUIRE(j.at("confusable_pairs")[0].at("support")[1] == 1);
    }
    SECTION("csv has category, slice and aggregate rows") {
        fs::path dir = fresh_dir("csv");
        write_metrics_csv((dir / "m.csv").string(), r);
        std::ifstream in(dir / "m.csv");
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(in, line)) lines.push_back(line);
        REQUIRE(lines.size() == 5);  // header + 2 categories + 2 summary rows
        REQUIRE(lines[0] == "category,images,tp,fp,fn,precision,recall,f1");
        REQUIRE(lines[3].rfind("__multi_noun__,1,1,1,0", 0) == 0);
        REQUIRE(lines[4].rfind("__aggregate__,2,2,1,0", 0) == 0);
    }
    SECTION("text report mentions every section") {
        std::string text = metrics_report_text(r);
        REQUIRE(text.find("aggregate") != std::string::npos);
        REQUIRE(text.find("multi-noun only") != std::string::npos);
        REQUIRE(text.find("redundant object rate 1.0000") != std::string::npos);
        REQUIRE(text.find("pair [ring | disk]") != std::string::npos);
        REQUIRE(text.find("frechet") == std::string::npos);
    }
}
