#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cdiff/png_io.hpp"
#include "cdiff/tensor.hpp"
#include "cdiff/vocab.hpp"

namespace cdiff {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Lexicon: head shape nouns, attribute modifiers, and the standalone object
// class that visually echoes each modifier.  A compound category is
// "<modifier> <head>"; its image shows one head shape carrying the modifier
// as a texture/color.  A standalone category shows several small free-floating
// objects of the matching look, so that a model trained on pooled features
// is tempted to treat e.g. "dotted" and loose dots as interchangeable.
// ---------------------------------------------------------------------------
struct Lexicon {
    std::vector<std::string> heads{"bar", "disk", "ring", "wedge", "cross", "block"};
    std::vector<std::string> modifiers{"dotted", "striped", "checkered", "red", "blue"};
    std::vector<std::string> standalones{"dot", "stripe", "checker", "redchip", "bluechip"};

    std::vector<std::string> all_words() const {
        std::vector<std::string> w;
        w.insert(w.end(), heads.begin(), heads.end());
        w.insert(w.end(), modifiers.begin(), modifiers.end());
        w.insert(w.end(), standalones.begin(), standalones.end());
        return w;
    }
};

inline void validate_lexicon(const Lexicon& lex) {
    if (lex.modifiers.size() != lex.standalones.size())
        fail("lexicon", "each modifier needs exactly one standalone object class");
    std::set<std::string> seen;
    for (const auto& w : lex.all_words())
        if (!seen.insert(w).second) fail("lexicon", "word '" + w + "' appears in two roles");
}

inline std::string standalone_for_modifier(const Lexicon& lex, const std::string& mod) {
    for (size_t i = 0; i < lex.modifiers.size(); i++)
        if (lex.modifiers[i] == mod) return lex.standalones[i];
    fail("lexicon", "unknown modifier '" + mod + "'");
}

inline std::string modifier_for_standalone(const Lexicon& lex, const std::string& cls) {
    for (size_t i = 0; i < lex.standalones.size(); i++)
        if (lex.standalones[i] == cls) return lex.modifiers[i];
    return "";
}

inline bool is_head_word(const Lexicon& lex, const std::string& w) {
    return std::find(lex.heads.begin(), lex.heads.end(), w) != lex.heads.end();
}
inline bool is_modifier_word(const Lexicon& lex, const std::string& w) {
    return std::find(lex.modifiers.begin(), lex.modifiers.end(), w) != lex.modifiers.end();
}
inline bool is_standalone_word(const Lexicon& lex, const std::string& w) {
    return std::find(lex.standalones.begin(), lex.standalones.end(), w) != lex.standalones.end();
}

// Parsed view of a category name.
struct CategoryInfo {
    std::string name;      // "dotted bar"
    std::string cls;       // object class drawn: head shape or standalone class
    std::string modifier;  // non-empty only for compounds
    bool is_compound = false;
    bool is_standalone = false;
};

inline CategoryInfo parse_category(const Lexicon& lex, const std::string& name) {
    auto words = split_words(lowercase(name));
    CategoryInfo info;
    info.name = lowercase(name);
    if (words.size() == 1) {
        info.cls = words[0];
        if (is_standalone_word(lex, words[0]))
            info.is_standalone = true;
        else if (!is_head_word(lex, words[0]))
            fail("category", "unknown single-noun category '" + name + "'");
        return info;
    }
    if (words.size() == 2 && is_modifier_word(lex, words[0]) && is_head_word(lex, words[1])) {
        info.modifier = words[0];
        info.cls = words[1];
        info.is_compound = true;
        return info;
    }
    fail("category", "cannot parse category '" + name + "'");
}

inline std::string category_slug(const std::string& name) {
    std::string s = lowercase(name);
    for (auto& c : s)
        if (c == ' ') c = '_';
    return s;
}

// ---------------------------------------------------------------------------
// Scene annotations
// ---------------------------------------------------------------------------
struct InstanceAnnotation {
    std::string cls;  // drawn object class
    int x = 0, y = 0, w = 0, h = 0;
    std::string modifier_attr;  // empty when the instance carries no modifier
};

struct SceneAnnotation {
    std::string category;
    std::string image_id;
    std::string split;
    std::vector<InstanceAnnotation> instances;
};

inline json instance_to_json(const InstanceAnnotation& a) {
    json j{{"class", a.cls}, {"bbox", {a.x, a.y, a.w, a.h}}};
    if (!a.modifier_attr.empty()) j["modifier_attr"] = a.modifier_attr;
    return j;
}

inline InstanceAnnotation instance_from_json(const json& j) {
    InstanceAnnotation a;
    a.cls = j.at("class").get<std::string>();
    const auto& b = j.at("bbox");
    a.x = b.at(0).get<int>();
    a.y = b.at(1).get<int>();
    a.w = b.at(2).get<int>();
    a.h = b.at(3).get<int>();
    if (j.contains("modifier_attr")) a.modifier_attr = j["modifier_attr"].get<std::string>();
    return a;
}

inline json scene_to_json(const SceneAnnotation& s) {
    json inst = json::array();
    for (const auto& a : s.instances) inst.push_back(instance_to_json(a));
    return json{{"category", s.category},
                {"image_id", s.image_id},
                {"split", s.split},
                {"instances", inst}};
}

inline SceneAnnotation scene_from_json(const json& j) {
    SceneAnnotation s;
    s.category = j.at("category").get<std::string>();
    s.image_id = j.at("image_id").get<std::string>();
    s.split = j.at("split").get<std::string>();
    for (const auto& a : j.at("instances")) s.instances.push_back(instance_from_json(a));
    return s;
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------
struct RGB {
    unsigned char r, g, b;
};

namespace palette {
inline constexpr RGB background{204, 204, 204};
inline constexpr RGB plain_fill{95, 95, 105};     // untextured head shapes
inline constexpr RGB texture_base{158, 158, 166};  // light base under dark texture ink
inline constexpr RGB texture_ink{42, 42, 50};      // dots / stripes / checker ink
inline constexpr RGB red_fill{190, 45, 45};
inline constexpr RGB blue_fill{45, 70, 195};
}  // namespace palette

namespace detail {

// Painted-pixel mask for one instance; tracks the tight bbox as it grows.
struct PaintMask {
    int size;
    std::vector<unsigned char> on;
    int x0, y0, x1, y1;  // inclusive bounds of painted pixels
    explicit PaintMask(int n) : size(n), on((size_t)n * n, 0), x0(n), y0(n), x1(-1), y1(-1) {}
    void set(int x, int y) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        on[(size_t)y * size + x] = 1;
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }
    bool get(int x, int y) const { return on[(size_t)y * size + x] != 0; }
    bool empty() const { return x1 < 0; }
    int64_t count() const {
        int64_t c = 0;
        for (auto v : on) c += v;
        return c;
    }
};

// Rasterize one head shape centered at (cx,cy) into the mask.
// `a` and `b` are the shape's two size parameters (meaning varies per shape).
inline void raster_shape(PaintMask& m, const std::string& cls, int cx, int cy, int a, int b) {
    if (cls == "bar") {  // a = half width, b = half height
        for (int y = cy - b; y <= cy + b; y++)
            for (int x = cx - a; x <= cx + a; x++) m.set(x, y);
    } else if (cls == "block") {  // a = half side
        for (int y = cy - a; y <= cy + a; y++)
            for (int x = cx - a; x <= cx + a; x++) m.set(x, y);
    } else if (cls == "disk") {  // a = radius
        for (int y = cy - a; y <= cy + a; y++)
            for (int x = cx - a; x <= cx + a; x++)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= a * a) m.set(x, y);
    } else if (cls == "ring") {  // a = outer radius, b = inner radius
        for (int y = cy - a; y <= cy + a; y++)
            for (int x = cx - a; x <= cx + a; x++) {
                int d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if (d2 <= a * a && d2 > b * b) m.set(x, y);
            }
    } else if (cls == "wedge") {  // a = half base width, b = height; apex up
        for (int dy = 0; dy < b; dy++) {
            // row dy counted from the apex; half-width grows linearly
            double half = (double)a * (double)(dy + 1) / (double)b;
            int y = cy - b / 2 + dy;
            for (int x = cx - (int)half; x <= cx + (int)half; x++) m.set(x, y);
        }
    } else if (cls == "cross") {  // a = half arm span, b = half thickness
        for (int y = cy - b; y <= cy + b; y++)
            for (int x = cx - a; x <= cx + a; x++) m.set(x, y);
        for (int y = cy - a; y <= cy + a; y++)
            for (int x = cx - b; x <= cx + b; x++) m.set(x, y);
    } else {
        fail("render", "unknown shape class '" + cls + "'");
    }
}

// Fill the masked pixels with the modifier's appearance.  Texture phase is
// anchored to the mask's own bbox so the pattern travels with the shape.
inline void paint_mask(ImageU8& img, const PaintMask& m, const std::string& modifier) {
    RGB base = palette::plain_fill;
    if (modifier == "red") base = palette::red_fill;
    if (modifier == "blue") base = palette::blue_fill;
    bool textured = (modifier == "dotted" || modifier == "striped" || modifier == "checkered");
    if (textured) base = palette::texture_base;
    for (int y = m.y0; y <= m.y1; y++)
        for (int x = m.x0; x <= m.x1; x++) {
            if (!m.get(x, y)) continue;
            RGB c = base;
            int lx = x - m.x0, ly = y - m.y0;
            if (modifier == "striped") {
                if ((lx / 3) % 2 == 0) c = palette::texture_ink;
            } else if (modifier == "checkered") {
                if ((lx / 3 + ly / 3) % 2 == 0) c = palette::texture_ink;
            } else if (modifier == "dotted") {
                // dark dot of radius ~1.5 on a period-5 grid
                int gx = lx % 5 - 2, gy = ly % 5 - 2;
                if (gx * gx + gy * gy <= 2) c = palette::texture_ink;
            }
            img.at(y, x, 0) = c.r;
            img.at(y, x, 1) = c.g;
            img.at(y, x, 2) = c.b;
        }
}

inline void paint_mask_color(ImageU8& img, const PaintMask& m, RGB c) {
    for (int y = m.y0; y <= m.y1; y++)
        for (int x = m.x0; x <= m.x1; x++)
            if (m.get(x, y)) {
                img.at(y, x, 0) = c.r;
                img.at(y, x, 1) = c.g;
                img.at(y, x, 2) = c.b;
            }
}

// Mask-only rasterization of one standalone object; painting happens later so
// rejected placements never touch the canvas.
inline void raster_standalone_mask(PaintMask& m, const std::string& cls, int cx, int cy,
                                   Rng& rng) {
    if (cls == "dot") {
        int r = 2 + (int)rng.below(2);  // radius 2..3
        for (int y = cy - r; y <= cy + r; y++)
            for (int x = cx - r; x <= cx + r; x++)
                if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.set(x, y);
    } else if (cls == "stripe") {
        int hw = 4 + (int)rng.below(3), hh = 1;  // short thick dark segment
        for (int y = cy - hh; y <= cy + hh; y++)
            for (int x = cx - hw; x <= cx + hw; x++) m.set(x, y);
    } else if (cls == "checker" || cls == "redchip" || cls == "bluechip") {
        int hs = cls == "checker" ? 3 + (int)rng.below(2) : 2 + (int)rng.below(2);
        for (int y = cy - hs; y <= cy + hs; y++)
            for (int x = cx - hs; x <= cx + hs; x++) m.set(x, y);
    } else {
        fail("render", "unknown standalone class '" + cls + "'");
    }
}

// The looks deliberately echo the modifier textures/colors.
inline void paint_standalone(ImageU8& img, const PaintMask& m, const std::string& cls) {
    if (cls == "dot" || cls == "stripe") {
        paint_mask_color(img, m, palette::texture_ink);
    } else if (cls == "checker") {
        for (int y = m.y0; y <= m.y1; y++)
            for (int x = m.x0; x <= m.x1; x++)
                if (m.get(x, y)) {
                    RGB c = (((x - m.x0) / 3 + (y - m.y0) / 3) % 2 == 0) ? palette::texture_ink
                                                                         : palette::texture_base;
                    img.at(y, x, 0) = c.r;
                    img.at(y, x, 1) = c.g;
                    img.at(y, x, 2) = c.b;
                }
    } else {
        paint_mask_color(img, m, cls == "redchip" ? palette::red_fill : palette::blue_fill);
    }
}

inline bool boxes_apart(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1,
                        int gap) {
    return ax1 + gap < bx0 || bx1 + gap < ax0 || ay1 + gap < by0 || by1 + gap < ay0;
}

}  // namespace detail

struct RenderResult {
    ImageU8 image;
    std::vector<InstanceAnnotation> instances;
};

// Deterministic scene renderer: everything is drawn from `rng` alone.
inline RenderResult render_scene(const Lexicon& lex, const std::string& category, int size,
                                 Rng& rng) {
    CategoryInfo info = parse_category(lex, category);
    RenderResult out;
    out.image.width = out.image.height = size;
    out.image.pixels.assign((size_t)size * size * 3, 0);
    // flat background with mild noise
    for (int y = 0; y < size; y++)
        for (int x = 0; x < size; x++) {
            int n = (int)rng.below(17) - 8;
            for (int c = 0; c < 3; c++) {
                int base = c == 0 ? palette::background.r
                                  : (c == 1 ? palette::background.g : palette::background.b);
                int v = std::min(255, std::max(0, base + n));
                out.image.at(y, x, c) = (unsigned char)v;
            }
        }

    auto record = [&](const detail::PaintMask& m, const std::string& cls,
                      const std::string& attr) {
        if (m.empty()) fail("render", "instance of '" + cls + "' painted no pixels");
        InstanceAnnotation a;
        a.cls = cls;
        a.x = m.x0;
        a.y = m.y0;
        a.w = m.x1 - m.x0 + 1;
        a.h = m.y1 - m.y0 + 1;
        a.modifier_attr = attr;
        // self-check: the bbox must hold at least 80% of the painted pixels
        int64_t total = m.count(), inside = 0;
        for (int y = a.y; y < a.y + a.h; y++)
            for (int x = a.x; x < a.x + a.w; x++)
                if (m.get(x, y)) inside++;
        if (total <= 0 || (double)inside < 0.8 * (double)total)
            fail("annotate", "bbox of '" + cls + "' misses painted pixels");
        out.instances.push_back(a);
    };

    if (!info.is_standalone) {
        // one head shape, randomized size and position within margins
        int a = 0, b = 0;
        if (info.cls == "bar") {
            a = 15 + (int)rng.below(8);  // half width 15..22
            b = 4 + (int)rng.below(3);   // half height 4..6
        } else if (info.cls == "block") {
            a = 8 + (int)rng.below(6);  // half side 8..13
        } else if (info.cls == "disk") {
            a = 10 + (int)rng.below(6);  // radius 10..15
        } else if (info.cls == "ring") {
            a = 11 + (int)rng.below(6);                 // outer radius 11..16
            b = std::max(4, (int)(0.55 * (double)a));   // inner radius
        } else if (info.cls == "wedge") {
            a = 11 + (int)rng.below(7);  // half base 11..17
            b = 18 + (int)rng.below(11); // height 18..28
        } else if (info.cls == "cross") {
            a = 11 + (int)rng.below(6);  // half span 11..16
            b = 3 + (int)rng.below(2);   // half thickness 3..4
        }
        int reach = std::max(a, b) + 2;
        int lo = reach, hi = size - reach;
        int cx = lo + (int)rng.below(std::max(1, hi - lo));
        int cy = lo + (int)rng.below(std::max(1, hi - lo));
        detail::PaintMask m(size);
        detail::raster_shape(m, info.cls, cx, cy, a, b);
        detail::paint_mask(out.image, m, info.modifier);
        record(m, info.cls, info.modifier);
    } else {
        // 3..6 small standalone objects, pairwise non-overlapping
        int count = 3 + (int)rng.below(4);
        std::vector<std::array<int, 4>> placed;
        for (int i = 0; i < count; i++) {
            for (int attempt = 0; attempt < 60; attempt++) {
                int margin = 9;
                int cx = margin + (int)rng.below(size - 2 * margin);
                int cy = margin + (int)rng.below(size - 2 * margin);
                detail::PaintMask m(size);
                detail::raster_standalone_mask(m, info.cls, cx, cy, rng);
                bool ok = true;
                for (const auto& p : placed)
                    if (!detail::boxes_apart(m.x0, m.y0, m.x1, m.y1, p[0], p[1], p[2], p[3], 2))
                        ok = false;
                if (!ok) continue;  // nothing painted yet, so rejection is free
                detail::paint_standalone(out.image, m, info.cls);
                placed.push_back({m.x0, m.y0, m.x1, m.y1});
                record(m, info.cls, "");
                break;
            }
        }
        if (out.instances.empty()) fail("render", "could not place any standalone objects");
    }
    return out;
}

// Post-hoc annotation check against the rendered pixels: at least 80% of all
// foreground pixels must be covered by some annotated bbox, and every bbox
// must contain foreground.  (The per-instance 80% containment check runs at
// render time where the exact instance masks are available.)
inline void validate_annotation(const ImageU8& img, const SceneAnnotation& ann) {
    auto is_fg = [&](int x, int y) {
        int dr = (int)img.at(y, x, 0) - palette::background.r;
        int dg = (int)img.at(y, x, 1) - palette::background.g;
        int db = (int)img.at(y, x, 2) - palette::background.b;
        return dr * dr + dg * dg + db * db > 30 * 30;
    };
    auto in_box = [](const InstanceAnnotation& a, int x, int y) {
        return x >= a.x && x < a.x + a.w && y >= a.y && y < a.y + a.h;
    };
    int64_t fg = 0, covered = 0;
    for (int y = 0; y < img.height; y++)
        for (int x = 0; x < img.width; x++) {
            if (!is_fg(x, y)) continue;
            fg++;
            for (const auto& a : ann.instances)
                if (in_box(a, x, y)) {
                    covered++;
                    break;
                }
        }
    if (fg == 0) fail("annotate", "image " + ann.image_id + " has no foreground at all");
    if ((double)covered < 0.8 * (double)fg)
        fail("annotate", "bboxes of " + ann.image_id + " cover under 80% of foreground pixels");
    for (const auto& a : ann.instances) {
        int64_t inside = 0;
        for (int y = a.y; y < a.y + a.h; y++)
            for (int x = a.x; x < a.x + a.w; x++)
                if (is_fg(x, y)) inside++;
        if (inside <= 0)
            fail("annotate",
                 "bbox of '" + a.cls + "' in " + ann.image_id + " contains no foreground");
    }
}

// ---------------------------------------------------------------------------
// Corpus builder
// ---------------------------------------------------------------------------
struct CorpusConfig {
    int image_size = 64;
    int images_per_category = 32;
    double compound_scarcity = 0.15;  // fraction of a compound's train slots kept as compounds
    double test_fraction = 0.10;
    uint64_t seed = 17;
    std::vector<std::string> categories;  // empty -> default_categories(lexicon)
    std::vector<std::pair<std::string, std::string>> confusable_pairs{
        {"ring", "disk"}, {"dotted bar", "checkered bar"}};
};

// Default category list: all heads, all standalones, and a curated compound
// set in which every head and every modifier appears at least twice.
inline std::vector<std::string> default_categories(const Lexicon& lex) {
    std::vector<std::string> cats = lex.heads;
    cats.insert(cats.end(), lex.standalones.begin(), lex.standalones.end());
    const std::vector<std::string> compounds{
        "dotted bar",  "checkered bar",   "dotted ring", "striped disk", "striped wedge",
        "checkered block", "red cross",   "blue cross",  "red block",    "blue wedge"};
    cats.insert(cats.end(), compounds.begin(), compounds.end());
    return cats;
}

inline json corpus_config_to_json(const CorpusConfig& c) {
    json pairs = json::array();
    for (const auto& p : c.confusable_pairs) pairs.push_back({p.first, p.second});
    return json{{"image_size", c.image_size},
                {"images_per_category", c.images_per_category},
                {"compound_scarcity", c.compound_scarcity},
                {"test_fraction", c.test_fraction},
                {"seed", c.seed},
                {"categories", c.categories},
                {"confusable_pairs", pairs}};
}

inline CorpusConfig corpus_config_from_json(const json& j) {
    CorpusConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.images_per_category = j.at("images_per_category").get<int>();
    c.compound_scarcity = j.at("compound_scarcity").get<double>();
    c.test_fraction = j.at("test_fraction").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.categories = j.at("categories").get<std::vector<std::string>>();
    c.confusable_pairs.clear();
    for (const auto& p : j.at("confusable_pairs"))
        c.confusable_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    return c;
}

namespace detail {

inline std::string format_image_id(int64_t n) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06lld", (long long)n);
    return buf;
}

}  // namespace detail

// Builds a corpus directory:
//   {split}/{category_slug}/{image_id}.png
//   annotations.jsonl
//   manifest.json            (written last; its presence marks completion)
// Returns the manifest.
inline json make_corpus(const std::string& root, const Lexicon& lex, CorpusConfig cfg) {
    namespace fs = std::filesystem;
    validate_lexicon(lex);
    if (cfg.categories.empty()) cfg.categories = default_categories(lex);
    if (cfg.images_per_category < 10)
        fail("corpus", "need at least 10 images per category for a 90/10 split");

    // closed vocabulary: every category must tokenize without unknown words
    Vocabulary vocab = Vocabulary::from_lexicon(lex.all_words());
    for (const auto& cat : cfg.categories) {
        CategoryInfo info = parse_category(lex, cat);  // validates word roles
        TokenizedPrompt tp = tokenize(cat, vocab);
        for (int id : tp.ids)
            if (id == kUnkId) fail("corpus", "category '" + info.name + "' leaves the lexicon");
    }
    for (const auto& p : cfg.confusable_pairs) {
        auto in_list = [&](const std::string& c) {
            return std::find(cfg.categories.begin(), cfg.categories.end(), c) !=
                   cfg.categories.end();
        };
        if (!in_list(p.first) || !in_list(p.second))
            fail("corpus", "confusable pair (" + p.first + ", " + p.second +
                               ") refers to a category outside the corpus");
    }

    // single-noun categories that can serve as fillers for withheld compounds
    std::vector<std::string> singles;
    for (const auto& cat : cfg.categories)
        if (!parse_category(lex, cat).is_compound) singles.push_back(cat);
    if (singles.empty()) fail("corpus", "scarcity fillers need at least one single-noun category");

    fs::create_directories(root);
    fs::remove(fs::path(root) / "manifest.json");  // invalidate any previous corpus first

    struct PlannedImage {
        std::string category;  // category actually rendered and annotated
        std::string split;
        int64_t index;  // global image index; drives ids, hashes and rng streams
    };
    std::vector<PlannedImage> plan;
    int64_t next_index = 0;
    std::map<std::string, std::map<std::string, int>> counts;  // category -> split -> n

    for (const auto& cat : cfg.categories) {
        CategoryInfo info = parse_category(lex, cat);
        int n = cfg.images_per_category;
        int n_test = (int)std::llround(cfg.test_fraction * (double)n);
        // rank this category's images by a per-image hash; lowest n_test go to test
        std::vector<int64_t> indices(n);
        for (int i = 0; i < n; i++) indices[i] = next_index + i;
        std::vector<int> order(n);
        for (int i = 0; i < n; i++) order[i] = i;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            uint64_t ha = hash64(cfg.seed ^ 0x51ab57ull, (uint64_t)indices[a]);
            uint64_t hb = hash64(cfg.seed ^ 0x51ab57ull, (uint64_t)indices[b]);
            return ha != hb ? ha < hb : a < b;
        });
        std::vector<char> is_test(n, 0);
        for (int k = 0; k < n_test; k++) is_test[order[k]] = 1;

        // scarcity: keep only a fraction of the compound's train slots; the
        // rest become filler images of single-noun categories
        int n_train = n - n_test;
        int keep = info.is_compound
                       ? std::max(1, (int)std::llround(cfg.compound_scarcity * (double)n_train))
                       : n_train;
        int seen_train = 0;
        for (int i = 0; i < n; i++) {
            PlannedImage p;
            p.index = indices[i];
            p.split = is_test[i] ? "test" : "train";
            p.category = cat;
            if (!is_test[i]) {
                seen_train++;
                if (seen_train > keep && info.is_compound) {
                    uint64_t h = hash64(cfg.seed ^ 0xf111e5ull, (uint64_t)p.index);
                    p.category = singles[(size_t)(h % singles.size())];
                }
            }
            plan.push_back(p);
        }
        next_index += n;
    }

    // render everything in global index order
    std::vector<std::string> annotation_lines;
    uint64_t checksum = 0x811c9dc5ull;
    for (const auto& p : plan) {
        Rng rng = Rng::stream(cfg.seed, 1000003ull + (uint64_t)p.index);
        RenderResult r = render_scene(lex, p.category, cfg.image_size, rng);
        SceneAnnotation ann;
        ann.category = p.category;
        ann.image_id = detail::format_image_id(p.index);
        ann.split = p.split;
        ann.instances = r.instances;
        validate_annotation(r.image, ann);

        fs::path dir = fs::path(root) / p.split / category_slug(p.category);
        fs::create_directories(dir);
        write_png_rgb((dir / (ann.image_id + ".png")).string(), r.image);

        std::string line = scene_to_json(ann).dump();
        annotation_lines.push_back(line);
        checksum = hash64_str(line, checksum);
        for (unsigned char b : r.image.pixels) checksum = hash64(checksum, b);
        counts[p.category][p.split]++;
    }

    {
        std::ofstream out(fs::path(root) / "annotations.jsonl");
        if (!out) fail("io", "cannot write annotations.jsonl under " + root);
        for (const auto& line : annotation_lines) out << line << "\n";
    }

    json manifest;
    manifest["format_version"] = 1;
    manifest["lexicon"] = {
        {"heads", lex.heads}, {"modifiers", lex.modifiers}, {"standalones", lex.standalones}};
    manifest["config"] = corpus_config_to_json(cfg);
    json jc = json::object();
    for (const auto& [cat, per_split] : counts) {
        jc[cat] = {{"train", per_split.count("train") ? per_split.at("train") : 0},
                   {"test", per_split.count("test") ? per_split.at("test") : 0}};
    }
    manifest["counts"] = jc;
    manifest["total_images"] = (int64_t)plan.size();
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx", (unsigned long long)checksum);
    manifest["corpus_checksum"] = std::string(hex);

    // the manifest is the commit marker: written last, atomically via rename
    fs::path tmp = fs::path(root) / "manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) fail("io", "cannot write manifest under " + root);
        out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, fs::path(root) / "manifest.json");
    return manifest;
}

// ---------------------------------------------------------------------------
// Corpus loader
// ---------------------------------------------------------------------------
struct CorpusItem {
    SceneAnnotation ann;
    std::string path;  // PNG path on disk
};

struct LoadedCorpus {
    std::string root;
    json manifest;
    Lexicon lexicon;
    CorpusConfig config;
    std::vector<CorpusItem> items;
    std::vector<int> train_idx, test_idx;

    std::vector<std::string> categories() const { return config.categories; }

    static LoadedCorpus load(const std::string& root) {
        namespace fs = std::filesystem;
        LoadedCorpus c;
        c.root = root;
        fs::path mpath = fs::path(root) / "manifest.json";
        if (!fs::exists(mpath))
            fail("corpus", "no manifest.json under " + root + " (corpus missing or incomplete)");
        std::ifstream min(mpath);
        min >> c.manifest;
        const auto& jl = c.manifest.at("lexicon");
        c.lexicon.heads = jl.at("heads").get<std::vector<std::string>>();
        c.lexicon.modifiers = jl.at("modifiers").get<std::vector<std::string>>();
        c.lexicon.standalones = jl.at("standalones").get<std::vector<std::string>>();
        validate_lexicon(c.lexicon);
        c.config = corpus_config_from_json(c.manifest.at("config"));

        std::ifstream ain(fs::path(root) / "annotations.jsonl");
        if (!ain) fail("corpus", "missing annotations.jsonl under " + root);
        std::string line;
        while (std::getline(ain, line)) {
            if (line.empty()) continue;
            CorpusItem item;
            item.ann = scene_from_json(json::parse(line));
            item.path = (fs::path(root) / item.ann.split / category_slug(item.ann.category) /
                         (item.ann.image_id + ".png"))
                            .string();
            if (!fs::exists(item.path)) fail("corpus", "annotated image missing: " + item.path);
            if (item.ann.split == "train")
                c.train_idx.push_back((int)c.items.size());
            else
                c.test_idx.push_back((int)c.items.size());
            c.items.push_back(std::move(item));
        }
        if (c.items.empty()) fail("corpus", "corpus at " + root + " holds no images");
        return c;
    }
};

}  // namespace cdiff
