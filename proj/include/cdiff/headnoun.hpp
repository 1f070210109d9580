#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <httplib.h>
// httplib drags in <resolv.h>, whose `_res` macro would mangle any header
// included afterwards (Eigen uses `_res` as a parameter name)
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "cdiff/synth.hpp"
#include "cdiff/tensor.hpp"
#include "cdiff/vocab.hpp"

namespace cdiff {

struct HeadNounResult {
    std::string category;
    std::string head;
    std::string source;  // "rule", "external", "rule-fallback", optionally "(cached)" suffixed
};

// Rule-based resolution: the head noun of a category name is its final word.
inline std::string resolve_head_rule(const std::string& category) {
    auto words = split_words(lowercase(category));
    if (words.empty()) fail("headnoun", "empty category name");
    return words.back();
}

// Negative prompt used to suppress standalone renditions of the modifiers:
// every category word except the head, wrapped in the photo template.
// Empty when the category has no modifier words.
inline std::optional<std::string> build_negative_prompt(const std::string& category,
                                                        const std::string& head) {
    std::string mods;
    for (const auto& w : split_words(lowercase(category)))
        if (w != head) {
            if (!mods.empty()) mods += ' ';
            mods += w;
        }
    if (mods.empty()) return std::nullopt;
    return std::string(kPromptTemplatePrefix) + " " + mods;
}

struct ExternalResolverConfig {
    std::string endpoint;  // e.g. http://127.0.0.1:8080/v1/complete
    std::string bearer_token_env = "HEADNOUN_API_TOKEN";
    int timeout_seconds = 10;
    int retries = 2;
};

namespace detail {

struct ParsedUrl {
    std::string host_port;  // scheme://host:port for httplib::Client
    std::string path;
};

inline ParsedUrl parse_endpoint(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) fail("headnoun", "endpoint needs a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl p;
    if (path_start == std::string::npos) {
        p.host_port = url;
        p.path = "/";
    } else {
        p.host_port = url.substr(0, path_start);
        p.path = url.substr(path_start);
    }
    return p;
}

// Accepts either a plain-text body or a chat-completion shaped JSON.
inline std::string extract_response_text(const std::string& body) {
    auto parsed = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (!parsed.is_discarded()) {
        if (parsed.contains("choices") && parsed["choices"].is_array() &&
            !parsed["choices"].empty()) {
            const auto& c0 = parsed["choices"][0];
            if (c0.contains("message") && c0["message"].contains("content"))
                return c0["message"]["content"].get<std::string>();
        }
        if (parsed.is_string()) return parsed.get<std::string>();
    }
    return body;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

// Head-noun resolver with an optional external text-model endpoint and a
// persistent on-disk cache (one JSON record per line). External answers must
// name one of the category's own words; anything else falls back to the rule.
// Network or endpoint failures never propagate: the rule always answers.
class HeadNounResolver {
  public:
    bool use_external = false;
    ExternalResolverConfig external;
    std::string cache_path;  // empty -> no persistence

    explicit HeadNounResolver(std::string cache_file = "") : cache_path(std::move(cache_file)) {
        if (!cache_path.empty()) load_cache();
    }

    HeadNounResult resolve(const std::string& category, std::ostream* log = nullptr) {
        std::string key = lowercase(category);
        auto it = cache_.find(key);
        if (it != cache_.end()) {
            HeadNounResult r = it->second;
            r.source += " (cached)";
            return r;
        }
        HeadNounResult r;
        r.category = key;
        if (use_external) {
            auto ext = resolve_external(key, log);
            if (ext) {
                r.head = *ext;
                r.source = "external";
            } else {
                r.head = resolve_head_rule(key);
                r.source = "rule-fallback";
            }
        } else {
            r.head = resolve_head_rule(key);
            r.source = "rule";
        }
        cache_[key] = r;
        append_cache(r);
        return r;
    }

    // Exposed for tests: a single external query without cache or fallback.
    std::optional<std::string> resolve_external(const std::string& category, std::ostream* log) {
        if (external.endpoint.empty()) {
            if (log) (*log) << "warning: external resolver enabled without an endpoint\n";
            return std::nullopt;
        }
        detail::ParsedUrl url = detail::parse_endpoint(external.endpoint);
        httplib::Client cli(url.host_port);
        cli.set_connection_timeout(external.timeout_seconds, 0);
        cli.set_read_timeout(external.timeout_seconds, 0);
        httplib::Headers headers;
        if (const char* tok = std::getenv(external.bearer_token_env.c_str()); tok && *tok)
            headers.emplace("Authorization", std::string("Bearer ") + tok);
        nlohmann::json req{{"prompt", "Reply with the single head noun of this object category: " +
                                          category}};
        std::string body = req.dump();

        for (int attempt = 0; attempt <= external.retries; attempt++) {
            auto res = cli.Post(url.path, headers, body, "application/json");
            if (!res || res->status != 200) {
                if (log)
                    (*log) << "warning: head-noun endpoint attempt " << attempt + 1 << " failed ("
                           << (res ? std::to_string(res->status) : "no response") << ")\n";
                continue;
            }
            std::string answer = lowercase(detail::trim(detail::extract_response_text(res->body)));
            auto answer_words = split_words(answer);
            if (answer_words.size() == 1) answer = answer_words[0];
            // validity: the head must be one of the category's own words
            for (const auto& w : split_words(category))
                if (w == answer) return answer;
            if (log)
                (*log) << "warning: endpoint answered '" << answer << "' which is not a word of '"
                       << category << "'; falling back to the rule\n";
            return std::nullopt;
        }
        if (log) (*log) << "warning: head-noun endpoint unreachable; falling back to the rule\n";
        return std::nullopt;
    }

    const std::map<std::string, HeadNounResult>& cache() const { return cache_; }

  private:
    std::map<std::string, HeadNounResult> cache_;

    void load_cache() {
        std::ifstream in(cache_path);
        if (!in) return;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) fail("headnoun", "corrupt cache line in " + cache_path);
            HeadNounResult r;
            r.category = j.at("category").get<std::string>();
            r.head = j.at("head").get<std::string>();
            r.source = j.at("source").get<std::string>();
            cache_[r.category] = r;
        }
    }

    void append_cache(const HeadNounResult& r) {
        if (cache_path.empty()) return;
        std::ofstream out(cache_path, std::ios::app);
        if (!out) fail("io", "cannot append to head-noun cache " + cache_path);
        out << nlohmann::json{{"category", r.category}, {"head", r.head}, {"source", r.source}}
                   .dump()
            << "\n";
    }
};

}  // namespace cdiff
