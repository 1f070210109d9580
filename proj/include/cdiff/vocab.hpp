#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cdiff/tensor.hpp"

namespace cdiff {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kMaxPromptLen = 16;
constexpr int kMaxContentTokens = kMaxPromptLen - 2;  // minus BOS/EOS

inline std::string lowercase(std::string s) {
    for (auto& c : s) c = (char)std::tolower((unsigned char)c);
    return s;
}

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream iss(s);
    std::string w;
    while (iss >> w) out.push_back(w);
    return out;
}

inline constexpr const char* kPromptTemplatePrefix = "a photo of";

// Word-level vocabulary with fixed reserved ids. Built from a lexicon,
// sorted lexicographically so ids are stable across runs.
class Vocabulary {
  public:
    static constexpr const char* kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};

    Vocabulary() {
        for (int i = 0; i < 4; i++) push(kReserved[i]);
    }

    static Vocabulary from_lexicon(const std::vector<std::string>& words) {
        Vocabulary v;
        std::set<std::string> uniq;
        for (const auto& w : words)
            for (const auto& tok : split_words(lowercase(w))) uniq.insert(tok);
        // the prompt template words are part of every prompt
        for (const auto& tok : split_words(kPromptTemplatePrefix)) uniq.insert(tok);
        for (const auto& w : uniq) v.push(w);  // std::set iterates sorted
        return v;
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnkId : it->second;
    }
    const std::string& token(int id) const {
        if (id < 0 || id >= (int)tokens_.size())
            fail("vocab", "token id " + std::to_string(id) + " out of range [0," +
                              std::to_string(tokens_.size()) + ")");
        return tokens_[(size_t)id];
    }
    int size() const { return (int)tokens_.size(); }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) fail("io", "cannot write vocabulary to " + path);
        for (const auto& t : tokens_) f << t << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) fail("io", "cannot read vocabulary from " + path);
        Vocabulary v;
        v.tokens_.clear();
        v.ids_.clear();
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            v.push(line);
        }
        for (int i = 0; i < 4; i++)
            if (v.size() <= i || v.tokens_[(size_t)i] != kReserved[i])
                fail("vocab", "reserved token table corrupt in " + path);
        return v;
    }

  private:
    void push(const std::string& t) {
        if (ids_.count(t)) fail("vocab", "duplicate token " + t);
        ids_[t] = (int)tokens_.size();
        tokens_.push_back(t);
    }
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

struct TokenizedPrompt {
    std::vector<int> ids;           // BOS + content + EOS, PAD-filled to kMaxPromptLen
    std::vector<bool> concept_mask; // true at category-word positions
    int content_len = 0;
};

// Builds the padded id sequence. Words following the "a photo of" template
// prefix are the category slot and get concept_mask = true; prompts without
// the prefix are treated as bare category text (all content words marked).
inline TokenizedPrompt tokenize(const std::string& prompt, const Vocabulary& vocab) {
    std::vector<std::string> words = split_words(lowercase(prompt));
    if ((int)words.size() > kMaxContentTokens)
        fail("tokenize", "prompt has " + std::to_string(words.size()) + " tokens; limit is " +
                             std::to_string(kMaxContentTokens));
    std::vector<std::string> tmpl = split_words(kPromptTemplatePrefix);
    size_t concept_from = 0;
    if (words.size() >= tmpl.size() && std::equal(tmpl.begin(), tmpl.end(), words.begin()))
        concept_from = tmpl.size();

    TokenizedPrompt out;
    out.ids.assign((size_t)kMaxPromptLen, kPadId);
    out.concept_mask.assign((size_t)kMaxPromptLen, false);
    out.ids[0] = kBosId;
    size_t pos = 1;
    for (size_t i = 0; i < words.size(); i++, pos++) {
        out.ids[pos] = vocab.id(words[i]);
        out.concept_mask[pos] = i >= concept_from;
    }
    out.ids[pos] = kEosId;
    out.content_len = (int)words.size();
    return out;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == kPadId || id == kBosId || id == kEosId) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

}  // namespace cdiff
