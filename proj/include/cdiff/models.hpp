#pragma once

#include <string>
#include <vector>

#include "cdiff/config.hpp"
#include "cdiff/params.hpp"
#include "cdiff/schedule.hpp"
#include "cdiff/synth.hpp"
#include "cdiff/text_encoder.hpp"
#include "cdiff/unet.hpp"
#include "cdiff/vision_encoder.hpp"
#include "cdiff/vocab.hpp"

namespace cdiff {

// All generative-model state for one experiment: parameter store, the three
// networks, tokenizer and noise schedule, wired from one config.
struct ModelBundle {
    ExperimentConfig cfg;
    Lexicon lexicon;
    Vocabulary vocab;
    ParamStoreT<float> store;
    TextEncoderT<float> text;
    VisionEncoderT<float> vision;
    UNetT<float> unet;
    NoiseSchedule sched;

    void init(const ExperimentConfig& c, const Lexicon& lex) {
        cfg = c;
        lexicon = lex;
        validate_lexicon(lexicon);
        vocab = Vocabulary::from_lexicon(lexicon.all_words());

        text.cfg = TextConfig{};
        text.cfg.vocab_size = vocab.size();
        text.cfg.d_model = c.model.d_model;
        text.cfg.n_heads = c.model.text_heads;
        text.cfg.n_blocks = c.model.text_blocks;
        text.cfg.lora_rank = c.model.lora_rank;
        text.cfg.lora_alpha = c.model.lora_alpha;

        vision.cfg = VisionConfig{};
        vision.cfg.patch = c.model.vision_patch;
        vision.cfg.width = c.model.d_model;
        vision.cfg.d_out = c.model.d_model;

        unet.cfg = UNetConfig{};
        unet.cfg.base_ch = c.model.unet_base_ch;
        unet.cfg.mid_ch = c.model.unet_mid_ch;
        unet.cfg.n_heads = c.model.unet_heads;
        unet.cfg.temb_dim = c.model.d_model;
        unet.cfg.d_text = c.model.d_model;
        unet.cfg.lora_rank = c.model.lora_rank;
        unet.cfg.lora_alpha = c.model.lora_alpha;

        Rng rng(c.model.init_seed);
        text.init(store, rng);
        vision.init(store, rng);
        unet.init(store, rng);
        sched = NoiseSchedule::linear(c.model.t_train);
    }

    // Encode a prompt once and return the context rows as a plain tensor,
    // reusable across sampling steps without re-running the encoder.
    Tensor encode_prompt(const std::vector<int>& ids, bool adapters) {
        GraphT<float> g;
        return g.value(text.encode(g, store, ids, adapters));
    }

    std::vector<int> pad_ids() const { return std::vector<int>((size_t)text.cfg.max_len, kPadId); }

    TokenizedPrompt category_prompt(const std::string& category) const {
        return tokenize(std::string(kPromptTemplatePrefix) + " " + category, vocab);
    }

    // Adapter parameter names across both towers (the fine-tune trainable set).
    std::vector<std::string> adapter_names() const {
        std::vector<std::string> names = unet.adapter_names();
        auto t = text.adapter_names();
        names.insert(names.end(), t.begin(), t.end());
        return names;
    }
};

}  // namespace cdiff
